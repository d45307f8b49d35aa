use std::path::Path;
use std::process::{Command, Output};

fn isodiff(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_isodiff")).args(args).output().unwrap()
}

fn small_config(dir: &Path) -> String {
    let path = dir.join("small.cfg");
    std::fs::write(
        &path,
        format!(
            "# tiny run\nout_dir = {}\nambient_dim = 12\nfeature_dim = 3\nhidden = 8\ntrain_size = 64\nheld_out = 8\n\
             steps = 50\nddim_steps = 5\nepochs = 1\nbatch_size = 16\ninvert_steps = 5\n",
            dir.display()
        ),
    )
    .unwrap();
    path.to_str().unwrap().to_string()
}

fn header(path: &Path) -> String {
    std::fs::read_to_string(path).unwrap().lines().next().unwrap().to_string()
}

#[test]
fn train_then_invert() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let out = isodiff(&["train", "--config", &cfg]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(header(&dir.path().join("train_log.csv")), "epoch,dsm_loss,iso_loss,wall_seconds");
    let ck = dir.path().join("model.ckpt");
    let out = isodiff(&["invert", "--config", &cfg, "--checkpoint", ck.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let inv = std::fs::read_to_string(dir.path().join("inversion.csv")).unwrap();
    assert_eq!(inv.lines().count(), 9);
    assert_eq!(header(&dir.path().join("reconstruction.csv")).split(',').count(), 13);
}

#[test]
fn config_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    assert_eq!(isodiff(&["train", "--config", "/nonexistent/run.cfg"]).status.code(), Some(2));
    assert_eq!(isodiff(&["train", "--config", &cfg, "--set", "no_such_key=1"]).status.code(), Some(2));
    assert_eq!(isodiff(&["train", "--config", &cfg, "--set", "lambda_iso=-1"]).status.code(), Some(2));
    assert_eq!(isodiff(&["toy-s2", "--config", &cfg, "--mode", "torus"]).status.code(), Some(2));
    let bad = dir.path().join("bad.cfg");
    std::fs::write(&bad, "epochs 3\n").unwrap();
    assert_eq!(isodiff(&["train", "--config", bad.to_str().unwrap()]).status.code(), Some(2));
}

#[test]
fn unreadable_checkpoint_exits_four() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let junk = dir.path().join("junk.ckpt");
    std::fs::write(&junk, b"not a checkpoint").unwrap();
    assert_eq!(isodiff(&["metrics", "--config", &cfg, "--checkpoint", junk.to_str().unwrap()]).status.code(), Some(4));
    let missing = dir.path().join("missing.ckpt");
    assert_eq!(isodiff(&["metrics", "--config", &cfg, "--checkpoint", missing.to_str().unwrap()]).status.code(), Some(4));
}

#[test]
fn trace_study_flags_override_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let out = isodiff(&["trace-study", "--config", &cfg, "--dims", "4,8", "--probes", "1,2,8", "--trials", "3"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = std::fs::read_to_string(dir.path().join("trace_study.csv")).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("n,N,mean_abs_err,std_err"));
    assert_eq!(lines.count(), 6);
}
