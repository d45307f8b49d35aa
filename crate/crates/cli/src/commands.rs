use std::path::{Path, PathBuf};
use std::time::Instant;

use isodiff_core::diffusion::{ddim_invert, ddim_sample, NoiseSchedule, ScoreNet};
use isodiff_core::experiments::s2::contour_lines;
use isodiff_core::experiments::sweep::run_sweep;
use isodiff_core::experiments::{gen_toy2d_dataset, train_toy_autoencoder, train_toy_diffusion, S2Mode};
use isodiff_core::io::{fmt_real, load_scorenet, read_matrix_csv, scorenet_checkpoint, Checkpoint, CsvTable, RunConfig};
use isodiff_core::metrics::{evaluate, latent_pairs, trace_study as run_trace_study, PathKind};
use isodiff_core::{Error, Result, Tensor};

use crate::Common;

pub fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 2,
        Error::Divergence { .. } => 3,
        Error::Io(_) | Error::Corrupt(_) => 4,
        _ => 1,
    }
}

fn load_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    cfg.apply_overrides(&common.overrides)?;
    Ok(cfg)
}

fn out_dir(cfg: &RunConfig) -> Result<PathBuf> {
    let dir = PathBuf::from(cfg.get("out_dir")?);
    std::fs::create_dir_all(&dir)?;
    Ok(dir)
}

fn load_model(path: &Path) -> Result<(ScoreNet, NoiseSchedule)> {
    load_scorenet(&Checkpoint::load(path)?)
}

fn opt_real(v: Option<f64>) -> String {
    fmt_real(v.unwrap_or(f64::NAN))
}

pub fn train(common: &Common) -> Result<()> {
    let cfg = load_config(common)?;
    let toy = cfg.toy2d()?;
    let dir = out_dir(&cfg)?;
    let data = gen_toy2d_dataset(&toy)?;
    let out = train_toy_diffusion(&toy, &data.train)?;
    scorenet_checkpoint(&out.net, &toy.schedule()?, (toy.beta_start, toy.beta_end))?.save(&dir.join("model.ckpt"))?;
    let mut log = CsvTable::new(&["epoch", "dsm_loss", "iso_loss", "wall_seconds"]);
    for e in &out.log {
        log.push(vec![e.epoch.to_string(), fmt_real(e.dsm), opt_real(e.reg), fmt_real(e.wall_seconds)])?;
    }
    log.write(&dir.join("train_log.csv"))?;
    isodiff_core::io::write_atomic(&dir.join("config.txt"), cfg.render().as_bytes())?;
    Ok(())
}

pub fn metrics(checkpoint: &Path, common: &Common) -> Result<()> {
    let cfg = load_config(common)?;
    let (net, sched) = load_model(checkpoint)?;
    let toy = cfg.toy2d()?;
    let mcfg = cfg.metrics()?;
    let dir = out_dir(&cfg)?;
    let data = gen_toy2d_dataset(&toy)?;
    let r = evaluate(&net, &sched, &data.train, &mcfg)?;
    let mut t = CsvTable::new(&["metric", "value", "num_samples", "seed"]);
    let seed = mcfg.seed.to_string();
    for (name, value, n) in [
        ("ppl", r.ppl, r.ppl_pairs),
        ("mrtl", r.mrtl, r.rtl_pairs),
        ("mcn", r.mcn, r.spectrum_used),
        ("vor", r.vor, r.spectrum_used),
        ("vor_normalized", r.vor_normalized, r.spectrum_used),
    ] {
        t.push(vec![name.into(), fmt_real(value), n.to_string(), seed.clone()])?;
    }
    t.write(&dir.join("metrics.csv"))?;
    let mut rtl = CsvTable::new(&["t", "rtl"]);
    for (step, v) in &r.rtl_per_t {
        rtl.push(vec![step.to_string(), fmt_real(*v)])?;
    }
    rtl.write(&dir.join("rtl.csv"))
}

pub fn interpolate(checkpoint: &Path, mode: &str, pairs: Option<usize>, steps: Option<usize>, common: &Common) -> Result<()> {
    let cfg = load_config(common)?;
    let path = PathKind::parse(mode).ok_or_else(|| Error::Config(format!("mode {mode:?} is not lerp or slerp")))?;
    let pairs = pairs.map_or_else(|| cfg.parse_value("interp_pairs"), Ok)?;
    let steps = steps.map_or_else(|| cfg.parse_value("interp_steps"), Ok)?;
    if pairs == 0 || steps == 0 {
        return Err(Error::Config("pairs and steps must be positive".into()));
    }
    let ddim_steps: usize = cfg.parse_value("ddim_steps")?;
    let seed: u64 = cfg.parse_value("metrics_seed")?;
    let (net, sched) = load_model(checkpoint)?;
    let dir = out_dir(&cfg)?;
    let n = net.encoder.input_dim() - net.time_dim();
    let mut coords: Vec<String> = (0..n).map(|i| format!("x{i}")).collect();
    let mut header = vec!["pair_id".to_string(), "s".to_string()];
    header.append(&mut coords);
    let mut samples = CsvTable::new(&header.iter().map(String::as_str).chain(["adjacent_sq_dist"]).collect::<Vec<_>>());
    let mut latents = CsvTable::new(&header.iter().map(String::as_str).collect::<Vec<_>>());
    for (id, (a, b)) in latent_pairs(n, pairs, seed, "interp-pairs").iter().enumerate() {
        let mut rows = Vec::with_capacity((steps + 1) * n);
        for k in 0..=steps {
            let s = k as f64 / steps as f64;
            let p = match k {
                0 => a.clone(),
                k if k == steps => b.clone(),
                _ => path.interpolate(a, b, s)?,
            };
            rows.extend(p);
        }
        let lat = Tensor::matrix(steps + 1, n, rows)?;
        let out = ddim_sample(&net, &lat, ddim_steps, &sched)?.last().clone();
        for k in 0..=steps {
            let s = fmt_real(k as f64 / steps as f64);
            let adj = if k == 0 {
                f64::NAN
            } else {
                out.row(k).iter().zip(out.row(k - 1)).map(|(p, q)| (p - q) * (p - q)).sum()
            };
            let mut row = vec![id.to_string(), s.clone()];
            row.extend(out.row(k).iter().map(|v| fmt_real(*v)));
            row.push(fmt_real(adj));
            samples.push(row)?;
            let mut lrow = vec![id.to_string(), s];
            lrow.extend(lat.row(k).iter().map(|v| fmt_real(*v)));
            latents.push(lrow)?;
        }
    }
    samples.write(&dir.join("interp.csv"))?;
    latents.write(&dir.join("interp_latents.csv"))
}

pub fn invert(checkpoint: &Path, samples: Option<&Path>, steps: Option<usize>, common: &Common) -> Result<()> {
    let cfg = load_config(common)?;
    let steps = steps.map_or_else(|| cfg.parse_value("invert_steps"), Ok)?;
    let (net, sched) = load_model(checkpoint)?;
    let x0 = match samples {
        Some(p) => read_matrix_csv(p)?,
        None => gen_toy2d_dataset(&cfg.toy2d()?)?.test,
    };
    let n = net.encoder.input_dim() - net.time_dim();
    if x0.cols() != n {
        return Err(Error::Config(format!("samples have {} columns, model expects {n}", x0.cols())));
    }
    let dir = out_dir(&cfg)?;
    let latent = ddim_invert(&net, &x0, steps, &sched)?.last().clone();
    let recon = ddim_sample(&net, &latent, steps, &sched)?.last().clone();
    let mut mse = CsvTable::new(&["sample_id", "mse"]);
    let mut header = vec!["sample_id".to_string()];
    header.extend((0..n).map(|i| format!("x{i}")));
    let mut coords = CsvTable::new(&header.iter().map(String::as_str).collect::<Vec<_>>());
    for i in 0..x0.rows() {
        let e = recon.row(i).iter().zip(x0.row(i)).map(|(p, q)| (p - q) * (p - q)).sum::<f64>() / n as f64;
        mse.push(vec![i.to_string(), fmt_real(e)])?;
        let mut row = vec![i.to_string()];
        row.extend(recon.row(i).iter().map(|v| fmt_real(*v)));
        coords.push(row)?;
    }
    mse.write(&dir.join("inversion.csv"))?;
    coords.write(&dir.join("reconstruction.csv"))
}

pub fn toy_s2(mode: &str, common: &Common) -> Result<()> {
    let cfg = load_config(common)?;
    let modes: Vec<S2Mode> = match mode {
        "all" => S2Mode::ALL.to_vec(),
        m => vec![S2Mode::parse(m).ok_or_else(|| Error::Config(format!("unknown sphere mode {m:?}")))?],
    };
    let dir = out_dir(&cfg)?;
    let mut report = CsvTable::new(&["mode", "recon_mse", "mcn", "vor", "vor_normalized"]);
    for m in modes {
        let r = train_toy_autoencoder(&cfg.s2(m)?)?;
        let mut c = CsvTable::new(&["line_id", "point_idx", "u", "v"]);
        for (line, pts) in r.contours.iter().enumerate() {
            for (i, p) in pts.iter().enumerate() {
                c.push(vec![line.to_string(), i.to_string(), fmt_real(p[0]), fmt_real(p[1])])?;
            }
        }
        c.write(&dir.join(format!("contours_{}.csv", m.name())))?;
        report.push(vec![
            m.name().into(),
            fmt_real(r.recon_mse),
            fmt_real(r.spectrum.mcn),
            fmt_real(r.spectrum.vor),
            fmt_real(r.spectrum.vor_normalized),
        ])?;
    }
    debug_assert_eq!(contour_lines(12, 128).len(), 24);
    report.write(&dir.join("s2_report.csv"))
}

pub fn trace_study(dims: Option<Vec<usize>>, probes: Option<Vec<usize>>, trials: Option<usize>, common: &Common) -> Result<()> {
    let cfg = load_config(common)?;
    let dims = dims.map_or_else(|| cfg.list("trace_dims"), Ok)?;
    let probes = probes.map_or_else(|| cfg.list("trace_probes"), Ok)?;
    let trials = trials.map_or_else(|| cfg.parse_value("trace_trials"), Ok)?;
    let seed: u64 = cfg.parse_value("seed")?;
    let dir = out_dir(&cfg)?;
    let mut t = CsvTable::new(&["n", "N", "mean_abs_err", "std_err"]);
    for &n in &dims {
        let rows = run_trace_study(n, &probes, trials, seed).map_err(|e| Error::Config(e.to_string()))?;
        for r in rows {
            t.push(vec![n.to_string(), r.num_probes.to_string(), fmt_real(r.mean_abs_err), fmt_real(r.std_err)])?;
        }
    }
    t.write(&dir.join("trace_study.csv"))
}

pub fn sweep(common: &Common) -> Result<()> {
    let cfg = load_config(common)?;
    let base = cfg.toy2d()?;
    let grid = cfg.sweep_grid()?;
    let mcfg = cfg.metrics()?;
    let dir = out_dir(&cfg)?;
    let data = gen_toy2d_dataset(&base)?;
    let start = Instant::now();
    let rows = run_sweep(&base, &grid, &mcfg, &data)?;
    let mut t = CsvTable::new(&[
        "lambda_iso", "gamma", "metric", "dsm_final", "ppl", "mrtl", "mcn", "vor", "seed", "vor_normalized", "mrtl_se", "status",
    ]);
    for row in &rows {
        let c = &row.cell;
        let mut fields = vec![fmt_real(c.lambda_iso), fmt_real(c.gamma), c.metric.name().to_string()];
        match &row.result {
            Ok(r) => {
                let se = isodiff_core::metrics::Mrtl { mean: r.report.mrtl, per_t: vec![], per_pair: r.report.mrtl_per_pair.clone() }.standard_error();
                fields.extend([fmt_real(r.dsm_final), fmt_real(r.report.ppl), fmt_real(r.report.mrtl), fmt_real(r.report.mcn), fmt_real(r.report.vor)]);
                fields.extend([c.seed.to_string(), fmt_real(r.report.vor_normalized), fmt_real(se), "ok".into()]);
            }
            Err(msg) => {
                fields.extend(std::iter::repeat(fmt_real(f64::NAN)).take(5));
                let clean: String = msg.chars().map(|ch| if matches!(ch, ',' | '\n' | '"') { ';' } else { ch }).collect();
                fields.extend([c.seed.to_string(), fmt_real(f64::NAN), fmt_real(f64::NAN), format!("failed: {clean}")]);
            }
        }
        t.push(fields)?;
    }
    t.write(&dir.join("sweep.csv"))?;
    eprintln!("sweep: {} cells in {:.1}s", rows.len(), start.elapsed().as_secs_f64());
    Ok(())
}
