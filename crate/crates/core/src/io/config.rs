//! Flat `key = value` run configuration.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use crate::diffcore::Activation;
use crate::error::{Error, Result};
use crate::experiments::{Dataset, S2Mode, SweepGrid, Toy2DConfig, ToyS2Config};
use crate::metrics::{JacobianFrame, MetricsConfig, PathKind};
use crate::regularizers::{IsoConfig, MetricKind, ProbeKind, RegularizerKind, TraceMode};

/// Every accepted key with its default and a one-line description.
pub const KEYS: &[(&str, &str, &str)] = &[
    ("seed", "0", "training seed"),
    ("out_dir", "out", "directory for checkpoints and tables"),
    ("dataset", "two_gaussians", "two_gaussians | ring | two_moons_embedded"),
    ("ambient_dim", "64", "data dimension n"),
    ("noise", "0.05", "isotropic noise added after embedding"),
    ("train_size", "2048", "training rows"),
    ("held_out", "256", "held-out rows"),
    ("data_seed", "0", "seed of the embedding and samples"),
    ("steps", "1000", "diffusion steps T"),
    ("beta_start", "1e-4", "first noise rate"),
    ("beta_end", "0.02", "last noise rate"),
    ("ddim_steps", "20", "sampler steps; must divide steps"),
    ("hidden", "128,128", "hidden widths of encoder and decoder"),
    ("feature_dim", "16", "bottleneck width m"),
    ("time_dim", "8", "time feature width (even)"),
    ("activation", "tanh", "tanh | softplus"),
    ("regularizer", "iso", "none | iso | path_length"),
    ("lambda_iso", "1e-4", "regularizer weight"),
    ("gamma", "0.5", "regularize only where t > gamma T"),
    ("metric", "sphere", "sphere | euclidean"),
    ("num_probes", "1", "trace probes per row"),
    ("iso_mode", "stochastic", "stochastic | exact"),
    ("probe", "gaussian", "gaussian | rademacher"),
    ("pl_decay", "0.99", "moving-average decay of the path-length target"),
    ("epochs", "200", "training epochs"),
    ("batch_size", "32", "rows per step"),
    ("lr", "1e-4", "Adam learning rate"),
    ("ema_decay", "0", "parameter moving-average decay; 0 disables"),
    ("prior_skip", "true", "add sqrt(1 - ab_t) x_t to the noise prediction"),
    ("metrics_seed", "1234", "seed for every evaluation"),
    ("ppl_pairs", "64", "latent pairs for path length"),
    ("ppl_epsilon", "0.01", "path-length step"),
    ("rtl_pairs", "16", "latent pairs for trajectory ratios"),
    ("rtl_segments", "16", "segments per interpolation path"),
    ("spectrum_samples", "128", "Jacobians for MCN and VoR"),
    ("interp_path", "slerp", "slerp | lerp"),
    ("jacobian_frame", "chart", "chart | ambient"),
    ("interp_pairs", "4", "pairs written by interpolate"),
    ("interp_steps", "16", "segments per interpolated pair"),
    ("invert_steps", "100", "sampler steps used by invert"),
    ("s2_points", "2048", "sphere training points"),
    ("s2_hidden", "64,64", "sphere autoencoder hidden widths"),
    ("s2_lambda", "0.02", "sphere isometry weight"),
    ("s2_epochs", "200", "sphere training epochs"),
    ("s2_batch_size", "128", "sphere rows per step"),
    ("s2_lr", "3e-3", "sphere Adam learning rate"),
    ("s2_lr_final", "1e-4", "sphere learning rate after cosine annealing"),
    ("s2_eval_points", "512", "sphere points for MCN and VoR"),
    ("trace_dims", "64", "matrix sizes for the trace study"),
    ("trace_probes", "1,4,16,64,256", "probe counts, increasing"),
    ("trace_trials", "200", "trials per probe count"),
    ("sweep_lambdas", "0,1e-4,1e-3", "sweep values of lambda_iso"),
    ("sweep_gammas", "0.5", "sweep values of gamma"),
    ("sweep_metrics", "sphere", "sweep metrics"),
    ("sweep_seeds", "0,1,2", "sweep training seeds"),
];

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self { values: KEYS.iter().map(|(k, v, _)| (k.to_string(), v.to_string())).collect() }
    }
}

impl RunConfig {
    /// Defaults overridden by the lines of `text`.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value, got {raw:?}", i + 1)))?;
            cfg.set(k.trim(), v.trim()).map_err(|e| Error::Config(format!("line {}: {e}", i + 1)))?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match self.values.get_mut(key) {
            Some(slot) => {
                *slot = value.to_string();
                Ok(())
            }
            None => Err(Error::Config(format!("unknown key {key:?}"))),
        }
    }

    /// Applies `key=value` overrides.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<()> {
        for o in overrides {
            let o = o.as_ref();
            let (k, v) = o.split_once('=').ok_or_else(|| Error::Config(format!("override {o:?} is not key=value")))?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Result<&str> {
        self.values.get(key).map(String::as_str).ok_or_else(|| Error::Config(format!("unknown key {key:?}")))
    }

    pub fn parse_value<T: FromStr>(&self, key: &str) -> Result<T> {
        let v = self.get(key)?;
        v.parse().map_err(|_| Error::Config(format!("{key} = {v:?} does not parse")))
    }

    pub fn list<T: FromStr>(&self, key: &str) -> Result<Vec<T>> {
        let v = self.get(key)?;
        v.split(',')
            .map(|s| s.trim().parse().map_err(|_| Error::Config(format!("{key}: bad element {s:?}"))))
            .collect()
    }

    fn choice<T>(&self, key: &str, parse: impl Fn(&str) -> Option<T>) -> Result<T> {
        let v = self.get(key)?;
        parse(v).ok_or_else(|| Error::Config(format!("{key} = {v:?} is not an accepted value")))
    }

    /// Renders the full configuration, one key per line.
    pub fn render(&self) -> String {
        KEYS.iter().map(|(k, _, _)| format!("{k} = {}\n", self.values[*k])).collect()
    }

    pub fn iso(&self) -> Result<IsoConfig> {
        let cfg = IsoConfig {
            lambda_iso: self.parse_value("lambda_iso")?,
            gamma: self.parse_value("gamma")?,
            num_probes: self.parse_value("num_probes")?,
            mode: self.choice("iso_mode", |s| match s {
                "stochastic" => Some(TraceMode::Stochastic),
                "exact" => Some(TraceMode::Exact),
                _ => None,
            })?,
            metric: self.choice("metric", MetricKind::parse)?,
            probe: self.choice("probe", |s| match s {
                "gaussian" => Some(ProbeKind::Gaussian),
                "rademacher" => Some(ProbeKind::Rademacher),
                _ => None,
            })?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn toy2d(&self) -> Result<Toy2DConfig> {
        let ema: f64 = self.parse_value("ema_decay")?;
        let cfg = Toy2DConfig {
            dataset: self.choice("dataset", Dataset::parse)?,
            ambient_dim: self.parse_value("ambient_dim")?,
            noise: self.parse_value("noise")?,
            train_size: self.parse_value("train_size")?,
            held_out: self.parse_value("held_out")?,
            data_seed: self.parse_value("data_seed")?,
            steps: self.parse_value("steps")?,
            beta_start: self.parse_value("beta_start")?,
            beta_end: self.parse_value("beta_end")?,
            ddim_steps: self.parse_value("ddim_steps")?,
            hidden: self.list("hidden")?,
            feature_dim: self.parse_value("feature_dim")?,
            time_dim: self.parse_value("time_dim")?,
            activation: self.choice("activation", |s| Activation::parse(s).filter(|a| *a != Activation::Identity))?,
            regularizer: self.choice("regularizer", RegularizerKind::parse)?,
            iso: self.iso()?,
            pl_decay: self.parse_value("pl_decay")?,
            epochs: self.parse_value("epochs")?,
            batch_size: self.parse_value("batch_size")?,
            lr: self.parse_value("lr")?,
            ema_decay: (ema != 0.0).then_some(ema),
            prior_skip: self.parse_value("prior_skip")?,
            seed: self.parse_value("seed")?,
        };
        cfg.validate()?;
        cfg.schedule()?;
        Ok(cfg)
    }

    pub fn s2(&self, mode: S2Mode) -> Result<ToyS2Config> {
        let cfg = ToyS2Config {
            num_points: self.parse_value("s2_points")?,
            hidden: self.list("s2_hidden")?,
            mode,
            lambda_iso: if mode == S2Mode::Recon { 0.0 } else { self.parse_value("s2_lambda")? },
            epochs: self.parse_value("s2_epochs")?,
            batch_size: self.parse_value("s2_batch_size")?,
            lr: self.parse_value("s2_lr")?,
            lr_final: self.parse_value("s2_lr_final")?,
            seed: self.parse_value("seed")?,
            eval_points: self.parse_value("s2_eval_points")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn metrics(&self) -> Result<MetricsConfig> {
        let cfg = MetricsConfig {
            ppl_pairs: self.parse_value("ppl_pairs")?,
            ppl_epsilon: self.parse_value("ppl_epsilon")?,
            rtl_pairs: self.parse_value("rtl_pairs")?,
            rtl_segments: self.parse_value("rtl_segments")?,
            spectrum_samples: self.parse_value("spectrum_samples")?,
            ddim_steps: self.parse_value("ddim_steps")?,
            path: self.choice("interp_path", PathKind::parse)?,
            frame: self.choice("jacobian_frame", JacobianFrame::parse)?,
            seed: self.parse_value("metrics_seed")?,
        };
        if cfg.ppl_pairs == 0 || cfg.rtl_pairs == 0 || cfg.spectrum_samples == 0 || cfg.rtl_segments < 2 {
            return Err(Error::Config("metric sample counts must be positive and rtl_segments >= 2".into()));
        }
        if !(cfg.ppl_epsilon > 0.0 && cfg.ppl_epsilon <= 0.1) {
            return Err(Error::Config(format!("ppl_epsilon {} outside (0, 0.1]", cfg.ppl_epsilon)));
        }
        Ok(cfg)
    }

    pub fn sweep_grid(&self) -> Result<SweepGrid> {
        let metrics = self.get("sweep_metrics")?.split(',').map(|s| {
            MetricKind::parse(s.trim()).ok_or_else(|| Error::Config(format!("sweep_metrics: bad element {s:?}")))
        });
        let grid = SweepGrid {
            lambdas: self.list("sweep_lambdas")?,
            gammas: self.list("sweep_gammas")?,
            metrics: metrics.collect::<Result<_>>()?,
            seeds: self.list("sweep_seeds")?,
        };
        grid.cells()?;
        Ok(grid)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_build_every_config() {
        let c = RunConfig::default();
        let t = c.toy2d().unwrap();
        assert_eq!(t, Toy2DConfig::default());
        c.metrics().unwrap();
        c.s2(S2Mode::IsoSphere).unwrap();
        assert_eq!(c.sweep_grid().unwrap().cells().unwrap().len(), 9);
        assert_eq!(c.iso().unwrap(), IsoConfig::default());
    }

    #[test]
    fn parse_with_comments_and_overrides() {
        let mut c = RunConfig::parse("# toy\nlambda_iso = 1e-3  # stronger\n\nmetric=euclidean\n").unwrap();
        assert_eq!(c.iso().unwrap().lambda_iso, 1e-3);
        assert_eq!(c.iso().unwrap().metric, MetricKind::Euclidean);
        c.apply_overrides(&["lambda_iso=0"]).unwrap();
        assert_eq!(c.iso().unwrap().lambda_iso, 0.0);
        let again = RunConfig::parse(&c.render()).unwrap();
        assert_eq!(again, c);
    }

    #[test]
    fn bad_input_is_a_config_error() {
        assert!(matches!(RunConfig::parse("nope = 1"), Err(Error::Config(_))));
        assert!(matches!(RunConfig::parse("seed"), Err(Error::Config(_))));
        let c = RunConfig::parse("lambda_iso = abc").unwrap();
        assert!(matches!(c.iso(), Err(Error::Config(_))));
        let c = RunConfig::parse("metric = hyperbolic").unwrap();
        assert!(c.iso().is_err());
        let c = RunConfig::parse("ddim_steps = 7").unwrap();
        assert!(c.toy2d().is_err());
        assert!(RunConfig::default().apply_overrides(&["bogus=1"]).is_err());
        assert!(RunConfig::load(Path::new("/nonexistent/cfg")).is_err());
    }
}
