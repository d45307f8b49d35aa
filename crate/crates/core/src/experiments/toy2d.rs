//! Synthetic low-dimensional manifolds in `R^n` and the regularized
//! diffusion trainer that runs on them.

use std::f64::consts::PI;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::diffcore::{Activation, AdamState};
use crate::diffusion::{Batch, NoiseSchedule, ScoreNet, ScoreNetSpec};
use crate::error::{Error, Result};
use crate::experiments::s2::DIVERGENCE_LIMIT;
use crate::regularizers::{total_loss, IsoConfig, PathLenState, RegularizerKind};
use crate::rng::{normal_vec, stream, substream};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Dataset {
    TwoGaussians,
    Ring,
    TwoMoonsEmbedded,
}

impl Dataset {
    pub fn name(self) -> &'static str {
        match self {
            Dataset::TwoGaussians => "two_gaussians",
            Dataset::Ring => "ring",
            Dataset::TwoMoonsEmbedded => "two_moons_embedded",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [Dataset::TwoGaussians, Dataset::Ring, Dataset::TwoMoonsEmbedded].into_iter().find(|d| d.name() == s)
    }

    /// One intrinsic 2-d point.
    fn draw(self, rng: &mut impl Rng) -> [f64; 2] {
        let mut n = || rng.sample::<f64, _>(StandardNormal);
        match self {
            Dataset::TwoGaussians => {
                let side = if n() > 0.0 { 2.0 } else { -2.0 };
                [side + 0.5 * n(), 0.5 * n()]
            }
            Dataset::Ring => {
                let (a, b) = (n(), n());
                let phi = b.atan2(a);
                let r = 1.0 + 0.05 * n();
                [r * phi.cos(), r * phi.sin()]
            }
            Dataset::TwoMoonsEmbedded => {
                let upper = n() > 0.0;
                let theta = PI * (0.5 + 0.5 * (n() / 2f64.sqrt()).tanh());
                let (jx, jy) = (0.05 * n(), 0.05 * n());
                if upper {
                    [theta.cos() + jx, theta.sin() + jy]
                } else {
                    [1.0 - theta.cos() + jx, 0.5 - theta.sin() + jy]
                }
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Toy2DConfig {
    pub dataset: Dataset,
    pub ambient_dim: usize,
    pub noise: f64,
    pub train_size: usize,
    pub held_out: usize,
    /// Seed for the embedding and the samples, kept apart from the training seed.
    pub data_seed: u64,
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub ddim_steps: usize,
    pub hidden: Vec<usize>,
    pub feature_dim: usize,
    pub time_dim: usize,
    pub activation: Activation,
    pub regularizer: RegularizerKind,
    pub iso: IsoConfig,
    pub pl_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub ema_decay: Option<f64>,
    /// Adds the `sqrt(1 - ab_t) x_t` term to the noise prediction.
    pub prior_skip: bool,
    pub seed: u64,
}

impl Default for Toy2DConfig {
    fn default() -> Self {
        Self {
            dataset: Dataset::TwoGaussians,
            ambient_dim: 64,
            noise: 0.05,
            train_size: 2048,
            held_out: 256,
            data_seed: 0,
            steps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
            ddim_steps: 20,
            hidden: vec![128, 128],
            feature_dim: 16,
            time_dim: 8,
            activation: Activation::Tanh,
            regularizer: RegularizerKind::Iso,
            iso: IsoConfig::default(),
            pl_decay: 0.99,
            epochs: 200,
            batch_size: 32,
            lr: 1e-4,
            ema_decay: None,
            prior_skip: true,
            seed: 0,
        }
    }
}

impl Toy2DConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.ambient_dim < 8 {
            return fail(format!("ambient_dim {} must be at least 8", self.ambient_dim));
        }
        if self.train_size == 0 || self.epochs == 0 || self.batch_size == 0 || self.steps == 0 || self.ddim_steps == 0 {
            return fail("train_size, epochs, batch_size, steps and ddim_steps must be positive".into());
        }
        if self.steps % self.ddim_steps != 0 {
            return fail(format!("ddim_steps {} must divide steps {}", self.ddim_steps, self.steps));
        }
        if !(self.noise >= 0.0) || !(self.lr > 0.0) {
            return fail("noise must be non-negative and lr positive".into());
        }
        if !(self.pl_decay > 0.0 && self.pl_decay < 1.0) {
            return fail(format!("pl_decay {} outside (0, 1)", self.pl_decay));
        }
        if let Some(d) = self.ema_decay {
            if !(d > 0.0 && d < 1.0) {
                return fail(format!("ema_decay {d} outside (0, 1)"));
            }
        }
        if self.feature_dim == 0 || self.feature_dim >= self.ambient_dim {
            return fail(format!("feature_dim {} must be in [1, ambient_dim)", self.feature_dim));
        }
        if self.time_dim < 2 || self.time_dim % 2 != 0 {
            return fail(format!("time_dim {} must be even and at least 2", self.time_dim));
        }
        self.iso.validate()
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::linear(self.steps, self.beta_start, self.beta_end)
    }

    /// Untrained network for this configuration.
    pub fn init_net(&self) -> Result<ScoreNet> {
        let net = ScoreNet::init(self.seed, &self.net_spec())?;
        if self.prior_skip {
            net.with_prior_skip(&self.schedule()?)
        } else {
            Ok(net)
        }
    }

    pub fn net_spec(&self) -> ScoreNetSpec {
        ScoreNetSpec {
            data_dim: self.ambient_dim,
            feature_dim: self.feature_dim,
            hidden: self.hidden.clone(),
            time_dim: self.time_dim,
            horizon: self.steps,
            activation: self.activation,
        }
    }
}

/// Standardized training rows and held-out rows (standardized with the
/// training statistics).
#[derive(Clone, Debug)]
pub struct Toy2DData {
    pub train: Tensor,
    pub test: Tensor,
    /// Orthonormal `n x 2` embedding.
    pub basis: Tensor,
}

/// Orthonormal `n x 2` matrix from Gram-Schmidt on Gaussian columns.
pub fn random_embedding(n: usize, seed: u64) -> Tensor {
    let mut rng = stream(seed, "embedding");
    loop {
        let a = normal_vec(&mut rng, n);
        let b = normal_vec(&mut rng, n);
        let na = crate::tensor::dot(&a, &a).sqrt();
        let e1: Vec<f64> = a.iter().map(|v| v / na).collect();
        let proj = crate::tensor::dot(&b, &e1);
        let mut e2: Vec<f64> = b.iter().zip(&e1).map(|(v, u)| v - proj * u).collect();
        // second pass for orthogonality at machine precision
        let proj = crate::tensor::dot(&e2, &e1);
        e2.iter_mut().zip(&e1).for_each(|(v, u)| *v -= proj * u);
        let nb = crate::tensor::dot(&e2, &e2).sqrt();
        if na < 1e-8 || nb < 1e-8 {
            continue;
        }
        let mut out = Tensor::zeros(&[n, 2]);
        for i in 0..n {
            out.set(i, 0, e1[i]);
            out.set(i, 1, e2[i] / nb);
        }
        return out;
    }
}

pub fn gen_toy2d_dataset(cfg: &Toy2DConfig) -> Result<Toy2DData> {
    let n = cfg.ambient_dim;
    let basis = random_embedding(n, cfg.data_seed);
    let mut rng = stream(cfg.data_seed, "toy2d-samples");
    let total = cfg.train_size + cfg.held_out;
    let mut all = Tensor::zeros(&[total, n]);
    for i in 0..total {
        let u = cfg.dataset.draw(&mut rng);
        let row = all.row_mut(i);
        for j in 0..n {
            row[j] = basis.at(j, 0) * u[0] + basis.at(j, 1) * u[1];
        }
        for v in row.iter_mut() {
            *v += cfg.noise * rng.sample::<f64, _>(StandardNormal);
        }
    }
    let m = cfg.train_size as f64;
    for j in 0..n {
        let mean = (0..cfg.train_size).map(|i| all.at(i, j)).sum::<f64>() / m;
        let var = (0..cfg.train_size).map(|i| (all.at(i, j) - mean).powi(2)).sum::<f64>() / m;
        let sd = var.sqrt();
        if sd < 1e-12 {
            return Err(Error::Degenerate(format!("coordinate {j} has zero variance")));
        }
        for i in 0..total {
            all.set(i, j, (all.at(i, j) - mean) / sd);
        }
    }
    let idx: Vec<usize> = (0..total).collect();
    Ok(Toy2DData {
        train: all.gather_rows(&idx[..cfg.train_size]),
        test: all.gather_rows(&idx[cfg.train_size..]),
        basis,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub dsm: f64,
    /// Mean regularizer value over batches where it was active.
    pub reg: Option<f64>,
    pub wall_seconds: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Final weights, or their moving average when one is configured.
    pub net: ScoreNet,
    pub log: Vec<EpochLog>,
}

fn ema_update(avg: &mut ScoreNet, cur: &ScoreNet, decay: f64) {
    for (a, c) in avg.params_mut().into_iter().zip(cur.params()) {
        a.data_mut().iter_mut().zip(c.data()).for_each(|(x, y)| *x = decay * *x + (1.0 - decay) * y);
    }
}

/// Adam on the gated objective. Batches, timesteps, noise and probe draws
/// come from separate streams, so switching the regularizer off leaves the
/// data seen by the denoiser unchanged.
pub fn train_toy_diffusion(cfg: &Toy2DConfig, data: &Tensor) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.cols() != cfg.ambient_dim || data.rows() == 0 {
        return Err(Error::Shape(format!("training data {:?} for ambient_dim {}", data.shape(), cfg.ambient_dim)));
    }
    let sched = cfg.schedule()?;
    let mut net = cfg.init_net()?;
    let mut ema = cfg.ema_decay.map(|_| net.clone());
    let mut adam = AdamState::new(&net.params(), cfg.lr);
    let mut t_rng = stream(cfg.seed, "timesteps");
    let mut eps_rng = stream(cfg.seed, "noise");
    let mut probe_rng = stream(cfg.seed, "probes");
    let mut pl = PathLenState { decay: cfg.pl_decay, ..PathLenState::default() };
    let start = Instant::now();
    let mut order: Vec<usize> = (0..data.rows()).collect();
    let mut log = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut substream(cfg.seed, "batches", epoch as u64));
        let (mut dsm_sum, mut reg_sum, mut batches, mut reg_batches) = (0.0, 0.0, 0usize, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            let x0 = data.gather_rows(chunk);
            let eps = Tensor::matrix(chunk.len(), cfg.ambient_dim, normal_vec(&mut eps_rng, chunk.len() * cfg.ambient_dim))?;
            let t: Vec<usize> = (0..chunk.len()).map(|_| t_rng.gen_range(1..=cfg.steps)).collect();
            let batch = Batch::new(x0, eps, t)?;
            let out = total_loss(&net, &batch, &sched, &cfg.iso, cfg.regularizer, &mut pl, &mut probe_rng)?;
            if !out.total.is_finite() || out.total > DIVERGENCE_LIMIT {
                return Err(Error::Divergence { step: adam.steps() as usize, loss: out.total });
            }
            dsm_sum += out.dsm;
            batches += 1;
            if let Some(r) = out.reg {
                reg_sum += r;
                reg_batches += 1;
            }
            adam.step(&mut net.params_mut(), &out.grads)?;
            if let (Some(avg), Some(decay)) = (ema.as_mut(), cfg.ema_decay) {
                ema_update(avg, &net, decay);
            }
        }
        log.push(EpochLog {
            epoch,
            dsm: dsm_sum / batches as f64,
            reg: (reg_batches > 0).then(|| reg_sum / reg_batches as f64),
            wall_seconds: start.elapsed().as_secs_f64(),
        });
    }
    Ok(TrainOutcome { net: ema.unwrap_or(net), log })
}

/// Denoising loss over `data` with timesteps and noise from a fixed
/// evaluation stream, averaged over `passes` sweeps of the rows.
pub fn eval_dsm(net: &ScoreNet, sched: &NoiseSchedule, data: &Tensor, passes: usize, seed: u64) -> Result<f64> {
    if passes == 0 || data.rows() == 0 {
        return Err(Error::InvalidArgument("evaluation needs data and at least one pass".into()));
    }
    let mut rng = stream(seed, "eval-dsm");
    let mut total = 0.0;
    for _ in 0..passes {
        let eps = Tensor::matrix(data.rows(), data.cols(), normal_vec(&mut rng, data.len()))?;
        let t: Vec<usize> = (0..data.rows()).map(|_| rng.gen_range(1..=sched.steps())).collect();
        let batch = Batch::new(data.clone(), eps, t)?;
        let pred = net.predict_rows(&batch.noisy(sched)?, &batch.t)?;
        total += pred.eps.sub(&batch.eps).data().iter().map(|v| v * v).sum::<f64>() / data.rows() as f64;
    }
    Ok(total / passes as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> Toy2DConfig {
        Toy2DConfig {
            ambient_dim: 12,
            train_size: 128,
            held_out: 16,
            steps: 100,
            ddim_steps: 10,
            hidden: vec![16],
            feature_dim: 4,
            time_dim: 4,
            epochs: 2,
            batch_size: 16,
            lr: 1e-3,
            ..Toy2DConfig::default()
        }
    }

    #[test]
    fn standardized_and_orthonormal() {
        for ds in [Dataset::TwoGaussians, Dataset::Ring, Dataset::TwoMoonsEmbedded] {
            let cfg = Toy2DConfig { dataset: ds, ..small() };
            let d = gen_toy2d_dataset(&cfg).unwrap();
            let m = d.train.rows() as f64;
            for j in 0..cfg.ambient_dim {
                let mean = (0..d.train.rows()).map(|i| d.train.at(i, j)).sum::<f64>() / m;
                let var = (0..d.train.rows()).map(|i| (d.train.at(i, j) - mean).powi(2)).sum::<f64>() / m;
                assert!(mean.abs() < 1e-10 && (var - 1.0).abs() < 1e-10, "{ds:?} {j}: {mean} {var}");
            }
            let gram = d.basis.transpose().matmul(&d.basis).unwrap();
            for (a, b) in gram.data().iter().zip(Tensor::identity(2).data()) {
                assert!((a - b).abs() < 1e-12);
            }
            assert_eq!(d.test.rows(), 16);
        }
    }

    #[test]
    fn ring_radii_concentrate() {
        let mut rng = stream(3, "ring");
        let radii: Vec<f64> = (0..2000).map(|_| {
            let u = Dataset::Ring.draw(&mut rng);
            (u[0] * u[0] + u[1] * u[1]).sqrt()
        }).collect();
        let mean = radii.iter().sum::<f64>() / radii.len() as f64;
        assert!((mean - 1.0).abs() < 0.01);
        assert!(radii.iter().all(|r| (r - 1.0).abs() < 0.3));
    }

    #[test]
    fn training_is_deterministic_and_gate_exact() {
        let cfg = small();
        let data = gen_toy2d_dataset(&cfg).unwrap();
        let a = train_toy_diffusion(&cfg, &data.train).unwrap();
        let b = train_toy_diffusion(&cfg, &data.train).unwrap();
        assert_eq!(a.net.params(), b.net.params());
        assert!(a.log.iter().all(|e| e.reg.is_some()));
        let off = train_toy_diffusion(&Toy2DConfig { regularizer: RegularizerKind::None, ..cfg.clone() }, &data.train).unwrap();
        let zero = train_toy_diffusion(&Toy2DConfig { iso: IsoConfig { lambda_iso: 0.0, ..cfg.iso.clone() }, ..cfg.clone() }, &data.train).unwrap();
        let full_skip = train_toy_diffusion(&Toy2DConfig { iso: IsoConfig { gamma: 1.0, ..cfg.iso.clone() }, ..cfg.clone() }, &data.train).unwrap();
        assert_eq!(off.net.params(), zero.net.params());
        assert_eq!(off.net.params(), full_skip.net.params());
        assert_ne!(off.net.params(), a.net.params());
    }

    #[test]
    fn ema_and_eval() {
        let cfg = Toy2DConfig { ema_decay: Some(0.9), ..small() };
        let data = gen_toy2d_dataset(&cfg).unwrap();
        let out = train_toy_diffusion(&cfg, &data.train).unwrap();
        let sched = cfg.schedule().unwrap();
        let a = eval_dsm(&out.net, &sched, &data.test, 2, 1).unwrap();
        assert_eq!(a.to_bits(), eval_dsm(&out.net, &sched, &data.test, 2, 1).unwrap().to_bits());
        assert!(a > 0.0);
    }

    #[test]
    fn invalid_configs() {
        assert!(Toy2DConfig { ambient_dim: 4, ..small() }.validate().is_err());
        assert!(Toy2DConfig { ddim_steps: 7, ..small() }.validate().is_err());
        assert!(Toy2DConfig { feature_dim: 12, ..small() }.validate().is_err());
    }
}
