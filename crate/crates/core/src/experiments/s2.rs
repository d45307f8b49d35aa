//! Autoencoder on the unit 2-sphere, trained with and without isometry losses.

use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::RngCore;

use crate::diffcore::{AdamState, Activation, Graph, Mlp};
use crate::error::{Error, Result};
use crate::metrics::{normalized_jacobian, spectrum_stats, SpectrumStats};
use crate::regularizers::{iso_term, Frame, IsoBatch, IsoConfig, MetricKind, TraceMode};
use crate::rng::{normal_vec, stream, substream};
use crate::tensor::Tensor;

/// Angular radius of the excluded cap around the north pole.
pub const POLAR_CAP: f64 = 0.15;

/// Loss above which training is abandoned.
pub const DIVERGENCE_LIMIT: f64 = 1e6;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum S2Mode {
    Recon,
    IsoEuclid,
    IsoSphere,
}

impl S2Mode {
    pub const ALL: [S2Mode; 3] = [S2Mode::Recon, S2Mode::IsoEuclid, S2Mode::IsoSphere];

    pub fn name(self) -> &'static str {
        match self {
            S2Mode::Recon => "recon",
            S2Mode::IsoEuclid => "iso_euclid",
            S2Mode::IsoSphere => "iso_sphere",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.name() == s)
    }

    fn metric(self) -> Option<MetricKind> {
        match self {
            S2Mode::Recon => None,
            S2Mode::IsoEuclid => Some(MetricKind::Euclidean),
            S2Mode::IsoSphere => Some(MetricKind::Sphere),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ToyS2Config {
    pub num_points: usize,
    pub hidden: Vec<usize>,
    pub mode: S2Mode,
    pub lambda_iso: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Learning rate reached at the last epoch by cosine annealing.
    pub lr_final: f64,
    pub seed: u64,
    /// Points used for the reported spectrum statistics.
    pub eval_points: usize,
}

impl Default for ToyS2Config {
    fn default() -> Self {
        Self {
            num_points: 2048,
            hidden: vec![64, 64],
            mode: S2Mode::IsoSphere,
            lambda_iso: 0.02,
            epochs: 200,
            batch_size: 128,
            lr: 3e-3,
            lr_final: 1e-4,
            seed: 0,
            eval_points: 512,
        }
    }
}

impl ToyS2Config {
    pub fn validate(&self) -> Result<()> {
        if self.num_points == 0 || self.epochs == 0 || self.batch_size == 0 || self.eval_points == 0 {
            return Err(Error::Config("s2 point counts, epochs and batch size must be positive".into()));
        }
        if !(self.lr > 0.0) || !(self.lr_final > 0.0) || !(self.lambda_iso >= 0.0) {
            return Err(Error::Config("s2 lr must be positive and lambda_iso non-negative".into()));
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return Err(Error::Config("s2 hidden widths must be positive".into()));
        }
        Ok(())
    }
}

/// Uniform points on the unit sphere outside the polar cap around `+e_3`.
pub fn gen_s2_dataset(seed: u64, count: usize) -> Tensor {
    let mut rng = stream(seed, "s2-data");
    let cos_cap = POLAR_CAP.cos();
    let mut out = Vec::with_capacity(count * 3);
    while out.len() < count * 3 {
        let v = normal_vec(&mut rng, 3);
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n < 1e-12 {
            continue;
        }
        let p: Vec<f64> = v.iter().map(|x| x / n).collect();
        if p[2] < cos_cap {
            out.extend(p);
        }
    }
    Tensor::matrix(count, 3, out).expect("sized by construction")
}

/// Point at polar angle `theta` (from the north pole) and azimuth `phi`.
fn sphere_point(theta: f64, phi: f64) -> [f64; 3] {
    [theta.sin() * phi.cos(), theta.sin() * phi.sin(), theta.cos()]
}

/// Latitude and longitude polylines outside the polar cap, `(line_id, points)`.
pub fn contour_lines(lines_each: usize, points_per_line: usize) -> Vec<Vec<[f64; 3]>> {
    let mut lines = Vec::with_capacity(2 * lines_each);
    let span = PI - POLAR_CAP;
    for k in 0..lines_each {
        let theta = POLAR_CAP + span * (k as f64 + 0.5) / lines_each as f64;
        lines.push(
            (0..points_per_line)
                .map(|i| sphere_point(theta, 2.0 * PI * i as f64 / (points_per_line - 1) as f64))
                .collect(),
        );
    }
    for k in 0..lines_each {
        let phi = 2.0 * PI * k as f64 / lines_each as f64;
        lines.push(
            (0..points_per_line)
                .map(|i| sphere_point(POLAR_CAP + span * i as f64 / (points_per_line - 1) as f64, phi))
                .collect(),
        );
    }
    lines
}

#[derive(Clone, Debug)]
pub struct S2Epoch {
    pub epoch: usize,
    pub recon: f64,
    pub iso: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct ToyS2Result {
    pub encoder: Mlp,
    pub decoder: Mlp,
    pub recon_mse: f64,
    pub spectrum: SpectrumStats,
    /// Latent images of the contour lines.
    pub contours: Vec<Vec<[f64; 2]>>,
    pub log: Vec<S2Epoch>,
}

/// Mean squared reconstruction error per coordinate.
pub fn recon_mse(encoder: &Mlp, decoder: &Mlp, x: &Tensor) -> Result<f64> {
    let xhat = decoder.forward(&encoder.forward(x)?)?;
    Ok(xhat.sub(x).data().iter().map(|v| v * v).sum::<f64>() / x.len() as f64)
}

/// Spectrum statistics of encoder Jacobians in the sphere's chart, normalized by its metric.
pub fn s2_spectrum(encoder: &Mlp, points: &Tensor) -> Result<SpectrumStats> {
    let frame = Frame::Chart { radius: 1.0, metric: MetricKind::Sphere };
    let jacs: Vec<Tensor> = (0..points.rows()).map(|i| normalized_jacobian(encoder, frame, points.row(i))).collect::<Result<_>>()?;
    spectrum_stats(&jacs)
}

pub fn train_toy_autoencoder(cfg: &ToyS2Config) -> Result<ToyS2Result> {
    cfg.validate()?;
    let data = gen_s2_dataset(cfg.seed, cfg.num_points);
    let mut enc_dims = vec![3];
    enc_dims.extend(&cfg.hidden);
    enc_dims.push(2);
    let mut dec_dims = vec![2];
    dec_dims.extend(cfg.hidden.iter().rev());
    dec_dims.push(3);
    let mut encoder = Mlp::init(substream(cfg.seed, "s2-init", 0).next_u64(), &enc_dims, Activation::Tanh)?;
    let mut decoder = Mlp::init(substream(cfg.seed, "s2-init", 1).next_u64(), &dec_dims, Activation::Tanh)?;
    let mut params: Vec<&Tensor> = encoder.params();
    params.extend(decoder.params());
    let mut adam = AdamState::new(&params, cfg.lr);
    let iso_cfg = IsoConfig { lambda_iso: cfg.lambda_iso, gamma: 0.0, mode: TraceMode::Exact, ..IsoConfig::default() };
    let metric = cfg.mode.metric().filter(|_| cfg.lambda_iso > 0.0);

    let mut probe_rng = stream(cfg.seed, "s2-probes");
    let mut order: Vec<usize> = (0..cfg.num_points).collect();
    let mut log = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let phase = epoch as f64 / cfg.epochs as f64;
        adam.lr = cfg.lr_final + 0.5 * (cfg.lr - cfg.lr_final) * (1.0 + (PI * phase).cos());
        order.shuffle(&mut substream(cfg.seed, "s2-batches", epoch as u64));
        let (mut recon_sum, mut iso_sum, mut batches) = (0.0, 0.0, 0);
        for chunk in order.chunks(cfg.batch_size) {
            let x = data.gather_rows(chunk);
            let mut g = Graph::new();
            let ev = encoder.bind(&mut g);
            let dv = decoder.bind(&mut g);
            let xin = g.constant(x.clone());
            let et = encoder.forward_graph(&mut g, &ev, xin)?;
            let dt = decoder.forward_graph(&mut g, &dv, et.output)?;
            let diff = g.sub(dt.output, xin)?;
            let sq = g.row_sum_sq(diff);
            let recon = g.mean(sq);
            let recon = g.scale(recon, 1.0 / 3.0);
            let total = match metric {
                Some(metric) => {
                    let factors = encoder.derivative_factors(&mut g, &et);
                    let batch = IsoBatch::chart(x, 3, vec![1.0; chunk.len()], metric);
                    let iso = iso_term(&mut g, &encoder, &ev, &factors, &batch, &iso_cfg, &mut probe_rng)?.loss;
                    iso_sum += g.scalar(iso);
                    let w = g.scale(iso, cfg.lambda_iso);
                    g.add(recon, w)?
                }
                None => recon,
            };
            let loss = g.scalar(total);
            if !loss.is_finite() || loss > DIVERGENCE_LIMIT {
                return Err(Error::Divergence { step: adam.steps() as usize, loss });
            }
            recon_sum += g.scalar(recon);
            batches += 1;
            let grads = g.backward(total);
            let mut flat = encoder.collect_grads(&grads, &ev).into_flat();
            flat.extend(decoder.collect_grads(&grads, &dv).into_flat());
            let mut ps = encoder.params_mut();
            ps.extend(decoder.params_mut());
            adam.step(&mut ps, &flat)?;
        }
        log.push(S2Epoch { epoch, recon: recon_sum / batches as f64, iso: metric.map(|_| iso_sum / batches as f64) });
    }

    let eval = gen_s2_dataset(cfg.seed.wrapping_add(0x5eed), cfg.eval_points);
    let spectrum = s2_spectrum(&encoder, &eval)?;
    let recon = recon_mse(&encoder, &decoder, &data)?;
    let contours = contour_lines(12, 128)
        .into_iter()
        .map(|line| {
            let pts = Tensor::matrix(line.len(), 3, line.iter().flatten().copied().collect())?;
            let z = encoder.forward(&pts)?;
            Ok((0..z.rows()).map(|i| [z.at(i, 0), z.at(i, 1)]).collect())
        })
        .collect::<Result<_>>()?;
    Ok(ToyS2Result { encoder, decoder, recon_mse: recon, spectrum, contours, log })
}
