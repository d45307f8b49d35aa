//! Geometry metrics for trained score networks: path length, trajectory
//! length ratios, Jacobian condition numbers, and the trace-estimator study.

use rand::Rng;

use crate::diffusion::{ddim_sample, perturb, time_features, EpsPredictor, NoiseSchedule, ScoreNet};
use crate::error::{Error, Result};
use crate::geometry::{lerp, radius_at, slerp};
use crate::linalg::singular_values;
use crate::regularizers::{coordinate_jacobian, Conditioned, DiffMap, Frame, MetricKind};
use crate::rng::{normal_vec, stream, substream};
use crate::tensor::Tensor;

/// Chord lengths below this make a trajectory ratio meaningless.
pub const DEGENERATE_CHORD: f64 = 1e-12;

/// Smallest singular value accepted in condition-number statistics.
pub const RANK_TOLERANCE: f64 = 1e-12;

/// Maps a batch of latents (rows) to samples.
pub trait Generator {
    fn latent_dim(&self) -> usize;
    fn generate(&self, latents: &Tensor) -> Result<Tensor>;
}

/// Deterministic DDIM sampling as a generator.
pub struct DdimGenerator<'a, P: EpsPredictor> {
    pub net: &'a P,
    pub sched: &'a NoiseSchedule,
    pub num_steps: usize,
}

impl<P: EpsPredictor> Generator for DdimGenerator<'_, P> {
    fn latent_dim(&self) -> usize {
        self.net.data_dim()
    }

    fn generate(&self, latents: &Tensor) -> Result<Tensor> {
        Ok(ddim_sample(self.net, latents, self.num_steps, self.sched)?.last().clone())
    }
}

/// Interpolation between two latents.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PathKind {
    Lerp,
    Slerp,
}

impl PathKind {
    pub fn name(self) -> &'static str {
        match self {
            PathKind::Lerp => "lerp",
            PathKind::Slerp => "slerp",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "lerp" => Some(PathKind::Lerp),
            "slerp" => Some(PathKind::Slerp),
            _ => None,
        }
    }

    pub fn interpolate(self, a: &[f64], b: &[f64], s: f64) -> Result<Vec<f64>> {
        match self {
            PathKind::Lerp => lerp(a, b, s),
            PathKind::Slerp => slerp(a, b, s),
        }
    }
}

fn check_epsilon(epsilon: f64) -> Result<()> {
    if !(epsilon > 0.0 && epsilon <= 0.1) {
        return Err(Error::InvalidArgument(format!("path-length epsilon {epsilon} outside (0, 0.1]")));
    }
    Ok(())
}

/// Latent pairs drawn i.i.d. from `N(0, I)`.
pub fn latent_pairs(dim: usize, num_pairs: usize, seed: u64, label: &str) -> Vec<(Vec<f64>, Vec<f64>)> {
    let mut rng = stream(seed, label);
    (0..num_pairs).map(|_| (normal_vec(&mut rng, dim), normal_vec(&mut rng, dim))).collect()
}

/// Path length `E[|g(p(s)) - g(p(s + eps))|^2] / eps^2` over the given pairs,
/// with `s` uniform in `[0, 1 - eps]` and `p` the slerp path.
pub fn ppl_from_pairs(gen: &dyn Generator, pairs: &[(Vec<f64>, Vec<f64>)], epsilon: f64, seed: u64) -> Result<f64> {
    check_epsilon(epsilon)?;
    if pairs.is_empty() {
        return Err(Error::InvalidArgument("path length needs at least one pair".into()));
    }
    let mut rng = stream(seed, "ppl-s");
    let dim = gen.latent_dim();
    let mut rows = Vec::with_capacity(2 * pairs.len() * dim);
    for (a, b) in pairs {
        let s = rng.gen_range(0.0..=1.0 - epsilon);
        rows.extend(slerp(a, b, s)?);
        rows.extend(slerp(a, b, s + epsilon)?);
    }
    let out = gen.generate(&Tensor::matrix(2 * pairs.len(), dim, rows)?)?;
    let total: f64 = (0..pairs.len())
        .map(|i| out.row(2 * i).iter().zip(out.row(2 * i + 1)).map(|(p, q)| (p - q) * (p - q)).sum::<f64>())
        .sum();
    Ok(total / (pairs.len() as f64 * epsilon * epsilon))
}

pub fn ppl(gen: &dyn Generator, num_pairs: usize, epsilon: f64, seed: u64) -> Result<f64> {
    let pairs = latent_pairs(gen.latent_dim(), num_pairs, seed, "ppl-pairs");
    ppl_from_pairs(gen, &pairs, epsilon, seed)
}

/// Bottleneck features at each visited DDIM timestep for a batch of latents.
fn feature_paths(net: &impl EpsPredictor, latents: &Tensor, num_steps: usize, sched: &NoiseSchedule) -> Result<Vec<(usize, Tensor)>> {
    let traj = ddim_sample(net, latents, num_steps, sched)?;
    if traj.features.is_empty() {
        return Err(Error::InvalidArgument("predictor exposes no features".into()));
    }
    Ok(traj.features)
}

/// Ratio of feature polyline length to chord at each visited timestep, for
/// the path between `a` and `b` discretized with `k` segments.
pub fn rtl(
    net: &impl EpsPredictor,
    sched: &NoiseSchedule,
    a: &[f64],
    b: &[f64],
    k: usize,
    num_steps: usize,
    path: PathKind,
) -> Result<Vec<(usize, f64)>> {
    if k < 2 {
        return Err(Error::InvalidArgument(format!("trajectory ratio needs k >= 2, got {k}")));
    }
    let dim = a.len();
    let mut rows = Vec::with_capacity((k + 1) * dim);
    for i in 0..=k {
        let p = match i {
            0 => a.to_vec(),
            i if i == k => b.to_vec(),
            i => path.interpolate(a, b, i as f64 / k as f64)?,
        };
        rows.extend(p);
    }
    let latents = Tensor::matrix(k + 1, dim, rows)?;
    feature_paths(net, &latents, num_steps, sched)?
        .into_iter()
        .map(|(t, h)| {
            let dist = |i: usize, j: usize| h.row(i).iter().zip(h.row(j)).map(|(p, q)| (p - q) * (p - q)).sum::<f64>().sqrt();
            let chord = dist(0, k);
            if chord < DEGENERATE_CHORD {
                return Err(Error::Degenerate(format!("feature chord {chord:e} at t={t}")));
            }
            let poly: f64 = (0..k).map(|i| dist(i, i + 1)).sum();
            Ok((t, poly / chord))
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mrtl {
    pub mean: f64,
    pub per_t: Vec<(usize, f64)>,
    /// Each pair's ratio averaged over timesteps.
    pub per_pair: Vec<f64>,
}

impl Mrtl {
    /// Standard error of the mean across pairs.
    pub fn standard_error(&self) -> f64 {
        let k = self.per_pair.len() as f64;
        if k < 2.0 {
            return 0.0;
        }
        let m = self.per_pair.iter().sum::<f64>() / k;
        (self.per_pair.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (k - 1.0) / k).sqrt()
    }
}

/// Mean trajectory ratio over random pairs, per timestep and overall.
pub fn mrtl(
    net: &impl EpsPredictor,
    sched: &NoiseSchedule,
    num_pairs: usize,
    k: usize,
    num_steps: usize,
    path: PathKind,
    seed: u64,
) -> Result<Mrtl> {
    if num_pairs == 0 {
        return Err(Error::InvalidArgument("trajectory ratio needs at least one pair".into()));
    }
    let pairs = latent_pairs(net.data_dim(), num_pairs, seed, "rtl-pairs");
    let mut acc: Vec<(usize, f64)> = Vec::new();
    let mut per_pair = Vec::with_capacity(num_pairs);
    for (a, b) in &pairs {
        let per_t = rtl(net, sched, a, b, k, num_steps, path)?;
        per_pair.push(per_t.iter().map(|p| p.1).sum::<f64>() / per_t.len() as f64);
        if acc.is_empty() {
            acc = per_t.iter().map(|&(t, _)| (t, 0.0)).collect();
        }
        for (slot, (_, r)) in acc.iter_mut().zip(per_t) {
            slot.1 += r;
        }
    }
    let per_t: Vec<(usize, f64)> = acc.into_iter().map(|(t, s)| (t, s / num_pairs as f64)).collect();
    let mean = per_t.iter().map(|p| p.1).sum::<f64>() / per_t.len() as f64;
    Ok(Mrtl { mean, per_t, per_pair })
}

/// Frame in which encoder Jacobians are measured.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum JacobianFrame {
    /// Stereographic coordinates, normalized by the sphere metric.
    Chart,
    Ambient,
}

impl JacobianFrame {
    pub fn name(self) -> &'static str {
        match self {
            JacobianFrame::Chart => "chart",
            JacobianFrame::Ambient => "ambient",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "chart" => Some(JacobianFrame::Chart),
            "ambient" => Some(JacobianFrame::Ambient),
            _ => None,
        }
    }
}

/// Condition number and singular-value spread over a set of Jacobians.
#[derive(Clone, Debug, PartialEq)]
pub struct SpectrumStats {
    pub mcn: f64,
    pub vor: f64,
    /// VoR of the spectra divided by their grand mean singular value.
    pub vor_normalized: f64,
    pub used: usize,
    /// Samples dropped for a smallest singular value below [`RANK_TOLERANCE`].
    pub excluded: usize,
}

/// `MCN = E[s_max / s_min]` and `VoR = sum_i Var[s_i]` (population variance
/// over samples, singular values sorted).
pub fn spectrum_stats(jacobians: &[Tensor]) -> Result<SpectrumStats> {
    let mut spectra = Vec::with_capacity(jacobians.len());
    let mut excluded = 0;
    for j in jacobians {
        let s = singular_values(j)?;
        if let Some(first) = spectra.first().map(|f: &Vec<f64>| f.len()) {
            if first != s.len() {
                return Err(Error::Shape("jacobians of different shapes".into()));
            }
        }
        if *s.last().unwrap() < RANK_TOLERANCE {
            excluded += 1;
        } else {
            spectra.push(s);
        }
    }
    if spectra.is_empty() {
        return Err(Error::Degenerate(format!("all {excluded} jacobians are rank deficient")));
    }
    let n = spectra.len() as f64;
    let mcn = spectra.iter().map(|s| s[0] / s[s.len() - 1]).sum::<f64>() / n;
    let k = spectra[0].len();
    let vor = (0..k)
        .map(|i| {
            let mean = spectra.iter().map(|s| s[i]).sum::<f64>() / n;
            spectra.iter().map(|s| (s[i] - mean).powi(2)).sum::<f64>() / n
        })
        .sum::<f64>();
    let grand = spectra.iter().flatten().sum::<f64>() / (n * k as f64);
    Ok(SpectrumStats { mcn, vor, vor_normalized: vor / (grand * grand), used: spectra.len(), excluded })
}

/// Jacobian of `f` at `x` in `frame`, normalized by the frame metric.
pub fn normalized_jacobian(f: &dyn DiffMap, frame: Frame, x: &[f64]) -> Result<Tensor> {
    let (j, g) = coordinate_jacobian(f, frame, x)?;
    Ok(j.scale(1.0 / g.sqrt()))
}

/// Encoder Jacobians at `x_t = perturb(x_0, t)` for data rows resampled with
/// random timesteps.
pub fn encoder_jacobians(
    net: &ScoreNet,
    sched: &NoiseSchedule,
    data: &Tensor,
    num_samples: usize,
    frame: JacobianFrame,
    seed: u64,
) -> Result<Vec<Tensor>> {
    if data.rows() == 0 || num_samples == 0 {
        return Err(Error::InvalidArgument("spectrum metrics need data and samples".into()));
    }
    let n = net.data_dim();
    let horizon = sched.steps();
    (0..num_samples)
        .map(|i| {
            let mut rng = substream(seed, "spectrum", i as u64);
            let row = rng.gen_range(0..data.rows());
            let t = rng.gen_range(1..=horizon);
            let x0 = Tensor::vector(data.row(row).to_vec());
            let eps = Tensor::vector(normal_vec(&mut rng, n));
            let xt = perturb(&x0, t, &eps, sched)?;
            let f = Conditioned { mlp: &net.encoder, extra: time_features(t, horizon, net.time_dim())? };
            let frame = match frame {
                JacobianFrame::Chart => Frame::Chart { radius: radius_at(sched, t, n)?, metric: MetricKind::Sphere },
                JacobianFrame::Ambient => Frame::Ambient,
            };
            normalized_jacobian(&f, frame, xt.data())
        })
        .collect()
}

/// One row of the trace-estimator error study.
#[derive(Clone, Debug, PartialEq)]
pub struct TraceStudyRow {
    pub dim: usize,
    pub num_probes: usize,
    pub mean_abs_err: f64,
    /// Standard deviation of the absolute error over trials.
    pub std_err: f64,
    /// Mean signed error, for the unbiasedness check.
    pub mean_signed_err: f64,
}

/// Error of the probe-average trace estimate of random Gaussian matrices.
/// Each trial draws a fresh `A`; estimates at different probe counts reuse
/// a prefix of the same probe sequence.
pub fn trace_study(dim: usize, probe_counts: &[usize], trials: usize, seed: u64) -> Result<Vec<TraceStudyRow>> {
    if dim == 0 || dim > 1024 {
        return Err(Error::InvalidArgument(format!("trace study dimension {dim} outside [1, 1024]")));
    }
    if probe_counts.is_empty() || probe_counts[0] == 0 || probe_counts.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::InvalidArgument("probe counts must be positive and strictly increasing".into()));
    }
    if trials < 2 {
        return Err(Error::InvalidArgument("trace study needs at least two trials".into()));
    }
    let max_n = *probe_counts.last().unwrap();
    let mut errs = vec![Vec::with_capacity(trials); probe_counts.len()];
    for trial in 0..trials {
        let mut rng = substream(seed, "trace-study", trial as u64);
        let a = Tensor::matrix(dim, dim, normal_vec(&mut rng, dim * dim))?;
        let tr: f64 = (0..dim).map(|i| a.at(i, i)).sum();
        let mut sum = 0.0;
        let mut next = 0;
        for n in 1..=max_n {
            let v = normal_vec(&mut rng, dim);
            sum += crate::tensor::dot(&v, &a.matvec(&v)?);
            if n == probe_counts[next] {
                errs[next].push(sum / n as f64 - tr);
                next += 1;
            }
        }
    }
    Ok(probe_counts
        .iter()
        .zip(errs)
        .map(|(&n, e)| {
            let k = e.len() as f64;
            let abs: Vec<f64> = e.iter().map(|v| v.abs()).collect();
            let mean = abs.iter().sum::<f64>() / k;
            let var = abs.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (k - 1.0);
            TraceStudyRow { dim, num_probes: n, mean_abs_err: mean, std_err: var.sqrt(), mean_signed_err: e.iter().sum::<f64>() / k }
        })
        .collect())
}

/// Least-squares slope of `log(mean_abs_err)` against `log(N)`.
pub fn loglog_slope(rows: &[TraceStudyRow]) -> Result<f64> {
    if rows.len() < 2 {
        return Err(Error::InvalidArgument("slope needs two rows".into()));
    }
    let pts: Vec<(f64, f64)> = rows.iter().map(|r| ((r.num_probes as f64).ln(), r.mean_abs_err.ln())).collect();
    let k = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / k;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / k;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    Ok(sxy / sxx)
}

/// Evaluation protocol for [`evaluate`].
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsConfig {
    pub ppl_pairs: usize,
    pub ppl_epsilon: f64,
    pub rtl_pairs: usize,
    pub rtl_segments: usize,
    pub spectrum_samples: usize,
    pub ddim_steps: usize,
    pub path: PathKind,
    pub frame: JacobianFrame,
    pub seed: u64,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self {
            ppl_pairs: 64,
            ppl_epsilon: 1e-2,
            rtl_pairs: 16,
            rtl_segments: 16,
            spectrum_samples: 128,
            ddim_steps: 20,
            path: PathKind::Slerp,
            frame: JacobianFrame::Chart,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub ppl: f64,
    pub rtl_per_t: Vec<(usize, f64)>,
    pub mrtl: f64,
    pub mrtl_per_pair: Vec<f64>,
    pub mcn: f64,
    pub vor: f64,
    pub vor_normalized: f64,
    pub ppl_pairs: usize,
    pub rtl_pairs: usize,
    pub spectrum_used: usize,
    pub spectrum_excluded: usize,
}

/// All metrics for one trained network. `data` supplies the clean rows
/// around which encoder Jacobians are measured.
pub fn evaluate(net: &ScoreNet, sched: &NoiseSchedule, data: &Tensor, cfg: &MetricsConfig) -> Result<MetricsReport> {
    let gen = DdimGenerator { net, sched, num_steps: cfg.ddim_steps };
    let ppl = ppl(&gen, cfg.ppl_pairs, cfg.ppl_epsilon, cfg.seed)?;
    let m = mrtl(net, sched, cfg.rtl_pairs, cfg.rtl_segments, cfg.ddim_steps, cfg.path, cfg.seed)?;
    let jacs = encoder_jacobians(net, sched, data, cfg.spectrum_samples, cfg.frame, cfg.seed)?;
    let spec = spectrum_stats(&jacs)?;
    Ok(MetricsReport {
        ppl,
        rtl_per_t: m.per_t,
        mrtl: m.mean,
        mrtl_per_pair: m.per_pair,
        mcn: spec.mcn,
        vor: spec.vor,
        vor_normalized: spec.vor_normalized,
        ppl_pairs: cfg.ppl_pairs,
        rtl_pairs: cfg.rtl_pairs,
        spectrum_used: spec.used,
        spectrum_excluded: spec.excluded,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::Activation;
    use crate::diffusion::{Prediction, ScoreNetSpec};
    use crate::geometry::angle;
    use crate::regularizers::riso_exact;

    struct ScaleGen {
        dim: usize,
        c: f64,
    }

    impl Generator for ScaleGen {
        fn latent_dim(&self) -> usize {
            self.dim
        }

        fn generate(&self, latents: &Tensor) -> Result<Tensor> {
            Ok(latents.scale(self.c))
        }
    }

    /// Zero noise prediction; features are a fixed linear map of the state.
    struct LinearFeatures {
        a: Tensor,
    }

    impl EpsPredictor for LinearFeatures {
        fn data_dim(&self) -> usize {
            self.a.cols()
        }

        fn predict(&self, x: &Tensor, _t: usize) -> Result<Prediction> {
            Ok(Prediction { eps: Tensor::zeros(x.shape()), features: Some(x.matmul(&self.a.transpose())?) })
        }
    }

    fn linear_features() -> LinearFeatures {
        LinearFeatures { a: Tensor::from_rows(&[vec![1.0, 2.0, 0.0, -1.0], vec![0.5, 0.0, 3.0, 1.0]]).unwrap() }
    }

    #[test]
    fn ppl_of_constant_generator_is_zero() {
        let g = ScaleGen { dim: 5, c: 0.0 };
        assert_eq!(ppl(&g, 10, 1e-2, 3).unwrap(), 0.0);
        assert!(ppl(&g, 10, 0.0, 3).is_err());
        assert!(ppl(&g, 10, 0.2, 3).is_err());
    }

    #[test]
    fn ppl_of_identity_on_unit_sphere_is_mean_squared_angle() {
        let eps = 1e-2;
        let pairs: Vec<(Vec<f64>, Vec<f64>)> = latent_pairs(3, 2000, 4, "unit")
            .into_iter()
            .map(|(a, b)| {
                let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
                let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
                (a.iter().map(|v| v / na).collect(), b.iter().map(|v| v / nb).collect())
            })
            .collect();
        let got = ppl_from_pairs(&ScaleGen { dim: 3, c: 1.0 }, &pairs, eps, 5).unwrap();
        let chord: f64 = pairs.iter().map(|(a, b)| (2.0 * (eps * angle(a, b) / 2.0).sin() / eps).powi(2)).sum::<f64>() / pairs.len() as f64;
        assert!((got - chord).abs() < 1e-9 * chord, "{got} vs {chord}");
        let theta2: f64 = pairs.iter().map(|(a, b)| angle(a, b).powi(2)).sum::<f64>() / pairs.len() as f64;
        assert!((got - theta2).abs() < 1e-3 * theta2);
        // E[theta^2] for independent uniform directions on S^2 is pi^2/2 - 2
        let expect = std::f64::consts::PI.powi(2) / 2.0 - 2.0;
        assert!((theta2 - expect).abs() < 0.1, "{theta2} vs {expect}");
    }

    #[test]
    fn ppl_scales_quadratically() {
        let one = ppl(&ScaleGen { dim: 6, c: 1.0 }, 50, 1e-2, 7).unwrap();
        let two = ppl(&ScaleGen { dim: 6, c: 2.0 }, 50, 1e-2, 7).unwrap();
        assert!((two - 4.0 * one).abs() < 1e-10 * two);
    }

    #[test]
    fn linear_features_on_lerp_path_have_unit_ratio() {
        let sched = NoiseSchedule::linear(100, 1e-3, 0.05).unwrap();
        let net = linear_features();
        let a = [1.0, -0.5, 0.3, 2.0];
        let b = [-1.0, 0.5, 1.0, 0.0];
        let per_t = rtl(&net, &sched, &a, &b, 8, 10, PathKind::Lerp).unwrap();
        assert_eq!(per_t.len(), 10);
        assert_eq!(per_t[0].0, 100);
        for (_, r) in &per_t {
            assert!((r - 1.0).abs() < 1e-12);
        }
        for (_, r) in rtl(&net, &sched, &a, &b, 8, 10, PathKind::Slerp).unwrap() {
            assert!(r >= 1.0 - 1e-12);
        }
        let m = mrtl(&net, &sched, 5, 16, 10, PathKind::Lerp, 1).unwrap();
        assert!((m.mean - 1.0).abs() < 1e-12 && m.standard_error() < 1e-12);
        let m = mrtl(&net, &sched, 5, 16, 10, PathKind::Slerp, 1).unwrap();
        assert!(m.mean > 1.0 && m.per_t.len() == 10 && m.per_pair.len() == 5);
    }

    #[test]
    fn rtl_rejects_degenerate_inputs() {
        let sched = NoiseSchedule::linear(100, 1e-3, 0.05).unwrap();
        let net = linear_features();
        let a = [1.0, 2.0, 3.0, 4.0];
        assert!(matches!(rtl(&net, &sched, &a, &a, 4, 10, PathKind::Lerp), Err(Error::Degenerate(_))));
        assert!(rtl(&net, &sched, &a, &[0.0; 4], 1, 10, PathKind::Lerp).is_err());
    }

    #[test]
    fn spectrum_of_linear_maps() {
        let q = Tensor::from_rows(&[vec![0.6, 0.8, 0.0], vec![-0.8, 0.6, 0.0], vec![0.0, 0.0, 1.0]]).unwrap();
        let s = spectrum_stats(&[q.clone(), q.clone(), q]).unwrap();
        assert!((s.mcn - 1.0).abs() < 1e-12 && s.vor.abs() < 1e-24);
        let d = Tensor::from_rows(&[vec![3.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]]).unwrap();
        let s = spectrum_stats(&[d.clone(), d]).unwrap();
        assert!((s.mcn - 3.0).abs() < 1e-12 && s.vor.abs() < 1e-24);
    }

    #[test]
    fn vor_of_randomly_scaled_map() {
        let base = Tensor::from_rows(&[vec![2.0, 0.0, 0.0], vec![0.0, 1.0, 0.5]]).unwrap();
        let sigma = singular_values(&base).unwrap();
        let mut rng = stream(9, "coin");
        let cs: Vec<f64> = (0..4000).map(|_| if rng.gen_bool(0.5) { 1.0 } else { 2.0 }).collect();
        let jacs: Vec<Tensor> = cs.iter().map(|&c| base.scale(c)).collect();
        let got = spectrum_stats(&jacs).unwrap().vor;
        let mean = cs.iter().sum::<f64>() / cs.len() as f64;
        let var_c = cs.iter().map(|c| (c - mean).powi(2)).sum::<f64>() / cs.len() as f64;
        let sum_sq: f64 = sigma.iter().map(|s| s * s).sum();
        assert!((got - sum_sq * var_c).abs() < 1e-10 * got);
        assert!((got - sum_sq * 0.25).abs() < 0.02 * sum_sq);
        let base_stats = spectrum_stats(&jacs).unwrap();
        let scaled: Vec<Tensor> = jacs.iter().map(|j| j.scale(7.0)).collect();
        let s7 = spectrum_stats(&scaled).unwrap();
        assert!((s7.vor - 49.0 * base_stats.vor).abs() < 1e-9 * s7.vor);
        assert!((s7.vor_normalized - base_stats.vor_normalized).abs() < 1e-12);
    }

    #[test]
    fn rank_deficient_samples_are_excluded() {
        let good = Tensor::identity(2);
        let bad = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 0.0]]).unwrap();
        let s = spectrum_stats(&[good.clone(), bad.clone(), good]).unwrap();
        assert_eq!((s.used, s.excluded), (2, 1));
        assert!(spectrum_stats(&[bad]).is_err());
    }

    fn small_net() -> (ScoreNet, NoiseSchedule, Tensor) {
        let spec = ScoreNetSpec { data_dim: 6, feature_dim: 3, hidden: vec![8], time_dim: 4, horizon: 100, activation: Activation::Tanh };
        let net = ScoreNet::init(3, &spec).unwrap();
        let sched = NoiseSchedule::linear(100, 1e-3, 0.05).unwrap();
        let data = Tensor::matrix(10, 6, normal_vec(&mut stream(4, "d"), 60)).unwrap();
        (net, sched, data)
    }

    #[test]
    fn chart_jacobians_agree_with_r() {
        let (net, sched, data) = small_net();
        let jacs = encoder_jacobians(&net, &sched, &data, 3, JacobianFrame::Chart, 5).unwrap();
        assert_eq!(jacs[0].shape(), &[3, 5]);
        // replay the first sample and compare J^T J with R
        let mut rng = substream(5, "spectrum", 0);
        let row = rng.gen_range(0..data.rows());
        let t = rng.gen_range(1..=100);
        let eps = Tensor::vector(normal_vec(&mut rng, 6));
        let xt = perturb(&Tensor::vector(data.row(row).to_vec()), t, &eps, &sched).unwrap();
        let f = Conditioned { mlp: &net.encoder, extra: time_features(t, 100, 4).unwrap() };
        let frame = Frame::Chart { radius: radius_at(&sched, t, 6).unwrap(), metric: MetricKind::Sphere };
        let r = riso_exact(&f, frame, xt.data()).unwrap();
        let jtj = jacs[0].transpose().matmul(&jacs[0]).unwrap();
        for (p, q) in r.data().iter().zip(jtj.data()) {
            assert!((p - q).abs() < 1e-12 * (1.0 + q.abs()));
        }
        let amb = encoder_jacobians(&net, &sched, &data, 3, JacobianFrame::Ambient, 5).unwrap();
        assert_eq!(amb[0].shape(), &[3, 6]);
    }

    #[test]
    fn evaluation_is_deterministic() {
        let (net, sched, data) = small_net();
        let cfg = MetricsConfig { ppl_pairs: 4, rtl_pairs: 3, rtl_segments: 4, spectrum_samples: 8, ddim_steps: 5, seed: 11, ..MetricsConfig::default() };
        let a = evaluate(&net, &sched, &data, &cfg).unwrap();
        let b = evaluate(&net, &sched, &data, &cfg).unwrap();
        assert_eq!(a, b);
        assert!(a.mrtl >= 1.0 - 1e-9 && a.mcn >= 1.0 - 1e-9 && a.vor >= 0.0 && a.ppl >= 0.0);
        assert_eq!(a.rtl_per_t.len(), 5);
    }

    #[test]
    fn trace_error_follows_inverse_sqrt() {
        let rows = trace_study(32, &[1, 4, 16, 64, 256], 200, 3).unwrap();
        let slope = loglog_slope(&rows).unwrap();
        assert!((slope + 0.5).abs() < 0.1, "{slope}");
        for r in &rows {
            assert!(r.mean_abs_err > 0.0);
            // unbiased: signed mean within 3 standard errors
            let se = (r.std_err.powi(2) + r.mean_abs_err.powi(2)).sqrt() / (200f64).sqrt();
            assert!(r.mean_signed_err.abs() < 3.0 * se, "{r:?}");
        }
        let pair = trace_study(32, &[1, 100], 200, 4).unwrap();
        let ratio = pair[0].mean_abs_err / pair[1].mean_abs_err;
        assert!(ratio > 10.0 / 1.5 && ratio < 15.0, "{ratio}");
        assert!(trace_study(8, &[4, 2], 10, 0).is_err());
    }

    #[test]
    fn identity_trace_estimate_is_unbiased() {
        // v^T I v = |v|^2 with mean n
        let mut rng = stream(2, "id");
        let n = 10;
        let est: f64 = (0..20_000).map(|_| normal_vec(&mut rng, n).iter().map(|v| v * v).sum::<f64>()).sum::<f64>() / 20_000.0;
        assert!((est - n as f64).abs() < 3.0 * (2.0 * n as f64 / 20_000.0).sqrt());
    }
}
