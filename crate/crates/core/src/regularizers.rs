//! Isometry loss, path-length baseline, and the gated training objective.
//!
//! For an encoder `f` read through coordinates `z` with metric `G = g I`,
//! the isometry loss is `E[Tr(R^2)] / E[Tr(R)]^2` with `R = J^T J / g`.
//! Traces are estimated from probes `v`:
//!
//! ```text
//! u     = J v                  (chart JVP, then encoder JVP)
//! w     = J^T u                (encoder VJP, then chart adjoint)
//! v'Rv  = |u|^2 / g
//! v'R²v = |w|^2 / g^2
//! ```
//!
//! Both passes are recorded on the tape, so one reverse sweep yields the
//! loss gradient with respect to the encoder parameters.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::diffcore::{ChartRows, Graph, Mlp, MlpGrads, MlpVars, Var};
use crate::diffusion::{dsm_term, Batch, EpsPredictor, NoiseSchedule, ScoreNet};
use crate::error::{shape_err, Error, Result};
use crate::geometry::{metric_scalar_raw, project_raw, radius_at, unproject_jvp_raw};
use crate::rng::{normal_vec, rademacher_vec};
use crate::tensor::Tensor;

/// Denominators below this mean the encoder Jacobian has collapsed.
pub const DEAD_ENCODER_THRESHOLD: f64 = 1e-18;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TraceMode {
    Exact,
    Stochastic,
}

/// Metric on the chart coordinates: identity, or the sphere's conformal metric.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MetricKind {
    Euclidean,
    Sphere,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ProbeKind {
    Gaussian,
    Rademacher,
}

impl MetricKind {
    pub fn name(self) -> &'static str {
        match self {
            MetricKind::Euclidean => "euclidean",
            MetricKind::Sphere => "sphere",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "euclidean" => Some(MetricKind::Euclidean),
            "sphere" => Some(MetricKind::Sphere),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct IsoConfig {
    pub lambda_iso: f64,
    /// Fraction of timesteps skipped: the loss applies only where `t > gamma T`.
    pub gamma: f64,
    pub num_probes: usize,
    pub mode: TraceMode,
    pub metric: MetricKind,
    pub probe: ProbeKind,
}

impl Default for IsoConfig {
    fn default() -> Self {
        Self {
            lambda_iso: 1e-4,
            gamma: 0.5,
            num_probes: 1,
            mode: TraceMode::Stochastic,
            metric: MetricKind::Sphere,
            probe: ProbeKind::Gaussian,
        }
    }
}

impl IsoConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_iso >= 0.0 && self.lambda_iso.is_finite()) {
            return Err(Error::Config(format!("lambda_iso {} must be >= 0", self.lambda_iso)));
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::Config(format!("gamma {} outside [0, 1]", self.gamma)));
        }
        if self.num_probes < 1 {
            return Err(Error::Config("num_probes must be >= 1".into()));
        }
        Ok(())
    }

    /// Whether timestep `t` of a `horizon`-step process receives the isometry term.
    pub fn gate(&self, t: usize, horizon: usize) -> bool {
        t as f64 > self.gamma * horizon as f64
    }
}

/// How the first `x_dim` encoder inputs are coordinatized.
#[derive(Clone, Debug, PartialEq)]
pub enum Coordinates {
    /// The raw inputs, with `G = I`.
    Ambient,
    /// Stereographic chart of the sphere of radius `radii[i]` through row `i`.
    Chart { radii: Vec<f64>, metric: MetricKind },
}

/// Rows fed to the isometry loss: encoder inputs whose first `x_dim`
/// columns are the latent, the rest fixed conditioning.
#[derive(Clone, Debug)]
pub struct IsoBatch {
    pub inputs: Tensor,
    pub x_dim: usize,
    pub coords: Coordinates,
}

impl IsoBatch {
    pub fn ambient(inputs: Tensor) -> Self {
        let x_dim = inputs.cols();
        Self { inputs: inputs.as_matrix(), x_dim, coords: Coordinates::Ambient }
    }

    pub fn chart(inputs: Tensor, x_dim: usize, radii: Vec<f64>, metric: MetricKind) -> Self {
        Self { inputs: inputs.as_matrix(), x_dim, coords: Coordinates::Chart { radii, metric } }
    }

    fn validate(&self, enc: &Mlp) -> Result<()> {
        if self.inputs.rows() == 0 {
            return Err(Error::InvalidArgument("isometry loss of an empty batch".into()));
        }
        if self.inputs.cols() != enc.input_dim() || self.x_dim == 0 || self.x_dim > enc.input_dim() {
            return shape_err(format!(
                "iso batch {:?} (x_dim {}) for encoder input {}",
                self.inputs.shape(),
                self.x_dim,
                enc.input_dim()
            ));
        }
        if let Coordinates::Chart { radii, .. } = &self.coords {
            if radii.len() != self.inputs.rows() {
                return shape_err(format!("{} radii for {} rows", radii.len(), self.inputs.rows()));
            }
            if self.x_dim < 2 {
                return shape_err("chart coordinates need x_dim >= 2");
            }
        }
        Ok(())
    }

    /// Dimension of the coordinate space the probes live in.
    pub fn coord_dim(&self) -> usize {
        match self.coords {
            Coordinates::Ambient => self.x_dim,
            Coordinates::Chart { .. } => self.x_dim - 1,
        }
    }
}

/// Isometry loss value together with its trace estimates.
#[derive(Clone, Debug)]
pub struct IsoLoss {
    pub loss: f64,
    /// Pooled estimate of `E[Tr R]`.
    pub trace_r: f64,
    /// Pooled estimate of `E[Tr R^2]`.
    pub trace_r2: f64,
    pub grads: MlpGrads,
}

/// Per-row chart data for the rows of an [`IsoBatch`].
struct Frames {
    z: Option<Tensor>,
    radii: Vec<f64>,
    g: Vec<f64>,
}

fn frames(batch: &IsoBatch) -> Result<Frames> {
    let rows = batch.inputs.rows();
    match &batch.coords {
        Coordinates::Ambient => Ok(Frames { z: None, radii: vec![], g: vec![1.0; rows] }),
        Coordinates::Chart { radii, metric } => {
            let d = batch.x_dim - 1;
            let mut z = Vec::with_capacity(rows * d);
            let mut g = Vec::with_capacity(rows);
            for (i, &r) in radii.iter().enumerate() {
                let zi = project_raw(&batch.inputs.row(i)[..batch.x_dim], r)?;
                g.push(match metric {
                    MetricKind::Sphere => metric_scalar_raw(&zi, r),
                    MetricKind::Euclidean => 1.0,
                });
                z.extend(zi);
            }
            Ok(Frames { z: Some(Tensor::matrix(rows, d, z)?), radii: radii.clone(), g })
        }
    }
}

pub(crate) struct IsoNodes {
    pub loss: Var,
    pub tr: Var,
    pub tr2: Var,
}

/// Records the isometry loss for `batch` on `g`. `factors` are the encoder's
/// activation derivatives for the batch rows (one row each).
pub(crate) fn iso_term(
    g: &mut Graph,
    enc: &Mlp,
    vars: &MlpVars,
    factors: &[Option<Var>],
    batch: &IsoBatch,
    cfg: &IsoConfig,
    rng: &mut impl Rng,
) -> Result<IsoNodes> {
    batch.validate(enc)?;
    let fr = frames(batch)?;
    let rows = batch.inputs.rows();
    let d = batch.coord_dim();
    let width = enc.input_dim();
    let probes = match cfg.mode {
        TraceMode::Stochastic => cfg.num_probes,
        TraceMode::Exact => d,
    };

    let mut idx = Vec::with_capacity(rows * probes);
    let mut tangent = Vec::with_capacity(rows * probes * width);
    let mut inv_g = Vec::with_capacity(rows * probes);
    let mut inv_g2 = Vec::with_capacity(rows * probes);
    for i in 0..rows {
        for p in 0..probes {
            let v = match cfg.mode {
                TraceMode::Exact => {
                    let mut e = vec![0.0; d];
                    e[p] = 1.0;
                    e
                }
                TraceMode::Stochastic => match cfg.probe {
                    ProbeKind::Gaussian => normal_vec(rng, d),
                    ProbeKind::Rademacher => rademacher_vec(rng, d),
                },
            };
            let ambient = match &fr.z {
                Some(z) => unproject_jvp_raw(z.row(i), fr.radii[i], &v),
                None => v,
            };
            tangent.extend(ambient);
            tangent.extend(std::iter::repeat(0.0).take(width - batch.x_dim));
            idx.push(i);
            inv_g.push(1.0 / fr.g[i]);
            inv_g2.push(1.0 / (fr.g[i] * fr.g[i]));
        }
    }
    let n_rows = idx.len();
    let tangent = g.constant(Tensor::matrix(n_rows, width, tangent)?);
    let rep: Vec<Option<Var>> = factors
        .iter()
        .map(|f| f.map(|f| if rows == n_rows { Ok(f) } else { g.gather(f, idx.clone()) }).transpose())
        .collect::<Result<_>>()?;

    let u = enc.jvp_graph(g, vars, &rep, tangent)?;
    let back = enc.vjp_graph(g, vars, &rep, u)?;
    let back = g.slice_cols(back, 0, batch.x_dim)?;
    let w = match &fr.z {
        Some(z) => {
            let chart = ChartRows { z: z.gather_rows(&idx), radii: idx.iter().map(|&i| fr.radii[i]).collect() };
            g.chart_adjoint(back, chart)?
        }
        None => back,
    };

    let q1 = g.row_sum_sq(u);
    let q1 = g.scale_rows(q1, inv_g)?;
    let q2 = g.row_sum_sq(w);
    let q2 = g.scale_rows(q2, inv_g2)?;
    let weight = match cfg.mode {
        TraceMode::Stochastic => 1.0,
        TraceMode::Exact => d as f64,
    };
    let tr = g.mean(q1);
    let tr = g.scale(tr, weight);
    let tr2 = g.mean(q2);
    let tr2 = g.scale(tr2, weight);
    let den = g.mul(tr, tr)?;
    if g.scalar(den) < DEAD_ENCODER_THRESHOLD {
        return Err(Error::DeadEncoder(g.scalar(den)));
    }
    let loss = g.div_scalar(tr2, den)?;
    Ok(IsoNodes { loss, tr, tr2 })
}

/// Isometry loss of `enc` on `batch`, with gradients for every encoder parameter.
pub fn iso_loss(enc: &Mlp, batch: &IsoBatch, cfg: &IsoConfig, rng: &mut impl Rng) -> Result<IsoLoss> {
    let mut g = Graph::new();
    let vars = enc.bind(&mut g);
    let input = g.constant(batch.inputs.clone());
    let trace = enc.forward_graph(&mut g, &vars, input)?;
    let factors = enc.derivative_factors(&mut g, &trace);
    let nodes = iso_term(&mut g, enc, &vars, &factors, batch, cfg, rng)?;
    let grads = g.backward(nodes.loss);
    Ok(IsoLoss {
        loss: g.scalar(nodes.loss),
        trace_r: g.scalar(nodes.tr),
        trace_r2: g.scalar(nodes.tr2),
        grads: enc.collect_grads(&grads, &vars),
    })
}

/// Differentiable map for the exact-geometry routines.
pub trait DiffMap {
    fn input_dim(&self) -> usize;
    fn output_dim(&self) -> usize;
    fn jvp(&self, x: &[f64], v: &[f64]) -> Result<Vec<f64>>;
}

impl DiffMap for Mlp {
    fn input_dim(&self) -> usize {
        Mlp::input_dim(self)
    }

    fn output_dim(&self) -> usize {
        Mlp::output_dim(self)
    }

    fn jvp(&self, x: &[f64], v: &[f64]) -> Result<Vec<f64>> {
        Ok(Mlp::jvp(self, &Tensor::vector(x.to_vec()), &Tensor::vector(v.to_vec()))?.into_data())
    }
}

/// An MLP with fixed trailing inputs (time features), differentiated only
/// in its leading inputs.
pub struct Conditioned<'a> {
    pub mlp: &'a Mlp,
    pub extra: Vec<f64>,
}

impl DiffMap for Conditioned<'_> {
    fn input_dim(&self) -> usize {
        self.mlp.input_dim() - self.extra.len()
    }

    fn output_dim(&self) -> usize {
        self.mlp.output_dim()
    }

    fn jvp(&self, x: &[f64], v: &[f64]) -> Result<Vec<f64>> {
        let mut xi = x.to_vec();
        xi.extend(&self.extra);
        let mut vi = v.to_vec();
        vi.extend(std::iter::repeat(0.0).take(self.extra.len()));
        Ok(self.mlp.jvp(&Tensor::vector(xi), &Tensor::vector(vi))?.into_data())
    }
}

/// Coordinates for a single point, for the dense routines.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Frame {
    Ambient,
    Chart { radius: f64, metric: MetricKind },
}

/// Jacobian of `f` with respect to the frame's coordinates at `x`, and the
/// conformal factor `g` of the frame's metric there.
pub fn coordinate_jacobian(f: &dyn DiffMap, frame: Frame, x: &[f64]) -> Result<(Tensor, f64)> {
    if x.len() != f.input_dim() {
        return shape_err(format!("point of length {} for map input {}", x.len(), f.input_dim()));
    }
    let m = f.output_dim();
    match frame {
        Frame::Ambient => {
            let d = x.len();
            let mut jac = Tensor::zeros(&[m, d]);
            let mut e = vec![0.0; d];
            for k in 0..d {
                e[k] = 1.0;
                for (i, v) in f.jvp(x, &e)?.into_iter().enumerate() {
                    jac.set(i, k, v);
                }
                e[k] = 0.0;
            }
            Ok((jac, 1.0))
        }
        Frame::Chart { radius, metric } => {
            let z = project_raw(x, radius)?;
            let d = z.len();
            let mut jac = Tensor::zeros(&[m, d]);
            let mut e = vec![0.0; d];
            for k in 0..d {
                e[k] = 1.0;
                let dx = unproject_jvp_raw(&z, radius, &e);
                for (i, v) in f.jvp(x, &dx)?.into_iter().enumerate() {
                    jac.set(i, k, v);
                }
                e[k] = 0.0;
            }
            let g = match metric {
                MetricKind::Sphere => metric_scalar_raw(&z, radius),
                MetricKind::Euclidean => 1.0,
            };
            Ok((jac, g))
        }
    }
}

/// Dense `R = J^T H J G^{-1}` with `H = I` and `G = g I`.
pub fn riso_exact(f: &dyn DiffMap, frame: Frame, x: &[f64]) -> Result<Tensor> {
    let (jac, g) = coordinate_jacobian(f, frame, x)?;
    Ok(jac.transpose().matmul(&jac)?.scale(1.0 / g))
}

/// `(Tr R, Tr R^2)` of a square matrix.
pub fn traces(r: &Tensor) -> (f64, f64) {
    let d = r.rows();
    let tr = (0..d).map(|i| r.at(i, i)).sum();
    let tr2 = r.matmul(r).map(|m| (0..d).map(|i| m.at(i, i)).sum()).unwrap_or(f64::NAN);
    (tr, tr2)
}

/// Isometry loss from dense `R` matrices, pooled over points.
pub fn iso_loss_dense(f: &dyn DiffMap, points: &[(Frame, Vec<f64>)]) -> Result<f64> {
    if points.is_empty() {
        return Err(Error::InvalidArgument("isometry loss of an empty batch".into()));
    }
    let (mut s1, mut s2) = (0.0, 0.0);
    for (frame, x) in points {
        let (a, b) = traces(&riso_exact(f, *frame, x)?);
        s1 += a;
        s2 += b;
    }
    let n = points.len() as f64;
    let den = (s1 / n).powi(2);
    if den < DEAD_ENCODER_THRESHOLD {
        return Err(Error::DeadEncoder(den));
    }
    Ok((s2 / n) / den)
}

/// Exponential moving average of `|J^T y|` for the path-length penalty.
#[derive(Clone, Debug, PartialEq)]
pub struct PathLenState {
    pub a: f64,
    pub decay: f64,
}

impl Default for PathLenState {
    fn default() -> Self {
        Self { a: 0.0, decay: 0.99 }
    }
}

impl PathLenState {
    pub fn update(&mut self, batch_mean: f64) {
        self.a = self.decay * self.a + (1.0 - self.decay) * batch_mean;
    }
}

/// Records `mean((|J^T y| - a)^2)` for `y ~ N(0, I)` in output space.
/// Returns the loss node and the batch mean of `|J^T y|`.
pub(crate) fn path_length_term(
    g: &mut Graph,
    enc: &Mlp,
    vars: &MlpVars,
    factors: &[Option<Var>],
    rows: usize,
    x_dim: usize,
    a: f64,
    rng: &mut impl Rng,
) -> Result<(Var, f64)> {
    let m = enc.output_dim();
    let y: Vec<f64> = (0..rows * m).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    let y = g.constant(Tensor::matrix(rows, m, y)?);
    let jt = enc.vjp_graph(g, vars, factors, y)?;
    let jt = g.slice_cols(jt, 0, x_dim)?;
    let sq = g.row_sum_sq(jt);
    let norms = g.sqrt(sq);
    let mean_norm = g.value(norms).sum() / rows as f64;
    let dev = g.affine(norms, 1.0, -a);
    let dev2 = g.mul(dev, dev)?;
    Ok((g.mean(dev2), mean_norm))
}

/// Result of one path-length evaluation.
#[derive(Clone, Debug)]
pub struct PathLenLoss {
    pub loss: f64,
    pub mean_norm: f64,
    pub grads: MlpGrads,
}

/// Path-length penalty of `enc` with respect to all of its inputs. The
/// moving average in `state` is read before and updated after the batch.
pub fn path_length_reg(enc: &Mlp, x: &Tensor, state: &mut PathLenState, rng: &mut impl Rng) -> Result<PathLenLoss> {
    if x.rows() == 0 {
        return Err(Error::InvalidArgument("path length of an empty batch".into()));
    }
    let mut g = Graph::new();
    let vars = enc.bind(&mut g);
    let input = g.constant(x.as_matrix());
    let trace = enc.forward_graph(&mut g, &vars, input)?;
    let factors = enc.derivative_factors(&mut g, &trace);
    let (loss, mean_norm) = path_length_term(&mut g, enc, &vars, &factors, x.rows(), enc.input_dim(), state.a, rng)?;
    let grads = g.backward(loss);
    state.update(mean_norm);
    Ok(PathLenLoss { loss: g.scalar(loss), mean_norm, grads: enc.collect_grads(&grads, &vars) })
}

/// Which regularizer accompanies the denoising loss.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RegularizerKind {
    None,
    Iso,
    PathLength,
}

impl RegularizerKind {
    pub fn name(self) -> &'static str {
        match self {
            RegularizerKind::None => "none",
            RegularizerKind::Iso => "iso",
            RegularizerKind::PathLength => "path_length",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "none" => Some(RegularizerKind::None),
            "iso" => Some(RegularizerKind::Iso),
            "path_length" => Some(RegularizerKind::PathLength),
            _ => None,
        }
    }
}

/// Components of the training objective for one batch.
#[derive(Clone, Debug)]
pub struct TotalLoss {
    pub total: f64,
    pub dsm: f64,
    /// Regularizer value on the gated rows, if any row passed the gate.
    pub reg: Option<f64>,
    pub grads: Vec<Tensor>,
}

/// Denoising loss on all rows plus `lambda_iso` times the regularizer on
/// rows with `t > gamma T`.
pub fn total_loss(
    net: &ScoreNet,
    batch: &Batch,
    sched: &NoiseSchedule,
    cfg: &IsoConfig,
    kind: RegularizerKind,
    pl_state: &mut PathLenState,
    rng: &mut impl Rng,
) -> Result<TotalLoss> {
    cfg.validate()?;
    let xt = batch.noisy(sched)?;
    let mut g = Graph::new();
    let sg = net.forward_graph(&mut g, &xt, &batch.t)?;
    let dsm = dsm_term(&mut g, &sg, &batch.eps)?;
    let gated: Vec<usize> = (0..batch.len()).filter(|&i| cfg.gate(batch.t[i], sched.steps())).collect();
    let active = kind != RegularizerKind::None && cfg.lambda_iso > 0.0 && !gated.is_empty();

    let mut reg_value = None;
    let mut pl_mean = None;
    let total = if active {
        let factors = net.encoder.derivative_factors(&mut g, &sg.enc_trace);
        let sub: Vec<Option<Var>> = factors
            .iter()
            .map(|f| f.map(|f| g.gather(f, gated.clone())).transpose())
            .collect::<Result<_>>()?;
        let n = net.data_dim();
        let reg = match kind {
            RegularizerKind::Iso => {
                let radii = gated.iter().map(|&i| radius_at(sched, batch.t[i], n)).collect::<Result<_>>()?;
                let inputs = net.encoder_input(&xt.gather_rows(&gated), &gated.iter().map(|&i| batch.t[i]).collect::<Vec<_>>())?;
                let iso_batch = IsoBatch::chart(inputs, n, radii, cfg.metric);
                iso_term(&mut g, &net.encoder, &sg.enc_vars, &sub, &iso_batch, cfg, rng)?.loss
            }
            RegularizerKind::PathLength => {
                let (v, mean) = path_length_term(&mut g, &net.encoder, &sg.enc_vars, &sub, gated.len(), n, pl_state.a, rng)?;
                pl_mean = Some(mean);
                v
            }
            RegularizerKind::None => unreachable!(),
        };
        reg_value = Some(g.scalar(reg));
        let weighted = g.scale(reg, cfg.lambda_iso);
        g.add(dsm, weighted)?
    } else {
        dsm
    };
    let grads = g.backward(total);
    let mut flat = net.encoder.collect_grads(&grads, &sg.enc_vars).into_flat();
    flat.extend(net.decoder.collect_grads(&grads, &sg.dec_vars).into_flat());
    if let Some(mean) = pl_mean {
        pl_state.update(mean);
    }
    Ok(TotalLoss { total: g.scalar(total), dsm: g.scalar(dsm), reg: reg_value, grads: flat })
}
