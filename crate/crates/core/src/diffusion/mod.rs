//! DDPM forward process, denoising objective, and DDIM sampling/inversion.

mod sampler;
mod schedule;
mod scorenet;

pub use sampler::{ddim_invert, ddim_sample, ddim_step, ddim_update, perturb, Trajectory};
pub use schedule::{sub_schedule, time_features, NoiseSchedule};
pub use scorenet::{EpsPredictor, Prediction, ScoreNet, ScoreNetGraph, ScoreNetSpec};

use crate::diffcore::Graph;
use crate::error::{shape_err, Result};
use crate::tensor::Tensor;

/// Training rows: clean samples, their noise draws and timesteps.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub x0: Tensor,
    pub eps: Tensor,
    pub t: Vec<usize>,
}

impl Batch {
    pub fn new(x0: Tensor, eps: Tensor, t: Vec<usize>) -> Result<Self> {
        x0.check_same_shape(&eps, "batch noise")?;
        if x0.shape().len() != 2 || t.len() != x0.rows() || t.is_empty() {
            return shape_err(format!("batch of {:?} with {} timesteps", x0.shape(), t.len()));
        }
        Ok(Self { x0, eps, t })
    }

    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }

    /// Noisy rows `x_t`.
    pub fn noisy(&self, sched: &NoiseSchedule) -> Result<Tensor> {
        let mut out = self.x0.clone();
        for (i, &t) in self.t.iter().enumerate() {
            sched.check_timestep(t, false)?;
            let ab = sched.alpha_bar(t);
            let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
            let e = self.eps.row(i).to_vec();
            for (o, ev) in out.row_mut(i).iter_mut().zip(e) {
                *o = a * *o + b * ev;
            }
        }
        Ok(out)
    }
}

/// Denoising loss value and parameter gradients.
#[derive(Clone, Debug)]
pub struct LossAndGrads {
    pub loss: f64,
    pub grads: Vec<Tensor>,
}

/// Mean over rows of `|eps_hat(x_t, t) - eps|^2`, with gradients.
pub fn dsm_loss(net: &ScoreNet, batch: &Batch, sched: &NoiseSchedule) -> Result<LossAndGrads> {
    let xt = batch.noisy(sched)?;
    let mut g = Graph::new();
    let sg = net.forward_graph(&mut g, &xt, &batch.t)?;
    let loss = dsm_term(&mut g, &sg, &batch.eps)?;
    let grads = g.backward(loss);
    let mut flat = net.encoder.collect_grads(&grads, &sg.enc_vars).into_flat();
    flat.extend(net.decoder.collect_grads(&grads, &sg.dec_vars).into_flat());
    Ok(LossAndGrads { loss: g.scalar(loss), grads: flat })
}

pub(crate) fn dsm_term(g: &mut Graph, sg: &ScoreNetGraph, eps: &Tensor) -> Result<crate::diffcore::Var> {
    let target = g.constant(eps.clone());
    let diff = g.sub(sg.eps(), target)?;
    let sq = g.row_sum_sq(diff);
    Ok(g.mean(sq))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::{Activation, Mlp};
    use crate::rng::{normal_vec, stream};

    fn spec() -> ScoreNetSpec {
        ScoreNetSpec { data_dim: 5, feature_dim: 2, hidden: vec![6], time_dim: 4, horizon: 50, activation: Activation::Tanh }
    }

    fn batch(seed: u64, rows: usize) -> Batch {
        let mut rng = stream(seed, "batch");
        let x0 = Tensor::matrix(rows, 5, normal_vec(&mut rng, rows * 5)).unwrap();
        let eps = Tensor::matrix(rows, 5, normal_vec(&mut rng, rows * 5)).unwrap();
        Batch::new(x0, eps, (0..rows).map(|i| 1 + (i * 13) % 50).collect()).unwrap()
    }

    #[test]
    fn zero_decoder_gives_mean_noise_energy() {
        let s = NoiseSchedule::linear(50, 1e-3, 0.05).unwrap();
        let mut net = ScoreNet::init(1, &spec()).unwrap();
        let dec = &net.decoder;
        let zeros: Vec<Tensor> = dec.weights().iter().map(|w| Tensor::zeros(w.shape())).collect();
        let zb: Vec<Tensor> = dec.biases().iter().map(|b| Tensor::zeros(b.shape())).collect();
        net.decoder = Mlp::from_parts(zeros, zb, Activation::Tanh).unwrap();
        let b = batch(2, 8);
        let got = dsm_loss(&net, &b, &s).unwrap().loss;
        let want: f64 = (0..8).map(|i| b.eps.row(i).iter().map(|e| e * e).sum::<f64>()).sum::<f64>() / 8.0;
        assert!((got - want).abs() < 1e-12);
    }

    #[test]
    fn exact_decoder_gives_zero_loss() {
        // decoder emitting a constant equal to every row's noise
        let s = NoiseSchedule::linear(50, 1e-3, 0.05).unwrap();
        let mut net = ScoreNet::init(1, &spec()).unwrap();
        let eps_row = vec![0.5, -1.0, 0.25, 2.0, -0.75];
        let dec = &net.decoder;
        let mut ws: Vec<Tensor> = dec.weights().to_vec();
        let mut bs: Vec<Tensor> = dec.biases().to_vec();
        let last = ws.len() - 1;
        ws[last] = Tensor::zeros(ws[last].shape());
        bs[last] = Tensor::vector(eps_row.clone());
        net.decoder = Mlp::from_parts(ws, bs, Activation::Tanh).unwrap();
        let mut b = batch(3, 4);
        b.eps = Tensor::from_rows(&vec![eps_row; 4]).unwrap();
        assert_eq!(dsm_loss(&net, &b, &s).unwrap().loss, 0.0);
    }

    #[test]
    fn dsm_gradient_matches_finite_differences() {
        let s = NoiseSchedule::linear(50, 1e-3, 0.05).unwrap();
        let net = ScoreNet::init(4, &spec()).unwrap();
        let b = batch(5, 6);
        let an = dsm_loss(&net, &b, &s).unwrap().grads;
        let h = 1e-6;
        for (pi, ga) in an.iter().enumerate() {
            for k in (0..ga.len()).step_by(3) {
                let mut p = net.clone();
                p.params_mut()[pi].data_mut()[k] += h;
                let mut m = net.clone();
                m.params_mut()[pi].data_mut()[k] -= h;
                let fd = (dsm_loss(&p, &b, &s).unwrap().loss - dsm_loss(&m, &b, &s).unwrap().loss) / (2.0 * h);
                let a = ga.data()[k];
                assert!((fd - a).abs() <= 1e-4 * fd.abs().max(1e-3), "param {pi}[{k}]: {fd} vs {a}");
            }
        }
    }
}
