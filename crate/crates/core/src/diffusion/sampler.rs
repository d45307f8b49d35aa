//! Deterministic DDIM sampling and inversion.

use super::schedule::{sub_schedule, NoiseSchedule};
use super::scorenet::EpsPredictor;
use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor;

/// Forward perturbation `sqrt(ab) x0 + sqrt(1 - ab) eps`.
pub fn perturb(x0: &Tensor, t: usize, eps: &Tensor, sched: &NoiseSchedule) -> Result<Tensor> {
    x0.check_same_shape(eps, "perturb")?;
    sched.check_timestep(t, false)?;
    let ab = sched.alpha_bar(t);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok(x0.zip_map(eps, |x, e| a * x + b * e))
}

/// Deterministic move of `x` from cumulative alpha `ab_from` to `ab_to`
/// given the predicted noise. Shared by sampling and inversion.
pub fn ddim_update(x: &Tensor, eps: &Tensor, ab_from: f64, ab_to: f64) -> Tensor {
    let scale = (ab_to / ab_from).sqrt();
    let coef = ab_to.sqrt() * ((1.0 / ab_to - 1.0).sqrt() - (1.0 / ab_from - 1.0).sqrt());
    x.zip_map(eps, |xv, ev| scale * xv + coef * ev)
}

pub fn ddim_step(
    net: &impl EpsPredictor,
    x_t: &Tensor,
    t: usize,
    t_prev: usize,
    sched: &NoiseSchedule,
) -> Result<Tensor> {
    if t_prev >= t {
        return Err(Error::InvalidArgument(format!("ddim_step needs t_prev < t, got {t_prev} >= {t}")));
    }
    sched.check_timestep(t, false)?;
    let pred = net.predict(x_t, t)?;
    if pred.eps.shape() != x_t.shape() {
        return shape_err(format!("predictor returned {:?} for {:?}", pred.eps.shape(), x_t.shape()));
    }
    Ok(ddim_update(x_t, &pred.eps, sched.alpha_bar(t), sched.alpha_bar(t_prev)))
}

/// States along a DDIM run and the features seen at each visited timestep.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    /// `(timestep, state)` in the order visited.
    pub states: Vec<(usize, Tensor)>,
    /// `(timestep, h_t)` for each network evaluation, in order.
    pub features: Vec<(usize, Tensor)>,
}

impl Trajectory {
    pub fn last(&self) -> &Tensor {
        &self.states.last().expect("nonempty trajectory").1
    }
}

/// Runs the sampler from `x_T` down to `t = 0`. `x_T` may hold several latents as rows.
pub fn ddim_sample(
    net: &impl EpsPredictor,
    x_t: &Tensor,
    num_steps: usize,
    sched: &NoiseSchedule,
) -> Result<Trajectory> {
    let taus = sub_schedule(sched.steps(), num_steps)?;
    run(net, x_t, taus.iter().rev().copied().collect(), sched)
}

/// Runs the sampler update forward in time, from `x_0` up to `t = T`.
pub fn ddim_invert(
    net: &impl EpsPredictor,
    x0: &Tensor,
    num_steps: usize,
    sched: &NoiseSchedule,
) -> Result<Trajectory> {
    let taus = sub_schedule(sched.steps(), num_steps)?;
    run(net, x0, taus, sched)
}

fn run(net: &impl EpsPredictor, start: &Tensor, taus: Vec<usize>, sched: &NoiseSchedule) -> Result<Trajectory> {
    if start.cols() != net.data_dim() {
        return shape_err(format!("latent width {} for data dimension {}", start.cols(), net.data_dim()));
    }
    let mut states = vec![(taus[0], start.clone())];
    let mut features = Vec::with_capacity(taus.len() - 1);
    let mut x = start.clone();
    for w in taus.windows(2) {
        let (from, to) = (w[0], w[1]);
        let pred = net.predict(&x, from)?;
        if pred.eps.shape() != x.shape() {
            return shape_err(format!("predictor returned {:?} for {:?}", pred.eps.shape(), x.shape()));
        }
        x = ddim_update(&x, &pred.eps, sched.alpha_bar(from), sched.alpha_bar(to));
        if let Some(h) = pred.features {
            features.push((from, h));
        }
        states.push((to, x.clone()));
    }
    Ok(Trajectory { states, features })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::scorenet::{Prediction, ScoreNet, ScoreNetSpec};
    use crate::diffcore::Activation;
    use crate::rng::{normal_vec, stream};

    struct Zero(usize);
    impl EpsPredictor for Zero {
        fn data_dim(&self) -> usize {
            self.0
        }
        fn predict(&self, x: &Tensor, _t: usize) -> Result<Prediction> {
            Ok(Prediction { eps: Tensor::zeros(x.shape()), features: None })
        }
    }

    /// Always predicts the same noise vector.
    struct Fixed(Tensor);
    impl EpsPredictor for Fixed {
        fn data_dim(&self) -> usize {
            self.0.cols()
        }
        fn predict(&self, _x: &Tensor, _t: usize) -> Result<Prediction> {
            Ok(Prediction { eps: self.0.clone(), features: Some(self.0.clone()) })
        }
    }

    fn sched() -> NoiseSchedule {
        NoiseSchedule::linear(1000, 1e-4, 0.02).unwrap()
    }

    fn randn(seed: u64, n: usize) -> Tensor {
        Tensor::vector(normal_vec(&mut stream(seed, "sampler-test"), n))
    }

    #[test]
    fn perturb_examples() {
        let s = sched();
        let x0 = randn(1, 5);
        let eps = randn(2, 5);
        let t = 400;
        let ab = s.alpha_bar(t);
        assert_eq!(perturb(&x0, t, &Tensor::zeros(&[5]), &s).unwrap(), x0.scale(ab.sqrt()));
        assert_eq!(perturb(&Tensor::zeros(&[5]), t, &eps, &s).unwrap(), eps.scale((1.0 - ab).sqrt()));
        assert!(perturb(&x0, 0, &eps, &s).is_err());
        assert!(perturb(&x0, 1001, &eps, &s).is_err());
        assert!(perturb(&x0, 3, &randn(3, 4), &s).is_err());
    }

    #[test]
    fn perturb_noise_variance() {
        let s = sched();
        let t = 300;
        let mut rng = stream(5, "variance");
        let x0 = randn(4, 3);
        let draws = 10_000;
        let mut acc = [0.0; 3];
        let mut acc2 = [0.0; 3];
        for _ in 0..draws {
            let eps = Tensor::vector(normal_vec(&mut rng, 3));
            let xt = perturb(&x0, t, &eps, &s).unwrap();
            for i in 0..3 {
                let d = xt.data()[i] - s.alpha_bar(t).sqrt() * x0.data()[i];
                acc[i] += d;
                acc2[i] += d * d;
            }
        }
        for i in 0..3 {
            let mean = acc[i] / draws as f64;
            let var = acc2[i] / draws as f64 - mean * mean;
            assert!((var / (1.0 - s.alpha_bar(t)) - 1.0).abs() < 0.05);
        }
    }

    #[test]
    fn zero_predictor_rescales() {
        let s = sched();
        let x = randn(6, 4);
        let y = ddim_step(&Zero(4), &x, 700, 350, &s).unwrap();
        let k = (s.alpha_bar(350) / s.alpha_bar(700)).sqrt();
        assert_eq!(y, x.scale(k));
        assert!(ddim_step(&Zero(4), &x, 350, 350, &s).is_err());
        assert!(ddim_step(&Zero(4), &x, 350, 700, &s).is_err());

        let inv = ddim_invert(&Zero(4), &x, 4, &s).unwrap();
        let k = s.alpha_bar(1000).sqrt();
        for (a, b) in inv.last().data().iter().zip(x.scale(k).data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn exact_predictor_inverts_perturbation_on_grid() {
        let s = sched();
        let x0 = randn(7, 6);
        let eps = randn(8, 6);
        let grid: Vec<usize> = (0..50).map(|i| i * 20).collect();
        let mut worst = 0.0f64;
        for &t in grid.iter().filter(|&&t| t > 0) {
            let xt = perturb(&x0, t, &eps, &s).unwrap();
            for &tp in grid.iter().filter(|&&tp| tp < t) {
                let got = ddim_step(&Fixed(eps.clone()), &xt, t, tp, &s).unwrap();
                let want = if tp == 0 { x0.clone() } else { perturb(&x0, tp, &eps, &s).unwrap() };
                worst = worst.max(got.sub(&want).data().iter().fold(0.0, |m, v| m.max(v.abs())));
            }
        }
        assert!(worst <= 1e-9, "worst {worst}");
    }

    #[test]
    fn invert_then_sample_is_identity_for_constant_predictor() {
        let s = sched();
        let x0 = randn(9, 5);
        let stub = Fixed(randn(10, 5));
        let inv = ddim_invert(&stub, &x0, 20, &s).unwrap();
        let back = ddim_sample(&stub, inv.last(), 20, &s).unwrap();
        for (a, b) in back.last().data().iter().zip(x0.data()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn trajectory_bookkeeping_and_determinism() {
        let s = sched();
        let spec = ScoreNetSpec {
            data_dim: 4,
            feature_dim: 2,
            hidden: vec![8],
            time_dim: 4,
            horizon: 1000,
            activation: Activation::Tanh,
        };
        let net = ScoreNet::init(1, &spec).unwrap();
        let xt = Tensor::matrix(3, 4, normal_vec(&mut stream(2, "x"), 12)).unwrap();
        let a = ddim_sample(&net, &xt, 20, &s).unwrap();
        let b = ddim_sample(&net, &xt, 20, &s).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.states.len(), 21);
        assert_eq!(a.features.len(), 20);
        assert_eq!(a.features[0].0, 1000);
        assert_eq!(a.features[19].0, 50);

        let one = ddim_sample(&net, &xt, 1, &s).unwrap();
        assert_eq!(one.last(), &ddim_step(&net, &xt, 1000, 0, &s).unwrap());
        assert!(ddim_sample(&net, &xt, 3, &s).is_err());

        let inv1 = ddim_invert(&net, &xt, 10, &s).unwrap();
        assert_eq!(inv1, ddim_invert(&net, &xt, 10, &s).unwrap());
    }
}
