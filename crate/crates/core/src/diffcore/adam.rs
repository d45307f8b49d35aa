use crate::error::{shape_err, Result};
use crate::tensor::Tensor;

/// Adam moments and hyperparameters.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl AdamState {
    pub fn new(shapes: &[&Tensor], lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: shapes.iter().map(|t| Tensor::zeros(t.shape())).collect(),
            v: shapes.iter().map(|t| Tensor::zeros(t.shape())).collect(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One bias-corrected Adam update.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Tensor]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return shape_err(format!(
                "adam: {} params, {} grads, state for {}",
                params.len(),
                grads.len(),
                self.m.len()
            ));
        }
        for ((p, g), m) in params.iter().zip(grads).zip(&self.m) {
            if p.shape() != g.shape() || p.shape() != m.shape() {
                return shape_err(format!("adam: param {:?} grad {:?}", p.shape(), g.shape()));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            for (((pi, &gi), mi), vi) in
                p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut())
            {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *pi -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_grads_leave_params_unchanged() {
        let mut p = Tensor::vector(vec![1.0, -2.0]);
        let mut st = AdamState::new(&[&p], 1e-2);
        let before = p.clone();
        for _ in 0..10 {
            st.step(&mut [&mut p], &[Tensor::zeros(&[2])]).unwrap();
        }
        assert_eq!(p, before);
        assert_eq!(st.steps(), 10);
    }

    #[test]
    fn constant_gradient_descends_monotonically() {
        let mut p = Tensor::scalar(0.0);
        let mut st = AdamState::new(&[&p], 1e-3);
        let mut last = p.data()[0];
        for _ in 0..100 {
            st.step(&mut [&mut p], &[Tensor::scalar(0.7)]).unwrap();
            assert!(p.data()[0] < last);
            last = p.data()[0];
        }
    }

    #[test]
    fn quadratic_bowl_converges() {
        let mut w = Tensor::vector(vec![1.0; 5]);
        let mut st = AdamState::new(&[&w], 1e-2);
        for _ in 0..2000 {
            let g = w.scale(2.0);
            st.step(&mut [&mut w], &[g]).unwrap();
        }
        assert!(w.norm() < 1e-3, "{}", w.norm());
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut p = Tensor::vector(vec![1.0, 2.0]);
        let mut st = AdamState::new(&[&p], 1e-2);
        assert!(st.step(&mut [&mut p], &[Tensor::zeros(&[3])]).is_err());
        assert!(st.step(&mut [&mut p], &[]).is_err());
    }
}
