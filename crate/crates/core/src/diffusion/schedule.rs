use crate::error::{Error, Result};

/// Discrete DDPM noise schedule over timesteps `1..=T`, with `alpha_bar(0) = 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    /// `beta_t` ramps linearly from `beta_start` at `t = 1` to `beta_end` at `t = T`.
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps < 1 {
            return Err(Error::Config("schedule needs T >= 1".into()));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::Config(format!(
                "need 0 < beta_start <= beta_end < 1, got [{beta_start}, {beta_end}]"
            )));
        }
        let betas: Vec<f64> = if steps == 1 {
            vec![beta_end]
        } else {
            (0..steps)
                .map(|i| beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64)
                .collect()
        };
        Self::from_betas(betas)
    }

    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() || betas.iter().any(|&b| !(b > 0.0 && b < 1.0)) {
            return Err(Error::Config("betas must lie in (0, 1)".into()));
        }
        let mut alpha_bars = Vec::with_capacity(betas.len() + 1);
        alpha_bars.push(1.0);
        let mut acc = 1.0;
        for b in &betas {
            acc *= 1.0 - b;
            alpha_bars.push(acc);
        }
        Ok(Self { betas, alpha_bars })
    }

    /// Number of diffusion timesteps `T`.
    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        1.0 - self.betas[t - 1]
    }

    /// Cumulative product of alphas; `alpha_bar(0) == 1`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t]
    }

    pub(crate) fn check_timestep(&self, t: usize, allow_zero: bool) -> Result<()> {
        let lo = usize::from(!allow_zero);
        if t < lo || t > self.steps() {
            return Err(Error::InvalidArgument(format!("timestep {t} outside [{lo}, {}]", self.steps())));
        }
        Ok(())
    }
}

/// Uniform sub-schedule `0 = tau_0 < .. < tau_S = T`.
pub fn sub_schedule(horizon: usize, num_steps: usize) -> Result<Vec<usize>> {
    if num_steps == 0 || num_steps > horizon || horizon % num_steps != 0 {
        return Err(Error::InvalidArgument(format!(
            "{num_steps} DDIM steps do not divide T = {horizon} uniformly"
        )));
    }
    let stride = horizon / num_steps;
    Ok((0..=num_steps).map(|i| i * stride).collect())
}

/// Time conditioning: `t/T` followed by `sin, cos` of `2^k pi t/T`,
/// truncated to `dim` entries.
pub fn time_features(t: usize, horizon: usize, dim: usize) -> Result<Vec<f64>> {
    if dim < 2 || dim % 2 != 0 {
        return Err(Error::Config(format!("time feature dimension {dim} must be even and >= 2")));
    }
    let s = t as f64 / horizon as f64;
    let mut out = Vec::with_capacity(dim + 1);
    out.push(s);
    for k in 0..dim / 2 {
        let arg = f64::from(1u32 << k) * std::f64::consts::PI * s;
        out.push(arg.sin());
        out.push(arg.cos());
    }
    out.truncate(dim);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_step_schedule() {
        let s = NoiseSchedule::linear(1, 0.1, 0.3).unwrap();
        assert_eq!(s.beta(1), 0.3);
        assert_eq!(s.alpha_bar(1), 1.0 - 0.3);
        assert_eq!(s.alpha_bar(0), 1.0);
    }

    #[test]
    fn default_schedule_terminal_alpha_bar() {
        let s = NoiseSchedule::linear(1000, 1e-4, 0.02).unwrap();
        // independent oracle: direct product over the ramp
        let mut prod = 1.0f64;
        for i in 0..1000 {
            prod *= 1.0 - (1e-4 + (0.02 - 1e-4) * i as f64 / 999.0);
        }
        assert!((s.alpha_bar(1000) - prod).abs() < 1e-12);
        assert!((s.alpha_bar(1000) - 4.04e-5).abs() < 0.01e-5, "{}", s.alpha_bar(1000));
        for t in 1..=1000 {
            assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
            assert!(s.alpha_bar(t) > 0.0);
        }
    }

    #[test]
    fn invalid_schedules() {
        assert!(NoiseSchedule::linear(0, 1e-4, 0.02).is_err());
        assert!(NoiseSchedule::linear(10, 0.0, 0.02).is_err());
        assert!(NoiseSchedule::linear(10, 0.03, 0.02).is_err());
        assert!(NoiseSchedule::linear(10, 1e-4, 1.0).is_err());
    }

    #[test]
    fn sub_schedule_endpoints() {
        assert_eq!(sub_schedule(1000, 1).unwrap(), vec![0, 1000]);
        let s = sub_schedule(1000, 20).unwrap();
        assert_eq!(s.len(), 21);
        assert_eq!((s[0], s[20], s[1]), (0, 1000, 50));
        assert!(sub_schedule(1000, 0).is_err());
        assert!(sub_schedule(1000, 7).is_err());
        assert!(sub_schedule(10, 20).is_err());
    }

    #[test]
    fn time_feature_examples() {
        let f0 = time_features(0, 1000, 8).unwrap();
        assert_eq!(f0.len(), 8);
        assert_eq!(f0[0], 0.0);
        for k in 0..4 {
            assert_eq!(f0[1 + 2 * k], 0.0);
            if 2 + 2 * k < 8 {
                assert_eq!(f0[2 + 2 * k], 1.0);
            }
        }
        assert_eq!(time_features(1000, 1000, 4).unwrap()[0], 1.0);
        assert!(time_features(5, 10, 3).is_err());
        assert!(time_features(5, 10, 0).is_err());
    }

    #[test]
    fn time_features_are_injective() {
        for dim in [4, 8] {
            let mut seen: Vec<Vec<f64>> = (0..=1000).map(|t| time_features(t, 1000, dim).unwrap()).collect();
            seen.sort_by(|a, b| a.partial_cmp(b).unwrap());
            assert!(seen.windows(2).all(|w| w[0] != w[1]));
        }
    }
}
