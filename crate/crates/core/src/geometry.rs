//! Hypersphere model of the noise latent space.
//!
//! Latents at a noisy timestep concentrate near a sphere of radius
//! `sqrt((1 - alpha_bar_t) n)`. The sphere is charted by an r-scaled
//! stereographic projection from the north pole `(0, .., 0, r)`:
//!
//! ```text
//! z     = r x_{1..n-1} / (r - x_n)
//! x     = r / (|z|^2 + r^2) * (2 r z, |z|^2 - r^2)
//! G(z)  = 4 r^4 / (|z|^2 + r^2)^2 * I
//! ```
//!
//! With this scaling the conformal factor above is exactly the pullback of
//! the ambient metric through the inverse chart.

use crate::diffusion::NoiseSchedule;
use crate::error::{shape_err, Error, Result};
use crate::tensor::{dot, Tensor};

/// Distance (relative to `r`) from the north pole below which projection is refused.
pub const POLE_TOLERANCE: f64 = 1e-9;

/// Below this angle slerp falls back to normalized lerp.
pub const SLERP_SMALL_ANGLE: f64 = 1e-7;

/// Mean of the chi distribution with `n` degrees of freedom, in the
/// `sqrt(n - 1/2)` approximation.
pub fn chi_mean_radius(n: usize) -> Result<f64> {
    if n < 1 {
        return Err(Error::InvalidArgument("chi radius needs n >= 1".into()));
    }
    Ok((n as f64 - 0.5).sqrt())
}

/// Radius of the sphere approximating the latents at timestep `t`.
pub fn radius_at(schedule: &NoiseSchedule, t: usize, n: usize) -> Result<f64> {
    if t < 1 || t > schedule.steps() {
        return Err(Error::InvalidArgument(format!(
            "timestep {t} outside [1, {}]",
            schedule.steps()
        )));
    }
    Ok(((1.0 - schedule.alpha_bar(t)) * n as f64).sqrt())
}

/// Stereographic chart of `S^{n-1}(r)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SphereChart {
    n: usize,
    r: f64,
}

impl SphereChart {
    pub fn new(n: usize, r: f64) -> Result<Self> {
        if n < 2 {
            return Err(Error::Config(format!("sphere ambient dimension {n} < 2")));
        }
        if !(r > 0.0 && r.is_finite()) {
            return Err(Error::Config(format!("sphere radius {r} must be positive")));
        }
        Ok(Self { n, r })
    }

    pub fn ambient_dim(&self) -> usize {
        self.n
    }

    pub fn chart_dim(&self) -> usize {
        self.n - 1
    }

    pub fn radius(&self) -> f64 {
        self.r
    }

    pub fn project(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.n {
            return shape_err(format!("project: point of length {} on S^{}", x.len(), self.n - 1));
        }
        project_raw(x, self.r)
    }

    pub fn unproject(&self, z: &[f64]) -> Result<Vec<f64>> {
        self.check_chart(z, "unproject")?;
        Ok(unproject_raw(z, self.r))
    }

    /// Conformal factor `g` with `G(z) = g I`.
    pub fn metric_scalar(&self, z: &[f64]) -> Result<f64> {
        self.check_chart(z, "metric_scalar")?;
        Ok(metric_scalar_raw(z, self.r))
    }

    /// Directional derivative of the inverse chart at `z` along `v`.
    pub fn unproject_jvp(&self, z: &[f64], v: &[f64]) -> Result<Vec<f64>> {
        self.check_chart(z, "unproject_jvp")?;
        if v.len() != z.len() {
            return shape_err(format!("unproject_jvp: tangent {} vs point {}", v.len(), z.len()));
        }
        Ok(unproject_jvp_raw(z, self.r, v))
    }

    /// Adjoint of [`Self::unproject_jvp`]: maps an ambient covector back to the chart.
    pub fn unproject_vjp(&self, z: &[f64], y: &[f64]) -> Result<Vec<f64>> {
        self.check_chart(z, "unproject_vjp")?;
        if y.len() != self.n {
            return shape_err(format!("unproject_vjp: covector {} vs ambient {}", y.len(), self.n));
        }
        Ok(unproject_vjp_raw(z, self.r, y))
    }

    /// Dense `n x (n-1)` Jacobian of the inverse chart.
    pub fn unproject_jacobian(&self, z: &[f64]) -> Result<Tensor> {
        self.check_chart(z, "unproject_jacobian")?;
        let d = self.n - 1;
        let mut jac = Tensor::zeros(&[self.n, d]);
        let mut e = vec![0.0; d];
        for k in 0..d {
            e[k] = 1.0;
            let col = unproject_jvp_raw(z, self.r, &e);
            for (i, c) in col.iter().enumerate() {
                jac.set(i, k, *c);
            }
            e[k] = 0.0;
        }
        Ok(jac)
    }

    fn check_chart(&self, z: &[f64], what: &str) -> Result<()> {
        if z.len() != self.n - 1 {
            return shape_err(format!("{what}: chart point of length {}, expected {}", z.len(), self.n - 1));
        }
        Ok(())
    }
}

pub(crate) fn project_raw(x: &[f64], r: f64) -> Result<Vec<f64>> {
    let xn = x[x.len() - 1];
    let denom = r - xn;
    if denom.abs() <= POLE_TOLERANCE * r {
        return Err(Error::NorthPole { xn, r, tol: POLE_TOLERANCE * r });
    }
    let s = r / denom;
    Ok(x[..x.len() - 1].iter().map(|&xi| s * xi).collect())
}

pub(crate) fn unproject_raw(z: &[f64], r: f64) -> Vec<f64> {
    let zz = dot(z, z);
    let s = r / (zz + r * r);
    let mut x: Vec<f64> = z.iter().map(|&zi| 2.0 * r * s * zi).collect();
    x.push(s * (zz - r * r));
    x
}

pub(crate) fn metric_scalar_raw(z: &[f64], r: f64) -> f64 {
    let s = dot(z, z) + r * r;
    4.0 * r.powi(4) / (s * s)
}

pub(crate) fn unproject_jvp_raw(z: &[f64], r: f64, v: &[f64]) -> Vec<f64> {
    let s = dot(z, z) + r * r;
    let a = dot(z, v);
    let c1 = 2.0 * r * r / s;
    let c2 = 4.0 * r * r * a / (s * s);
    let mut out: Vec<f64> = z.iter().zip(v).map(|(&zi, &vi)| c1 * vi - c2 * zi).collect();
    out.push(4.0 * r.powi(3) * a / (s * s));
    out
}

pub(crate) fn unproject_vjp_raw(z: &[f64], r: f64, y: &[f64]) -> Vec<f64> {
    let d = z.len();
    let s = dot(z, z) + r * r;
    let (yz, yn) = (&y[..d], y[d]);
    let c1 = 2.0 * r * r / s;
    let c2 = (4.0 * r * r * dot(z, yz) - 4.0 * r.powi(3) * yn) / (s * s);
    z.iter().zip(yz).map(|(&zi, &yi)| c1 * yi - c2 * zi).collect()
}

/// Linear interpolation `(1 - s) a + s b`.
pub fn lerp(a: &[f64], b: &[f64], s: f64) -> Result<Vec<f64>> {
    if a.len() != b.len() {
        return shape_err(format!("lerp: {} vs {}", a.len(), b.len()));
    }
    Ok(a.iter().zip(b).map(|(&x, &y)| (1.0 - s) * x + s * y).collect())
}

/// Great-circle interpolation between `a` and `b`.
///
/// Equal-norm endpoints stay on their common sphere. Nearly parallel
/// endpoints fall back to lerp rescaled to the interpolated norm.
pub fn slerp(a: &[f64], b: &[f64], s: f64) -> Result<Vec<f64>> {
    if a.len() != b.len() {
        return shape_err(format!("slerp: {} vs {}", a.len(), b.len()));
    }
    let (na, nb) = (dot(a, a).sqrt(), dot(b, b).sqrt());
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Degenerate("slerp of a zero vector".into()));
    }
    let cos = (dot(a, b) / (na * nb)).clamp(-1.0, 1.0);
    let theta = cos.acos();
    if theta > std::f64::consts::PI - 1e-6 {
        return Err(Error::Degenerate(format!("slerp of antipodal pair (angle {theta})")));
    }
    if theta < SLERP_SMALL_ANGLE {
        let mut out = lerp(a, b, s)?;
        let norm = dot(&out, &out).sqrt();
        let target = (1.0 - s) * na + s * nb;
        out.iter_mut().for_each(|v| *v *= target / norm);
        return Ok(out);
    }
    let sin = theta.sin();
    let (wa, wb) = (((1.0 - s) * theta).sin() / sin, (s * theta).sin() / sin);
    Ok(a.iter().zip(b).map(|(&x, &y)| wa * x + wb * y).collect())
}

/// Angle between two nonzero vectors.
pub fn angle(a: &[f64], b: &[f64]) -> f64 {
    let c = dot(a, b) / (dot(a, a).sqrt() * dot(b, b).sqrt());
    c.clamp(-1.0, 1.0).acos()
}
