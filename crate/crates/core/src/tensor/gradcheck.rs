//! Central finite-difference checks for reverse-mode gradients.
//!
//! A probe is a random unit direction `u`; the check compares the analytic
//! directional derivative `⟨∇f, u⟩` against `(f(x + hu) − f(x − hu)) / 2h`.
//! Only forward evaluations of `f` are used, so the oracle is independent of
//! the backward sweep it certifies.

use super::{Rng, Tensor};
use crate::error::Result;

pub const DEFAULT_STEP: f64 = 1e-5;

/// Denominator floor for relative errors, so that an exactly-zero
/// directional derivative is compared in absolute terms.
pub const REL_FLOOR: f64 = 1e-8;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub probes: usize,
    pub max_rel_err: f64,
    /// `(analytic, numeric)` directional derivatives at the worst probe.
    pub worst: (f64, f64),
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err <= tol
    }
}

pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_FLOOR)
}

/// Central difference of `f` at `x` along `direction`.
pub fn directional_difference(
    f: &mut impl FnMut(&Tensor) -> Result<f64>,
    x: &Tensor,
    direction: &[f64],
    step: f64,
) -> Result<f64> {
    let shifted = |sign: f64| {
        let mut y = x.clone();
        for (v, d) in y.data_mut().iter_mut().zip(direction) {
            *v += sign * step * d;
        }
        y
    };
    let plus = f(&shifted(1.0))?;
    let minus = f(&shifted(-1.0))?;
    Ok((plus - minus) / (2.0 * step))
}

/// Full central-difference gradient, one coordinate at a time.
pub fn numeric_gradient(f: &mut impl FnMut(&Tensor) -> Result<f64>, x: &Tensor, step: f64) -> Result<Tensor> {
    let mut g = Tensor::zeros(x.shape());
    let mut e = vec![0.0; x.numel()];
    for i in 0..x.numel() {
        e[i] = 1.0;
        g.data_mut()[i] = directional_difference(f, x, &e, step)?;
        e[i] = 0.0;
    }
    Ok(g)
}

/// Compares an analytic gradient against central differences along
/// `probes` random unit directions.
pub fn check_directional(
    f: &mut impl FnMut(&Tensor) -> Result<f64>,
    x: &Tensor,
    analytic: &Tensor,
    probes: usize,
    step: f64,
    rng: &mut Rng,
) -> Result<GradCheckReport> {
    assert_eq!(x.shape(), analytic.shape(), "gradient shape must match input");
    let mut report = GradCheckReport { probes, max_rel_err: 0.0, worst: (0.0, 0.0) };
    for _ in 0..probes {
        let mut u = rng.normal_vec(x.numel());
        let n = u.iter().map(|v| v * v).sum::<f64>().sqrt();
        u.iter_mut().for_each(|v| *v /= n);
        let a: f64 = analytic.data().iter().zip(&u).map(|(g, d)| g * d).sum();
        let b = directional_difference(f, x, &u, step)?;
        let err = relative_error(a, b);
        if err >= report.max_rel_err {
            report.max_rel_err = err;
            report.worst = (a, b);
        }
    }
    Ok(report)
}
