use super::{Rng, Tensor};
use crate::error::Result;

/// Seed of the start vector used when no warm start is supplied.
pub const START_SEED: u64 = 0x005e_ed0f_5eed;
pub const DEFAULT_ITERS: usize = 50;
pub const DEFAULT_TOL: f64 = 1e-9;

/// Outcome of a power iteration on `AᵀA`.
#[derive(Clone, Debug)]
pub struct PowerIteration {
    /// Estimate of the largest singular value after the last iteration.
    pub sigma: f64,
    /// Right singular vector estimate, unit norm.
    pub vector: Vec<f64>,
    /// Estimate after each iteration; nondecreasing.
    pub history: Vec<f64>,
    pub converged: bool,
}

/// Power-iteration estimate of the largest singular value of a matrix,
/// started from a fixed seeded vector.
///
/// Each iterate `‖A v_k‖` is a lower bound on `σ_max(A)` and the sequence is
/// nondecreasing. Stops after `iters` iterations or once successive
/// estimates differ by less than `tol` (relative to `max(1, σ)`).
pub fn spectral_norm_estimate(a: &Tensor, iters: usize, tol: f64) -> Result<f64> {
    let (_, n) = a.dims2("spectral_norm_estimate")?;
    let start = Rng::new(START_SEED).normal_vec(n);
    Ok(spectral_norm_from(a, &start, iters, tol)?.sigma)
}

/// Power iteration from an explicit start vector (warm start).
pub fn spectral_norm_from(a: &Tensor, start: &[f64], iters: usize, tol: f64) -> Result<PowerIteration> {
    let (_, n) = a.dims2("spectral_norm_from")?;
    assert!(iters >= 1, "power iteration needs at least one iteration");
    assert_eq!(start.len(), n, "start vector length must equal column count");

    if a.data().iter().all(|&x| x == 0.0) {
        return Ok(PowerIteration {
            sigma: 0.0,
            vector: normalized(start).unwrap_or_else(|| unit(n)),
            history: vec![0.0],
            converged: true,
        });
    }

    let mut v = normalized(start).unwrap_or_else(|| unit(n));
    let mut history = Vec::with_capacity(iters);
    let mut best = 0.0_f64;
    let mut converged = false;
    let mut reseed = Rng::new(START_SEED ^ 0xa5a5);

    for _ in 0..iters {
        let u = a.matvec(&v);
        let sigma = norm(&u);
        let w = a.t_matvec(&u);
        let prev = best;
        // Rounding can wiggle the last ulp; the running max keeps the
        // reported sequence monotone.
        best = best.max(sigma);
        history.push(best);
        match normalized(&w) {
            Some(next) => v = next,
            None => {
                // start vector fell into the null space
                v = normalized(&reseed.normal_vec(n)).unwrap_or_else(|| unit(n));
                continue;
            }
        }
        if history.len() > 1 && (best - prev).abs() < tol * best.max(1.0) {
            converged = true;
            break;
        }
    }

    Ok(PowerIteration { sigma: best, vector: v, history, converged })
}

/// Xavier/Glorot Gaussian initialisation: entries i.i.d. `N(0, 1/n)` for an
/// `m×n` matrix.
pub fn xavier_init(rng: &mut Rng, m: usize, n: usize) -> Tensor {
    assert!(m >= 1 && n >= 1);
    let std = (1.0 / n as f64).sqrt();
    Tensor::from_fn(&[m, n], |_| rng.normal() * std)
}

fn norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

fn normalized(x: &[f64]) -> Option<Vec<f64>> {
    let n = norm(x);
    (n > 0.0 && n.is_finite()).then(|| x.iter().map(|v| v / n).collect())
}

fn unit(n: usize) -> Vec<f64> {
    let mut e = vec![0.0; n];
    e[0] = 1.0;
    e
}
