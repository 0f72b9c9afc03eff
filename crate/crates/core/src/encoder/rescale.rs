use serde::{Deserialize, Serialize};

use super::EncoderBlock;
use crate::error::{Error, Result};
use crate::lipschitz;
use crate::tensor::{spectral_norm_from, Rng, START_SEED};

pub const PROJECTION_ITERS: usize = 500;
pub const PROJECTION_TOL: f64 = 1e-12;

/// Effort spent estimating a frozen block's Lipschitz constant.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeBudget {
    pub pairs: usize,
    pub power_iters: usize,
}

impl Default for ProbeBudget {
    fn default() -> Self {
        Self { pairs: 256, power_iters: 30 }
    }
}

/// `γ = 1 / max(1, L̂)`: expansive maps are scaled down to unit Lipschitz
/// constant, contractions are left alone.
pub fn gamma_for(estimate: f64) -> f64 {
    1.0 / estimate.max(1.0)
}

/// `(L̂, γ)` for any map on `shape`-sized inputs.
pub fn fit_gamma(
    f: &impl lipschitz::DiffMap,
    shape: &[usize],
    budget: ProbeBudget,
    rng: &mut Rng,
) -> Result<(f64, f64)> {
    let estimate = lipschitz::estimate(f, shape, budget.pairs.max(1), budget.power_iters, rng)?;
    Ok((estimate, gamma_for(estimate)))
}

/// Fits `γ = 1 / max(1, L̂)` for a frozen block acting on `[n_tokens,
/// d_model]` inputs and returns `L̂`, the estimate for the unscaled block.
///
/// Layer-norm gains are first clipped to `[-1, 1]` so the fitted scale
/// cannot be undone by the affine part of the norms.
pub fn rescale_frozen_block(
    block: &mut EncoderBlock,
    n_tokens: usize,
    budget: ProbeBudget,
    rng: &mut Rng,
) -> Result<f64> {
    if !block.frozen {
        return Err(Error::Contract("rescale_frozen_block called on a trainable block".into()));
    }
    for gain in [&mut block.ln1_gain, &mut block.ln2_gain] {
        for v in gain.data_mut() {
            *v = v.clamp(-1.0, 1.0);
        }
    }
    block.gamma = 1.0;
    let shape = [n_tokens, block.config.d_model];
    let (estimate, gamma) = fit_gamma(&*block, &shape, budget, rng)?;
    block.gamma = gamma;
    block.rescaled = true;
    Ok(estimate)
}

/// Outcome of one spectral projection pass.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Projection {
    /// Matrices that were divided by their norm.
    pub scaled: usize,
    /// Largest norm estimate seen before projection.
    pub max_sigma: f64,
}

/// Divides every weight matrix with estimated spectral norm above one by
/// that estimate. Power iterations are warm-started from the previous
/// call's singular vectors, so repeated projection during training is cheap.
pub fn project_spectral(block: &mut EncoderBlock) -> Result<Projection> {
    if block.frozen {
        return Err(Error::Contract("project_spectral called on a frozen block".into()));
    }
    let mut starts = std::mem::take(&mut block.power_vectors);
    starts.resize(6, Vec::new());
    let mut report = Projection::default();
    for (w, start) in block.weight_matrices_mut().into_iter().zip(starts.iter_mut()) {
        let n = w.shape()[1];
        if start.len() != n {
            *start = Rng::new(START_SEED).normal_vec(n);
        }
        let run = spectral_norm_from(w, start, PROJECTION_ITERS, PROJECTION_TOL)?;
        *start = run.vector;
        report.max_sigma = report.max_sigma.max(run.sigma);
        if run.sigma > 1.0 {
            let s = 1.0 / run.sigma;
            w.data_mut().iter_mut().for_each(|v| *v *= s);
            report.scaled += 1;
        }
    }
    block.power_vectors = starts;
    Ok(report)
}
