//! Forgetting and non-expansiveness audits: the closed-form contraction
//! factor and receptive field, twin-trajectory experiments on reservoirs,
//! and empirical Lipschitz and gradient-norm checks on encoder maps.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lipschitz::{max_pair_ratio, DiffMap};
use crate::reservoir::{build_reservoir_expansive, reservoir_step, ReservoirConfig};
use crate::tensor::{spectral_norm_estimate, Rng, SeedTree, Tensor};

/// Relative slack when comparing a measured divergence against its bound,
/// covering rounding in the recurrence and in `κ^τ`.
pub const BOUND_RTOL: f64 = 1e-9;

/// Absolute slack for the same comparison. Twin states in `[-1, 1]^N`
/// that agree to the last bit or two stop contracting, while `C·κ^τ`
/// keeps decaying towards zero; this is that round-off floor.
pub const BOUND_ATOL: f64 = 1e-14;

/// `κ = (1 − λ) + λ·α·L_φ`.
pub fn compute_kappa(alpha: f64, lambda: f64, l_phi: f64) -> f64 {
    (1.0 - lambda) + lambda * alpha * l_phi
}

pub fn has_forgetting_guarantee(kappa: f64) -> bool {
    kappa < 1.0
}

/// Steps after which a perturbation of size `C` has provably decayed below
/// `eps`: `⌈log(ε/C) / log κ⌉`, or zero when `ε ≥ C`.
pub fn effective_receptive_field(eps: f64, c: f64, kappa: f64) -> Result<usize> {
    if !(eps > 0.0 && c > 0.0) {
        return Err(Error::config("epsilon", "epsilon and C must be positive"));
    }
    if !has_forgetting_guarantee(kappa) {
        return Err(Error::NoForgetting { kappa });
    }
    if eps >= c {
        return Ok(0);
    }
    if kappa <= 0.0 {
        return Ok(1);
    }
    let x = (eps / c).ln() / kappa.ln();
    // an exact integer quotient must not be bumped up by rounding
    let k = x.ceil();
    let k = if k - x > 1.0 - 1e-12 { k - 1.0 } else { k };
    Ok(k as usize)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MemoryBound {
    pub kappa: f64,
    pub c: f64,
    pub epsilon: f64,
    pub l_eff: usize,
}

impl MemoryBound {
    pub fn new(alpha: f64, lambda: f64, l_phi: f64, c: f64, epsilon: f64) -> Result<Self> {
        let kappa = compute_kappa(alpha, lambda, l_phi);
        Ok(Self { kappa, c, epsilon, l_eff: effective_receptive_field(epsilon, c, kappa)? })
    }
}

/// State divergence of one twin run and its bound `C·κ^τ`, lag by lag.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForgettingCurve {
    pub seed: u64,
    pub kappa: f64,
    pub c: f64,
    pub taus: Vec<usize>,
    pub divergences: Vec<f64>,
    pub bound: Vec<f64>,
}

impl ForgettingCurve {
    pub fn violations(&self) -> usize {
        self.divergences.iter().zip(&self.bound).filter(|(d, b)| **d > **b * (1.0 + BOUND_RTOL) + BOUND_ATOL).count()
    }

    /// Largest `divergence − bound`; non-positive when the bound holds.
    pub fn max_violation(&self) -> f64 {
        self.divergences.iter().zip(&self.bound).map(|(d, b)| d - b).fold(f64::NEG_INFINITY, f64::max)
    }

    /// `max divergence/bound`, how close the run came to its bound.
    pub fn tightness(&self) -> f64 {
        self.divergences.iter().zip(&self.bound).filter(|(_, b)| **b > 0.0).map(|(d, b)| d / b).fold(0.0, f64::max)
    }

    /// First lag whose divergence is at most `eps`.
    pub fn first_crossing(&self, eps: f64) -> Option<usize> {
        self.taus.iter().zip(&self.divergences).find(|(_, d)| **d <= eps).map(|(t, _)| *t)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_io(path, e))?;
        w.write_record(["tau", "divergence", "bound"]).map_err(|e| csv_io(path, e))?;
        for ((t, d), b) in self.taus.iter().zip(&self.divergences).zip(&self.bound) {
            w.write_record([t.to_string(), crate::data::format_f64(*d), crate::data::format_f64(*b)])
                .map_err(|e| csv_io(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

fn csv_io(path: &Path, e: csv::Error) -> Error {
    Error::io(path, std::io::Error::other(e.to_string()))
}

/// Twin-trajectory setup beyond the reservoir itself.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TwinSetup {
    pub input_dim: usize,
    pub perturb_mag: f64,
    pub t_max: usize,
}

/// Drives two copies of the reservoir seeded by `seed` from a zero state
/// with the same Gaussian input stream, except that the first input of the
/// second copy is shifted by a random vector of norm `perturb_mag`. Lag
/// `τ` is the number of steps after the perturbed one. Configurations
/// with `κ ≥ 1` are accepted; their bound simply does not decay.
pub fn twin_trajectory(cfg: &ReservoirConfig, setup: TwinSetup, seed: u64) -> Result<ForgettingCurve> {
    if setup.t_max == 0 {
        return Err(Error::config("t_max", "must be at least 1"));
    }
    let cfg = ReservoirConfig { seed, ..*cfg };
    let mut a = build_reservoir_expansive(&cfg, setup.input_dim, 1)?;
    let mut b = a.clone();
    let w_in_norm = spectral_norm_estimate(&a.w_in, 5000, 0.0)?;
    let c = cfg.leak * w_in_norm * setup.perturb_mag;
    let kappa = compute_kappa(cfg.alpha, cfg.leak, cfg.activation.lipschitz());

    let mut inputs = SeedTree::new(seed).rng("inputs");
    let dim = setup.input_dim;
    let mut curve = ForgettingCurve { seed, kappa, c, taus: Vec::new(), divergences: Vec::new(), bound: Vec::new() };
    for step in 0..=setup.t_max {
        let z = Tensor::new(vec![dim], inputs.normal_vec(dim))?;
        let z2 = if step == 0 {
            let mut u = inputs.normal_vec(dim);
            let n = u.iter().map(|v| v * v).sum::<f64>().sqrt();
            u.iter_mut().for_each(|v| *v *= setup.perturb_mag / n);
            z.add(&Tensor::new(vec![dim], u)?)?
        } else {
            z.clone()
        };
        let ha = reservoir_step(&mut a, &z)?.to_vec();
        let hb = reservoir_step(&mut b, &z2)?;
        let d = ha.iter().zip(hb).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
        curve.taus.push(step);
        curve.divergences.push(d);
        curve.bound.push(c * kappa.powi(step as i32));
    }
    Ok(curve)
}

/// One [`twin_trajectory`] per seed.
pub fn twin_trajectory_experiment(
    cfg: &ReservoirConfig,
    setup: TwinSetup,
    seeds: &[u64],
) -> Result<Vec<ForgettingCurve>> {
    seeds.iter().map(|&s| twin_trajectory(cfg, setup, s)).collect()
}

/// Summary of a forgetting experiment, written next to its curves.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MemorySummary {
    pub alpha: f64,
    pub lambda: f64,
    pub l_phi: f64,
    pub kappa: f64,
    pub forgetting_guaranteed: bool,
    pub epsilon: f64,
    /// Receptive field with `C = 1`.
    pub l_eff_unit: Option<usize>,
    /// Largest `C` over seeds and its receptive field.
    #[serde(rename = "C")]
    pub c: f64,
    #[serde(rename = "L_eff")]
    pub l_eff: Option<usize>,
    pub seeds: usize,
    pub t_max: usize,
    pub violations: usize,
    pub max_violation: f64,
    /// Largest first crossing of `epsilon` over seeds.
    pub max_first_crossing: Option<usize>,
}

impl MemorySummary {
    pub fn from_curves(alpha: f64, lambda: f64, l_phi: f64, epsilon: f64, curves: &[ForgettingCurve]) -> Self {
        let kappa = compute_kappa(alpha, lambda, l_phi);
        let c = curves.iter().map(|k| k.c).fold(0.0, f64::max);
        let l_eff = |c: f64| effective_receptive_field(epsilon, c, kappa).ok();
        Self {
            alpha,
            lambda,
            l_phi,
            kappa,
            forgetting_guaranteed: has_forgetting_guarantee(kappa),
            epsilon,
            l_eff_unit: l_eff(1.0),
            c,
            l_eff: if c > 0.0 { l_eff(c) } else { Some(0) },
            seeds: curves.len(),
            t_max: curves.first().map_or(0, |k| k.taus.len().saturating_sub(1)),
            violations: curves.iter().map(ForgettingCurve::violations).sum(),
            max_violation: curves.iter().map(ForgettingCurve::max_violation).fold(f64::NEG_INFINITY, f64::max),
            max_first_crossing: curves.iter().filter_map(|k| k.first_crossing(epsilon)).max(),
        }
    }
}

/// Largest output-to-input distance ratio over random probe pairs of
/// `shape`-sized inputs; a lower bound on the Lipschitz constant.
pub fn empirical_lipschitz(model_fn: &impl DiffMap, shape: &[usize], probe_count: usize, rng: &mut Rng) -> Result<f64> {
    if probe_count == 0 {
        return Err(Error::config("probes", "need at least one probe"));
    }
    Ok(max_pair_ratio(model_fn, shape, probe_count, rng)?.ratio)
}

/// `(‖∇_Z L‖, ‖∇_{F(Z)} L‖)` per probe. `loss_grad` returns the loss
/// gradient at the map's output.
pub fn gradient_norm_audit(
    model_fn: &impl DiffMap,
    mut loss_grad: impl FnMut(&Tensor, &mut Rng) -> Result<Tensor>,
    shape: &[usize],
    probe_count: usize,
    rng: &mut Rng,
) -> Result<Vec<(f64, f64)>> {
    (0..probe_count)
        .map(|_| {
            let z = Tensor::from_fn(shape, |_| rng.normal());
            let y = model_fn.eval(&z)?;
            let gy = loss_grad(&y, rng)?;
            let gz = model_fn.vjp(&z, &gy)?;
            Ok((gz.norm(), gy.norm()))
        })
        .collect()
}

/// Gradient of `½‖y − target‖²` with a fresh standard-Gaussian target.
pub fn squared_error_to_random_target(y: &Tensor, rng: &mut Rng) -> Result<Tensor> {
    let target = Tensor::from_fn(y.shape(), |_| rng.normal());
    y.sub(&target)
}

/// Both non-expansiveness checks on one map.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NonExpansiveAudit {
    pub lipschitz: f64,
    pub pairs: usize,
    pub gradient_probes: usize,
    pub max_gradient_ratio: f64,
}

impl NonExpansiveAudit {
    pub fn run(
        model_fn: &impl DiffMap,
        shape: &[usize],
        pairs: usize,
        gradient_probes: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        let lipschitz = empirical_lipschitz(model_fn, shape, pairs, rng)?;
        let grads = gradient_norm_audit(model_fn, squared_error_to_random_target, shape, gradient_probes, rng)?;
        let max_gradient_ratio = grads.iter().map(|(i, o)| if *o > 0.0 { i / o } else { 0.0 }).fold(0.0, f64::max);
        Ok(Self { lipschitz, pairs, gradient_probes, max_gradient_ratio })
    }

    pub fn passes(&self, tol: f64) -> bool {
        self.lipschitz <= 1.0 + tol && self.max_gradient_ratio <= 1.0 + tol
    }
}
