//! Leaky echo-state component over patch tokens:
//! `h_{t+1} = (1 − λ) h_t + λ φ(W_res h_t + W_in z_t + b)`, read out by a
//! trainable `W_out`. Everything except `W_out` is fixed at construction.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{spectral_norm_estimate, xavier_init, Graph, Rng, Tensor, Var};

/// Recurrent nonlinearity.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReservoirActivation {
    #[default]
    Tanh,
    Identity,
    /// `c · tanh(x)`, Lipschitz constant `c`.
    ScaledTanh {
        gain: f64,
    },
}

impl ReservoirActivation {
    pub fn lipschitz(&self) -> f64 {
        match *self {
            ReservoirActivation::Tanh | ReservoirActivation::Identity => 1.0,
            ReservoirActivation::ScaledTanh { gain } => gain.abs(),
        }
    }

    pub fn apply(&self, x: f64) -> f64 {
        match *self {
            ReservoirActivation::Tanh => x.tanh(),
            ReservoirActivation::Identity => x,
            ReservoirActivation::ScaledTanh { gain } => gain * x.tanh(),
        }
    }
}

/// How the recurrent matrix is normalised to `alpha`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecurrentScaling {
    /// Largest singular value equals `alpha`; the forgetting bound holds.
    #[default]
    Norm,
    /// Spectral radius equals `alpha`; the norm may exceed it and the
    /// forgetting bound is then not guaranteed.
    Radius,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReservoirConfig {
    pub size: usize,
    pub alpha: f64,
    pub leak: f64,
    #[serde(default)]
    pub activation: ReservoirActivation,
    #[serde(default = "unit")]
    pub input_scale: f64,
    #[serde(default)]
    pub scaling: RecurrentScaling,
    #[serde(default)]
    pub seed: u64,
}

fn unit() -> f64 {
    1.0
}

impl Default for ReservoirConfig {
    fn default() -> Self {
        Self {
            size: 500,
            alpha: 0.9,
            leak: 0.99,
            activation: ReservoirActivation::Tanh,
            input_scale: 1.0,
            scaling: RecurrentScaling::Norm,
            seed: 0,
        }
    }
}

impl ReservoirConfig {
    /// The reduced-size variant used in quick runs.
    pub fn fast() -> Self {
        Self { size: 64, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        self.validate_shape()?;
        if self.alpha >= 1.0 {
            return Err(Error::config("reservoir.alpha", format!("{} not in (0, 1)", self.alpha)));
        }
        if self.activation.lipschitz() > 1.0 {
            return Err(Error::config("reservoir.activation", "declared Lipschitz constant exceeds 1"));
        }
        Ok(())
    }

    /// The checks that remain when a contraction is not required, for
    /// studying reservoirs outside the forgetting regime.
    pub fn validate_shape(&self) -> Result<()> {
        if self.size == 0 {
            return Err(Error::config("reservoir.size", "must be positive"));
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::config("reservoir.alpha", format!("{} is not positive", self.alpha)));
        }
        if !(self.leak > 0.0 && self.leak <= 1.0) {
            return Err(Error::config("reservoir.leak", format!("{} not in (0, 1]", self.leak)));
        }
        if !(self.activation.lipschitz() > 0.0 && self.activation.lipschitz().is_finite()) {
            return Err(Error::config("reservoir.activation", "Lipschitz constant must be positive"));
        }
        if !(self.input_scale > 0.0) {
            return Err(Error::config("reservoir.input_scale", "must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ReservoirState {
    pub config: ReservoirConfig,
    /// `[N_h, N_h]`, fixed.
    pub w_res: Tensor,
    /// `[N_h, d_in]`, fixed.
    pub w_in: Tensor,
    /// `[N_h]`, fixed.
    pub b: Tensor,
    /// `[d_out, N_h]`, trainable.
    pub w_out: Tensor,
    #[serde(skip)]
    pub h: Vec<f64>,
}

/// Draws a reservoir reading `d_in`-wide tokens and writing `d_out`-wide ones.
///
/// `W_res` is Gaussian rescaled to `alpha`; `W_in` is Xavier-Gaussian times
/// `input_scale`; `b ~ U[-0.1, 0.1]`; `W_out` is Xavier-Gaussian.
pub fn build_reservoir(cfg: &ReservoirConfig, d_in: usize, d_out: usize) -> Result<ReservoirState> {
    cfg.validate()?;
    build_unchecked(cfg, d_in, d_out)
}

/// [`build_reservoir`] without the contraction requirements.
pub fn build_reservoir_expansive(cfg: &ReservoirConfig, d_in: usize, d_out: usize) -> Result<ReservoirState> {
    cfg.validate_shape()?;
    build_unchecked(cfg, d_in, d_out)
}

fn build_unchecked(cfg: &ReservoirConfig, d_in: usize, d_out: usize) -> Result<ReservoirState> {
    let n = cfg.size;
    let mut rng = Rng::new(cfg.seed);
    let mut w_res = xavier_init(&mut rng, n, n);
    let current = match cfg.scaling {
        RecurrentScaling::Norm => spectral_norm_estimate(&w_res, 1000, 1e-13)?,
        RecurrentScaling::Radius => spectral_radius(&w_res),
    };
    w_res = w_res.scale(cfg.alpha / current);
    let w_in = xavier_init(&mut rng, n, d_in).scale(cfg.input_scale);
    let b = Tensor::from_fn(&[n], |_| rng.uniform(-0.1, 0.1));
    let w_out = xavier_init(&mut rng, d_out, n);
    Ok(ReservoirState { config: *cfg, w_res, w_in, b, w_out, h: vec![0.0; n] })
}

/// Growth rate of `‖Wᵏ v‖` over a long run, an estimate of the largest
/// eigenvalue modulus that copes with complex dominant pairs.
fn spectral_radius(w: &Tensor) -> f64 {
    let n = w.shape()[0];
    let mut v = Rng::new(0x7ad1).normal_vec(n);
    let (burn, steps) = (200, 800);
    let mut log_growth = 0.0;
    for k in 0..burn + steps {
        let nv = w.matvec(&v);
        let s = nv.iter().map(|x| x * x).sum::<f64>().sqrt();
        if s == 0.0 {
            return 0.0;
        }
        if k >= burn {
            log_growth += s.ln();
        }
        v = nv.into_iter().map(|x| x / s).collect();
    }
    (log_growth / steps as f64).exp()
}

impl ReservoirState {
    pub fn reset(&mut self) {
        self.h.clear();
        self.h.resize(self.config.size, 0.0);
    }

    pub fn d_in(&self) -> usize {
        self.w_in.shape()[1]
    }

    /// Fixed tensors in a stable order: `w_res`, `w_in`, `b`.
    pub fn fixed_tensors(&self) -> [(&'static str, &Tensor); 3] {
        [("w_res", &self.w_res), ("w_in", &self.w_in), ("b", &self.b)]
    }

    /// Runs a sequence of `[N, d_in]` tokens from a zero state and returns
    /// the read-out `[N, d_out]`.
    pub fn layer_forward(&mut self, tokens: &Tensor) -> Result<Tensor> {
        let (n, d) = tokens.dims2("reservoir_layer_forward")?;
        if d != self.d_in() {
            return Err(Error::shape(
                "reservoir_layer_forward",
                format!("token width {d}, reservoir input {}", self.d_in()),
            ));
        }
        self.reset();
        let mut states = Vec::with_capacity(n * self.config.size);
        for t in 0..n {
            let z = tokens.slab(t);
            states.extend_from_slice(reservoir_step(self, &z)?);
        }
        let hs = Tensor::new(vec![n, self.config.size], states)?;
        hs.matmul(&self.w_out.transpose()?)
    }

    /// Tape version over `[B, N, d_in]` tokens; only `w_out` (passed in as
    /// a bound variable) can receive gradients among the reservoir's own
    /// parameters, while gradients still flow into the tokens.
    pub fn forward_on(&self, g: &mut Graph, w_out: Var, tokens: Var) -> Result<Var> {
        let &[b, n, d] = g.value(tokens).shape() else {
            return Err(Error::shape(
                "reservoir_layer_forward",
                format!("expected [B, N, d], got {:?}", g.value(tokens).shape()),
            ));
        };
        if d != self.d_in() {
            return Err(Error::shape(
                "reservoir_layer_forward",
                format!("token width {d}, reservoir input {}", self.d_in()),
            ));
        }
        let lambda = self.config.leak;
        let w_res = g.constant(self.w_res.clone());
        let w_in = g.constant(self.w_in.clone());
        let bias = g.constant(self.b.clone());
        let drive = g.matmul_t(tokens, w_in)?;
        let drive = g.add_bias(drive, bias)?;
        let mut h: Option<Var> = None;
        let mut states = Vec::with_capacity(n);
        for t in 0..n {
            let dt = g.select(drive, 1, t)?;
            let pre = match h {
                Some(h) => {
                    let r = g.matmul_t(h, w_res)?;
                    g.add(r, dt)?
                }
                None => dt,
            };
            let act = match self.config.activation {
                ReservoirActivation::Tanh => g.tanh(pre)?,
                ReservoirActivation::Identity => pre,
                ReservoirActivation::ScaledTanh { gain } => {
                    let a = g.tanh(pre)?;
                    g.scale(a, gain)?
                }
            };
            let fresh = g.scale(act, lambda)?;
            let next = match h {
                Some(h) if lambda < 1.0 => {
                    let kept = g.scale(h, 1.0 - lambda)?;
                    g.add(kept, fresh)?
                }
                _ => fresh,
            };
            states.push(next);
            h = Some(next);
        }
        let hs = g.stack(&states, 1)?;
        debug_assert_eq!(g.value(hs).shape(), &[b, n, self.config.size]);
        g.matmul_t(hs, w_out)
    }
}

/// One leaky update; replaces and returns the state.
pub fn reservoir_step<'a>(state: &'a mut ReservoirState, z: &Tensor) -> Result<&'a [f64]> {
    if z.numel() != state.d_in() {
        return Err(Error::shape("reservoir_step", format!("input length {}, expected {}", z.numel(), state.d_in())));
    }
    let lambda = state.config.leak;
    let rec = state.w_res.matvec(&state.h);
    let inp = state.w_in.matvec(z.data());
    for i in 0..state.h.len() {
        let a = state.config.activation.apply(rec[i] + inp[i] + state.b.data()[i]);
        state.h[i] = (1.0 - lambda) * state.h[i] + lambda * a;
    }
    Ok(&state.h)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck::check_directional;

    fn small(size: usize) -> ReservoirConfig {
        ReservoirConfig { size, seed: 7, ..ReservoirConfig::fast() }
    }

    #[test]
    fn norm_scaling_hits_alpha() {
        let r = build_reservoir(&small(40), 5, 5).unwrap();
        let s = spectral_norm_estimate(&r.w_res, 2000, 1e-14).unwrap();
        assert!((s - 0.9).abs() < 1e-6, "{s}");
        assert!(r.b.data().iter().all(|v| v.abs() <= 0.1));
        assert!(r.h.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_unit_reservoir() {
        let r = build_reservoir(&ReservoirConfig { alpha: 0.7, ..small(1) }, 2, 2).unwrap();
        assert!((r.w_res.item().abs() - 0.7).abs() < 1e-15);
    }

    #[test]
    fn radius_scaling_sets_eigen_growth() {
        let r = build_reservoir(&ReservoirConfig { scaling: RecurrentScaling::Radius, ..small(30) }, 3, 3).unwrap();
        let rho = spectral_radius(&r.w_res);
        assert!((rho - 0.9).abs() < 0.05, "{rho}");
        // the norm of a non-normal matrix sits above its radius
        assert!(spectral_norm_estimate(&r.w_res, 500, 1e-12).unwrap() > 0.9);
    }

    #[test]
    fn same_seed_same_reservoir() {
        let a = build_reservoir(&small(16), 3, 3).unwrap();
        let b = build_reservoir(&small(16), 3, 3).unwrap();
        assert_eq!(a.w_res, b.w_res);
        assert_eq!(a.w_in, b.w_in);
        assert_eq!(a.b, b.b);
    }

    #[test]
    fn step_matches_unit_loop() {
        let mut r = build_reservoir(&ReservoirConfig { leak: 0.3, ..small(6) }, 4, 4).unwrap();
        r.h = (0..6).map(|i| 0.1 * i as f64 - 0.2).collect();
        let z = Tensor::new(vec![4], vec![0.5, -1.0, 0.25, 2.0]).unwrap();
        let mut want = [0.0; 6];
        for i in 0..6 {
            let mut pre = r.b.at(&[i]);
            for j in 0..6 {
                pre += r.w_res.at(&[i, j]) * r.h[j];
            }
            for j in 0..4 {
                pre += r.w_in.at(&[i, j]) * z.at(&[j]);
            }
            want[i] = 0.7 * r.h[i] + 0.3 * pre.tanh();
        }
        let got = reservoir_step(&mut r, &z).unwrap().to_vec();
        for i in 0..6 {
            assert!((got[i] - want[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn leak_free_step_keeps_state() {
        let mut r = build_reservoir(&small(5), 3, 3).unwrap();
        r.config.leak = 0.0;
        r.h = vec![0.4, -0.1, 0.0, 2.0, 1.0];
        let z = Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap();
        assert_eq!(reservoir_step(&mut r, &z).unwrap(), &[0.4, -0.1, 0.0, 2.0, 1.0]);
    }

    #[test]
    fn memoryless_case() {
        let mut r = build_reservoir(&ReservoirConfig { leak: 1.0, ..small(5) }, 3, 3).unwrap();
        r.w_res = Tensor::zeros(&[5, 5]);
        r.b = Tensor::zeros(&[5]);
        r.h = vec![0.3; 5];
        let z = Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap();
        let want: Vec<f64> = r.w_in.matvec(z.data()).iter().map(|v| v.tanh()).collect();
        assert_eq!(reservoir_step(&mut r, &z).unwrap(), &want[..]);
    }

    #[test]
    fn layer_forward_edge_cases_and_tape_agreement() {
        let mut r = build_reservoir(&small(8), 4, 4).unwrap();
        let mut rng = Rng::new(2);
        let tokens = Tensor::from_fn(&[5, 4], |_| rng.normal());

        let mut g = Graph::new();
        let x = g.constant(tokens.reshape(&[1, 5, 4]).unwrap());
        let w = g.constant(r.w_out.clone());
        let y = r.forward_on(&mut g, w, x).unwrap();
        let plain = r.layer_forward(&tokens).unwrap();
        assert!(g.value(y).reshape(&[5, 4]).unwrap().max_abs_diff(&plain) < 1e-12);

        let one = Tensor::from_fn(&[1, 4], |i| i as f64);
        let out = r.layer_forward(&one).unwrap();
        let mut fresh = r.clone();
        fresh.reset();
        let h = reservoir_step(&mut fresh, &one.slab(0)).unwrap().to_vec();
        assert!(out.reshape(&[4]).unwrap().max_abs_diff(&Tensor::new(vec![4], r.w_out.matvec(&h)).unwrap()) < 1e-12);

        r.w_out = Tensor::zeros(&[4, 8]);
        assert!(r.layer_forward(&tokens).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn readout_gradient_matches_finite_differences() {
        let r = build_reservoir(&ReservoirConfig { leak: 0.6, ..small(7) }, 3, 2).unwrap();
        let mut rng = Rng::new(3);
        let tokens = Tensor::from_fn(&[2, 4, 3], |_| rng.normal());
        let weights = Tensor::from_fn(&[2, 4, 2], |_| rng.normal());
        let loss = |w_out: &Tensor| -> Result<(f64, Tensor)> {
            let mut g = Graph::new();
            let x = g.constant(tokens.clone());
            let w = g.param(w_out.clone());
            let y = r.forward_on(&mut g, w, x)?;
            let c = g.constant(weights.clone());
            let p = g.mul(y, c)?;
            let l = g.sum(p)?;
            Ok((g.value(l).item(), g.backward(l)?.get(w).unwrap().clone()))
        };
        let (_, grad) = loss(&r.w_out).unwrap();
        let mut f = |w: &Tensor| Ok(loss(w)?.0);
        let rep = check_directional(&mut f, &r.w_out, &grad, 100, 1e-5, &mut rng).unwrap();
        assert!(rep.passes(1e-5), "{rep:?}");
    }

    #[test]
    fn one_step_contracts_state_differences() {
        let cfg = ReservoirConfig { leak: 0.5, ..small(32) };
        let r = build_reservoir(&cfg, 4, 4).unwrap();
        let kappa = (1.0 - cfg.leak) + cfg.leak * cfg.alpha;
        let mut rng = Rng::new(11);
        for _ in 0..1000 {
            let z = Tensor::from_fn(&[4], |_| rng.normal());
            let (mut a, mut b) = (r.clone(), r.clone());
            a.h = rng.normal_vec(32);
            b.h = rng.normal_vec(32);
            let before: f64 = a.h.iter().zip(&b.h).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
            let ha = reservoir_step(&mut a, &z).unwrap().to_vec();
            let hb = reservoir_step(&mut b, &z).unwrap();
            let after: f64 = ha.iter().zip(hb).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
            assert!(after <= kappa * before * (1.0 + 1e-12));
        }
    }

    #[test]
    fn invalid_configs_are_rejected() {
        assert!(ReservoirConfig { alpha: 1.0, ..small(3) }.validate().is_err());
        assert!(ReservoirConfig { leak: 0.0, ..small(3) }.validate().is_err());
        let act = ReservoirActivation::ScaledTanh { gain: 1.5 };
        assert!(ReservoirConfig { activation: act, ..small(3) }.validate().is_err());
    }
}
