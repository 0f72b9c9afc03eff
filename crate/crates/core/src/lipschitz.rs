//! Empirical Lipschitz estimation for tensor-to-tensor maps.
//!
//! Two estimators are combined. Probe pairs give `‖f(a) − f(b)‖ / ‖a − b‖`
//! directly; Jacobian power iteration then climbs towards the local
//! operator norm at a chosen point, using central differences for `J v`
//! and reverse mode for `Jᵀ u`. Both are lower bounds on the true constant.

use crate::error::Result;
use crate::tensor::{Rng, Tensor};

/// A differentiable map with a reverse-mode pullback.
pub trait DiffMap {
    fn eval(&self, z: &Tensor) -> Result<Tensor>;

    /// `J(z)ᵀ · cotangent`.
    fn vjp(&self, z: &Tensor, cotangent: &Tensor) -> Result<Tensor>;
}

impl<M: DiffMap + ?Sized> DiffMap for &M {
    fn eval(&self, z: &Tensor) -> Result<Tensor> {
        (**self).eval(z)
    }

    fn vjp(&self, z: &Tensor, cotangent: &Tensor) -> Result<Tensor> {
        (**self).vjp(z, cotangent)
    }
}

/// Map assembled from a forward closure and a pullback closure.
pub struct FnMap<F, B> {
    pub forward: F,
    pub pullback: B,
}

impl<F, B> DiffMap for FnMap<F, B>
where
    F: Fn(&Tensor) -> Result<Tensor>,
    B: Fn(&Tensor, &Tensor) -> Result<Tensor>,
{
    fn eval(&self, z: &Tensor) -> Result<Tensor> {
        (self.forward)(z)
    }

    fn vjp(&self, z: &Tensor, cotangent: &Tensor) -> Result<Tensor> {
        (self.pullback)(z, cotangent)
    }
}

/// `z ↦ s·z`.
#[derive(Clone, Copy, Debug)]
pub struct Scaled(pub f64);

impl DiffMap for Scaled {
    fn eval(&self, z: &Tensor) -> Result<Tensor> {
        Ok(z.scale(self.0))
    }

    fn vjp(&self, _z: &Tensor, cotangent: &Tensor) -> Result<Tensor> {
        Ok(cotangent.scale(self.0))
    }
}

/// Sequential composition, first map applied first.
pub struct Chain<'a>(pub Vec<&'a dyn DiffMap>);

impl DiffMap for Chain<'_> {
    fn eval(&self, z: &Tensor) -> Result<Tensor> {
        let mut x = z.clone();
        for m in &self.0 {
            x = m.eval(&x)?;
        }
        Ok(x)
    }

    fn vjp(&self, z: &Tensor, cotangent: &Tensor) -> Result<Tensor> {
        let mut inputs = Vec::with_capacity(self.0.len());
        let mut x = z.clone();
        for m in &self.0 {
            let next = m.eval(&x)?;
            inputs.push(x);
            x = next;
        }
        let mut u = cotangent.clone();
        for (m, x) in self.0.iter().zip(inputs.iter()).rev() {
            u = m.vjp(x, &u)?;
        }
        Ok(u)
    }
}

/// Worst probe pair found by [`max_pair_ratio`].
#[derive(Clone, Debug)]
pub struct PairEstimate {
    pub ratio: f64,
    pub point: Tensor,
    /// Unit direction from `point` to its partner.
    pub direction: Tensor,
    pub pairs: usize,
}

/// `‖f(a) − f(b)‖ / ‖a − b‖`, or `None` for a degenerate pair.
pub fn pair_ratio(f: &impl DiffMap, a: &Tensor, b: &Tensor) -> Result<Option<f64>> {
    let dx = a.sub(b)?.norm();
    if dx == 0.0 {
        return Ok(None);
    }
    Ok(Some(f.eval(a)?.sub(&f.eval(b)?)?.norm() / dx))
}

/// Random probe pairs at standard-Gaussian token scale.
///
/// Even probes pair two independent draws; odd probes pair a draw with a
/// nearby point at a log-uniform distance between `1e-3` and `1` times the
/// typical input norm, which is where local stretching shows up.
pub fn max_pair_ratio(f: &impl DiffMap, shape: &[usize], count: usize, rng: &mut Rng) -> Result<PairEstimate> {
    let numel: usize = shape.iter().product();
    let mut best = PairEstimate { ratio: 0.0, point: Tensor::zeros(shape), direction: Tensor::zeros(shape), pairs: 0 };
    for i in 0..count {
        let a = Tensor::from_fn(shape, |_| rng.normal());
        let b = if i % 2 == 0 {
            Tensor::from_fn(shape, |_| rng.normal())
        } else {
            let r = 10f64.powf(rng.uniform(-3.0, 0.0)) * (numel as f64).sqrt();
            let u = unit_tensor(shape, rng);
            a.add(&u.scale(r))?
        };
        let Some(ratio) = pair_ratio(f, &a, &b)? else {
            continue;
        };
        best.pairs += 1;
        if ratio > best.ratio {
            let d = b.sub(&a)?;
            let n = d.norm();
            best = PairEstimate { ratio, direction: d.scale(1.0 / n), point: a, pairs: best.pairs };
        }
    }
    Ok(best)
}

/// Central-difference Jacobian-vector product.
pub fn jvp_fd(f: &impl DiffMap, z: &Tensor, v: &Tensor, step: f64) -> Result<Tensor> {
    let plus = f.eval(&z.add(&v.scale(step))?)?;
    let minus = f.eval(&z.sub(&v.scale(step))?)?;
    Ok(plus.sub(&minus)?.scale(0.5 / step))
}

/// Power iteration on `JᵀJ` at `z`; returns the largest `‖J v‖` seen over
/// unit `v`, starting from `start`.
pub fn jacobian_norm(f: &impl DiffMap, z: &Tensor, start: &Tensor, iters: usize) -> Result<f64> {
    let step = 1e-5 * z.norm().max(1.0) / (z.numel() as f64).sqrt();
    let mut v = start.scale(1.0 / start.norm());
    let mut best = 0.0_f64;
    for _ in 0..iters {
        let jv = jvp_fd(f, z, &v, step)?;
        let s = jv.norm();
        best = best.max(s);
        if s == 0.0 {
            break;
        }
        let w = f.vjp(z, &jv)?;
        let n = w.norm();
        if n == 0.0 || !n.is_finite() {
            break;
        }
        let prev = v;
        v = w.scale(1.0 / n);
        if prev.sub(&v)?.norm() < 1e-10 {
            break;
        }
    }
    Ok(best)
}

/// Probe pairs followed by Jacobian refinement at the worst pair.
pub fn estimate(f: &impl DiffMap, shape: &[usize], probes: usize, power_iters: usize, rng: &mut Rng) -> Result<f64> {
    let pairs = max_pair_ratio(f, shape, probes, rng)?;
    if power_iters == 0 || pairs.pairs == 0 {
        return Ok(pairs.ratio);
    }
    let refined = jacobian_norm(f, &pairs.point, &pairs.direction, power_iters)?;
    Ok(pairs.ratio.max(refined))
}

pub(crate) fn unit_tensor(shape: &[usize], rng: &mut Rng) -> Tensor {
    let t = Tensor::from_fn(shape, |_| rng.normal());
    let n = t.norm();
    t.scale(1.0 / n)
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Tanh;

    impl DiffMap for Tanh {
        fn eval(&self, z: &Tensor) -> Result<Tensor> {
            Ok(z.map(f64::tanh))
        }

        fn vjp(&self, z: &Tensor, u: &Tensor) -> Result<Tensor> {
            z.zip_map(u, |x, g| g * (1.0 - x.tanh().powi(2)))
        }
    }

    #[test]
    fn linear_maps_are_exact() {
        let mut rng = Rng::new(1);
        let e = max_pair_ratio(&Scaled(3.0), &[4, 5], 10, &mut rng).unwrap();
        assert!((e.ratio - 3.0).abs() < 1e-12);
        let e = max_pair_ratio(&Scaled(1.0), &[4, 5], 10, &mut rng).unwrap();
        assert!((e.ratio - 1.0).abs() < 1e-12);
    }

    #[test]
    fn degenerate_pairs_are_skipped() {
        let a = Tensor::zeros(&[3]);
        assert!(pair_ratio(&Scaled(2.0), &a, &a).unwrap().is_none());
    }

    #[test]
    fn jacobian_refinement_finds_local_slope() {
        // A diagonal linear map: the power iteration must reach the largest
        // entry even from a direction dominated by the smaller ones.
        let d = Tensor::new(vec![3], vec![0.5, 2.0, 1.0]).unwrap();
        let f = FnMap {
            forward: |z: &Tensor| z.zip_map(&d, |a, b| a * b),
            pullback: |_: &Tensor, u: &Tensor| u.zip_map(&d, |a, b| a * b),
        };
        let z = Tensor::zeros(&[3]);
        let start = Tensor::new(vec![3], vec![1.0, 1e-3, 1.0]).unwrap();
        let s = jacobian_norm(&f, &z, &start, 100).unwrap();
        assert!((s - 2.0).abs() < 1e-6, "{s}");
        // tanh has slope one at the origin
        assert!((jacobian_norm(&Tanh, &z, &start, 10).unwrap() - 1.0).abs() < 1e-8);
    }

    #[test]
    fn chain_composes_pullbacks() {
        let (a, b) = (Scaled(0.5), Scaled(3.0));
        let c = Chain(vec![&a, &b]);
        let z = Tensor::full(&[2], 1.0);
        assert_eq!(c.eval(&z).unwrap().data(), &[1.5, 1.5]);
        assert_eq!(c.vjp(&z, &z).unwrap().data(), &[1.5, 1.5]);
    }
}
