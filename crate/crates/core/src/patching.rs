//! Channel-independent patch tokenisation: every channel of a look-back
//! window is cut into (possibly overlapping) length-`p` patches, each patch
//! is mapped affinely to `d_model`, and a fixed sinusoidal table is added.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

pub const POSITIONAL_BASE: f64 = 10_000.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PatchConfig {
    pub patch_len: usize,
    pub stride: usize,
    pub lookback: usize,
    pub d_model: usize,
}

impl Default for PatchConfig {
    fn default() -> Self {
        Self { patch_len: 16, stride: 8, lookback: 64, d_model: 64 }
    }
}

impl PatchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch_len == 0 {
            return Err(Error::config("patch_len", "must be positive"));
        }
        if self.stride == 0 {
            return Err(Error::config("stride", "must be positive"));
        }
        if self.d_model == 0 {
            return Err(Error::config("d_model", "must be positive"));
        }
        if self.patch_len > self.lookback {
            return Err(Error::config(
                "patch_len",
                format!("patch length {} exceeds look-back {}", self.patch_len, self.lookback),
            ));
        }
        Ok(())
    }

    /// `N = ⌊(T − p)/s⌋ + 1`.
    pub fn num_patches(&self) -> usize {
        (self.lookback - self.patch_len) / self.stride + 1
    }
}

/// Tokens of one window: `[channels, N, d_model]`.
#[derive(Clone, Debug)]
pub struct PatchBatch {
    pub tokens: Tensor,
    pub config: PatchConfig,
}

/// Cuts a `[T, d]` window into `[d, N, p]` patches. Patch `i` of channel `k`
/// starts at step `i·s`; samples after the last full patch are dropped.
pub fn extract_patches(series: &Tensor, cfg: &PatchConfig) -> Result<Tensor> {
    cfg.validate()?;
    let (t, d) = series.dims2("extract_patches")?;
    if t != cfg.lookback {
        return Err(Error::shape(
            "extract_patches",
            format!("series length {t} does not match look-back {}", cfg.lookback),
        ));
    }
    let (n, p, s) = (cfg.num_patches(), cfg.patch_len, cfg.stride);
    let mut out = Vec::with_capacity(d * n * p);
    for k in 0..d {
        for i in 0..n {
            out.extend((0..p).map(|j| series.data()[(i * s + j) * d + k]));
        }
    }
    Tensor::new(vec![d, n, p], out)
}

/// Patches for a batch of windows, stacked window-major then channel:
/// `[windows·d, N, p]`.
pub fn extract_patches_batch(windows: &[&Tensor], cfg: &PatchConfig) -> Result<Tensor> {
    let parts = windows.iter().map(|w| extract_patches(w, cfg)).collect::<Result<Vec<_>>>()?;
    let first = parts.first().ok_or_else(|| Error::shape("extract_patches_batch", "empty batch"))?;
    let (n, p) = (first.shape()[1], first.shape()[2]);
    let seqs: usize = parts.iter().map(|t| t.shape()[0]).sum();
    let data = parts.into_iter().flat_map(Tensor::into_data).collect();
    Tensor::new(vec![seqs, n, p], data)
}

/// Affine patch embedding `z = W_e p + b_e` applied to each patch.
pub fn embed_patches(patches: &Tensor, w_e: &Tensor, b_e: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let (x, w, b) = (g.constant(patches.clone()), g.constant(w_e.clone()), g.constant(b_e.clone()));
    let z = embed_on(&mut g, x, w, b)?;
    Ok(g.value(z).clone())
}

/// Patch embedding recorded on a tape.
pub fn embed_on(g: &mut Graph, patches: Var, w_e: Var, b_e: Var) -> Result<Var> {
    let (dm, p) = g.value(w_e).dims2("embed_patches")?;
    if g.value(patches).last_dim() != p || g.value(b_e).numel() != dm {
        return Err(Error::shape(
            "embed_patches",
            format!(
                "patches {:?}, W_e {:?}, b_e {:?}",
                g.value(patches).shape(),
                g.value(w_e).shape(),
                g.value(b_e).shape()
            ),
        ));
    }
    let z = g.matmul_t(patches, w_e)?;
    g.add_bias(z, b_e)
}

/// Sinusoidal table `[N, d_model]`: even dims `sin(pos/base^(2i/d))`, odd
/// dims the matching cosine.
pub fn positional_table(n: usize, d_model: usize) -> Tensor {
    Tensor::from_fn(&[n, d_model], |idx| {
        let (pos, dim) = (idx / d_model, idx % d_model);
        let pair = (dim / 2) as f64;
        let angle = pos as f64 / POSITIONAL_BASE.powf(2.0 * pair / d_model as f64);
        if dim % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    })
}

/// Adds the positional table to `[.., N, d_model]` tokens.
pub fn add_positional(tokens: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let x = g.constant(tokens.clone());
    let y = add_positional_on(&mut g, x)?;
    Ok(g.value(y).clone())
}

pub fn add_positional_on(g: &mut Graph, tokens: Var) -> Result<Var> {
    let shape = g.value(tokens).shape().to_vec();
    if shape.len() < 2 {
        return Err(Error::shape("add_positional", format!("need [.., N, d_model], got {shape:?}")));
    }
    let (n, dm) = (shape[shape.len() - 2], shape[shape.len() - 1]);
    let reps = g.value(tokens).numel() / (n * dm);
    let table = positional_table(n, dm);
    let tiled: Vec<f64> = std::iter::repeat_n(table.data(), reps).flatten().copied().collect();
    let pe = g.constant(Tensor::new(shape, tiled)?);
    g.add(tokens, pe)
}

/// Tokenise one `[T, d]` window: extract, embed, add positions.
pub fn tokenize(series: &Tensor, cfg: &PatchConfig, w_e: &Tensor, b_e: &Tensor) -> Result<PatchBatch> {
    let patches = extract_patches(series, cfg)?;
    let tokens = add_positional(&embed_patches(&patches, w_e, b_e)?)?;
    Ok(PatchBatch { tokens, config: *cfg })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{xavier_init, Rng};

    fn ramp(t: usize, d: usize) -> Tensor {
        // channel k at step i holds 100k + i + 1, so values name their step
        Tensor::from_fn(&[t, d], |idx| (100 * (idx % d) + idx / d + 1) as f64)
    }

    #[test]
    fn patch_count_formula() {
        let cfg = PatchConfig { patch_len: 16, stride: 8, lookback: 336, d_model: 8 };
        assert_eq!(cfg.num_patches(), 41);
        let cfg = PatchConfig { patch_len: 7, stride: 3, lookback: 7, d_model: 8 };
        assert_eq!(cfg.num_patches(), 1);
    }

    #[test]
    fn whole_window_single_patch() {
        let cfg = PatchConfig { patch_len: 5, stride: 2, lookback: 5, d_model: 4 };
        let p = extract_patches(&ramp(5, 2), &cfg).unwrap();
        assert_eq!(p.shape(), &[2, 1, 5]);
        assert_eq!(p.slab(0).into_data(), vec![1.0, 2.0, 3.0, 4.0, 5.0]);
    }

    #[test]
    fn small_enumeration() {
        let cfg = PatchConfig { patch_len: 4, stride: 2, lookback: 10, d_model: 4 };
        let p = extract_patches(&ramp(10, 1), &cfg).unwrap();
        assert_eq!(p.shape(), &[1, 4, 4]);
        assert_eq!(&p.data()[..4], &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(&p.data()[12..], &[7.0, 8.0, 9.0, 10.0]);
    }

    #[test]
    fn oversized_patch_is_config_error() {
        let cfg = PatchConfig { patch_len: 12, stride: 2, lookback: 10, d_model: 4 };
        assert!(matches!(extract_patches(&ramp(10, 1), &cfg), Err(Error::Config { .. })));
    }

    #[test]
    fn disjoint_patches_reconstruct_prefix() {
        let cfg = PatchConfig { patch_len: 3, stride: 3, lookback: 11, d_model: 4 };
        let series = ramp(11, 2);
        let p = extract_patches(&series, &cfg).unwrap();
        let n = cfg.num_patches();
        for k in 0..2 {
            let flat = p.slab(k).into_data();
            let want: Vec<f64> = (0..n * 3).map(|i| series.at(&[i, k])).collect();
            assert_eq!(flat, want);
        }
    }

    #[test]
    fn embedding_edge_cases() {
        let patches = Tensor::from_fn(&[2, 3, 4], |i| i as f64 * 0.5 - 3.0);
        let c = Tensor::from_fn(&[5], |i| i as f64 + 0.25);
        let z = embed_patches(&patches, &Tensor::zeros(&[5, 4]), &c).unwrap();
        for tok in z.data().chunks(5) {
            assert_eq!(tok, c.data());
        }
        let z = embed_patches(&patches, &Tensor::identity(4), &Tensor::zeros(&[4])).unwrap();
        assert_eq!(z, patches);
        assert!(embed_patches(&patches, &Tensor::zeros(&[5, 3]), &c).is_err());
    }

    #[test]
    fn embedding_matches_loop_oracle() {
        let mut rng = Rng::new(5);
        let patches = Tensor::from_fn(&[3, 4, 6], |_| rng.normal());
        let w = xavier_init(&mut rng, 8, 6);
        let b = Tensor::from_fn(&[8], |_| rng.normal());
        let z = embed_patches(&patches, &w, &b).unwrap();
        for k in 0..3 {
            for i in 0..4 {
                for r in 0..8 {
                    let want: f64 = b.at(&[r]) + (0..6).map(|j| w.at(&[r, j]) * patches.at(&[k, i, j])).sum::<f64>();
                    assert!((z.at(&[k, i, r]) - want).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn positional_table_properties() {
        let zeros = Tensor::zeros(&[2, 5, 6]);
        let out = add_positional(&zeros).unwrap();
        let table = positional_table(5, 6);
        assert_eq!(out.slab(0), table);
        assert_eq!(out.slab(1), table);
        for dim in 0..6 {
            let want = if dim % 2 == 0 { 0.0 } else { 1.0 };
            assert_eq!(table.at(&[0, dim]), want);
        }
        // pair 1 of d=6 uses base^(2/6)
        let want = (3.0 / POSITIONAL_BASE.powf(2.0 / 6.0)).sin();
        assert!((table.at(&[3, 2]) - want).abs() < 1e-15);
        assert_eq!(positional_table(5, 6), positional_table(5, 6));
    }
}
