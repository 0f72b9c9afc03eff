use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lipschitz::DiffMap;
use crate::tensor::{xavier_init, Graph, Rng, Tensor, Var};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FfnActivation {
    #[default]
    Gelu,
    Relu,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlockConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub activation: FfnActivation,
    pub ln_eps: f64,
}

impl BlockConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 {
            return Err(Error::config("d_model", "must be positive"));
        }
        if self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::config(
                "n_heads",
                format!("{} heads do not divide d_model {}", self.n_heads, self.d_model),
            ));
        }
        if self.d_ff == 0 {
            return Err(Error::config("d_ff", "must be positive"));
        }
        if !(self.ln_eps > 0.0) {
            return Err(Error::config("ln_eps", "must be positive"));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

/// Parameter names in the order used by [`EncoderBlock::tensors`].
pub const BLOCK_PARAM_NAMES: [&str; 12] =
    ["wq", "wk", "wv", "wo", "w1", "b1", "w2", "b2", "ln1_gain", "ln1_bias", "ln2_gain", "ln2_bias"];

/// Pre-norm encoder block `γ · (Z + FFN(LN₂(Z + MSA(LN₁(Z)))))`.
///
/// Projection matrices are stored `[out, in]`; the multi-head split is over
/// contiguous `head_dim` slices of the projected width.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EncoderBlock {
    pub config: BlockConfig,
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
    pub ln1_gain: Tensor,
    pub ln1_bias: Tensor,
    pub ln2_gain: Tensor,
    pub ln2_bias: Tensor,
    pub frozen: bool,
    pub gamma: f64,
    /// Set once a frozen block's `gamma` has been fitted.
    pub rescaled: bool,
    /// Warm starts for the spectral projection, one per weight matrix.
    #[serde(skip)]
    pub(crate) power_vectors: Vec<Vec<f64>>,
}

/// Tape handles for one block's parameters, in [`BLOCK_PARAM_NAMES`] order.
#[derive(Clone, Copy, Debug)]
pub struct BlockVars(pub [Var; 12]);

impl EncoderBlock {
    pub fn new(config: BlockConfig, rng: &mut Rng) -> Self {
        let (dm, ff) = (config.d_model, config.d_ff);
        Self {
            config,
            wq: xavier_init(rng, dm, dm),
            wk: xavier_init(rng, dm, dm),
            wv: xavier_init(rng, dm, dm),
            wo: xavier_init(rng, dm, dm),
            w1: xavier_init(rng, ff, dm),
            b1: Tensor::zeros(&[ff]),
            w2: xavier_init(rng, dm, ff),
            b2: Tensor::zeros(&[dm]),
            ln1_gain: Tensor::full(&[dm], 1.0),
            ln1_bias: Tensor::zeros(&[dm]),
            ln2_gain: Tensor::full(&[dm], 1.0),
            ln2_bias: Tensor::zeros(&[dm]),
            frozen: false,
            gamma: 1.0,
            rescaled: false,
            power_vectors: Vec::new(),
        }
    }

    /// Block with every weight and bias zero and unit LN gains.
    pub fn zeros(config: BlockConfig) -> Self {
        let mut b = Self::new(config, &mut Rng::new(0));
        for t in b.tensors_mut() {
            t.data_mut().fill(0.0);
        }
        b.ln1_gain.data_mut().fill(1.0);
        b.ln2_gain.data_mut().fill(1.0);
        b
    }

    pub fn tensors(&self) -> [&Tensor; 12] {
        [
            &self.wq,
            &self.wk,
            &self.wv,
            &self.wo,
            &self.w1,
            &self.b1,
            &self.w2,
            &self.b2,
            &self.ln1_gain,
            &self.ln1_bias,
            &self.ln2_gain,
            &self.ln2_bias,
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor; 12] {
        [
            &mut self.wq,
            &mut self.wk,
            &mut self.wv,
            &mut self.wo,
            &mut self.w1,
            &mut self.b1,
            &mut self.w2,
            &mut self.b2,
            &mut self.ln1_gain,
            &mut self.ln1_bias,
            &mut self.ln2_gain,
            &mut self.ln2_bias,
        ]
    }

    /// The six matrices subject to spectral projection.
    pub fn weight_matrices_mut(&mut self) -> [&mut Tensor; 6] {
        [&mut self.wq, &mut self.wk, &mut self.wv, &mut self.wo, &mut self.w1, &mut self.w2]
    }

    pub fn weight_matrices(&self) -> [&Tensor; 6] {
        [&self.wq, &self.wk, &self.wv, &self.wo, &self.w1, &self.w2]
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.numel()).sum()
    }

    /// Binds parameters as gradient leaves unless the block is frozen.
    pub fn bind(&self, g: &mut Graph) -> BlockVars {
        if self.frozen {
            self.bind_constant(g)
        } else {
            BlockVars(self.tensors().map(|t| g.param(t.clone())))
        }
    }

    pub fn bind_constant(&self, g: &mut Graph) -> BlockVars {
        BlockVars(self.tensors().map(|t| g.constant(t.clone())))
    }

    /// Forward pass over `[B, N, d_model]` tokens.
    pub fn forward_on(&self, g: &mut Graph, p: &BlockVars, x: Var) -> Result<Var> {
        let [wq, wk, wv, wo, w1, b1, w2, b2, g1, c1, g2, c2] = p.0;
        let &[b, n, dm] = g.value(x).shape() else {
            return Err(Error::shape(
                "block_forward",
                format!("expected [B, N, d_model], got {:?}", g.value(x).shape()),
            ));
        };
        if dm != self.config.d_model {
            return Err(Error::shape(
                "block_forward",
                format!("token width {dm}, block width {}", self.config.d_model),
            ));
        }
        let (h, hd) = (self.config.n_heads, self.config.head_dim());

        let a = g.layer_norm(x, g1, c1, self.config.ln_eps)?;
        let heads = |g: &mut Graph, w: Var| -> Result<Var> {
            let t = g.matmul_t(a, w)?;
            let t = g.reshape(t, &[b, n, h, hd])?;
            let t = g.permute(t, &[0, 2, 1, 3])?;
            g.reshape(t, &[b * h, n, hd])
        };
        let (q, k, v) = (heads(g, wq)?, heads(g, wk)?, heads(g, wv)?);
        let scores = g.bmm_t(q, k)?;
        let scores = g.scale(scores, 1.0 / (hd as f64).sqrt())?;
        let attn = g.softmax(scores)?;
        let o = g.bmm(attn, v)?;
        let o = g.reshape(o, &[b, h, n, hd])?;
        let o = g.permute(o, &[0, 2, 1, 3])?;
        let o = g.reshape(o, &[b, n, dm])?;
        let msa = g.matmul_t(o, wo)?;
        let u = g.add(x, msa)?;

        let c = g.layer_norm(u, g2, c2, self.config.ln_eps)?;
        let hidden = g.matmul_t(c, w1)?;
        let hidden = g.add_bias(hidden, b1)?;
        let hidden = match self.config.activation {
            FfnActivation::Gelu => g.gelu(hidden)?,
            FfnActivation::Relu => g.relu(hidden)?,
        };
        let f = g.matmul_t(hidden, w2)?;
        let f = g.add_bias(f, b2)?;
        let out = g.add(x, f)?;
        if self.gamma == 1.0 {
            Ok(out)
        } else {
            g.scale(out, self.gamma)
        }
    }

    /// Forward pass on `[N, d_model]` or `[B, N, d_model]` values.
    pub fn forward(&self, z: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let x = g.constant(z.clone());
        let p = self.bind_constant(&mut g);
        let (x3, squeeze) = as_batch(&mut g, x)?;
        let y = self.forward_on(&mut g, &p, x3)?;
        let out = g.value(y).clone();
        if squeeze {
            out.reshape(z.shape())
        } else {
            Ok(out)
        }
    }
}

/// Lifts `[N, d]` to `[1, N, d]`; the flag says whether it did.
pub(crate) fn as_batch(g: &mut Graph, x: Var) -> Result<(Var, bool)> {
    let shape = g.value(x).shape().to_vec();
    match shape.len() {
        2 => Ok((g.reshape(x, &[1, shape[0], shape[1]])?, true)),
        3 => Ok((x, false)),
        _ => Err(Error::shape("block_forward", format!("expected rank 2 or 3 tokens, got {shape:?}"))),
    }
}

pub fn block_forward(block: &EncoderBlock, z: &Tensor) -> Result<Tensor> {
    block.forward(z)
}

impl DiffMap for EncoderBlock {
    fn eval(&self, z: &Tensor) -> Result<Tensor> {
        self.forward(z)
    }

    fn vjp(&self, z: &Tensor, cotangent: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let x = g.param(z.clone());
        let p = self.bind_constant(&mut g);
        let (x3, squeeze) = as_batch(&mut g, x)?;
        let y = self.forward_on(&mut g, &p, x3)?;
        let y = if squeeze { g.reshape(y, z.shape())? } else { y };
        let grads = g.vjp(y, cotangent)?;
        Ok(grads.get(x).cloned().unwrap_or_else(|| Tensor::zeros(z.shape())))
    }
}
