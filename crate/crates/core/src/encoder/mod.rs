//! Channel-independent Transformer encoder: pre-norm blocks with a
//! whole-block output scale, freeze planning, one-time Lipschitz rescaling
//! of frozen blocks, spectral projection of trainable ones, and the
//! forecasting head.

mod block;
mod head;
mod rescale;
mod scheme;

pub use block::{block_forward, BlockConfig, BlockVars, EncoderBlock, FfnActivation, BLOCK_PARAM_NAMES};
pub use head::{ForecastHead, HeadMode, HeadVars};
pub use rescale::{
    fit_gamma, gamma_for, project_spectral, rescale_frozen_block, ProbeBudget, Projection, PROJECTION_ITERS,
    PROJECTION_TOL,
};
pub use scheme::{plan_freeze_scheme, FreezeScheme};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lipschitz::DiffMap;
use crate::tensor::{Graph, SeedTree, Tensor, Var};

/// Ordered encoder blocks with the scheme that produced their freeze mask.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EncoderStack {
    pub blocks: Vec<EncoderBlock>,
    pub scheme: FreezeScheme,
}

impl EncoderStack {
    /// Fresh Xavier-initialised stack; block `i` draws from `seeds.rng("block{i}")`.
    pub fn new(cfg: BlockConfig, layers: usize, scheme: FreezeScheme, seeds: &SeedTree) -> Result<Self> {
        cfg.validate()?;
        let frozen = plan_freeze_scheme(&scheme, layers)?;
        let blocks = (0..layers)
            .map(|i| {
                let mut b = EncoderBlock::new(cfg, &mut seeds.rng(&format!("block{i}")));
                b.frozen = frozen.contains(&(i + 1));
                b
            })
            .collect();
        Ok(Self { blocks, scheme })
    }

    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    pub fn freeze_mask(&self) -> Vec<bool> {
        self.blocks.iter().map(|b| b.frozen).collect()
    }

    pub fn gammas(&self) -> Vec<f64> {
        self.blocks.iter().map(|b| b.gamma).collect()
    }

    /// Rescales every frozen block and projects every trainable one.
    /// Returns the raw Lipschitz estimate of each frozen block.
    pub fn prepare(&mut self, n_tokens: usize, budget: ProbeBudget, seeds: &SeedTree) -> Result<Vec<f64>> {
        let mut estimates = Vec::new();
        for (i, b) in self.blocks.iter_mut().enumerate() {
            if b.frozen {
                estimates.push(rescale_frozen_block(b, n_tokens, budget, &mut seeds.rng(&format!("rescale{i}")))?);
            } else {
                project_spectral(b)?;
            }
        }
        Ok(estimates)
    }

    /// Applies blocks `range` in order to `[B, N, d_model]` tokens on a tape.
    pub fn forward_range_on(
        &self,
        g: &mut Graph,
        vars: &[BlockVars],
        x: Var,
        range: std::ops::Range<usize>,
    ) -> Result<Var> {
        let mut z = x;
        for i in range {
            z = self.blocks[i].forward_on(g, &vars[i], z)?;
        }
        Ok(z)
    }

    pub fn forward(&self, z: &Tensor) -> Result<Tensor> {
        self.blocks.iter().try_fold(z.clone(), |x, b| b.forward(&x))
    }
}

impl DiffMap for EncoderStack {
    fn eval(&self, z: &Tensor) -> Result<Tensor> {
        self.forward(z)
    }

    fn vjp(&self, z: &Tensor, cotangent: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let x = g.param(z.clone());
        let vars: Vec<_> = self.blocks.iter().map(|b| b.bind_constant(&mut g)).collect();
        let (x3, squeeze) = block::as_batch(&mut g, x)?;
        let y = self.forward_range_on(&mut g, &vars, x3, 0..self.blocks.len())?;
        let y = if squeeze { g.reshape(y, z.shape())? } else { y };
        let grads = g.vjp(y, cotangent)?;
        Ok(grads.get(x).cloned().unwrap_or_else(|| Tensor::zeros(z.shape())))
    }
}

/// Runs `[d, N, d_model]` channel tokens through the stack and maps each
/// channel's final state to the horizon: `[H, d]`.
pub fn stack_forward(stack: &EncoderStack, head: &ForecastHead, tokens: &Tensor) -> Result<Tensor> {
    if tokens.rank() != 3 {
        return Err(Error::shape("stack_forward", format!("expected [d, N, d_model], got {:?}", tokens.shape())));
    }
    let mut g = Graph::new();
    let x = g.constant(tokens.clone());
    let vars: Vec<_> = stack.blocks.iter().map(|b| b.bind_constant(&mut g)).collect();
    let z = stack.forward_range_on(&mut g, &vars, x, 0..stack.len())?;
    let hv = head.bind(&mut g, false);
    let y = head.forward_on(&mut g, &hv, z)?;
    g.value(y).transpose()
}
