use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{xavier_init, Graph, Rng, Tensor, Var};

/// Which hidden states feed the forecasting head.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadMode {
    /// The final patch token of each channel.
    #[default]
    LastToken,
    /// All `N` tokens concatenated.
    Flatten,
}

/// Affine map from a channel's hidden state to its `H` future values,
/// shared across channels.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ForecastHead {
    pub mode: HeadMode,
    pub weight: Tensor,
    pub bias: Tensor,
}

#[derive(Clone, Copy, Debug)]
pub struct HeadVars {
    pub weight: Var,
    pub bias: Var,
}

impl ForecastHead {
    pub fn new(mode: HeadMode, d_model: usize, n_tokens: usize, horizon: usize, rng: &mut Rng) -> Self {
        let fan_in = Self::fan_in(mode, d_model, n_tokens);
        Self { mode, weight: xavier_init(rng, horizon, fan_in), bias: Tensor::zeros(&[horizon]) }
    }

    pub fn zeros(mode: HeadMode, d_model: usize, n_tokens: usize, horizon: usize) -> Self {
        let fan_in = Self::fan_in(mode, d_model, n_tokens);
        Self { mode, weight: Tensor::zeros(&[horizon, fan_in]), bias: Tensor::zeros(&[horizon]) }
    }

    fn fan_in(mode: HeadMode, d_model: usize, n_tokens: usize) -> usize {
        match mode {
            HeadMode::LastToken => d_model,
            HeadMode::Flatten => d_model * n_tokens,
        }
    }

    pub fn horizon(&self) -> usize {
        self.bias.numel()
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> HeadVars {
        if trainable {
            HeadVars { weight: g.param(self.weight.clone()), bias: g.param(self.bias.clone()) }
        } else {
            HeadVars { weight: g.constant(self.weight.clone()), bias: g.constant(self.bias.clone()) }
        }
    }

    /// `[B, N, d_model]` tokens to `[B, H]` forecasts.
    pub fn forward_on(&self, g: &mut Graph, p: &HeadVars, tokens: Var) -> Result<Var> {
        let &[b, n, dm] = g.value(tokens).shape() else {
            return Err(Error::shape(
                "forecast_head",
                format!("expected [B, N, d_model], got {:?}", g.value(tokens).shape()),
            ));
        };
        let x = match self.mode {
            HeadMode::LastToken => g.select(tokens, 1, n - 1)?,
            HeadMode::Flatten => g.reshape(tokens, &[b, n * dm])?,
        };
        let y = g.matmul_t(x, p.weight)?;
        g.add_bias(y, p.bias)
    }
}
