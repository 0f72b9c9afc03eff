//! The full forecaster: patch embedding, positional table, encoder stack
//! with an optional echo-state component, and the forecasting head.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::encoder::{
    BlockConfig, BlockVars, EncoderStack, FfnActivation, ForecastHead, FreezeScheme, HeadMode, HeadVars, ProbeBudget,
    BLOCK_PARAM_NAMES,
};
use crate::error::{Error, Result};
use crate::patching::{add_positional_on, embed_on, extract_patches_batch, PatchConfig};
use crate::reservoir::{build_reservoir, RecurrentScaling, ReservoirActivation, ReservoirConfig, ReservoirState};
use crate::tensor::{xavier_init, Graph, Precision, SeedTree, Tensor, Var};

pub const CHECKPOINT_FORMAT: &str = "freezetst-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Echo-state component settings as they appear in a model config. The
/// reservoir seed is derived from the model seed.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EscConfig {
    pub size: usize,
    pub alpha: f64,
    pub leak: f64,
    #[serde(default)]
    pub activation: ReservoirActivation,
    #[serde(default = "one")]
    pub input_scale: f64,
    #[serde(default)]
    pub scaling: RecurrentScaling,
    /// Number of encoder blocks before the reservoir; `None` means `⌈L/2⌉`.
    #[serde(default)]
    pub insert_after: Option<usize>,
}

fn one() -> f64 {
    1.0
}

impl Default for EscConfig {
    fn default() -> Self {
        let r = ReservoirConfig::default();
        Self {
            size: r.size,
            alpha: r.alpha,
            leak: r.leak,
            activation: r.activation,
            input_scale: r.input_scale,
            scaling: r.scaling,
            insert_after: None,
        }
    }
}

impl EscConfig {
    pub fn fast() -> Self {
        Self { size: 64, ..Self::default() }
    }

    pub fn reservoir(&self, seed: u64) -> ReservoirConfig {
        ReservoirConfig {
            size: self.size,
            alpha: self.alpha,
            leak: self.leak,
            activation: self.activation,
            input_scale: self.input_scale,
            scaling: self.scaling,
            seed,
        }
    }

    pub fn position(&self, layers: usize) -> usize {
        self.insert_after.unwrap_or(layers.div_ceil(2))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub patch: PatchConfig,
    pub horizon: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    /// FFN width; `None` means `2·d_model`.
    pub d_ff: Option<usize>,
    pub activation: FfnActivation,
    /// Layer-norm epsilon inside encoder blocks.
    pub ln_eps: f64,
    pub scheme: FreezeScheme,
    pub head: HeadMode,
    pub freeze_embedding: bool,
    pub reservoir: Option<EscConfig>,
    pub rescale: ProbeBudget,
    pub precision: Precision,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            patch: PatchConfig::default(),
            horizon: 16,
            n_layers: 3,
            n_heads: 4,
            d_ff: None,
            activation: FfnActivation::Gelu,
            ln_eps: 1.0,
            scheme: FreezeScheme::Fa,
            head: HeadMode::LastToken,
            freeze_embedding: false,
            reservoir: None,
            rescale: ProbeBudget::default(),
            precision: Precision::F64,
        }
    }
}

impl ModelConfig {
    pub fn block(&self) -> BlockConfig {
        BlockConfig {
            d_model: self.patch.d_model,
            n_heads: self.n_heads,
            d_ff: self.d_ff.unwrap_or(2 * self.patch.d_model),
            activation: self.activation,
            ln_eps: self.ln_eps,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.patch.validate()?;
        if self.horizon == 0 {
            return Err(Error::config("horizon", "must be at least 1"));
        }
        self.block().validate()?;
        crate::encoder::plan_freeze_scheme(&self.scheme, self.n_layers)?;
        if let Some(esc) = &self.reservoir {
            esc.reservoir(0).validate()?;
            if esc.position(self.n_layers) > self.n_layers {
                return Err(Error::config(
                    "reservoir.insert_after",
                    format!("beyond the {} encoder blocks", self.n_layers),
                ));
            }
        }
        Ok(())
    }
}

/// Where a parameter lives, for accounting.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    Embedding,
    Encoder(usize),
    Readout,
    /// Fixed reservoir weights; never trainable under any scheme.
    Reservoir,
    Head,
}

#[derive(Clone, Debug)]
pub struct ParamRef<'a> {
    pub name: String,
    pub tensor: &'a Tensor,
    pub trainable: bool,
    pub kind: ParamKind,
}

/// Exact parameter accounting.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamCount {
    pub total: usize,
    pub trainable: usize,
    pub frozen: usize,
    pub encoder_total: usize,
    pub encoder_trainable: usize,
    /// Trainable count the same architecture would have under `F0`.
    pub f0_trainable: usize,
    /// `trainable / f0_trainable`.
    pub ratio: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Esc {
    pub state: ReservoirState,
    pub insert_after: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FreezeTst {
    pub config: ModelConfig,
    pub seed: u64,
    pub embed_w: Tensor,
    pub embed_b: Tensor,
    pub stack: EncoderStack,
    pub reservoir: Option<Esc>,
    pub head: ForecastHead,
    /// Raw Lipschitz estimates of the frozen blocks, before scaling.
    pub rescale_estimates: Vec<f64>,
}

/// Tape handles for one forward pass.
#[derive(Clone, Debug)]
pub struct ModelVars {
    pub embed_w: Var,
    pub embed_b: Var,
    pub blocks: Vec<BlockVars>,
    pub readout: Option<Var>,
    pub head: HeadVars,
    /// Trainable leaves in [`FreezeTst::params`] order.
    pub trainable: Vec<Var>,
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    format: String,
    version: u32,
    seed: u64,
    freeze_mask: Vec<bool>,
    gammas: Vec<f64>,
    model: FreezeTst,
}

impl FreezeTst {
    /// Builds a model from `seed`: draws every weight, rescales frozen
    /// blocks and projects trainable ones.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let tree = SeedTree::new(seed).child("init");
        let (dm, p, n) = (config.patch.d_model, config.patch.patch_len, config.patch.num_patches());
        let embed_w = xavier_init(&mut tree.rng("embedding"), dm, p);
        let embed_b = Tensor::zeros(&[dm]);
        let mut stack =
            EncoderStack::new(config.block(), config.n_layers, config.scheme.clone(), &tree.child("encoder"))?;
        let rescale_estimates = stack.prepare(n, config.rescale, &tree.child("rescale"))?;
        let reservoir = match &config.reservoir {
            Some(esc) => Some(Esc {
                state: build_reservoir(&esc.reservoir(tree.seed("reservoir")), dm, dm)?,
                insert_after: esc.position(config.n_layers),
            }),
            None => None,
        };
        let head = ForecastHead::new(config.head, dm, n, config.horizon, &mut tree.rng("head"));
        Ok(Self { config, seed, embed_w, embed_b, stack, reservoir, head, rescale_estimates })
    }

    pub fn horizon(&self) -> usize {
        self.config.horizon
    }

    fn embedding_trainable(&self) -> bool {
        !self.config.freeze_embedding
    }

    /// Every parameter in canonical order.
    pub fn params(&self) -> Vec<ParamRef<'_>> {
        let emb = self.embedding_trainable();
        let mut out = vec![
            ParamRef {
                name: "embedding.weight".into(),
                tensor: &self.embed_w,
                trainable: emb,
                kind: ParamKind::Embedding,
            },
            ParamRef {
                name: "embedding.bias".into(),
                tensor: &self.embed_b,
                trainable: emb,
                kind: ParamKind::Embedding,
            },
        ];
        for (i, b) in self.stack.blocks.iter().enumerate() {
            for (name, t) in BLOCK_PARAM_NAMES.iter().zip(b.tensors()) {
                out.push(ParamRef {
                    name: format!("blocks.{i}.{name}"),
                    tensor: t,
                    trainable: !b.frozen,
                    kind: ParamKind::Encoder(i),
                });
            }
        }
        if let Some(esc) = &self.reservoir {
            out.push(ParamRef {
                name: "reservoir.w_out".into(),
                tensor: &esc.state.w_out,
                trainable: true,
                kind: ParamKind::Readout,
            });
        }
        out.push(ParamRef {
            name: "head.weight".into(),
            tensor: &self.head.weight,
            trainable: true,
            kind: ParamKind::Head,
        });
        out.push(ParamRef {
            name: "head.bias".into(),
            tensor: &self.head.bias,
            trainable: true,
            kind: ParamKind::Head,
        });
        if let Some(esc) = &self.reservoir {
            for (name, t) in esc.state.fixed_tensors() {
                out.push(ParamRef {
                    name: format!("reservoir.{name}"),
                    tensor: t,
                    trainable: false,
                    kind: ParamKind::Reservoir,
                });
            }
        }
        out
    }

    /// Mutable trainable tensors, in the order of [`ModelVars::trainable`].
    pub fn trainable_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        if !self.config.freeze_embedding {
            out.push(&mut self.embed_w);
            out.push(&mut self.embed_b);
        }
        for b in self.stack.blocks.iter_mut().filter(|b| !b.frozen) {
            out.extend(b.tensors_mut());
        }
        if let Some(esc) = &mut self.reservoir {
            out.push(&mut esc.state.w_out);
        }
        out.push(&mut self.head.weight);
        out.push(&mut self.head.bias);
        out
    }

    pub fn trainable_names(&self) -> Vec<String> {
        self.params().into_iter().filter(|p| p.trainable).map(|p| p.name).collect()
    }

    pub fn count_parameters(&self) -> ParamCount {
        let params = self.params();
        let sum =
            |f: &dyn Fn(&ParamRef) -> bool| params.iter().filter(|p| f(p)).map(|p| p.tensor.numel()).sum::<usize>();
        let total = sum(&|_| true);
        let trainable = sum(&|p| p.trainable);
        let encoder = |p: &ParamRef| matches!(p.kind, ParamKind::Encoder(_));
        let f0_trainable = sum(&|p| p.kind != ParamKind::Reservoir);
        ParamCount {
            total,
            trainable,
            frozen: total - trainable,
            encoder_total: sum(&encoder),
            encoder_trainable: sum(&|p| encoder(p) && p.trainable),
            f0_trainable,
            ratio: trainable as f64 / f0_trainable as f64,
        }
    }

    /// SHA-256 over the names, shapes and exact bits of every frozen tensor.
    pub fn frozen_digest(&self) -> String {
        let mut h = Sha256::new();
        for p in self.params().into_iter().filter(|p| !p.trainable) {
            h.update(p.name.as_bytes());
            h.update([0u8]);
            for &d in p.tensor.shape() {
                h.update((d as u64).to_le_bytes());
            }
            for v in p.tensor.data() {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    pub fn bind(&self, g: &mut Graph) -> ModelVars {
        let mut trainable = Vec::new();
        let mut leaf = |g: &mut Graph, t: &Tensor, train: bool| {
            if train {
                let v = g.param(t.clone());
                trainable.push(v);
                v
            } else {
                g.constant(t.clone())
            }
        };
        let emb = self.embedding_trainable();
        let embed_w = leaf(g, &self.embed_w, emb);
        let embed_b = leaf(g, &self.embed_b, emb);
        let blocks = self
            .stack
            .blocks
            .iter()
            .map(|b| {
                let vars = b.tensors().map(|t| leaf(g, t, !b.frozen));
                BlockVars(vars)
            })
            .collect();
        let readout = self.reservoir.as_ref().map(|esc| leaf(g, &esc.state.w_out, true));
        let head = HeadVars { weight: leaf(g, &self.head.weight, true), bias: leaf(g, &self.head.bias, true) };
        ModelVars { embed_w, embed_b, blocks, readout, head, trainable }
    }

    /// Encoder output tokens `[B, N, d_model]` for `[B, N, p]` patches.
    pub fn encode_on(&self, g: &mut Graph, vars: &ModelVars, patches: Var) -> Result<Var> {
        let z = embed_on(g, patches, vars.embed_w, vars.embed_b)?;
        let mut z = add_positional_on(g, z)?;
        let split = self.reservoir.as_ref().map_or(self.stack.len(), |e| e.insert_after);
        z = self.stack.forward_range_on(g, &vars.blocks, z, 0..split)?;
        if let (Some(esc), Some(w_out)) = (&self.reservoir, vars.readout) {
            z = esc.state.forward_on(g, w_out, z)?;
        }
        self.stack.forward_range_on(g, &vars.blocks, z, split..self.stack.len())
    }

    /// Forecasts `[B, H]` for `[B, N, p]` patches.
    pub fn forward_on(&self, g: &mut Graph, vars: &ModelVars, patches: Var) -> Result<Var> {
        let z = self.encode_on(g, vars, patches)?;
        self.head.forward_on(g, &vars.head, z)
    }

    /// Patches for a batch of `[T, d]` windows: `[windows·d, N, p]`.
    pub fn patches(&self, windows: &[&Tensor]) -> Result<Tensor> {
        extract_patches_batch(windows, &self.config.patch)
    }

    /// `[H, d]` forecasts for each `[T, d]` window.
    pub fn predict(&self, windows: &[&Tensor]) -> Result<Vec<Tensor>> {
        let Some(first) = windows.first() else {
            return Ok(Vec::new());
        };
        let d = first.shape().get(1).copied().unwrap_or(1);
        let mut g = Graph::with_precision(self.config.precision);
        let x = g.constant(self.patches(windows)?);
        let vars = self.bind(&mut g);
        let y = self.forward_on(&mut g, &vars, x)?;
        let rows = g.value(y);
        let hz = self.horizon();
        Ok((0..windows.len())
            .map(|w| Tensor::from_fn(&[hz, d], |i| rows.data()[(w * d + i % d) * hz + i / d]))
            .collect())
    }

    pub fn to_checkpoint_json(&self) -> Result<String> {
        let ck = CheckpointRef {
            format: CHECKPOINT_FORMAT,
            version: CHECKPOINT_VERSION,
            seed: self.seed,
            freeze_mask: self.stack.freeze_mask(),
            gammas: self.stack.gammas(),
            model: self,
        };
        Ok(serde_json::to_string_pretty(&ck)?)
    }

    pub fn from_checkpoint_json(text: &str) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_str(text)?;
        if ck.format != CHECKPOINT_FORMAT {
            return Err(Error::config("format", format!("not a checkpoint: {:?}", ck.format)));
        }
        if ck.version != CHECKPOINT_VERSION {
            return Err(Error::config("version", format!("unsupported checkpoint version {}", ck.version)));
        }
        let mut model = ck.model;
        if ck.seed != model.seed || ck.freeze_mask != model.stack.freeze_mask() || ck.gammas != model.stack.gammas() {
            return Err(Error::Contract("checkpoint header disagrees with its model body".into()));
        }
        if let Some(esc) = &mut model.reservoir {
            esc.state.reset();
        }
        Ok(model)
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_checkpoint_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load_checkpoint(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_checkpoint_json(&text)
    }
}

#[derive(Serialize)]
struct CheckpointRef<'a> {
    format: &'a str,
    version: u32,
    seed: u64,
    freeze_mask: Vec<bool>,
    gammas: Vec<f64>,
    model: &'a FreezeTst,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Rng;

    pub(crate) fn small(scheme: FreezeScheme, layers: usize) -> ModelConfig {
        ModelConfig {
            patch: PatchConfig { patch_len: 8, stride: 4, lookback: 24, d_model: 8 },
            horizon: 4,
            n_layers: layers,
            n_heads: 2,
            scheme,
            rescale: ProbeBudget { pairs: 32, power_iters: 5 },
            ..ModelConfig::default()
        }
    }

    #[test]
    fn trainable_order_matches_bind_order() {
        let cfg =
            ModelConfig { reservoir: Some(EscConfig { size: 5, ..EscConfig::fast() }), ..small(FreezeScheme::Fa, 3) };
        let mut m = FreezeTst::new(cfg, 1).unwrap();
        let mut g = Graph::new();
        let vars = m.bind(&mut g);
        let values: Vec<Tensor> = vars.trainable.iter().map(|v| g.value(*v).clone()).collect();
        let names = m.trainable_names();
        let tensors = m.trainable_mut();
        assert_eq!(values.len(), tensors.len());
        assert_eq!(names.len(), tensors.len());
        for (v, t) in values.iter().zip(tensors) {
            assert_eq!(v, &*t);
        }
    }

    #[test]
    fn fa_halves_encoder_budget() {
        let m = FreezeTst::new(small(FreezeScheme::Fa, 4), 2).unwrap();
        let c = m.count_parameters();
        assert_eq!(2 * c.encoder_trainable, c.encoder_total);
        assert!(c.ratio > 0.5 && c.ratio < 1.0);
        assert_eq!(c.trainable + c.frozen, c.total);
        let f0 = FreezeTst::new(small(FreezeScheme::F0, 4), 2).unwrap().count_parameters();
        assert_eq!(f0.ratio, 1.0);
        assert_eq!(f0.total, c.total);
    }

    #[test]
    fn ratios_follow_scheme_order() {
        let r = |s| FreezeTst::new(small(s, 5), 3).unwrap().count_parameters().ratio;
        let (f0, fall, fa, f1, ffl) = (
            r(FreezeScheme::F0),
            r(FreezeScheme::Fall),
            r(FreezeScheme::Fa),
            r(FreezeScheme::F1),
            r(FreezeScheme::Ffl),
        );
        assert!(fall < fa && fa <= ffl && ffl <= f1 && f1 < f0);
    }

    #[test]
    fn construction_is_deterministic_and_checkpoint_round_trips() {
        let cfg =
            ModelConfig { reservoir: Some(EscConfig { size: 6, ..EscConfig::fast() }), ..small(FreezeScheme::Fa, 2) };
        let a = FreezeTst::new(cfg.clone(), 9).unwrap();
        let b = FreezeTst::new(cfg, 9).unwrap();
        let (ja, jb) = (a.to_checkpoint_json().unwrap(), b.to_checkpoint_json().unwrap());
        assert_eq!(ja, jb);
        let back = FreezeTst::from_checkpoint_json(&ja).unwrap();
        assert_eq!(back.to_checkpoint_json().unwrap(), ja);
        assert_eq!(back.frozen_digest(), a.frozen_digest());
        let mut rng = Rng::new(0);
        let w = Tensor::from_fn(&[24, 2], |_| rng.normal());
        assert_eq!(a.predict(&[&w]).unwrap(), back.predict(&[&w]).unwrap());
    }

    #[test]
    fn prediction_layout_is_horizon_by_channel() {
        let m = FreezeTst::new(small(FreezeScheme::F0, 1), 4).unwrap();
        let mut rng = Rng::new(1);
        let w = Tensor::from_fn(&[24, 1], |_| rng.normal());
        let twin = Tensor::from_fn(&[24, 2], |i| w.data()[i / 2]);
        let y1 = &m.predict(&[&w]).unwrap()[0];
        let y2 = &m.predict(&[&twin]).unwrap()[0];
        assert_eq!(y2.shape(), &[4, 2]);
        for h in 0..4 {
            assert_eq!(y2.at(&[h, 0]), y1.at(&[h, 0]));
            assert_eq!(y2.at(&[h, 1]), y1.at(&[h, 0]));
        }
    }

    #[test]
    fn invalid_horizon_names_field() {
        let err = FreezeTst::new(ModelConfig { horizon: 0, ..small(FreezeScheme::F0, 1) }, 0).unwrap_err();
        assert!(matches!(err, Error::Config { ref field, .. } if field == "horizon"));
    }
}
