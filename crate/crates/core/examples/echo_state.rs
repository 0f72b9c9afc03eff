//! Echo-state component between encoder blocks: a fixed leaky tanh
//! reservoir over the patch sequence with a trained linear readout.

use freezetst::data::{gen_synthetic, SyntheticKind};
use freezetst::encoder::HeadMode;
use freezetst::model::{EscConfig, FreezeTst, ModelConfig};
use freezetst::patching::PatchConfig;
use freezetst::trainer::{train, TrainConfig};

fn main() -> freezetst::Result<()> {
    let ds = gen_synthetic(SyntheticKind::Sines, 800, 3, 0.1, 11)?;
    let esc = EscConfig { size: 64, alpha: 0.9, leak: 0.99, ..EscConfig::default() };
    let cfg = ModelConfig {
        patch: PatchConfig { patch_len: 16, stride: 8, lookback: 64, d_model: 16 },
        horizon: 16,
        n_layers: 4,
        head: HeadMode::Flatten,
        reservoir: Some(esc),
        ..ModelConfig::default()
    };
    println!("reservoir after block {}", esc.position(cfg.n_layers));
    let mut model = FreezeTst::new(cfg, 0)?;
    let report = train(&mut model, &ds, &TrainConfig { epochs: 8, learning_rate: 1e-2, ..TrainConfig::default() })?;
    println!("test mse {:.5} (persistence {:.5})", report.test.mse, report.persistence.mse);
    let pc = report.params;
    println!("trainable {} / total {} (ratio {:.3})", pc.trainable, pc.total, pc.ratio);
    Ok(())
}
