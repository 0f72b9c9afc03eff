//! Train the alternating-freeze model on noisy sines and compare with
//! the last-value baseline.

use freezetst::data::{gen_synthetic, SyntheticKind};
use freezetst::encoder::HeadMode;
use freezetst::model::{FreezeTst, ModelConfig};
use freezetst::patching::PatchConfig;
use freezetst::trainer::{train, TrainConfig};

fn main() -> freezetst::Result<()> {
    let ds = gen_synthetic(SyntheticKind::Sines, 800, 3, 0.1, 11)?;
    let cfg = ModelConfig {
        patch: PatchConfig { patch_len: 16, stride: 8, lookback: 64, d_model: 16 },
        horizon: 16,
        n_layers: 4,
        head: HeadMode::Flatten,
        ..ModelConfig::default()
    };
    let mut model = FreezeTst::new(cfg, 0)?;
    let report = train(&mut model, &ds, &TrainConfig { epochs: 8, learning_rate: 1e-2, ..TrainConfig::default() })?;
    for e in &report.epochs {
        println!("epoch {:>2}  train {:.5}  val {:.5}", e.epoch, e.train_loss, e.val_loss);
    }
    println!(
        "test mse {:.5} (persistence {:.5}), best epoch {}",
        report.test.mse, report.persistence.mse, report.best_epoch
    );
    println!("trainable {} of {} parameters", report.trainable_params, report.total_params);
    Ok(())
}
