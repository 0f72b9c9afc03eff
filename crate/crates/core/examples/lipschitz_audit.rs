//! Probe-pair and gradient-norm audit of a freshly built encoder.

use freezetst::cli::verify_lipschitz;
use freezetst::encoder::FreezeScheme;
use freezetst::model::{FreezeTst, ModelConfig};
use freezetst::patching::PatchConfig;

fn main() -> freezetst::Result<()> {
    for scheme in [FreezeScheme::Fa, FreezeScheme::Fall, FreezeScheme::F0] {
        let cfg = ModelConfig {
            patch: PatchConfig { patch_len: 16, stride: 8, lookback: 64, d_model: 32 },
            n_layers: 4,
            scheme: scheme.clone(),
            ..ModelConfig::default()
        };
        let model = FreezeTst::new(cfg, 1)?;
        let v = verify_lipschitz(&model, 500, 50, 0)?;
        println!(
            "{scheme:<5} lipschitz {:.4}  grad ratio {:.4}  {}",
            v.audit.lipschitz,
            v.audit.max_gradient_ratio,
            if v.passed { "pass" } else { "FAIL" }
        );
    }
    // F0 has no frozen block to absorb the residual path, so it can exceed 1.
    Ok(())
}
