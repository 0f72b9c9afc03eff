//! Every freeze scheme over a few seeds from one run config.

use freezetst::cli::{sweep_schemes, RunConfig};
use freezetst::encoder::FreezeScheme;

const CONFIG: &str = r#"{
  "seed": 0,
  "data": { "source": "synthetic", "kind": "sines", "timesteps": 600, "channels": 2, "noise_std": 0.1 },
  "model": {
    "patch": { "patch_len": 8, "stride": 4, "lookback": 32, "d_model": 16 },
    "horizon": 8, "n_layers": 4, "head": "flatten"
  },
  "train": { "epochs": 4, "learning_rate": 0.01 },
  "sweep": { "seeds": [0, 1] },
  "output_dir": "runs/sweep"
}"#;

fn main() -> freezetst::Result<()> {
    let cfg = RunConfig::from_json(CONFIG)?;
    let schemes = [FreezeScheme::F0, FreezeScheme::Fa, FreezeScheme::F1, FreezeScheme::Ffl, FreezeScheme::Fall];
    let result = sweep_schemes(&cfg, &schemes)?;
    print!("{}", result.to_csv());
    for s in &result.summary {
        println!("{:<5} median mse {:.5} ratio {:.3}", s.scheme, s.median_test_mse, s.trainable_ratio);
    }
    Ok(())
}
