//! Cut a two-channel window into patches and tokenise it.

use freezetst::patching::{extract_patches, tokenize, PatchConfig};
use freezetst::tensor::{xavier_init, Rng, Tensor};

fn main() -> freezetst::Result<()> {
    let cfg = PatchConfig { patch_len: 4, stride: 2, lookback: 12, d_model: 8 };
    // channel k at step t holds 10k + t
    let window = Tensor::from_fn(&[12, 2], |i| (10 * (i % 2) + i / 2) as f64);

    let patches = extract_patches(&window, &cfg)?;
    println!("{} patches per channel, shape {:?}", cfg.num_patches(), patches.shape());
    for i in 0..cfg.num_patches() {
        println!("channel 1, patch {i}: {:?}", &patches.data()[(cfg.num_patches() + i) * 4..][..4]);
    }

    let mut rng = Rng::new(0);
    let (w, b) = (xavier_init(&mut rng, cfg.d_model, cfg.patch_len), Tensor::zeros(&[cfg.d_model]));
    let batch = tokenize(&window, &cfg, &w, &b)?;
    println!("tokens {:?}", batch.tokens.shape());
    Ok(())
}
