//! Parameter accounting for every freeze placement at depth 4.

use freezetst::encoder::FreezeScheme;
use freezetst::model::{FreezeTst, ModelConfig};

fn main() -> freezetst::Result<()> {
    let schemes = [
        FreezeScheme::F0,
        FreezeScheme::Fa,
        FreezeScheme::F1,
        FreezeScheme::Ffl,
        FreezeScheme::Fall,
        FreezeScheme::Custom(vec![2, 3]),
    ];
    println!("{:<10} {:<14} {:>9} {:>9} {:>7}", "scheme", "frozen", "trainable", "total", "ratio");
    for scheme in schemes {
        let model = FreezeTst::new(ModelConfig { n_layers: 4, scheme: scheme.clone(), ..ModelConfig::default() }, 0)?;
        let pc = model.count_parameters();
        let mask: String = model.stack.freeze_mask().iter().map(|&f| if f { 'F' } else { 'T' }).collect();
        println!("{:<10} {:<14} {:>9} {:>9} {:>7.3}", scheme.to_string(), mask, pc.trainable, pc.total, pc.ratio);
        println!(
            "{:<10} gammas {:?}",
            "",
            model.stack.gammas().iter().map(|g| (g * 1e3).round() / 1e3).collect::<Vec<_>>()
        );
    }
    Ok(())
}
