//! Twin-trajectory forgetting curve against `C·κ^τ`, and the receptive
//! field the bound implies.

use freezetst::analysis::{effective_receptive_field, twin_trajectory_experiment, MemorySummary, TwinSetup};
use freezetst::reservoir::ReservoirConfig;

fn main() -> freezetst::Result<()> {
    let (alpha, leak, eps) = (0.9, 0.5, 1e-2);
    let cfg = ReservoirConfig { size: 64, alpha, leak, ..ReservoirConfig::default() };
    let seeds: Vec<u64> = (0..10).collect();
    let curves = twin_trajectory_experiment(&cfg, TwinSetup { input_dim: 8, perturb_mag: 1.0, t_max: 120 }, &seeds)?;
    let s = MemorySummary::from_curves(alpha, leak, 1.0, eps, &curves);
    println!("kappa {:.4}, C {:.4}, L_eff {:?}, L_eff(C=1) {:?}", s.kappa, s.c, s.l_eff, s.l_eff_unit);
    println!("violations {}, latest first crossing {:?}", s.violations, s.max_first_crossing);

    let c = &curves[0];
    for tau in (0..=120).step_by(20) {
        println!("tau {tau:>3}  divergence {:.3e}  bound {:.3e}", c.divergences[tau], c.bound[tau]);
    }
    println!("L_eff for kappa 0.984 and C 1: {}", effective_receptive_field(eps, 1.0, 0.984)?);
    Ok(())
}
