//! Central-difference check of a small model's training-loss gradient.

use freezetst::model::{FreezeTst, ModelConfig};
use freezetst::patching::PatchConfig;
use freezetst::tensor::gradcheck::{check_directional, DEFAULT_STEP};
use freezetst::tensor::{Graph, Rng, Tensor};
use freezetst::trainer::loss_direct_multistep_on;

fn loss(model: &FreezeTst, patches: &Tensor, target: &Tensor) -> freezetst::Result<f64> {
    let mut g = Graph::new();
    let x = g.constant(patches.clone());
    let vars = model.bind(&mut g);
    let y = model.forward_on(&mut g, &vars, x)?;
    let t = g.constant(target.clone());
    let l = loss_direct_multistep_on(&mut g, y, t)?;
    Ok(g.value(l).item())
}

fn main() -> freezetst::Result<()> {
    let cfg = ModelConfig {
        patch: PatchConfig { patch_len: 4, stride: 2, lookback: 12, d_model: 8 },
        horizon: 3,
        n_layers: 2,
        n_heads: 2,
        ..ModelConfig::default()
    };
    let model = FreezeTst::new(cfg, 5)?;
    let mut rng = Rng::new(1);
    let window = Tensor::from_fn(&[12, 2], |_| rng.normal());
    let patches = model.patches(&[&window])?;
    let target = Tensor::from_fn(&[2, 3], |_| rng.normal());

    let mut g = Graph::new();
    let x = g.constant(patches.clone());
    let vars = model.bind(&mut g);
    let y = model.forward_on(&mut g, &vars, x)?;
    let t = g.constant(target.clone());
    let l = loss_direct_multistep_on(&mut g, y, t)?;
    let grads = g.backward(l)?;

    for (k, name) in model.trainable_names().iter().enumerate() {
        let v = vars.trainable[k];
        let x0 = g.value(v).clone();
        let analytic = grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros(x0.shape()));
        let mut f = |z: &Tensor| {
            let mut m = model.clone();
            *m.trainable_mut()[k] = z.clone();
            loss(&m, &patches, &target)
        };
        let r = check_directional(&mut f, &x0, &analytic, 20, DEFAULT_STEP, &mut rng)?;
        println!("{name:<24} max rel err {:.2e}", r.max_rel_err);
    }
    Ok(())
}
