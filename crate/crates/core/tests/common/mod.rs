//! Shared finite-difference harness for the gradient tests and the
//! acceptance suite.
#![allow(dead_code)]

use freezetst::encoder::{BlockConfig, EncoderBlock, FfnActivation, FreezeScheme, HeadMode};
use freezetst::model::{EscConfig, FreezeTst, ModelConfig};
use freezetst::patching::PatchConfig;
use freezetst::tensor::gradcheck::{check_directional, GradCheckReport, DEFAULT_STEP};
use freezetst::tensor::{Graph, Rng, Tensor, Var};
use freezetst::trainer::loss_direct_multistep_on;
use freezetst::Result;

pub type OpFn = Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var>>;

pub struct OpCase {
    pub name: &'static str,
    pub inputs: Vec<Tensor>,
    pub op: OpFn,
}

pub struct Checked {
    pub name: String,
    pub report: GradCheckReport,
}

fn randn(shape: &[usize], rng: &mut Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.normal())
}

/// Values pushed at least 0.1 away from zero, so kinked ops are smooth
/// along every probe.
fn away_from_zero(shape: &[usize], rng: &mut Rng) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let v = rng.normal();
        v + 0.1 * v.signum()
    })
}

fn case(name: &'static str, inputs: Vec<Tensor>, op: impl Fn(&mut Graph, &[Var]) -> Result<Var> + 'static) -> OpCase {
    OpCase { name, inputs, op: Box::new(op) }
}

/// One case per differentiable tape operation, plus the composite layers.
pub fn op_cases(rng: &mut Rng) -> Vec<OpCase> {
    let block = {
        let cfg = BlockConfig { d_model: 8, n_heads: 2, d_ff: 12, activation: FfnActivation::Gelu, ln_eps: 1.0 };
        EncoderBlock::new(cfg, &mut Rng::new(91))
    };
    vec![
        case("add", vec![randn(&[3, 4], rng), randn(&[3, 4], rng)], |g, v| g.add(v[0], v[1])),
        case("sub", vec![randn(&[3, 4], rng), randn(&[3, 4], rng)], |g, v| g.sub(v[0], v[1])),
        case("mul", vec![randn(&[3, 4], rng), randn(&[3, 4], rng)], |g, v| g.mul(v[0], v[1])),
        case("scale", vec![randn(&[5], rng)], |g, v| g.scale(v[0], -1.7)),
        case("add_scalar", vec![randn(&[5], rng)], |g, v| g.add_scalar(v[0], 0.3)),
        case("tanh", vec![randn(&[4, 3], rng)], |g, v| g.tanh(v[0])),
        case("gelu", vec![randn(&[4, 3], rng)], |g, v| g.gelu(v[0])),
        case("relu", vec![away_from_zero(&[4, 3], rng)], |g, v| g.relu(v[0])),
        case("square", vec![randn(&[4, 3], rng)], |g, v| g.square(v[0])),
        case("matmul", vec![randn(&[2, 3, 4], rng), randn(&[4, 5], rng)], |g, v| g.matmul(v[0], v[1])),
        case("matmul_t", vec![randn(&[2, 3, 4], rng), randn(&[5, 4], rng)], |g, v| g.matmul_t(v[0], v[1])),
        case("bmm", vec![randn(&[2, 3, 4], rng), randn(&[2, 4, 5], rng)], |g, v| g.bmm(v[0], v[1])),
        case("bmm_t", vec![randn(&[2, 3, 4], rng), randn(&[2, 5, 4], rng)], |g, v| g.bmm_t(v[0], v[1])),
        case("add_bias", vec![randn(&[2, 3, 4], rng), randn(&[4], rng)], |g, v| g.add_bias(v[0], v[1])),
        case("softmax", vec![randn(&[3, 5], rng)], |g, v| g.softmax(v[0])),
        case("layer_norm", vec![randn(&[3, 6], rng), randn(&[6], rng), randn(&[6], rng)], |g, v| {
            g.layer_norm(v[0], v[1], v[2], 1e-5)
        }),
        case("layer_norm_eps1", vec![randn(&[3, 6], rng), randn(&[6], rng), randn(&[6], rng)], |g, v| {
            g.layer_norm(v[0], v[1], v[2], 1.0)
        }),
        case("reshape", vec![randn(&[2, 6], rng)], |g, v| g.reshape(v[0], &[3, 4])),
        case("permute", vec![randn(&[2, 3, 4], rng)], |g, v| g.permute(v[0], &[2, 0, 1])),
        case("slice", vec![randn(&[3, 5], rng)], |g, v| g.slice(v[0], 1, 1, 3)),
        case("select", vec![randn(&[3, 5], rng)], |g, v| g.select(v[0], 0, 2)),
        case("concat", vec![randn(&[2, 3], rng), randn(&[2, 2], rng)], |g, v| g.concat(&[v[0], v[1]], 1)),
        case("stack", vec![randn(&[2, 3], rng), randn(&[2, 3], rng)], |g, v| g.stack(&[v[0], v[1]], 0)),
        case("sum", vec![randn(&[3, 4], rng)], |g, v| g.sum(v[0])),
        case("mean", vec![randn(&[3, 4], rng)], |g, v| g.mean(v[0])),
        case("encoder_block", vec![randn(&[2, 5, 8], rng)], move |g, v| {
            let vars = block.bind(g);
            block.forward_on(g, &vars, v[0])
        }),
    ]
}

/// Checks `∂⟨c, op(inputs)⟩ / ∂input_i` for every input along `probes`
/// random directions, with a fixed random cotangent `c`.
pub fn check_case(case: &OpCase, probes: usize, rng: &mut Rng) -> Result<Vec<Checked>> {
    let mut g = Graph::new();
    let vars: Vec<Var> = case.inputs.iter().map(|t| g.param(t.clone())).collect();
    let y = (case.op)(&mut g, &vars)?;
    let c = randn(g.value(y).shape(), rng);
    let grads = g.vjp(y, &c)?;
    let mut out = Vec::new();
    for (i, x) in case.inputs.iter().enumerate() {
        let analytic = grads.get(vars[i]).cloned().unwrap_or_else(|| Tensor::zeros(x.shape()));
        let mut f = |z: &Tensor| -> Result<f64> {
            let mut g = Graph::new();
            let vars: Vec<Var> = case
                .inputs
                .iter()
                .enumerate()
                .map(|(j, t)| g.constant(if j == i { z.clone() } else { t.clone() }))
                .collect();
            let y = (case.op)(&mut g, &vars)?;
            Ok(g.value(y).dot(&c))
        };
        let report = check_directional(&mut f, x, &analytic, probes, DEFAULT_STEP, rng)?;
        out.push(Checked { name: format!("{}[{i}]", case.name), report });
    }
    Ok(out)
}

/// Small models covering every parameter kind: all-trainable, and a
/// mixed frozen stack with the echo-state component and flatten head.
pub fn gradient_models() -> Vec<(&'static str, FreezeTst)> {
    let base = ModelConfig {
        patch: PatchConfig { patch_len: 4, stride: 2, lookback: 12, d_model: 8 },
        horizon: 3,
        n_layers: 2,
        n_heads: 2,
        ..ModelConfig::default()
    };
    let f0 = ModelConfig { scheme: FreezeScheme::F0, ..base.clone() };
    let esc = ModelConfig {
        n_layers: 3,
        scheme: FreezeScheme::Fa,
        head: HeadMode::Flatten,
        reservoir: Some(EscConfig { size: 10, ..EscConfig::fast() }),
        ..base
    };
    vec![("F0", sharpen(FreezeTst::new(f0, 5).unwrap())), ("Fa+ESC", sharpen(FreezeTst::new(esc, 6).unwrap()))]
}

/// Projected query/key maps leave attention close to uniform, where their
/// gradients sit near the round-off floor of a central difference. Larger
/// maps give a better-conditioned point for the check.
fn sharpen(mut model: FreezeTst) -> FreezeTst {
    for b in &mut model.stack.blocks {
        b.wq = b.wq.scale(4.0);
        b.wk = b.wk.scale(4.0);
    }
    model
}

pub fn model_batch(model: &FreezeTst, rng: &mut Rng) -> (Tensor, Tensor) {
    let d = 2;
    let windows: Vec<Tensor> = (0..3).map(|_| randn(&[model.config.patch.lookback, d], rng)).collect();
    let refs: Vec<&Tensor> = windows.iter().collect();
    let patches = model.patches(&refs).unwrap();
    let target = randn(&[3 * d, model.horizon()], rng);
    (patches, target)
}

fn model_loss(model: &FreezeTst, patches: &Tensor, target: &Tensor) -> Result<f64> {
    let mut g = Graph::new();
    let x = g.constant(patches.clone());
    let vars = model.bind(&mut g);
    let y = model.forward_on(&mut g, &vars, x)?;
    let t = g.constant(target.clone());
    let l = loss_direct_multistep_on(&mut g, y, t)?;
    Ok(g.value(l).item())
}

/// Training-loss gradient of every trainable tensor of `model`.
pub fn check_model(name: &str, model: &FreezeTst, probes: usize, rng: &mut Rng) -> Result<Vec<Checked>> {
    let (patches, target) = model_batch(model, rng);
    let mut g = Graph::new();
    let x = g.constant(patches.clone());
    let vars = model.bind(&mut g);
    let y = model.forward_on(&mut g, &vars, x)?;
    let t = g.constant(target.clone());
    let l = loss_direct_multistep_on(&mut g, y, t)?;
    let grads = g.backward(l)?;
    let names = model.trainable_names();
    let mut out = Vec::new();
    for (k, v) in vars.trainable.iter().enumerate() {
        let x0 = g.value(*v).clone();
        let analytic = grads.get(*v).cloned().unwrap_or_else(|| Tensor::zeros(x0.shape()));
        let mut f = |z: &Tensor| -> Result<f64> {
            let mut m = model.clone();
            *m.trainable_mut()[k] = z.clone();
            model_loss(&m, &patches, &target)
        };
        let report = check_directional(&mut f, &x0, &analytic, probes, DEFAULT_STEP, rng)?;
        out.push(Checked { name: format!("{name}:{}", names[k]), report });
    }
    Ok(out)
}

/// Training-loss gradient along random directions in the joint space of
/// every trainable tensor.
pub fn check_model_joint(model: &FreezeTst, probes: usize, rng: &mut Rng) -> Result<GradCheckReport> {
    let (patches, target) = model_batch(model, rng);
    let mut g = Graph::new();
    let x = g.constant(patches.clone());
    let vars = model.bind(&mut g);
    let y = model.forward_on(&mut g, &vars, x)?;
    let t = g.constant(target.clone());
    let l = loss_direct_multistep_on(&mut g, y, t)?;
    let grads = g.backward(l)?;
    let shapes: Vec<Vec<usize>> = vars.trainable.iter().map(|v| g.value(*v).shape().to_vec()).collect();
    let flat: Vec<f64> = vars.trainable.iter().flat_map(|v| g.value(*v).data().to_vec()).collect();
    let analytic: Vec<f64> = vars
        .trainable
        .iter()
        .flat_map(|v| grads.get(*v).cloned().unwrap_or_else(|| Tensor::zeros(g.value(*v).shape())).into_data())
        .collect();
    let n = flat.len();
    let mut f = |z: &Tensor| -> Result<f64> {
        let mut m = model.clone();
        let mut at = 0;
        for (dst, shape) in m.trainable_mut().into_iter().zip(&shapes) {
            let k: usize = shape.iter().product();
            *dst = Tensor::new(shape.clone(), z.data()[at..at + k].to_vec())?;
            at += k;
        }
        model_loss(&m, &patches, &target)
    };
    check_directional(&mut f, &Tensor::new(vec![n], flat)?, &Tensor::new(vec![n], analytic)?, probes, DEFAULT_STEP, rng)
}
