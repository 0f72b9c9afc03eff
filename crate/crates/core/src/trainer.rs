//! Direct multi-step training: every horizon step is predicted at once from
//! the look-back window and the squared error is summed over the horizon.

use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::{format_f64, make_windows, normalize, NormStats, SeriesDataset, Split, WindowPair};
use crate::encoder::project_spectral;
use crate::error::{Error, Result};
use crate::model::{FreezeTst, ParamCount};
use crate::tensor::{Graph, SeedTree, Tensor, Var};

/// Windows per forward pass when evaluating.
const EVAL_BATCH: usize = 256;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Epochs without a `min_delta` improvement of validation loss before
    /// stopping; `0` disables early stopping.
    pub patience: usize,
    pub min_delta: f64,
    /// Seed of the per-epoch shuffles. Run configs derive it from their
    /// root seed.
    #[serde(skip)]
    pub seed: u64,
    /// Also report test metrics on the original scale.
    pub denormalized_metrics: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            epochs: 30,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            patience: 10,
            min_delta: 1e-5,
            seed: 0,
            denormalized_metrics: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be at least 1"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("learning_rate", "must be positive and finite"));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::config(name, "must lie in [0, 1)"));
            }
        }
        if !(self.adam_eps > 0.0) {
            return Err(Error::config("adam_eps", "must be positive"));
        }
        if !(self.min_delta >= 0.0) {
            return Err(Error::config("min_delta", "must be non-negative"));
        }
        Ok(())
    }
}

/// `(1/d)·Σ_j ‖target_j − pred_j‖²` over `[H, d]` forecasts.
pub fn loss_direct_multistep(pred: &Tensor, target: &Tensor) -> Result<f64> {
    if pred.shape() != target.shape() || pred.rank() != 2 {
        return Err(Error::shape("loss_direct_multistep", format!("{:?} vs {:?}", pred.shape(), target.shape())));
    }
    let d = pred.shape()[1];
    let sq: f64 = pred.data().iter().zip(target.data()).map(|(p, t)| (t - p) * (t - p)).sum();
    Ok(sq / d as f64)
}

/// Batched form on channel-independent rows `[B·d, H]`: the sum of
/// squared errors over the number of rows, i.e. [`loss_direct_multistep`]
/// averaged over windows.
pub fn loss_direct_multistep_on(g: &mut Graph, pred: Var, target: Var) -> Result<Var> {
    let rows = g.value(pred).shape().first().copied().unwrap_or(1).max(1);
    let diff = g.sub(pred, target)?;
    let sq = g.square(diff)?;
    let s = g.sum(sq)?;
    g.scale(s, 1.0 / rows as f64)
}

/// `[W·d, H]` rows matching the model's output layout.
pub fn target_rows(windows: &[&WindowPair]) -> Result<Tensor> {
    let Some(first) = windows.first() else {
        return Ok(Tensor::zeros(&[0, 0]));
    };
    let (h, d) = first.target.dims2("target_rows")?;
    let mut out = Vec::with_capacity(windows.len() * h * d);
    for w in windows {
        for c in 0..d {
            out.extend((0..h).map(|t| w.target.data()[t * d + c]));
        }
    }
    Tensor::new(vec![windows.len() * d, h], out)
}

/// Repeats the last observed step across the horizon.
pub fn persistence_forecast(input: &Tensor, horizon: usize) -> Result<Tensor> {
    let (t, d) = input.dims2("persistence_forecast")?;
    if t == 0 {
        return Err(Error::shape("persistence_forecast", "empty window"));
    }
    let last = &input.data()[(t - 1) * d..];
    Ok(Tensor::from_fn(&[horizon, d], |i| last[i % d]))
}

/// Adam over an explicit list of trainable tensors. State is allocated per
/// listed tensor only.
#[derive(Clone, Debug)]
pub struct Adam {
    pub learning_rate: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    steps: i32,
    names: Vec<String>,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(cfg: &TrainConfig, names: Vec<String>, sizes: &[usize]) -> Self {
        Self {
            learning_rate: cfg.learning_rate,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.adam_eps,
            steps: 0,
            names,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn for_model(cfg: &TrainConfig, model: &mut FreezeTst) -> Self {
        let names = model.trainable_names();
        let sizes: Vec<usize> = model.trainable_mut().iter().map(|t| t.numel()).collect();
        Self::new(cfg, names, &sizes)
    }

    /// Names of the tensors holding optimizer state.
    pub fn state_names(&self) -> &[String] {
        &self.names
    }

    pub fn state_len(&self) -> usize {
        self.m.iter().map(Vec::len).sum()
    }

    pub fn step(&mut self, params: Vec<&mut Tensor>, grads: &[Tensor]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::Contract(format!(
                "optimizer holds {} tensors, got {} parameters and {} gradients",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        self.steps += 1;
        let c1 = 1.0 - self.beta1.powi(self.steps);
        let c2 = 1.0 - self.beta2.powi(self.steps);
        for (((p, g), m), v) in params.into_iter().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            if p.numel() != m.len() || g.numel() != m.len() {
                return Err(Error::shape(
                    "adam",
                    format!("{} values, {} gradients, {} state", p.numel(), g.numel(), m.len()),
                ));
            }
            for (((x, &g), m), v) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                *x -= self.learning_rate * (*m / c1) / ((*v / c2).sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Forecast errors over a set of windows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub windows: usize,
    /// Mean of [`loss_direct_multistep`] over windows.
    pub loss: f64,
    pub mse: f64,
    pub mae: f64,
    pub mse_per_channel: Vec<f64>,
    pub mae_per_channel: Vec<f64>,
}

impl Metrics {
    /// Accumulates `[H, d]` forecast/target pairs.
    pub fn from_pairs<'a>(pairs: impl IntoIterator<Item = (&'a Tensor, &'a Tensor)>) -> Result<Self> {
        let mut windows = 0;
        let mut se: Vec<f64> = Vec::new();
        let mut ae: Vec<f64> = Vec::new();
        let mut h = 0;
        for (pred, target) in pairs {
            if pred.shape() != target.shape() {
                return Err(Error::shape("metrics", format!("{:?} vs {:?}", pred.shape(), target.shape())));
            }
            let (hz, d) = pred.dims2("metrics")?;
            if windows == 0 {
                se = vec![0.0; d];
                ae = vec![0.0; d];
                h = hz;
            }
            if se.len() != d || hz != h {
                return Err(Error::shape("metrics", "windows differ in shape"));
            }
            for (i, (p, t)) in pred.data().iter().zip(target.data()).enumerate() {
                se[i % d] += (t - p) * (t - p);
                ae[i % d] += (t - p).abs();
            }
            windows += 1;
        }
        if windows == 0 {
            return Err(Error::config("windows", "no windows to evaluate"));
        }
        let d = se.len();
        let per = (windows * h) as f64;
        let mse_per_channel: Vec<f64> = se.iter().map(|s| s / per).collect();
        let mae_per_channel: Vec<f64> = ae.iter().map(|s| s / per).collect();
        Ok(Self {
            windows,
            loss: se.iter().sum::<f64>() / (windows * d) as f64,
            mse: mse_per_channel.iter().sum::<f64>() / d as f64,
            mae: mae_per_channel.iter().sum::<f64>() / d as f64,
            mse_per_channel,
            mae_per_channel,
        })
    }
}

/// Model forecasts for every window, batched.
pub fn forecast(model: &FreezeTst, windows: &[WindowPair]) -> Result<Vec<Tensor>> {
    let mut out = Vec::with_capacity(windows.len());
    for chunk in windows.chunks(EVAL_BATCH) {
        let inputs: Vec<&Tensor> = chunk.iter().map(|w| &w.input).collect();
        out.extend(model.predict(&inputs)?);
    }
    Ok(out)
}

pub fn evaluate(model: &FreezeTst, windows: &[WindowPair]) -> Result<Metrics> {
    let preds = forecast(model, windows)?;
    Metrics::from_pairs(preds.iter().zip(windows.iter().map(|w| &w.target)))
}

/// Metrics of a forecast against targets on the original scale.
pub fn evaluate_denormalized(model: &FreezeTst, windows: &[WindowPair], stats: &NormStats) -> Result<Metrics> {
    let preds = forecast(model, windows)?;
    let preds: Vec<Tensor> = preds.iter().map(|p| crate::data::denormalize_values(p, stats)).collect();
    let targets: Vec<Tensor> = windows.iter().map(|w| crate::data::denormalize_values(&w.target, stats)).collect();
    Metrics::from_pairs(preds.iter().zip(&targets))
}

pub fn persistence_metrics(windows: &[WindowPair]) -> Result<Metrics> {
    let preds =
        windows.iter().map(|w| persistence_forecast(&w.input, w.target.shape()[0])).collect::<Result<Vec<_>>>()?;
    Metrics::from_pairs(preds.iter().zip(windows.iter().map(|w| &w.target)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub seconds: f64,
}

/// Median and range of epoch wall times.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EpochTiming {
    pub epochs: usize,
    pub median: f64,
    pub min: f64,
    pub max: f64,
}

impl EpochTiming {
    /// Statistics over `seconds`, skipping the first (warm-up) entry when
    /// there is more than one.
    pub fn from_seconds(seconds: &[f64]) -> Self {
        let mut s: Vec<f64> = if seconds.len() > 1 { seconds[1..].to_vec() } else { seconds.to_vec() };
        if s.is_empty() {
            return Self::default();
        }
        s.sort_by(f64::total_cmp);
        let n = s.len();
        let median = if n % 2 == 1 { s[n / 2] } else { 0.5 * (s[n / 2 - 1] + s[n / 2]) };
        Self { epochs: n, median, min: s[0], max: s[n - 1] }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingReport {
    pub scheme: String,
    pub model_seed: u64,
    pub initial_val_loss: f64,
    pub epochs: Vec<EpochRecord>,
    /// Epoch of the returned weights; `0` is the initial model.
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub stopped_early: bool,
    pub steps: usize,
    pub test: Metrics,
    pub test_denormalized: Option<Metrics>,
    pub persistence: Metrics,
    pub params: ParamCount,
    pub trainable_params: usize,
    pub total_params: usize,
    pub frozen_digest_before: String,
    pub frozen_digest_after: String,
    pub timing: EpochTiming,
}

impl TrainingReport {
    pub fn write_json(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(path, e))
    }

    /// `epoch,train_loss,val_loss` with epoch 0 the initial validation
    /// loss. Clock readings are left out so reruns compare byte for byte.
    pub fn curves_csv(&self) -> String {
        let mut s = String::from("epoch,train_loss,val_loss\n");
        s.push_str(&format!("0,,{}\n", format_f64(self.initial_val_loss)));
        for e in &self.epochs {
            s.push_str(&format!("{},{},{}\n", e.epoch, format_f64(e.train_loss), format_f64(e.val_loss)));
        }
        s
    }

    pub fn write_curves_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.curves_csv()).map_err(|e| Error::io(path, e))
    }
}

/// Train/val/test windows of a normalised dataset.
pub struct Prepared {
    pub dataset: SeriesDataset,
    pub train: Vec<WindowPair>,
    pub val: Vec<WindowPair>,
    pub test: Vec<WindowPair>,
}

/// Normalises (unless already normalised) and windows the dataset.
pub fn prepare_data(model: &FreezeTst, dataset: &SeriesDataset) -> Result<Prepared> {
    let dataset = if dataset.stats.is_some() { dataset.clone() } else { normalize(dataset)? };
    let (t, h) = (model.config.patch.lookback, model.horizon());
    let windows = |split| make_windows(&dataset, t, h, split);
    let (train, val, test) = (windows(Split::Train), windows(Split::Val), windows(Split::Test));
    for (name, w) in [("train", &train), ("val", &val), ("test", &test)] {
        if w.is_empty() {
            return Err(Error::config(
                "dataset",
                format!("{name} split has no window of look-back {t} plus horizon {h}"),
            ));
        }
    }
    Ok(Prepared { dataset, train, val, test })
}

/// Turns a non-finite value raised inside the tape into a training abort.
fn numerical(step: usize, learning_rate: f64) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::NonFinite { op } => {
            Error::Numerical { step, learning_rate, reason: format!("non-finite value in {op}") }
        }
        e => e,
    }
}

fn train_step(model: &mut FreezeTst, adam: &mut Adam, batch: &[&WindowPair], step: usize) -> Result<f64> {
    train_step_inner(model, adam, batch, step).map_err(numerical(step, adam.learning_rate))
}

fn train_step_inner(model: &mut FreezeTst, adam: &mut Adam, batch: &[&WindowPair], step: usize) -> Result<f64> {
    let inputs: Vec<&Tensor> = batch.iter().map(|w| &w.input).collect();
    let mut g = Graph::with_precision(model.config.precision);
    let x = g.constant(model.patches(&inputs)?);
    let vars = model.bind(&mut g);
    let y = model.forward_on(&mut g, &vars, x)?;
    let t = g.constant(target_rows(batch)?);
    let loss = loss_direct_multistep_on(&mut g, y, t)?;
    let value = g.value(loss).item();
    if !value.is_finite() {
        return Err(Error::Numerical {
            step,
            learning_rate: adam.learning_rate,
            reason: format!("training loss is {value}"),
        });
    }
    let mut grads = g.backward(loss)?;
    let grads: Vec<Tensor> =
        vars.trainable.iter().map(|&v| grads.take(v).unwrap_or_else(|| Tensor::zeros(g.value(v).shape()))).collect();
    if let Some(bad) = grads.iter().position(|t| !t.is_finite()) {
        return Err(Error::Numerical {
            step,
            learning_rate: adam.learning_rate,
            reason: format!("non-finite gradient for {}", adam.state_names()[bad]),
        });
    }
    adam.step(model.trainable_mut(), &grads)?;
    for block in model.stack.blocks.iter_mut().filter(|b| !b.frozen) {
        project_spectral(block)?;
    }
    Ok(value * batch.len() as f64)
}

fn check_digest(model: &FreezeTst, expected: &str, epoch: usize) -> Result<()> {
    let now = model.frozen_digest();
    if now != expected {
        return Err(Error::Contract(format!(
            "frozen parameters changed during epoch {epoch}: digest {now} != {expected}"
        )));
    }
    Ok(())
}

fn validation_loss(model: &FreezeTst, val: &[WindowPair], step: usize, lr: f64) -> Result<f64> {
    let loss = evaluate(model, val).map_err(numerical(step, lr))?.loss;
    if !loss.is_finite() {
        return Err(Error::Numerical { step, learning_rate: lr, reason: format!("validation loss is {loss}") });
    }
    Ok(loss)
}

/// Trains `model` in place and leaves it at the weights with the lowest
/// validation loss seen, the initial weights included.
pub fn train(model: &mut FreezeTst, dataset: &SeriesDataset, cfg: &TrainConfig) -> Result<TrainingReport> {
    cfg.validate()?;
    let data = prepare_data(model, dataset)?;
    train_prepared(model, &data, cfg)
}

pub fn train_prepared(model: &mut FreezeTst, data: &Prepared, cfg: &TrainConfig) -> Result<TrainingReport> {
    cfg.validate()?;
    let digest = model.frozen_digest();
    let mut adam = Adam::for_model(cfg, model);
    let shuffles = SeedTree::new(cfg.seed);

    let initial_val_loss = validation_loss(model, &data.val, 0, cfg.learning_rate)?;
    let mut best = (0, initial_val_loss, model.clone());
    let mut reference = initial_val_loss;
    let mut stale = 0;
    let mut epochs = Vec::new();
    let mut steps = 0;
    let mut stopped_early = false;

    for epoch in 1..=cfg.epochs {
        let clock = Instant::now();
        let mut order: Vec<usize> = (0..data.train.len()).collect();
        shuffles.rng(&format!("epoch{epoch}")).shuffle(&mut order);
        let mut total = 0.0;
        for idx in order.chunks(cfg.batch_size) {
            let batch: Vec<&WindowPair> = idx.iter().map(|&i| &data.train[i]).collect();
            steps += 1;
            total += train_step(model, &mut adam, &batch, steps)?;
        }
        let train_loss = total / data.train.len() as f64;
        check_digest(model, &digest, epoch)?;
        let seconds = clock.elapsed().as_secs_f64();
        let val_loss = validation_loss(model, &data.val, steps, cfg.learning_rate)?;
        log::info!("epoch {epoch}: train {train_loss:.6} val {val_loss:.6} ({seconds:.2}s)");
        epochs.push(EpochRecord { epoch, train_loss, val_loss, seconds });

        if val_loss < best.1 {
            best = (epoch, val_loss, model.clone());
        }
        if val_loss < reference - cfg.min_delta {
            reference = val_loss;
            stale = 0;
        } else {
            stale += 1;
            if cfg.patience > 0 && stale >= cfg.patience {
                stopped_early = true;
                break;
            }
        }
    }

    *model = best.2;
    check_digest(model, &digest, epochs.len())?;
    let test = evaluate(model, &data.test)?;
    let test_denormalized = match (&data.dataset.stats, cfg.denormalized_metrics) {
        (Some(stats), true) => Some(evaluate_denormalized(model, &data.test, stats)?),
        _ => None,
    };
    let params = model.count_parameters();
    let seconds: Vec<f64> = epochs.iter().map(|e| e.seconds).collect();
    Ok(TrainingReport {
        scheme: model.config.scheme.to_string(),
        model_seed: model.seed,
        initial_val_loss,
        best_epoch: best.0,
        best_val_loss: best.1,
        stopped_early,
        steps,
        test,
        test_denormalized,
        persistence: persistence_metrics(&data.test)?,
        trainable_params: params.trainable,
        total_params: params.total,
        params,
        frozen_digest_before: digest.clone(),
        frozen_digest_after: model.frozen_digest(),
        timing: EpochTiming::from_seconds(&seconds),
        epochs,
    })
}

/// Wall time of `epochs` training epochs on a copy of `model` after one
/// warm-up epoch, early stopping disabled.
pub fn time_epochs(
    model: &FreezeTst,
    dataset: &SeriesDataset,
    cfg: &TrainConfig,
    epochs: usize,
) -> Result<EpochTiming> {
    let mut m = model.clone();
    let cfg = TrainConfig { epochs: epochs + 1, patience: 0, ..cfg.clone() };
    let report = train(&mut m, dataset, &cfg)?;
    Ok(report.timing)
}
