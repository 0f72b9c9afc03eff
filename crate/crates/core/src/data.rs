//! Series datasets: synthetic generators, CSV in/out, train-only z-score
//! normalisation, chronological splits and sliding windows.

use std::collections::BTreeMap;
use std::f64::consts::TAU;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Rng, Tensor};

/// Longest period drawn for synthetic sinusoids, the desk-scale look-back.
pub const MAX_PERIOD: usize = 64;
pub const MIN_PERIOD: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SyntheticKind {
    Sines,
    Ar,
    Regime,
}

impl std::str::FromStr for SyntheticKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sines" => Ok(SyntheticKind::Sines),
            "ar" => Ok(SyntheticKind::Ar),
            "regime" => Ok(SyntheticKind::Regime),
            _ => Err(Error::config("kind", format!("unknown synthetic kind {s:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitFractions {
    pub train: f64,
    pub val: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        Self { train: 0.6, val: 0.2 }
    }
}

impl SplitFractions {
    pub fn validate(&self) -> Result<()> {
        if !(self.train > 0.0 && self.val >= 0.0 && self.train + self.val < 1.0) {
            return Err(Error::config(
                "splits",
                format!("train {} / val {} must leave room for test", self.train, self.val),
            ));
        }
        Ok(())
    }
}

/// Per-channel z-score statistics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SeriesDataset {
    /// `[timesteps, channels]`.
    pub values: Tensor,
    pub channel_names: Vec<String>,
    pub metadata: BTreeMap<String, String>,
    pub splits: SplitFractions,
    /// Train-split statistics; present once [`normalize`] has run.
    pub stats: Option<NormStats>,
}

/// One training example; `target` starts right after `input` ends.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowPair {
    pub input: Tensor,
    pub target: Tensor,
    /// Series index of the first input step.
    pub origin: usize,
}

impl SeriesDataset {
    pub fn new(values: Tensor, channel_names: Vec<String>) -> Result<Self> {
        let (_, d) = values.dims2("dataset")?;
        if channel_names.len() != d {
            return Err(Error::shape("dataset", format!("{} names for {d} channels", channel_names.len())));
        }
        Ok(Self { values, channel_names, metadata: BTreeMap::new(), splits: SplitFractions::default(), stats: None })
    }

    pub fn timesteps(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn channels(&self) -> usize {
        self.values.shape()[1]
    }

    /// Half-open `[start, end)` row range of a split.
    pub fn split_range(&self, split: Split) -> (usize, usize) {
        let n = self.timesteps();
        let train_end = (self.splits.train * n as f64).floor() as usize;
        let val_end = ((self.splits.train + self.splits.val) * n as f64).floor() as usize;
        match split {
            Split::Train => (0, train_end),
            Split::Val => (train_end, val_end),
            Split::Test => (val_end, n),
        }
    }

    /// Rows of the given split, `[len, channels]`.
    pub fn split_values(&self, split: Split) -> Option<Tensor> {
        let (s, e) = self.split_range(split);
        let d = self.channels();
        (e > s).then(|| Tensor::new(vec![e - s, d], self.values.data()[s * d..e * d].to_vec()).expect("split slice"))
    }
}

fn channel_names(d: usize) -> Vec<String> {
    (0..d).map(|k| format!("ch{k}")).collect()
}

/// `Σ a·sin(2πt/P + φ)` over the given `(amplitude, period, phase)` terms.
pub fn sine_mixture(timesteps: usize, terms: &[(f64, f64, f64)]) -> Vec<f64> {
    (0..timesteps).map(|t| terms.iter().map(|&(a, p, ph)| a * (TAU * t as f64 / p + ph).sin()).sum()).collect()
}

/// AR(2) coefficients for channel draws, kept well inside the
/// stationarity triangle.
fn ar_coefficients(rng: &mut Rng) -> (f64, f64) {
    loop {
        let phi1 = rng.uniform(0.2, 1.2);
        let phi2 = rng.uniform(-0.6, 0.3);
        if phi1 + phi2 < 0.95 && phi2 - phi1 < 0.95 && phi2.abs() < 0.95 {
            return (phi1, phi2);
        }
    }
}

/// Lag-1 autocorrelation of a stationary AR(2): `φ₁ / (1 − φ₂)`.
pub fn ar2_lag1(phi1: f64, phi2: f64) -> f64 {
    phi1 / (1.0 - phi2)
}

/// Synthetic multichannel series with observation noise `noise_std`.
///
/// `sines` mixes 2 to 4 sinusoids per channel with integer periods in
/// `[MIN_PERIOD, MAX_PERIOD]`; `ar` runs a stable AR(2) with unit
/// innovations; `regime` adds a mean shift to sines at a random changepoint.
pub fn gen_synthetic(
    kind: SyntheticKind,
    timesteps: usize,
    channels: usize,
    noise_std: f64,
    seed: u64,
) -> Result<SeriesDataset> {
    if timesteps == 0 || channels == 0 {
        return Err(Error::config("timesteps", "need at least one step and one channel"));
    }
    if !(noise_std >= 0.0) {
        return Err(Error::config("noise_std", "must be non-negative"));
    }
    let mut rng = Rng::new(seed);
    let mut meta = BTreeMap::new();
    let mut cols = Vec::with_capacity(channels);
    for k in 0..channels {
        let col = match kind {
            SyntheticKind::Sines | SyntheticKind::Regime => {
                let terms: Vec<_> = (0..rng.below(2, 5))
                    .map(|_| {
                        (rng.uniform(0.5, 1.5), rng.below(MIN_PERIOD, MAX_PERIOD + 1) as f64, rng.uniform(0.0, TAU))
                    })
                    .collect();
                let desc: Vec<_> = terms.iter().map(|(a, p, ph)| format!("{a:.4}:{p}:{ph:.4}")).collect();
                meta.insert(format!("ch{k}.terms"), desc.join(" "));
                let mut col = sine_mixture(timesteps, &terms);
                if kind == SyntheticKind::Regime {
                    let lo = (timesteps as f64 * 0.3) as usize;
                    let hi = ((timesteps as f64 * 0.7) as usize).max(lo + 1);
                    let at = rng.below(lo, hi);
                    let shift = rng.uniform(1.0, 2.0) * if rng.uniform(0.0, 1.0) < 0.5 { -1.0 } else { 1.0 };
                    meta.insert(format!("ch{k}.changepoint"), at.to_string());
                    meta.insert(format!("ch{k}.shift"), format!("{shift}"));
                    col.iter_mut().skip(at).for_each(|v| *v += shift);
                }
                col
            }
            SyntheticKind::Ar => {
                let (phi1, phi2) = ar_coefficients(&mut rng);
                meta.insert(format!("ch{k}.phi"), format!("{phi1} {phi2}"));
                let burn = 200;
                let (mut x1, mut x2) = (0.0, 0.0);
                let mut col = Vec::with_capacity(timesteps);
                for t in 0..burn + timesteps {
                    let x = phi1 * x1 + phi2 * x2 + rng.normal();
                    (x2, x1) = (x1, x);
                    if t >= burn {
                        col.push(x);
                    }
                }
                col
            }
        };
        cols.push(col);
    }
    let values = Tensor::from_fn(&[timesteps, channels], |i| {
        let (t, k) = (i / channels, i % channels);
        cols[k][t]
    });
    let mut values = values;
    if noise_std > 0.0 {
        values.data_mut().iter_mut().for_each(|v| *v += noise_std * rng.normal());
    }
    let mut ds = SeriesDataset::new(values, channel_names(channels))?;
    meta.insert("kind".into(), format!("{kind:?}").to_lowercase());
    meta.insert("seed".into(), seed.to_string());
    meta.insert("noise_std".into(), noise_std.to_string());
    ds.metadata = meta;
    Ok(ds)
}

/// Reads a numeric CSV. A first row with any non-numeric value cell is
/// taken as a header; with `date_column_present` the first column is
/// skipped.
pub fn load_csv(path: &Path, date_column_present: bool) -> Result<SeriesDataset> {
    let mut reader =
        csv::ReaderBuilder::new().has_headers(false).flexible(true).from_path(path).map_err(|e| csv_error(path, e))?;
    let skip = usize::from(date_column_present);
    let mut names: Option<Vec<String>> = None;
    let mut width: Option<usize> = None;
    let mut data = Vec::new();
    let mut rows = 0;
    for (i, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| csv_error(path, e))?;
        let line = i + 1;
        if rec.len() <= skip {
            return Err(Error::Parse { row: line, col: rec.len() + 1, reason: "no value columns".into() });
        }
        let cells: Vec<&str> = rec.iter().skip(skip).map(str::trim).collect();
        if i == 0 && cells.iter().any(|c| c.parse::<f64>().is_err()) {
            names = Some(cells.iter().map(|c| c.to_string()).collect());
            width = Some(cells.len());
            continue;
        }
        match width {
            Some(w) if w != cells.len() => {
                return Err(Error::Parse {
                    row: line,
                    col: cells.len().min(w) + skip + 1,
                    reason: format!("expected {w} value columns, found {}", cells.len()),
                })
            }
            None => width = Some(cells.len()),
            _ => {}
        }
        for (j, c) in cells.iter().enumerate() {
            let v: f64 = c.parse().map_err(|_| Error::Parse {
                row: line,
                col: j + skip + 1,
                reason: if c.is_empty() { "missing value".into() } else { format!("not a number: {c:?}") },
            })?;
            if !v.is_finite() {
                return Err(Error::Parse { row: line, col: j + skip + 1, reason: "non-finite value".into() });
            }
            data.push(v);
        }
        rows += 1;
    }
    let d = width.unwrap_or(0);
    if rows == 0 || d == 0 {
        return Err(Error::Parse { row: 1, col: 1, reason: "no data rows".into() });
    }
    let values = Tensor::new(vec![rows, d], data)?;
    let mut ds = SeriesDataset::new(values, names.unwrap_or_else(|| channel_names(d)))?;
    ds.metadata.insert("source".into(), path.display().to_string());
    Ok(ds)
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    let pos = e.position().map(|p| (p.record() as usize + 1, 1));
    match (e.into_kind(), pos) {
        (csv::ErrorKind::Io(io), _) => Error::io(path, io),
        (kind, Some((row, col))) => Error::Parse { row, col, reason: format!("{kind:?}") },
        (kind, None) => Error::Parse { row: 0, col: 0, reason: format!("{kind:?}") },
    }
}

/// Formats with 17 significant digits, enough to round-trip any `f64`.
pub fn format_f64(v: f64) -> String {
    format!("{v:.16e}")
}

/// Writes a header of channel names, then one row per step.
pub fn save_csv(ds: &SeriesDataset, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    w.write_record(&ds.channel_names).map_err(|e| csv_error(path, e))?;
    for row in ds.values.data().chunks(ds.channels()) {
        w.write_record(row.iter().map(|&v| format_f64(v))).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Mean and population standard deviation of each channel of the train
/// split; a zero deviation is replaced by one.
pub fn train_stats(ds: &SeriesDataset) -> Result<NormStats> {
    let train = ds.split_values(Split::Train).ok_or_else(|| Error::config("splits", "train split is empty"))?;
    let (n, d) = train.dims2("train_stats")?;
    let mut mean = vec![0.0; d];
    let mut std = vec![0.0; d];
    for k in 0..d {
        let m = (0..n).map(|t| train.data()[t * d + k]).sum::<f64>() / n as f64;
        let var = (0..n).map(|t| (train.data()[t * d + k] - m).powi(2)).sum::<f64>() / n as f64;
        mean[k] = m;
        std[k] = if var > 0.0 {
            var.sqrt()
        } else {
            log::warn!("channel {} is constant on the train split; std clamped to 1", ds.channel_names[k]);
            1.0
        };
    }
    Ok(NormStats { mean, std })
}

/// Z-scores every channel with train-split statistics.
pub fn normalize(ds: &SeriesDataset) -> Result<SeriesDataset> {
    let stats = train_stats(ds)?;
    let d = ds.channels();
    let values = Tensor::from_fn(ds.values.shape(), |i| (ds.values.data()[i] - stats.mean[i % d]) / stats.std[i % d]);
    Ok(SeriesDataset { values, stats: Some(stats), ..ds.clone() })
}

/// Inverts [`normalize`].
pub fn denormalize(ds: &SeriesDataset) -> Result<SeriesDataset> {
    let stats = ds.stats.as_ref().ok_or_else(|| Error::config("stats", "dataset was never normalised"))?;
    let values = denormalize_values(&ds.values, stats);
    Ok(SeriesDataset { values, stats: None, ..ds.clone() })
}

/// Maps `[.., channels]` normalised values back to the original scale.
pub fn denormalize_values(values: &Tensor, stats: &NormStats) -> Tensor {
    let d = stats.mean.len();
    Tensor::from_fn(values.shape(), |i| values.data()[i] * stats.std[i % d] + stats.mean[i % d])
}

/// Every window of the split whose input and target both lie inside it.
pub fn make_windows(ds: &SeriesDataset, lookback: usize, horizon: usize, split: Split) -> Vec<WindowPair> {
    let (s, e) = ds.split_range(split);
    let len = e - s;
    if len < lookback + horizon {
        log::warn!("{split:?} split has {len} steps, fewer than look-back {lookback} + horizon {horizon}; no windows");
        return Vec::new();
    }
    let d = ds.channels();
    let rows = |from: usize, n: usize| {
        Tensor::new(vec![n, d], ds.values.data()[from * d..(from + n) * d].to_vec()).expect("window slice")
    };
    (s..=e - lookback - horizon)
        .map(|origin| WindowPair { input: rows(origin, lookback), target: rows(origin + lookback, horizon), origin })
        .collect()
}

/// Shape, splits, statistics and provenance of a dataset file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataManifest {
    pub timesteps: usize,
    pub channels: usize,
    pub channel_names: Vec<String>,
    pub splits: SplitFractions,
    pub split_rows: BTreeMap<String, (usize, usize)>,
    pub train_stats: NormStats,
    pub seed: Option<u64>,
    pub metadata: BTreeMap<String, String>,
}

impl DataManifest {
    pub fn describe(ds: &SeriesDataset, seed: Option<u64>) -> Result<Self> {
        let split_rows = [("train", Split::Train), ("val", Split::Val), ("test", Split::Test)]
            .into_iter()
            .map(|(n, s)| (n.to_string(), ds.split_range(s)))
            .collect();
        Ok(Self {
            timesteps: ds.timesteps(),
            channels: ds.channels(),
            channel_names: ds.channel_names.clone(),
            splits: ds.splits,
            split_rows,
            train_stats: train_stats(ds)?,
            seed,
            metadata: ds.metadata.clone(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_sinusoid_is_periodic() {
        let x = sine_mixture(200, &[(1.3, 17.0, 0.4)]);
        for t in 0..183 {
            assert!((x[t + 17] - x[t]).abs() < 1e-9);
        }
    }

    #[test]
    fn generation_is_seeded() {
        for kind in [SyntheticKind::Sines, SyntheticKind::Ar, SyntheticKind::Regime] {
            let a = gen_synthetic(kind, 300, 2, 0.1, 5).unwrap();
            assert_eq!(a, gen_synthetic(kind, 300, 2, 0.1, 5).unwrap());
            assert_ne!(a.values, gen_synthetic(kind, 300, 2, 0.1, 6).unwrap().values);
        }
    }

    #[test]
    fn ar_matches_yule_walker_lag1() {
        let ds = gen_synthetic(SyntheticKind::Ar, 10_000, 3, 0.0, 8).unwrap();
        for k in 0..3 {
            let phi: Vec<f64> = ds.metadata[&format!("ch{k}.phi")].split(' ').map(|s| s.parse().unwrap()).collect();
            let x: Vec<f64> = (0..10_000).map(|t| ds.values.at(&[t, k])).collect();
            let m = x.iter().sum::<f64>() / x.len() as f64;
            let c0: f64 = x.iter().map(|v| (v - m).powi(2)).sum();
            let c1: f64 = x.windows(2).map(|w| (w[0] - m) * (w[1] - m)).sum();
            assert!((c1 / c0 - ar2_lag1(phi[0], phi[1])).abs() < 0.1);
        }
    }

    #[test]
    fn window_counts() {
        let values = Tensor::from_fn(&[100, 1], |i| i as f64);
        let mut ds = SeriesDataset::new(values, vec!["x".into()]).unwrap();
        ds.splits = SplitFractions { train: 0.5, val: 0.2 };
        // train split is 50 rows
        assert_eq!(make_windows(&ds, 30, 20, Split::Train).len(), 1);
        assert_eq!(make_windows(&ds, 30, 16, Split::Train).len(), 5);
        assert!(make_windows(&ds, 40, 20, Split::Train).is_empty());
        for w in make_windows(&ds, 10, 5, Split::Test) {
            assert_eq!(w.input.at(&[0, 0]) as usize, w.origin);
            assert_eq!(w.target.at(&[0, 0]) as usize, w.origin + 10);
            assert!(w.origin >= 70 && w.origin + 15 <= 100);
        }
    }

    #[test]
    fn normalisation_uses_train_split_only() {
        let ds = gen_synthetic(SyntheticKind::Regime, 500, 2, 0.2, 1).unwrap();
        let n = normalize(&ds).unwrap();
        let train = n.split_values(Split::Train).unwrap();
        for k in 0..2 {
            let col: Vec<f64> = (0..train.shape()[0]).map(|t| train.at(&[t, k])).collect();
            let m = col.iter().sum::<f64>() / col.len() as f64;
            let s = (col.iter().map(|v| (v - m).powi(2)).sum::<f64>() / col.len() as f64).sqrt();
            assert!(m.abs() < 1e-9 && (s - 1.0).abs() < 1e-9);
        }
        // changing the test split leaves the statistics alone
        let mut poked = ds.clone();
        let (s, _) = poked.split_range(Split::Test);
        poked.values.data_mut()[s * 2] += 1e6;
        assert_eq!(train_stats(&poked).unwrap(), train_stats(&ds).unwrap());
        assert!(denormalize(&n).unwrap().values.max_abs_diff(&ds.values) < 1e-10);
    }

    #[test]
    fn constant_channel_normalises_to_zero() {
        let ds = SeriesDataset::new(Tensor::full(&[20, 1], 3.5), vec!["c".into()]).unwrap();
        let n = normalize(&ds).unwrap();
        assert!(n.values.data().iter().all(|&v| v == 0.0));
        assert_eq!(n.stats.unwrap().std, vec![1.0]);
    }

    #[test]
    fn csv_round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.csv");
        let ds = gen_synthetic(SyntheticKind::Sines, 50, 3, 0.3, 2).unwrap();
        save_csv(&ds, &path).unwrap();
        let back = load_csv(&path, false).unwrap();
        assert_eq!(back.values, ds.values);
        assert_eq!(back.channel_names, ds.channel_names);

        let plain = dir.path().join("b.csv");
        std::fs::write(&plain, "1,2\n3,4\n5,6\n").unwrap();
        let b = load_csv(&plain, false).unwrap();
        assert_eq!(b.values.shape(), &[3, 2]);
        assert_eq!(b.values.data(), &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);

        let dated = dir.path().join("c.csv");
        std::fs::write(&dated, "date,OT,HUFL\n2016-07-01,1.5,2\n2016-07-02,3,4\n").unwrap();
        let c = load_csv(&dated, true).unwrap();
        assert_eq!(c.channel_names, vec!["OT", "HUFL"]);
        assert_eq!(c.values.data(), &[1.5, 2.0, 3.0, 4.0]);

        let cases = [("1,2\n3\n", 2), ("1,2\n3,x\n", 2), ("1,2\n3,\n", 2), ("", 1)];
        for (text, row) in cases {
            let p = dir.path().join("bad.csv");
            std::fs::write(&p, text).unwrap();
            match load_csv(&p, false) {
                Err(Error::Parse { row: r, .. }) => assert_eq!(r, row, "{text:?}"),
                other => panic!("{text:?}: {other:?}"),
            }
        }
    }

    #[test]
    fn manifest_matches_recomputation() {
        let ds = gen_synthetic(SyntheticKind::Sines, 120, 2, 0.0, 3).unwrap();
        let m = DataManifest::describe(&ds, Some(3)).unwrap();
        assert_eq!(m.split_rows["train"], (0, 72));
        assert_eq!(m.split_rows["test"], (96, 120));
        assert_eq!(m.train_stats, train_stats(&ds).unwrap());
    }
}
