//! Error metrics, multi-sample generation, and the GCN ablation grid.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::denoiser::Model;
use crate::error::{invalid, Error, Result};
use crate::road::{pack_grid, unpack_grid, FeatureScaler, TrafficGrid, TrafficSnapshot, SPEED};
use crate::scenario::{Dataset, PairRecord};
use crate::train::{TrainConfig, Trainer};

pub fn mae(pred: &[f64], truth: &[f64]) -> Result<f64> {
    check(pred, truth)?;
    Ok(pred.iter().zip(truth).map(|(p, t)| (p - t).abs()).sum::<f64>() / pred.len() as f64)
}

pub fn rmse(pred: &[f64], truth: &[f64]) -> Result<f64> {
    check(pred, truth)?;
    Ok((pred.iter().zip(truth).map(|(p, t)| (p - t).powi(2)).sum::<f64>() / pred.len() as f64).sqrt())
}

fn check(pred: &[f64], truth: &[f64]) -> Result<()> {
    if pred.is_empty() {
        return Err(invalid("metrics need at least one value"));
    }
    if pred.len() != truth.len() {
        return Err(invalid(format!("{} predictions for {} targets", pred.len(), truth.len())));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelMetrics {
    pub mae: f64,
    pub rmse: f64,
}

impl ChannelMetrics {
    pub fn of(pred: &[f64], truth: &[f64]) -> Result<Self> {
        Ok(Self {
            mae: mae(pred, truth)?,
            rmse: rmse(pred, truth)?,
        })
    }
}

/// Per-channel errors in physical units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub congestion: ChannelMetrics,
    pub speed: ChannelMetrics,
    pub travel_time: ChannelMetrics,
    /// speed MAE in scaler units on [-1, 1]
    pub speed_mae_normalized: f64,
    pub samples: usize,
    pub prompts: usize,
    pub diverged: usize,
    pub descriptor: String,
}

/// Flattened per-channel values of a snapshot set, roads fastest.
fn channel(set: &[TrafficSnapshot], c: usize) -> Vec<f64> {
    set.iter()
        .flat_map(|s| (0..s.n_roads()).map(move |i| s.channel_value(c, i)))
        .collect()
}

pub fn compare(pred: &[TrafficSnapshot], truth: &[TrafficSnapshot], scaler: &FeatureScaler) -> Result<MetricReport> {
    if pred.is_empty() || pred.len() != truth.len() {
        return Err(invalid("prediction and truth sets must be non-empty and equal in size"));
    }
    if pred.iter().zip(truth).any(|(p, t)| p.n_roads() != t.n_roads()) {
        return Err(invalid("road counts differ"));
    }
    let m = |c| ChannelMetrics::of(&channel(pred, c), &channel(truth, c));
    let norm = |v: Vec<f64>| -> Vec<f64> { v.into_iter().map(|x| scaler.speed.normalize(x).0).collect() };
    Ok(MetricReport {
        congestion: m(crate::road::CONGESTION)?,
        speed: m(SPEED)?,
        travel_time: m(crate::road::TRAVEL_TIME)?,
        speed_mae_normalized: mae(&norm(channel(pred, SPEED)), &norm(channel(truth, SPEED)))?,
        samples: 1,
        prompts: pred.len(),
        diverged: 0,
        descriptor: String::new(),
    })
}

/// Mean of several samples for one prompt.
#[derive(Debug, Clone, PartialEq)]
pub struct Generated {
    pub grid: TrafficGrid,
    pub snapshot: TrafficSnapshot,
    pub used: usize,
    pub diverged: usize,
}

/// Average grids in `[3, H, W]` layout elementwise.
pub fn mean_grid(grids: &[Vec<f64>]) -> Result<Vec<f64>> {
    let first = grids.first().ok_or_else(|| invalid("nothing to average"))?;
    let mut acc = vec![0.0; first.len()];
    for g in grids {
        if g.len() != acc.len() {
            return Err(invalid("grids differ in size"));
        }
        for (a, v) in acc.iter_mut().zip(g) {
            *a += v;
        }
    }
    let k = grids.len() as f64;
    Ok(acc.into_iter().map(|a| a / k).collect())
}

/// One draw per seed in `seed..seed + k`; `None` marks a divergent draw.
pub fn sample_seeds(model: &Model, text: &str, k: usize, seed: u64) -> Result<Vec<Option<Vec<f64>>>> {
    if k == 0 {
        return Err(invalid("k must be at least 1"));
    }
    let ctx = model.encode(&model.tokenize(text)?)?;
    (0..k as u64)
        .map(|i| match model.sample_grid(&ctx, seed.wrapping_add(i)) {
            Ok(g) => Ok(Some(g)),
            Err(Error::Diverged { .. }) => Ok(None),
            Err(e) => Err(e),
        })
        .collect()
}

/// Mean over the non-divergent draws, with the divergent count.
fn mean_draws(draws: &[Option<Vec<f64>>]) -> Result<(Vec<f64>, usize, usize)> {
    let kept: Vec<Vec<f64>> = draws.iter().flatten().cloned().collect();
    if kept.is_empty() {
        return Err(Error::Diverged { step: 0 });
    }
    Ok((mean_grid(&kept)?, kept.len(), draws.len() - kept.len()))
}

fn decode(model: &Model, scaler: &FeatureScaler, n_roads: usize, mean: Vec<f64>, used: usize, diverged: usize) -> Result<Generated> {
    let grid = TrafficGrid::from_values(model.config().grid_side, n_roads, mean)?;
    let snapshot = unpack_grid(&grid, scaler, n_roads)?;
    Ok(Generated {
        grid,
        snapshot,
        used,
        diverged,
    })
}

/// Average `k` samples, then decode once.
pub fn generate_k(model: &Model, scaler: &FeatureScaler, n_roads: usize, text: &str, k: usize, seed: u64) -> Result<Generated> {
    let (mean, used, diverged) = mean_draws(&sample_seeds(model, text, k, seed)?)?;
    decode(model, scaler, n_roads, mean, used, diverged)
}

fn prompt_seed(seed: u64, index: usize) -> u64 {
    seed.wrapping_add(1_000_003u64.wrapping_mul(index as u64))
}

/// Evaluate each prompt at every `k` in `ks`. Larger `k` extends the same
/// seed sequence, so each result equals a separate `generate_k` call.
pub fn evaluate_pairs(
    model: &Model,
    scaler: &FeatureScaler,
    pairs: &[&PairRecord],
    ks: &[usize],
    seed: u64,
) -> Result<Vec<MetricReport>> {
    if pairs.is_empty() {
        return Err(invalid("no prompts to evaluate"));
    }
    let k_max = ks.iter().copied().max().ok_or_else(|| invalid("no sample counts given"))?;
    let per_prompt: Vec<Vec<Option<Vec<f64>>>> = pairs
        .par_iter()
        .enumerate()
        .map(|(i, p)| sample_seeds(model, &p.text, k_max, prompt_seed(seed, i)))
        .collect::<Result<_>>()?;
    let truth: Vec<TrafficSnapshot> = pairs.iter().map(|p| p.snapshot()).collect();
    ks.iter()
        .map(|&k| {
            if k == 0 {
                return Err(invalid("k must be at least 1"));
            }
            let mut preds = Vec::with_capacity(pairs.len());
            let mut diverged = 0;
            for (draws, t) in per_prompt.iter().zip(&truth) {
                let (mean, used, div) = mean_draws(&draws[..k])?;
                diverged += div;
                preds.push(decode(model, scaler, t.n_roads(), mean, used, div)?.snapshot);
            }
            let mut r = compare(&preds, &truth, scaler)?;
            r.samples = k;
            r.diverged = diverged;
            Ok(r)
        })
        .collect()
}

pub fn evaluate_testset(model: &Model, ds: &Dataset, k: usize, seed: u64) -> Result<MetricReport> {
    let pairs: Vec<&PairRecord> = ds.test_pairs().collect();
    let mut r = evaluate_pairs(model, &ds.scaler, &pairs, &[k], seed)?.remove(0);
    r.descriptor = format!("test split, {} prompts, k = {k}", pairs.len());
    Ok(r)
}

/// Normalized-unit speed error of a generated grid against a true snapshot.
pub fn speed_mae_normalized(grid: &TrafficGrid, truth: &TrafficSnapshot, scaler: &FeatureScaler) -> Result<f64> {
    let (packed, _) = pack_grid(truth, scaler)?;
    let n = truth.n_roads();
    let pred: Vec<f64> = (0..n).map(|i| grid.get(SPEED, i)).collect();
    let want: Vec<f64> = (0..n).map(|i| packed.get(SPEED, i)).collect();
    mae(&pred, &want)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationCell {
    pub layers: usize,
    pub samples: usize,
    pub report: Option<MetricReport>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationGrid {
    pub layers: Vec<usize>,
    pub samples: Vec<usize>,
    pub cells: Vec<AblationCell>,
    pub train: TrainConfig,
    pub train_losses: Vec<Option<f64>>,
}

impl AblationGrid {
    pub fn cell(&self, layers: usize, samples: usize) -> Option<&AblationCell> {
        self.cells.iter().find(|c| c.layers == layers && c.samples == samples)
    }

    /// Plain-text table: one row per (layers, samples) with MAE and RMSE of
    /// congestion, speed, and travel time.
    pub fn table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:>6} {:>7} | {:>9} {:>9} | {:>9} {:>9} | {:>9} {:>9}",
            "Layers", "Samples", "Cong MAE", "Cong RMSE", "Spd MAE", "Spd RMSE", "TT MAE", "TT RMSE"
        );
        let _ = writeln!(s, "{}", "-".repeat(84));
        for (li, l) in self.layers.iter().enumerate() {
            for (si, k) in self.samples.iter().enumerate() {
                let label = if si == 0 { l.to_string() } else { String::new() };
                match self.cell(*l, *k).and_then(|c| c.report.as_ref()) {
                    Some(r) => {
                        let _ = writeln!(
                            s,
                            "{:>6} {:>7} | {:>9.3} {:>9.3} | {:>9.2} {:>9.2} | {:>9.2} {:>9.2}",
                            label,
                            k,
                            r.congestion.mae,
                            r.congestion.rmse,
                            r.speed.mae,
                            r.speed.rmse,
                            r.travel_time.mae,
                            r.travel_time.rmse
                        );
                    }
                    None => {
                        let why = self
                            .cell(*l, *k)
                            .and_then(|c| c.error.clone())
                            .unwrap_or_else(|| "missing".into());
                        let _ = writeln!(s, "{label:>6} {k:>7} | failed: {why}");
                    }
                }
            }
            if li + 1 < self.layers.len() {
                let _ = writeln!(s, "{}", "-".repeat(84));
            }
        }
        s
    }
}

/// Train one model per GCN depth from the same seed and evaluate each at
/// every sample count on `pairs`. Failures land in the grid as errors.
pub fn run_ablation(
    ds: &Dataset,
    base: &TrainConfig,
    layers: &[usize],
    samples: &[usize],
    pairs: &[&PairRecord],
    seed: u64,
    mut progress: impl FnMut(&str),
) -> Result<AblationGrid> {
    if layers.is_empty() || samples.is_empty() {
        return Err(invalid("ablation needs layer counts and sample counts"));
    }
    let mut cells = Vec::new();
    let mut train_losses = Vec::new();
    for &l in layers {
        let cfg = TrainConfig {
            gcn_layers: l,
            ..base.clone()
        };
        progress(&format!("training gcn_layers = {l}"));
        let outcome = Trainer::new(cfg, ds).and_then(|mut t| {
            let total = t.total_steps();
            t.run(total, None, |_| {})?;
            let loss = t.report.last_smoothed();
            let reports = evaluate_pairs(&t.sampling_model(), &ds.scaler, pairs, samples, seed)?;
            Ok((loss, reports))
        });
        match outcome {
            Ok((loss, reports)) => {
                train_losses.push(loss);
                for (k, mut r) in samples.iter().zip(reports) {
                    r.descriptor = format!("gcn_layers = {l}, k = {k}");
                    cells.push(AblationCell {
                        layers: l,
                        samples: *k,
                        report: Some(r),
                        error: None,
                    });
                }
            }
            Err(e) => {
                train_losses.push(None);
                for k in samples {
                    cells.push(AblationCell {
                        layers: l,
                        samples: *k,
                        report: None,
                        error: Some(e.to_string()),
                    });
                }
            }
        }
        progress(&format!("finished gcn_layers = {l}"));
    }
    Ok(AblationGrid {
        layers: layers.to_vec(),
        samples: samples.to_vec(),
        cells,
        train: base.clone(),
        train_losses,
    })
}
