//! Noise-prediction training, checkpoints, and deterministic resumption.
//!
//! Every source of randomness is derived from `(seed, step)` or
//! `(seed, epoch)`, so a run restarted from a checkpoint at step `s` replays
//! exactly the batches, timesteps, and noise of the uninterrupted run.

use std::collections::{HashMap, VecDeque};
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use ttg_tensor::checkpoint::{read_records, write_records};
use ttg_tensor::rng::{derive_seed, stream, StreamRng};
use ttg_tensor::{adam_step, AdamConfig, AdamState, ParamGrads, ParamStore, Tape, Tensor};

use crate::denoiser::{Denoiser, GcnMode, Model, ModelConfig};
use crate::diffusion::{normal_vec, q_sample, NoiseSchedule, ScheduleConfig};
use crate::error::{invalid, io_err, Error, Result};
use crate::road::{
    build_normalized_adjacency, grid_side, pack_grid, pad_target, AdjacencyMatrix, FeatureScaler, RoadGraph,
    CHANNELS,
};
use crate::scenario::{read_json, write_json, Dataset, PairRecord};
use crate::text::{tokenize, TokenSequence, Vocabulary};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    /// stop after this many steps even if epochs remain
    pub max_steps: Option<usize>,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub timesteps: usize,
    pub gcn_layers: usize,
    pub gcn_mode: GcnMode,
    pub widths: [usize; 2],
    pub groups: usize,
    pub pos_embed: bool,
    pub ema_decay: Option<f64>,
    pub checkpoint_every: Option<usize>,
    pub smoothing_window: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            max_steps: None,
            batch_size: 4,
            learning_rate: 1e-3,
            seed: 0,
            timesteps: ScheduleConfig::desk().steps,
            gcn_layers: 2,
            gcn_mode: GcnMode::Replace,
            widths: [32, 64],
            groups: 8,
            pos_embed: true,
            ema_decay: None,
            checkpoint_every: None,
            smoothing_window: 50,
        }
    }
}

impl TrainConfig {
    /// Learning rate 1e-5 and 1000 steps.
    pub fn full_scale() -> Self {
        Self {
            learning_rate: 1e-5,
            timesteps: ScheduleConfig::full().steps,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(invalid("batch_size must be at least 1"));
        }
        if !(self.learning_rate > 0.0) {
            return Err(invalid("learning_rate must be positive"));
        }
        if let Some(d) = self.ema_decay {
            if !(0.0..1.0).contains(&d) {
                return Err(invalid("ema_decay must lie in [0, 1)"));
            }
        }
        if self.checkpoint_every == Some(0) || self.smoothing_window == 0 {
            return Err(invalid("checkpoint_every and smoothing_window must be positive"));
        }
        Ok(())
    }

    pub fn schedule(&self) -> ScheduleConfig {
        ScheduleConfig {
            steps: self.timesteps,
            ..ScheduleConfig::desk()
        }
    }

    pub fn model_config(&self, grid_side: usize) -> ModelConfig {
        ModelConfig {
            gcn_layers: self.gcn_layers,
            gcn_mode: self.gcn_mode,
            widths: self.widths,
            groups: self.groups,
            pos_embed: self.pos_embed,
            ..ModelConfig::desk(grid_side)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub loss: f64,
    pub smoothed: f64,
    pub grad_norm: f64,
    pub wall_ms: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub records: Vec<StepRecord>,
}

impl TrainReport {
    pub fn last_smoothed(&self) -> Option<f64> {
        self.records.last().map(|r| r.smoothed)
    }
}

/// A training pair in model form.
#[derive(Debug, Clone)]
pub struct TrainExample {
    pub id: usize,
    pub tokens: TokenSequence,
    pub grid: Vec<f64>,
}

pub fn prepare_examples<'a>(
    pairs: impl IntoIterator<Item = (usize, &'a PairRecord)>,
    scaler: &FeatureScaler,
    vocab: &Vocabulary,
    l_max: usize,
) -> Result<Vec<TrainExample>> {
    pairs
        .into_iter()
        .map(|(id, p)| {
            let (grid, _) = pack_grid(&p.snapshot(), scaler)?;
            Ok(TrainExample {
                id,
                tokens: tokenize(&p.text, vocab, l_max)?,
                grid: grid.values,
            })
        })
        .collect()
}

/// One noised training target.
#[derive(Debug, Clone)]
pub struct Noised {
    pub t: usize,
    pub eps: Vec<f64>,
    pub x_t: Vec<f64>,
}

pub fn draw_noised<R: Rng>(x0: &[f64], schedule: &NoiseSchedule, rng: &mut R) -> Result<Noised> {
    let t = rng.gen_range(1..=schedule.steps());
    let eps = normal_vec(x0.len(), rng);
    let x_t = q_sample(x0, t, &eps, schedule)?;
    Ok(Noised { t, eps, x_t })
}

/// Mean noise-prediction loss over `batch` and its parameter gradients.
pub fn loss_step<R: Rng>(
    net: &Denoiser,
    store: &ParamStore,
    a_hat: &Tensor,
    schedule: &NoiseSchedule,
    batch: &[&TrainExample],
    rng: &mut R,
) -> Result<(f64, ParamGrads)> {
    if batch.is_empty() {
        return Err(invalid("empty batch"));
    }
    let side = net.config.grid_side;
    let mut total = 0.0;
    let mut grads = ParamGrads::zeros_like(store);
    for ex in batch {
        let noised = draw_noised(&ex.grid, schedule, rng)?;
        let mut tape = Tape::with_params(store);
        let x = tape.constant(Tensor::new([CHANNELS, side, side], noised.x_t)?);
        let a = tape.constant(a_hat.clone());
        let eps_hat = net.forward(&mut tape, x, noised.t, &ex.tokens, a)?;
        let target = tape.constant(Tensor::new([CHANNELS, side, side], noised.eps)?);
        let loss = tape.mse(eps_hat, target)?;
        let value = tape.value(loss).data()[0];
        if !value.is_finite() {
            return Err(Error::NonFiniteLoss { sample: ex.id });
        }
        total += value;
        grads.accumulate(&tape.backward(loss)?.param_grads(store));
    }
    let scale = 1.0 / batch.len() as f64;
    grads.scale(scale);
    Ok((total * scale, grads))
}

/// Graph, scaler, and dataset hash carried alongside a checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataContext {
    pub graph: RoadGraph,
    pub scaler: FeatureScaler,
    pub vocab: Vocabulary,
    pub data_hash: String,
}

impl DataContext {
    pub fn from_dataset(ds: &Dataset) -> Self {
        Self {
            graph: ds.graph.clone(),
            scaler: ds.scaler,
            vocab: ds.vocab.clone(),
            data_hash: ds.hash().to_string(),
        }
    }

    pub fn grid_side(&self) -> usize {
        grid_side(self.graph.n_roads())
    }

    pub fn a_hat(&self) -> Result<crate::road::NormalizedAdjacency> {
        let adj = AdjacencyMatrix::from_graph(&self.graph)?;
        build_normalized_adjacency(&adj, pad_target(self.graph.n_roads()))
    }
}

pub struct Trainer {
    pub config: TrainConfig,
    pub context: DataContext,
    pub model: Model,
    pub adam: AdamState,
    pub ema: Option<ParamStore>,
    pub step: usize,
    pub report: TrainReport,
    recent: VecDeque<f64>,
    examples: Vec<TrainExample>,
}

impl Trainer {
    /// Fresh trainer over the training split of `ds`.
    pub fn new(config: TrainConfig, ds: &Dataset) -> Result<Self> {
        let context = DataContext::from_dataset(ds);
        let pairs = ds.split.train.iter().map(|i| (*i, &ds.pairs[*i]));
        let l_max = config.model_config(context.grid_side()).encoder.l_max;
        let examples = prepare_examples(pairs, &ds.scaler, &ds.vocab, l_max)?;
        Self::from_examples(config, context, examples)
    }

    pub fn from_examples(config: TrainConfig, context: DataContext, examples: Vec<TrainExample>) -> Result<Self> {
        config.validate()?;
        if examples.is_empty() {
            return Err(invalid("no training examples"));
        }
        let model_cfg = config.model_config(context.grid_side());
        let schedule = config.schedule().build()?;
        let mut init_rng = stream(derive_seed(config.seed, 0x696e6974), 0);
        let model = Model::new(model_cfg, &context.a_hat()?, schedule, context.vocab.clone(), &mut init_rng)?;
        let adam = AdamState::new(&model.store);
        let ema = config.ema_decay.map(|_| model.store.clone());
        Ok(Self {
            config,
            context,
            model,
            adam,
            ema,
            step: 0,
            report: TrainReport::default(),
            recent: VecDeque::new(),
            examples,
        })
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.examples.len().div_ceil(self.config.batch_size)
    }

    pub fn total_steps(&self) -> usize {
        let by_epoch = self.config.epochs * self.steps_per_epoch();
        self.config.max_steps.map_or(by_epoch, |m| m.min(by_epoch))
    }

    fn batch_indices(&self, step: usize) -> Vec<usize> {
        let spe = self.steps_per_epoch();
        let (epoch, pos) = (step / spe, step % spe);
        let mut perm: Vec<usize> = (0..self.examples.len()).collect();
        perm.shuffle(&mut stream(derive_seed(self.config.seed, 0x65706f), epoch as u64));
        let b = self.config.batch_size;
        perm[pos * b..((pos + 1) * b).min(perm.len())].to_vec()
    }

    fn step_rng(&self, step: usize) -> StreamRng {
        stream(derive_seed(self.config.seed, 0x737465), step as u64)
    }

    /// One optimizer update.
    pub fn train_step(&mut self) -> Result<StepRecord> {
        let start = Instant::now();
        let idx = self.batch_indices(self.step);
        let batch: Vec<&TrainExample> = idx.iter().map(|i| &self.examples[*i]).collect();
        let mut rng = self.step_rng(self.step);
        let (loss, grads) = loss_step(
            &self.model.net,
            &self.model.store,
            &self.model.a_hat,
            &self.model.schedule,
            &batch,
            &mut rng,
        )?;
        let grad_norm = grads.global_norm();
        adam_step(
            &mut self.model.store,
            &mut self.adam,
            &grads,
            &AdamConfig::with_lr(self.config.learning_rate),
        );
        if let (Some(ema), Some(d)) = (self.ema.as_mut(), self.config.ema_decay) {
            for (id, _, p) in self.model.store.iter() {
                for (e, v) in ema.get_mut(id).data_mut().iter_mut().zip(p.data()) {
                    *e = d * *e + (1.0 - d) * v;
                }
            }
        }
        self.recent.push_back(loss);
        if self.recent.len() > self.config.smoothing_window {
            self.recent.pop_front();
        }
        let smoothed = self.recent.iter().sum::<f64>() / self.recent.len() as f64;
        self.step += 1;
        let record = StepRecord {
            step: self.step,
            loss,
            smoothed,
            grad_norm,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
        };
        self.report.records.push(record.clone());
        Ok(record)
    }

    /// Train up to `until` steps (capped by the configured total), writing
    /// checkpoints to `ckpt` every `checkpoint_every` steps and at the end.
    pub fn run(&mut self, until: usize, ckpt: Option<&Path>, mut on_step: impl FnMut(&StepRecord)) -> Result<()> {
        let until = until.min(self.total_steps());
        while self.step < until {
            let rec = self.train_step()?;
            on_step(&rec);
            if let (Some(path), Some(every)) = (ckpt, self.config.checkpoint_every) {
                if self.step % every == 0 {
                    self.save(path)?;
                }
            }
        }
        if let Some(path) = ckpt {
            self.save(path)?;
        }
        Ok(())
    }

    /// Model with the weights used for sampling (EMA when enabled).
    pub fn sampling_model(&self) -> Model {
        let mut m = self.model.clone();
        if let Some(ema) = &self.ema {
            m.store = ema.clone();
        }
        m
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let store = &self.model.store;
        let mut names: Vec<String> = Vec::new();
        let mut tensors: Vec<&Tensor> = Vec::new();
        for (i, (id, name, value)) in store.iter().enumerate() {
            names.push(format!("{PARAM}{name}"));
            tensors.push(value);
            names.push(format!("{ADAM_M}{name}"));
            tensors.push(&self.adam.m[i]);
            names.push(format!("{ADAM_V}{name}"));
            tensors.push(&self.adam.v[i]);
            if let Some(ema) = &self.ema {
                names.push(format!("{EMA}{name}"));
                tensors.push(ema.get(id));
            }
        }
        write_records(path, names.iter().map(String::as_str).zip(tensors))?;
        let meta = CheckpointMeta {
            format_version: 1,
            model: self.model.net.config,
            schedule: self.config.schedule(),
            train: self.config.clone(),
            step: self.step,
            adam_step: self.adam.step,
            recent_losses: self.recent.iter().copied().collect(),
            has_ema: self.ema.is_some(),
            context: self.context.clone(),
        };
        let side = sidecar_path(path);
        let tmp = side.with_extension("json.tmp");
        write_json(&tmp, &meta)?;
        fs::rename(&tmp, &side).map_err(io_err(&side))
    }

    /// Continue a run from `path` over the same training data.
    pub fn resume(path: &Path, ds: &Dataset) -> Result<Self> {
        let (meta, records) = read_checkpoint(path)?;
        if meta.context.data_hash != ds.hash() {
            return Err(invalid("checkpoint was trained on a different dataset"));
        }
        let mut t = Self::new(meta.train.clone(), ds)?;
        restore(&mut t.model.store, &records, PARAM)?;
        for (i, (_, name, _)) in t.model.store.iter().enumerate() {
            t.adam.m[i] = take(&records, &format!("{ADAM_M}{name}"), t.adam.m[i].shape())?;
            t.adam.v[i] = take(&records, &format!("{ADAM_V}{name}"), t.adam.v[i].shape())?;
        }
        t.adam.step = meta.adam_step;
        if let Some(ema) = t.ema.as_mut() {
            restore(ema, &records, EMA)?;
        }
        t.step = meta.step;
        t.recent = meta.recent_losses.into_iter().collect();
        Ok(t)
    }
}

const PARAM: &str = "param/";
const ADAM_M: &str = "adam.m/";
const ADAM_V: &str = "adam.v/";
const EMA: &str = "ema/";

/// JSON sidecar written next to every checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format_version: u32,
    pub model: ModelConfig,
    pub schedule: ScheduleConfig,
    pub train: TrainConfig,
    pub step: usize,
    pub adam_step: u64,
    pub recent_losses: Vec<f64>,
    pub has_ema: bool,
    pub context: DataContext,
}

pub fn sidecar_path(ckpt: &Path) -> PathBuf {
    let mut s = ckpt.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

fn read_checkpoint(path: &Path) -> Result<(CheckpointMeta, HashMap<String, Tensor>)> {
    let meta: CheckpointMeta = read_json(&sidecar_path(path))?;
    let records = read_records(path).map_err(|e| Error::Structure(format!("{}: {e}", path.display())))?;
    Ok((meta, records.into_iter().collect()))
}

fn take(records: &HashMap<String, Tensor>, name: &str, shape: &[usize]) -> Result<Tensor> {
    let t = records
        .get(name)
        .ok_or_else(|| Error::Structure(format!("checkpoint lacks {name}")))?;
    if t.shape() != shape {
        return Err(Error::Structure(format!("{name}: shape {:?}, expected {shape:?}", t.shape())));
    }
    Ok(t.clone())
}

fn restore(store: &mut ParamStore, records: &HashMap<String, Tensor>, prefix: &str) -> Result<()> {
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let name = format!("{prefix}{}", store.name(id));
        let t = take(records, &name, store.get(id).shape())?;
        *store.get_mut(id) = t;
    }
    Ok(())
}

/// Load a checkpoint for inference; prefers EMA weights when present.
pub fn load_model(path: &Path) -> Result<(Model, CheckpointMeta)> {
    let (meta, records) = read_checkpoint(path)?;
    let mut store = ParamStore::new();
    let net = Denoiser::new(&mut store, meta.model, &mut stream(0, 0))?;
    restore(&mut store, &records, if meta.has_ema { EMA } else { PARAM })?;
    let model = Model::from_parts(
        net,
        store,
        &meta.context.a_hat()?,
        meta.schedule.build()?,
        meta.context.vocab.clone(),
    )?;
    Ok((model, meta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenario::{build_dataset, ScenarioConfig};

    fn tiny_config() -> TrainConfig {
        TrainConfig {
            timesteps: 10,
            widths: [8, 16],
            groups: 4,
            ..TrainConfig::default()
        }
    }

    fn tiny_dataset() -> Dataset {
        let mut cfg = ScenarioConfig::new(2, 12, 2);
        cfg.sample_interval_min = 180;
        build_dataset(&cfg).unwrap()
    }

    #[test]
    fn stub_predictor_has_zero_loss() {
        let s = ScheduleConfig::desk().build().unwrap();
        let x0 = vec![0.2; 48];
        let n = draw_noised(&x0, &s, &mut stream(0, 0)).unwrap();
        let loss: f64 = n.eps.iter().zip(&n.eps).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / 48.0;
        assert_eq!(loss, 0.0);
        assert!((1..=200).contains(&n.t));
    }

    #[test]
    fn epoch_step_count() {
        let ds = tiny_dataset();
        assert_eq!(ds.split.train.len(), 8);
        let t = Trainer::new(tiny_config(), &ds).unwrap();
        assert_eq!(t.steps_per_epoch(), 2);
        assert_eq!(t.total_steps(), 200);
    }

    #[test]
    fn batches_cover_each_epoch_once() {
        let ds = tiny_dataset();
        let t = Trainer::new(TrainConfig { batch_size: 3, ..tiny_config() }, &ds).unwrap();
        let mut seen: Vec<usize> = (0..3).flat_map(|s| t.batch_indices(s)).collect();
        seen.sort();
        assert_eq!(seen, (0..8).collect::<Vec<_>>());
    }

    #[test]
    fn rejects_bad_config() {
        assert!(TrainConfig { batch_size: 0, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { learning_rate: 0.0, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { ema_decay: Some(1.0), ..TrainConfig::default() }.validate().is_err());
    }

    #[test]
    fn sidecar_sits_next_to_checkpoint() {
        assert_eq!(sidecar_path(Path::new("/a/b.ck")), PathBuf::from("/a/b.ck.json"));
    }
}
