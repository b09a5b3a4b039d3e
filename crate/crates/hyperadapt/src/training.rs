//! Two-stage training, baselines, early stopping, and the greedy sweep.
//!
//! Stage 1 fine-tunes the main network on every (description, source) ->
//! target instance. Stage 2 freezes it and trains only the hypernetwork:
//! sample a task, generate its adapters from the description, average the
//! loss over an example batch, accumulate over a task batch, step. With
//! zero-initialized final layers the hypernetwork starts as an exact
//! identity, so stage-2 epoch 0 reproduces the stage-1 model's metrics and
//! any later improvement is attributable to the generated adapters.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{DataError, Task, TaskDataset};
use crate::eval::{evaluate, evaluate_fixed, EvalError, EvalReport};
use crate::hypernet::{Hypernetwork, HypernetError};
use crate::model::{concat_input, AdapterSet, MainNetwork, ModelConfig, ModelError, Vocab};
use crate::numerics::{adam_step, Graph, NumericsError, ParamStore, Rng, Scalar, ADAM_BETAS, ADAM_EPS};

#[derive(Debug, Error)]
pub enum TrainingError {
    #[error("train split is empty")]
    EmptyTrainSet,
    #[error("dev split is empty; early stopping needs a dev set")]
    EmptyDevSet,
    #[error("non-finite loss: {context}")]
    NonFinite { context: String },
    #[error("task {task_id:?}, example {index}: empty target after tokenization")]
    EmptyTarget { task_id: String, index: usize },
    #[error("sweep evaluation failed for config {config}: {msg}")]
    SweepEval { config: String, msg: String },
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Hypernet(#[from] HypernetError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = TrainingError> = std::result::Result<T, E>;

/// Stage-1 learning-rate grid as published for fine-tuning a large
/// pre-trained model.
pub const STAGE1_LR_GRID_FINETUNE: [f64; 3] = [1e-5, 3e-5, 5e-5];
/// Stage-1 grid scaled x10: a small model trained from scratch needs
/// larger steps than a 400M-parameter fine-tune.
pub const STAGE1_LR_GRID_DESK: [f64; 3] = [1e-4, 3e-4, 5e-4];
/// Stage-2 (hypernetwork) learning-rate grid as published.
pub const STAGE2_LR_GRID_FINETUNE: [f64; 4] = [3e-6, 1e-5, 3e-5, 1e-4];
/// Stage-2 grid scaled x10 for desk scale.
pub const STAGE2_LR_GRID_DESK: [f64; 4] = [3e-5, 1e-4, 3e-4, 1e-3];
/// Task batch (b) and example batch (b') grid.
pub const BATCH_GRID: [usize; 4] = [4, 8, 16, 32];
/// Adapter width (a) grid.
pub const ADAPTER_WIDTH_GRID: [usize; 4] = [4, 8, 16, 32];

/// Which dev-set number drives early stopping and sweeps.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DevMetric {
    /// Mean over tasks of per-task mean F1.
    MeanF1,
    /// Competence at the given threshold, e.g. C@75.
    CompetenceAt(u32),
}

impl DevMetric {
    pub fn of(&self, report: &EvalReport) -> f64 {
        match self {
            DevMetric::MeanF1 => report.mean_f1,
            DevMetric::CompetenceAt(k) => report.competence.get(k).copied().unwrap_or(0.0),
        }
    }

    /// Competence thresholds the evaluator must compute for this metric.
    fn ks(&self) -> Vec<u32> {
        let mut ks = vec![75, 90];
        if let DevMetric::CompetenceAt(k) = self {
            if !ks.contains(k) {
                ks.push(*k);
            }
        }
        ks
    }
}

impl std::fmt::Display for DevMetric {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            DevMetric::MeanF1 => write!(f, "mean-f1"),
            DevMetric::CompetenceAt(k) => write!(f, "c@{k}"),
        }
    }
}

impl std::str::FromStr for DevMetric {
    type Err = TrainingError;
    fn from_str(s: &str) -> Result<Self> {
        if s == "mean-f1" {
            return Ok(DevMetric::MeanF1);
        }
        if let Some(k) = s.strip_prefix("c@") {
            if let Ok(k) = k.parse::<u32>() {
                return Ok(DevMetric::CompetenceAt(k));
            }
        }
        Err(TrainingError::Invalid(format!(
            "unknown dev metric {s:?}; valid: mean-f1, c@<K> (e.g. c@75)"
        )))
    }
}

impl Serialize for DevMetric {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for DevMetric {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Stage-1 configuration: plain supervised fine-tuning of the main network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Stage1Config {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub patience: usize,
    pub seed: u64,
    #[serde(default = "default_metric")]
    pub metric: DevMetric,
}

fn default_metric() -> DevMetric {
    DevMetric::MeanF1
}

impl Default for Stage1Config {
    fn default() -> Self {
        Stage1Config {
            lr: STAGE1_LR_GRID_DESK[1],
            epochs: 30,
            batch_size: 32,
            patience: 5,
            seed: 0,
            metric: DevMetric::MeanF1,
        }
    }
}

impl Stage1Config {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(TrainingError::Invalid(format!("lr must be positive, got {}", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(TrainingError::Invalid("batch_size must be at least 1".into()));
        }
        if self.patience == 0 {
            return Err(TrainingError::Invalid("patience must be at least 1".into()));
        }
        Ok(())
    }
}

/// Stage-2 configuration: hypernetwork training over a frozen main network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Stage2Config {
    /// Hypernetwork learning rate (the sweep's alpha axis).
    pub lr: f64,
    /// Tasks per optimizer step (b).
    pub task_batch: usize,
    /// Examples sampled per task (b').
    pub example_batch: usize,
    /// Adapter width (a); must match both network configs.
    pub adapter_width: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    #[serde(default = "default_metric")]
    pub metric: DevMetric,
}

impl Default for Stage2Config {
    fn default() -> Self {
        Stage2Config {
            lr: STAGE2_LR_GRID_DESK[1],
            task_batch: 8,
            example_batch: 8,
            adapter_width: 8,
            max_epochs: 100,
            patience: 5,
            seed: 0,
            metric: DevMetric::MeanF1,
        }
    }
}

impl Stage2Config {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(TrainingError::Invalid(format!("lr must be positive, got {}", self.lr)));
        }
        if self.task_batch == 0 || self.example_batch == 0 {
            return Err(TrainingError::Invalid("task_batch and example_batch must be at least 1".into()));
        }
        if self.adapter_width == 0 {
            return Err(TrainingError::Invalid("adapter_width must be at least 1".into()));
        }
        if self.patience == 0 {
            return Err(TrainingError::Invalid("patience must be at least 1".into()));
        }
        Ok(())
    }
}

/// One line of a training log. Epoch 0 is the untrained starting point:
/// no update has happened yet when its numbers are recorded.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub dev_metric: f64,
    pub wall_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct LogSummary {
    best_epoch: usize,
    stopping: String,
}

/// Full training trajectory plus where it stopped and why.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainLog {
    pub epochs: Vec<EpochLog>,
    pub best_epoch: usize,
    pub stopping: String,
}

impl TrainLog {
    pub fn best_dev(&self) -> f64 {
        self.epochs[self.best_epoch].dev_metric
    }

    /// Trajectory equality for reproducibility checks: wall time is the
    /// one field two identical runs may legitimately disagree on.
    pub fn same_trajectory(&self, other: &TrainLog) -> bool {
        self.best_epoch == other.best_epoch
            && self.stopping == other.stopping
            && self.epochs.len() == other.epochs.len()
            && self
                .epochs
                .iter()
                .zip(&other.epochs)
                .all(|(a, b)| {
                    a.epoch == b.epoch
                        && a.train_loss == b.train_loss
                        && a.dev_metric == b.dev_metric
                })
    }

    /// One JSON object per epoch, then a summary line.
    pub fn save_jsonl(&self, path: &Path) -> Result<()> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        for e in &self.epochs {
            let line = serde_json::to_string(e).map_err(|e| TrainingError::Invalid(e.to_string()))?;
            writeln!(out, "{line}")?;
        }
        let summary = serde_json::json!({
            "summary": LogSummary { best_epoch: self.best_epoch, stopping: self.stopping.clone() }
        });
        writeln!(out, "{summary}")?;
        out.flush()?;
        Ok(())
    }

    pub fn load_jsonl(path: &Path) -> Result<TrainLog> {
        let text = std::fs::read_to_string(path)?;
        let mut epochs = Vec::new();
        let mut summary: Option<LogSummary> = None;
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let value: serde_json::Value = serde_json::from_str(line)
                .map_err(|e| TrainingError::Invalid(format!("{}:{}: {e}", path.display(), i + 1)))?;
            if let Some(s) = value.get("summary") {
                summary = Some(
                    serde_json::from_value(s.clone())
                        .map_err(|e| TrainingError::Invalid(e.to_string()))?,
                );
            } else {
                epochs.push(
                    serde_json::from_value(value)
                        .map_err(|e| TrainingError::Invalid(format!("{}:{}: {e}", path.display(), i + 1)))?,
                );
            }
        }
        let summary = summary
            .ok_or_else(|| TrainingError::Invalid(format!("{}: missing summary line", path.display())))?;
        if epochs.is_empty() {
            return Err(TrainingError::Invalid(format!("{}: no epoch lines", path.display())));
        }
        Ok(TrainLog { epochs, best_epoch: summary.best_epoch, stopping: summary.stopping })
    }
}

/// Early-stopping rule on a dev-metric history (higher is better):
/// best index is the first occurrence of the maximum; stop once `patience`
/// epochs have passed without improvement.
pub fn early_stop(dev_history: &[f64], patience: usize) -> (bool, usize) {
    assert!(!dev_history.is_empty(), "early_stop needs at least one entry");
    let mut best = 0;
    for (i, &v) in dev_history.iter().enumerate().skip(1) {
        if v > dev_history[best] {
            best = i;
        }
    }
    (dev_history.len() - 1 - best >= patience, best)
}

/// Tokenized target, truncated so BOS + target fits the decoder window.
fn target_ids(vocab: &Vocab, text: &str, max_len: usize) -> Vec<usize> {
    let mut ids = vocab.tokenize(text);
    ids.truncate(max_len.saturating_sub(1));
    ids
}

struct Instance {
    src: Vec<usize>,
    tgt: Vec<usize>,
}

fn flatten_instances<T: Scalar>(
    net: &MainNetwork<T>,
    vocab: &Vocab,
    tasks: &[Task],
) -> Result<Vec<Instance>> {
    let mut out = Vec::new();
    for task in tasks {
        for (index, ex) in task.examples.iter().enumerate() {
            let src = concat_input(vocab, &task.description, &ex.source, net.config.max_len)?;
            let tgt = target_ids(vocab, &ex.target, net.config.max_len);
            if tgt.is_empty() {
                return Err(TrainingError::EmptyTarget { task_id: task.task_id.clone(), index });
            }
            out.push(Instance { src, tgt });
        }
    }
    Ok(out)
}

/// Names for a shared adapter stack trained jointly with the main network.
fn adapter_param_names(layer: usize) -> [String; 4] {
    [
        format!("adapter.l{layer}.w_down"),
        format!("adapter.l{layer}.b_down"),
        format!("adapter.l{layer}.w_up"),
        format!("adapter.l{layer}.b_up"),
    ]
}

/// Initialization for the shared-adapter baseline.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AdapterInit {
    /// Weights drawn as in the main network; the published baseline.
    Random,
    /// All zeros: the stack starts as an exact identity.
    Zero,
}

/// A trainable store of one adapter stack (description-independent), for
/// the baseline that fine-tunes the main network with adapters plugged in.
pub fn init_adapter_store<T: Scalar>(
    config: &ModelConfig,
    init: AdapterInit,
    seed: u64,
) -> ParamStore<T> {
    let mut rng = Rng::new(seed).subrng("init/baseline-adapters");
    let h = config.h;
    let a = config.adapter_width;
    let mut store = ParamStore::new();
    for layer in 0..config.n_layers() {
        let [wd, bd, wu, bu] = adapter_param_names(layer);
        let (w_down, w_up) = match init {
            AdapterInit::Random => (
                crate::model::xavier::<T>(&mut rng, h, a),
                crate::model::xavier::<T>(&mut rng, a, h),
            ),
            AdapterInit::Zero => (
                crate::numerics::Tensor2::zeros(h, a),
                crate::numerics::Tensor2::zeros(a, h),
            ),
        };
        store.insert_matrix(&wd, w_down).expect("fresh store");
        store.insert_vector(&bd, crate::numerics::Tensor2::zeros(1, a)).expect("fresh store");
        store.insert_matrix(&wu, w_up).expect("fresh store");
        store.insert_vector(&bu, crate::numerics::Tensor2::zeros(1, h)).expect("fresh store");
    }
    store
}

/// Materializes the baseline adapter store as a plain adapter set.
pub fn adapter_set_from_store<T: Scalar>(
    store: &ParamStore<T>,
    config: &ModelConfig,
) -> Result<AdapterSet<T>> {
    let mut set = AdapterSet::zeros(config.n_layers(), config.h, config.adapter_width);
    for layer in 0..config.n_layers() {
        let [wd, bd, wu, bu] = adapter_param_names(layer);
        let ad = &mut set.0[layer];
        ad.w_down = store.value(&wd)?.clone();
        ad.b_down = store.value(&bd)?.clone();
        ad.w_up = store.value(&wu)?.clone();
        ad.b_up = store.value(&bu)?.clone();
    }
    set.validate(config.n_layers(), config.h, config.adapter_width)?;
    Ok(set)
}

/// Mounts the baseline adapter store onto a tape as trainable vars.
fn mount_adapter_store<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    n_layers: usize,
) -> Result<Vec<crate::model::AdapterVars>> {
    let mut vars = Vec::with_capacity(n_layers);
    for layer in 0..n_layers {
        let [wd, bd, wu, bu] = adapter_param_names(layer);
        vars.push(crate::model::AdapterVars {
            w_down: g.param(store, &wd)?,
            b_down: g.param(store, &bd)?,
            w_up: g.param(store, &wu)?,
            b_up: g.param(store, &bu)?,
        });
    }
    Ok(vars)
}

/// Shared stage-1 loop: fine-tunes the main network, optionally together
/// with a shared adapter store mounted into every forward pass. Restores
/// the best-dev-epoch parameters before returning.
fn train_main_loop<T: Scalar>(
    net: &mut MainNetwork<T>,
    mut adapters: Option<&mut ParamStore<T>>,
    vocab: &Vocab,
    dataset: &TaskDataset,
    cfg: &Stage1Config,
    stage_tag: &str,
) -> Result<TrainLog> {
    cfg.validate()?;
    if dataset.train.is_empty() {
        return Err(TrainingError::EmptyTrainSet);
    }
    if dataset.dev.is_empty() {
        return Err(TrainingError::EmptyDevSet);
    }
    let instances = flatten_instances(net, vocab, &dataset.train)?;
    let rng = Rng::new(cfg.seed);
    let ks = cfg.metric.ks();
    let n_layers = net.config.n_layers();

    let dev_eval = |net: &MainNetwork<T>, adapters: Option<&ParamStore<T>>| -> Result<f64> {
        let set = match adapters {
            None => None,
            Some(store) => Some(adapter_set_from_store(store, &net.config)?),
        };
        let report = evaluate_fixed(net, vocab, set.as_ref(), &dataset.dev, &ks, 1)?;
        Ok(cfg.metric.of(&report))
    };

    // Mean loss without updating: the epoch-0 baseline row.
    let initial_loss = |net: &MainNetwork<T>, adapters: Option<&ParamStore<T>>| -> Result<f64> {
        let mut sum = 0.0;
        for inst in &instances {
            let mut g = Graph::new();
            let vars = match adapters {
                None => None,
                Some(store) => Some(mount_adapter_store(&mut g, store, n_layers)?),
            };
            let (loss, _) = net.build_example_loss(&mut g, vars.as_deref(), &inst.src, &inst.tgt)?;
            sum += g.value(loss).scalar().to_f64();
        }
        Ok(sum / instances.len() as f64)
    };

    let mut epochs: Vec<EpochLog> = Vec::new();
    let mut dev_history: Vec<f64> = Vec::new();
    let start = Instant::now();
    let dev0 = dev_eval(net, adapters.as_deref())?;
    epochs.push(EpochLog {
        epoch: 0,
        train_loss: initial_loss(net, adapters.as_deref())?,
        dev_metric: dev0,
        wall_ms: start.elapsed().as_millis() as u64,
    });
    dev_history.push(dev0);

    let snapshot = |net: &MainNetwork<T>, adapters: Option<&ParamStore<T>>| {
        (net.params.snapshot_values(), adapters.map(|s| s.snapshot_values()))
    };
    let mut best = snapshot(net, adapters.as_deref());
    let mut step = 0u64;
    let mut stopping = String::from("epoch-budget");

    for epoch in 1..=cfg.epochs {
        let t0 = Instant::now();
        let mut order: Vec<usize> = (0..instances.len()).collect();
        rng.subrng(&format!("{stage_tag}/epoch/{epoch}")).shuffle(&mut order);
        let mut loss_sum = 0.0;
        for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
            net.params.zero_grads();
            if let Some(store) = adapters.as_deref_mut() {
                store.zero_grads();
            }
            for &idx in chunk {
                let inst = &instances[idx];
                let mut g = Graph::new();
                let vars = match adapters.as_deref() {
                    None => None,
                    Some(store) => Some(mount_adapter_store(&mut g, store, n_layers)?),
                };
                let (loss, _) =
                    net.build_example_loss(&mut g, vars.as_deref(), &inst.src, &inst.tgt)?;
                let value = g.value(loss).scalar().to_f64();
                if !value.is_finite() {
                    return Err(TrainingError::NonFinite {
                        context: format!("{stage_tag} epoch {epoch} batch {bi}: loss {value}"),
                    });
                }
                loss_sum += value;
                g.backward(loss)?;
                g.export_grads(&mut net.params)?;
                if let Some(store) = adapters.as_deref_mut() {
                    g.export_grads(store)?;
                }
            }
            let scale = T::from_f64(1.0 / chunk.len() as f64);
            net.params.scale_grads(scale);
            if let Some(store) = adapters.as_deref_mut() {
                store.scale_grads(scale);
            }
            step += 1;
            adam_step(&mut net.params, cfg.lr, ADAM_BETAS, ADAM_EPS, step)?;
            if let Some(store) = adapters.as_deref_mut() {
                adam_step(store, cfg.lr, ADAM_BETAS, ADAM_EPS, step)?;
            }
        }
        let dev = dev_eval(net, adapters.as_deref())?;
        epochs.push(EpochLog {
            epoch,
            train_loss: loss_sum / instances.len() as f64,
            dev_metric: dev,
            wall_ms: t0.elapsed().as_millis() as u64,
        });
        dev_history.push(dev);
        let (stop, best_idx) = early_stop(&dev_history, cfg.patience);
        if best_idx == dev_history.len() - 1 {
            best = snapshot(net, adapters.as_deref());
        }
        if stop {
            stopping = format!("early-stop(patience={})", cfg.patience);
            break;
        }
    }

    let (_, best_epoch) = early_stop(&dev_history, cfg.patience);
    net.params.restore_values(&best.0)?;
    if let (Some(store), Some(snap)) = (adapters.as_deref_mut(), best.1.as_ref()) {
        store.restore_values(snap)?;
    }
    Ok(TrainLog { epochs, best_epoch, stopping })
}

/// Stage 1: fine-tunes the main network on all training instances with
/// shuffled mini-batches, early-stopping on the dev metric and restoring
/// the best epoch's parameters. The result doubles as the no-adapter
/// baseline.
pub fn train_main<T: Scalar>(
    net: &mut MainNetwork<T>,
    vocab: &Vocab,
    dataset: &TaskDataset,
    cfg: &Stage1Config,
) -> Result<TrainLog> {
    train_main_loop(net, None, vocab, dataset, cfg, "stage1")
}

/// Baseline arm: fine-tunes the main network jointly with one shared
/// adapter stack (not description-dependent). The same loop as
/// [`train_main`], so with a zero-initialized store the trajectories
/// start identical.
pub fn train_baseline_adapters<T: Scalar>(
    net: &mut MainNetwork<T>,
    adapters: &mut ParamStore<T>,
    vocab: &Vocab,
    dataset: &TaskDataset,
    cfg: &Stage1Config,
) -> Result<TrainLog> {
    train_main_loop(net, Some(adapters), vocab, dataset, cfg, "baseline")
}

/// Stage 2: trains the hypernetwork against a frozen main network.
///
/// Per task: generate adapters from the description on the same tape as
/// the forward passes, average the loss over `example_batch` sampled
/// examples, and backpropagate; gradients accumulate over `task_batch`
/// tasks per optimizer step. Only hypernetwork parameters change; the
/// main network is asserted bit-identical afterwards.
pub fn train_hyper<T: Scalar>(
    net: &MainNetwork<T>,
    hn: &mut Hypernetwork<T>,
    vocab: &Vocab,
    dataset: &TaskDataset,
    cfg: &Stage2Config,
) -> Result<TrainLog> {
    cfg.validate()?;
    if dataset.train.is_empty() {
        return Err(TrainingError::EmptyTrainSet);
    }
    if dataset.dev.is_empty() {
        return Err(TrainingError::EmptyDevSet);
    }
    hn.config.check_compatible(&net.config)?;
    if cfg.adapter_width != hn.config.adapter_width {
        return Err(TrainingError::Invalid(format!(
            "config adapter_width {} does not match hypernetwork width {}",
            cfg.adapter_width, hn.config.adapter_width
        )));
    }
    let main_checksum = net.checksum();
    let rng = Rng::new(cfg.seed);
    let ks = cfg.metric.ks();

    // Loss of one task: adapters generated once from the description,
    // shared by every sampled example on the same tape.
    let task_loss = |hn: &mut Hypernetwork<T>,
                     task: &Task,
                     sample_rng: &mut Rng,
                     backward: bool|
     -> Result<f64> {
        let n = task.examples.len();
        let take = cfg.example_batch.min(n);
        let picked: Vec<usize> = {
            let perm = sample_rng.permutation(n);
            perm[..take].to_vec()
        };
        let mut g = Graph::new();
        let desc_ids = vocab.tokenize(&task.description);
        let vars = hn.build_adapters(&mut g, &desc_ids)?;
        let mut losses = Vec::with_capacity(take);
        for (index, &ei) in picked.iter().enumerate() {
            let ex = &task.examples[ei];
            let src = concat_input(vocab, &task.description, &ex.source, net.config.max_len)?;
            let tgt = target_ids(vocab, &ex.target, net.config.max_len);
            if tgt.is_empty() {
                return Err(TrainingError::EmptyTarget {
                    task_id: task.task_id.clone(),
                    index,
                });
            }
            let (loss, _) = net.build_example_loss(&mut g, Some(&vars), &src, &tgt)?;
            losses.push(loss);
        }
        let mean = g.mean_scalars(&losses)?;
        let value = g.value(mean).scalar().to_f64();
        if backward {
            g.backward(mean)?;
            g.export_grads(&mut hn.params)?;
        }
        Ok(value)
    };

    let dev_eval = |hn: &Hypernetwork<T>| -> Result<f64> {
        let report = evaluate(net, vocab, Some(hn), &dataset.dev, &ks, 1)?;
        Ok(cfg.metric.of(&report))
    };

    let mut epochs: Vec<EpochLog> = Vec::new();
    let mut dev_history: Vec<f64> = Vec::new();

    // Epoch 0: the untrained hypernetwork. With zero-initialized final
    // layers this is exactly the stage-1 model.
    let t0 = Instant::now();
    {
        let mut loss_sum = 0.0;
        for task in &dataset.train {
            let mut srng = rng.subrng(&format!("stage2/epoch/0/task/{}", task.task_id));
            loss_sum += task_loss(hn, task, &mut srng, false)?;
        }
        let dev = dev_eval(hn)?;
        epochs.push(EpochLog {
            epoch: 0,
            train_loss: loss_sum / dataset.train.len() as f64,
            dev_metric: dev,
            wall_ms: t0.elapsed().as_millis() as u64,
        });
        dev_history.push(dev);
    }

    let mut best = hn.params.snapshot_values();
    let mut step = 0u64;
    let mut stopping = String::from("epoch-budget");

    for epoch in 1..=cfg.max_epochs {
        let t0 = Instant::now();
        let mut order: Vec<usize> = (0..dataset.train.len()).collect();
        rng.subrng(&format!("stage2/epoch/{epoch}")).shuffle(&mut order);
        let mut loss_sum = 0.0;
        for chunk in order.chunks(cfg.task_batch) {
            hn.params.zero_grads();
            for &ti in chunk {
                let task = &dataset.train[ti];
                let mut srng = rng.subrng(&format!("stage2/epoch/{epoch}/task/{}", task.task_id));
                let value = task_loss(hn, task, &mut srng, true)?;
                if !value.is_finite() {
                    return Err(TrainingError::NonFinite {
                        context: format!(
                            "stage2 epoch {epoch} task {:?}: loss {value}",
                            task.task_id
                        ),
                    });
                }
                loss_sum += value;
            }
            hn.params.scale_grads(T::from_f64(1.0 / chunk.len() as f64));
            step += 1;
            adam_step(&mut hn.params, cfg.lr, ADAM_BETAS, ADAM_EPS, step)?;
        }
        let dev = dev_eval(hn)?;
        epochs.push(EpochLog {
            epoch,
            train_loss: loss_sum / dataset.train.len() as f64,
            dev_metric: dev,
            wall_ms: t0.elapsed().as_millis() as u64,
        });
        dev_history.push(dev);
        let (stop, best_idx) = early_stop(&dev_history, cfg.patience);
        if best_idx == dev_history.len() - 1 {
            best = hn.params.snapshot_values();
        }
        if stop {
            stopping = format!("early-stop(patience={})", cfg.patience);
            break;
        }
    }

    let (_, best_epoch) = early_stop(&dev_history, cfg.patience);
    hn.params.restore_values(&best)?;
    assert_eq!(
        net.checksum(),
        main_checksum,
        "stage 2 must leave the main network bit-identical"
    );
    Ok(TrainLog { epochs, best_epoch, stopping })
}

/// One sweep axis: a named hyperparameter and its candidate values in
/// search order. Integer-valued axes (batch sizes, widths) are carried as
/// exact f64s.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepAxis {
    pub name: String,
    pub values: Vec<f64>,
}

impl SweepAxis {
    pub fn new(name: &str, values: &[f64]) -> Self {
        SweepAxis { name: name.to_string(), values: values.to_vec() }
    }
}

/// One sweep evaluation: the full candidate config and its dev score.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepEval {
    pub config: BTreeMap<String, f64>,
    pub score: f64,
}

/// Greedy sequential hyperparameter search: axes are decided in order;
/// while scanning one axis, already-decided axes keep their chosen values
/// and undecided axes sit at their first value. Ties keep the earlier
/// value. Exactly sum(|values|) evaluations.
pub fn greedy_sweep<F>(
    axes: &[SweepAxis],
    mut eval_fn: F,
) -> Result<(BTreeMap<String, f64>, Vec<SweepEval>)>
where
    F: FnMut(&BTreeMap<String, f64>) -> std::result::Result<f64, String>,
{
    if axes.is_empty() {
        return Err(TrainingError::Invalid("sweep needs at least one axis".into()));
    }
    let mut names = std::collections::BTreeSet::new();
    for ax in axes {
        if ax.values.is_empty() {
            return Err(TrainingError::Invalid(format!("axis {:?} has no values", ax.name)));
        }
        if !names.insert(&ax.name) {
            return Err(TrainingError::Invalid(format!("duplicate axis name {:?}", ax.name)));
        }
    }
    let mut fixed: BTreeMap<String, f64> =
        axes.iter().map(|ax| (ax.name.clone(), ax.values[0])).collect();
    let mut trace = Vec::new();
    for ax in axes {
        let mut best_value = ax.values[0];
        let mut best_score = f64::NEG_INFINITY;
        for &v in &ax.values {
            let mut candidate = fixed.clone();
            candidate.insert(ax.name.clone(), v);
            let score = eval_fn(&candidate).map_err(|msg| TrainingError::SweepEval {
                config: serde_json::to_string(&candidate).unwrap_or_else(|_| format!("{candidate:?}")),
                msg,
            })?;
            trace.push(SweepEval { config: candidate, score });
            // Strict > keeps the earliest value on ties.
            if score > best_score {
                best_score = score;
                best_value = v;
            }
        }
        fixed.insert(ax.name.clone(), best_value);
    }
    Ok((fixed, trace))
}

/// The published stage-2 search axes in their published order: adapter
/// width, then learning rate, then task batch, then example batch.
pub fn stage2_axes(lr_grid: &[f64]) -> Vec<SweepAxis> {
    vec![
        SweepAxis::new("adapter_width", &ADAPTER_WIDTH_GRID.map(|v| v as f64)),
        SweepAxis::new("lr", lr_grid),
        SweepAxis::new("task_batch", &BATCH_GRID.map(|v| v as f64)),
        SweepAxis::new("example_batch", &BATCH_GRID.map(|v| v as f64)),
    ]
}
