//! Sequential task training over a stream of missing-modality domains, plus
//! the pooled i.i.d. reference runs.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{predict, Backbone, BACKBONE_PREFIX};
use crate::config::RunConfig;
use crate::data::{Batch, Dataset, SyntheticData};
use crate::error::{Error, Result};
use crate::losses::{contrastive_loss, total_loss, TaskEmbeddings};
use crate::metrics::{accuracy_with_threshold, average_accuracy, forgetting_measure, AccuracyMatrix};
use crate::optim::{AdamState, ParameterSet};
use crate::prompts::{MissingPattern, PromptContext, PromptFamily, PromptPool, TaskId};
use crate::tensor::Tensor;

pub const RUN_RECORD_SCHEMA: &str = "RRV1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Frozen backbone, prompts trained per task.
    Ours,
    /// No prompts, backbone trained sequentially.
    Lowerbound,
    /// No prompts, backbone trained on the pooled data of all tasks.
    Upperbound,
    /// Pooled training of the backbone with modality-specific and task-aware prompts.
    UpperboundOurs,
}

impl Mode {
    pub const ALL: [Mode; 4] = [Mode::Ours, Mode::Lowerbound, Mode::Upperbound, Mode::UpperboundOurs];

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "ours" => Ok(Mode::Ours),
            "lowerbound" => Ok(Mode::Lowerbound),
            "upperbound" => Ok(Mode::Upperbound),
            "upperbound-ours" | "upperbound_ours" => Ok(Mode::UpperboundOurs),
            other => Err(Error::Usage(format!(
                "unknown mode `{other}` (expected ours, lowerbound, upperbound, upperbound-ours)"
            ))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Mode::Ours => "ours",
            Mode::Lowerbound => "lowerbound",
            Mode::Upperbound => "upperbound",
            Mode::UpperboundOurs => "upperbound-ours",
        }
    }

    pub fn is_pooled(self) -> bool {
        matches!(self, Mode::Upperbound | Mode::UpperboundOurs)
    }

    fn uses_prompts(self) -> bool {
        matches!(self, Mode::Ours | Mode::UpperboundOurs)
    }

    fn trains_backbone(self) -> bool {
        self != Mode::Ours
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainerConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    pub mode: Mode,
    /// After each task, evaluate every task of the stream, not only those seen so far.
    pub full_eval: bool,
    /// Regression predictions `>=` this count as positive.
    pub regression_threshold: f64,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 64,
            lr: 1e-3,
            seed: 0,
            mode: Mode::Ours,
            full_eval: false,
            regression_threshold: 0.0,
        }
    }
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be positive".into()));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Config("lr must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StreamConfig {
    /// Task ids in presentation order.
    pub order: Vec<u8>,
    /// Randomly permute `order` with this seed.
    pub permute_seed: Option<u64>,
}

impl Default for StreamConfig {
    fn default() -> Self {
        Self {
            order: (1..=7).collect(),
            permute_seed: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StreamEntry {
    pub task: TaskId,
    pub pattern: MissingPattern,
}

/// Ordered, duplicate-free list of tasks.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskStream {
    entries: Vec<StreamEntry>,
}

impl TaskStream {
    pub fn new(order: &[TaskId]) -> Result<Self> {
        let mut seen = BTreeSet::new();
        for t in order {
            if !seen.insert(*t) {
                return Err(Error::Config(format!("task {t} appears twice in the stream")));
            }
        }
        if order.is_empty() {
            return Err(Error::Config("stream has no tasks".into()));
        }
        Ok(Self {
            entries: order.iter().map(|&task| StreamEntry { task, pattern: task.pattern() }).collect(),
        })
    }

    pub fn from_config(cfg: &StreamConfig) -> Result<Self> {
        let mut order = cfg
            .order
            .iter()
            .map(|&t| TaskId::new(t))
            .collect::<Result<Vec<_>>>()
            .map_err(|e| Error::Config(e.to_string()))?;
        if let Some(seed) = cfg.permute_seed {
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        }
        Self::new(&order)
    }

    pub fn entries(&self) -> &[StreamEntry] {
        &self.entries
    }

    pub fn tasks(&self) -> Vec<TaskId> {
        self.entries.iter().map(|e| e.task).collect()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Loss of a minibatch split into shape-homogeneous parts, each weighted by its share.
pub(crate) fn weighted_batch_loss(
    batches: &[Batch],
    total: usize,
    mut loss_of: impl FnMut(&Batch) -> Result<Tensor>,
) -> Result<Tensor> {
    let mut acc: Option<Tensor> = None;
    for b in batches {
        let l = loss_of(b)?;
        let l = if batches.len() == 1 { l } else { l.scale(b.len() as f64 / total as f64) };
        acc = Some(match acc {
            None => l,
            Some(a) => a.add(&l)?,
        });
    }
    acc.ok_or_else(|| Error::Contract("empty minibatch".into()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossCurve {
    /// `None` for pooled training.
    pub task: Option<TaskId>,
    /// Mean total loss per epoch.
    pub epoch_losses: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskAccuracy {
    pub task: TaskId,
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParameterCounts {
    pub backbone: usize,
    pub prompts: usize,
    pub trainable: usize,
    pub total: usize,
    /// Prompt parameters divided by backbone parameters.
    pub prompt_to_backbone: f64,
    /// Trainable parameters divided by all parameters.
    pub trainable_fraction: f64,
}

/// Everything a run produces, persisted as versioned JSON.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub schema: String,
    pub mode: Mode,
    pub config: RunConfig,
    pub task_order: Vec<TaskId>,
    /// Sequential runs only.
    pub accuracy_matrix: Option<AccuracyMatrix>,
    pub final_accuracies: Vec<TaskAccuracy>,
    pub average_accuracy: f64,
    /// Not applicable for pooled runs and single-task streams.
    pub forgetting: Option<f64>,
    pub parameters: ParameterCounts,
    pub loss_curves: Vec<LossCurve>,
    /// `full_sweep[n][k]`: accuracy on stream task `k` after training task `n`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub full_sweep: Option<Vec<Vec<f64>>>,
}

impl RunRecord {
    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Schema {
            field: "run_record".into(),
            detail: e.to_string(),
        })
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let value: serde_json::Value = serde_json::from_str(text).map_err(|e| Error::Schema {
            field: "run_record".into(),
            detail: e.to_string(),
        })?;
        let found = value.get("schema").and_then(|s| s.as_str()).unwrap_or("<missing>");
        if found != RUN_RECORD_SCHEMA {
            return Err(Error::Version {
                expected: RUN_RECORD_SCHEMA.into(),
                found: found.into(),
            });
        }
        serde_json::from_value(value).map_err(|e| Error::Schema {
            field: "run_record".into(),
            detail: e.to_string(),
        })
    }
}

/// Model, prompts and training state carried across the tasks of a stream.
pub struct Learner {
    cfg: RunConfig,
    backbone: Backbone,
    pool: Option<PromptPool>,
    params: ParameterSet,
    rng: ChaCha8Rng,
}

impl Learner {
    /// Start from `pretrained` backbone weights; the trainable set follows the mode.
    pub fn new(cfg: &RunConfig, pretrained: &ParameterSet) -> Result<Self> {
        cfg.validate()?;
        let mode = cfg.trainer.mode;
        let backbone = Backbone::new(&cfg.backbone)?;
        let mut params = pretrained.subset(BACKBONE_PREFIX);
        let expected = backbone.init_params(&mut ChaCha8Rng::seed_from_u64(0))?;
        for p in expected.iter() {
            let have = params.get(p.id()).map_err(|_| {
                Error::Contract(format!("checkpoint lacks backbone parameter `{}`", p.id()))
            })?;
            if have.shape() != p.shape() {
                return Err(Error::Contract(format!(
                    "checkpoint parameter `{}` has shape {:?}, config expects {:?}",
                    p.id(),
                    have.shape(),
                    p.shape()
                )));
            }
        }
        params.set_trainable_prefix(BACKBONE_PREFIX, mode.trains_backbone());
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.trainer.seed);
        let pool = if mode.uses_prompts() {
            let mut prompt_cfg = cfg.prompts.clone();
            if mode == Mode::UpperboundOurs {
                prompt_cfg.families.remove(&PromptFamily::TaskSpecific);
            }
            Some(PromptPool::init(
                &prompt_cfg,
                cfg.backbone.hidden_dim,
                cfg.backbone.num_layers,
                &mut rng,
                &mut params,
            )?)
        } else {
            None
        };
        Ok(Self {
            cfg: cfg.clone(),
            backbone,
            pool,
            params,
            rng,
        })
    }

    pub fn params(&self) -> &ParameterSet {
        &self.params
    }

    pub fn pool(&self) -> Option<&PromptPool> {
        self.pool.as_ref()
    }

    pub fn backbone(&self) -> &Backbone {
        &self.backbone
    }

    fn contrastive_active(&self) -> bool {
        self.pool
            .as_ref()
            .is_some_and(|p| p.schedule().is_enabled(PromptFamily::TaskAware))
    }

    fn context(&self, params: &ParameterSet, patterns: &[MissingPattern]) -> Result<PromptContext> {
        match &self.pool {
            Some(pool) => pool.resolve(params, patterns),
            None => Ok(PromptContext::none()),
        }
    }

    /// Train on `train` for the configured epochs; returns per-epoch mean loss.
    fn fit(&mut self, train: &Dataset) -> Result<Vec<f64>> {
        let tc = self.cfg.trainer.clone();
        let mut adam = AdamState::new(tc.lr);
        let mut order: Vec<usize> = (0..train.len()).collect();
        let mut curve = Vec::with_capacity(tc.epochs);
        let any_trainable = self.params.iter().any(|p| p.trainable());
        for _ in 0..tc.epochs {
            order.shuffle(&mut self.rng);
            let mut total = 0.0;
            for chunk in order.chunks(tc.batch_size) {
                let params = &self.params;
                let task_l = weighted_batch_loss(&train.batches(chunk)?, chunk.len(), |b| {
                    let ctx = self.context(params, &b.patterns)?;
                    self.backbone.batch_loss(params, b, &ctx).map(|(_, l)| l)
                })?;
                let loss = if self.contrastive_active() {
                    let pool = self.pool.as_ref().expect("contrastive needs prompts");
                    let con = contrastive_loss(&TaskEmbeddings::from_pool(pool, params)?, &self.cfg.loss)?;
                    total_loss(&task_l, &con, &self.cfg.loss)?
                } else {
                    task_l
                };
                total += loss.item() * chunk.len() as f64;
                if any_trainable {
                    loss.backward()?;
                    adam.step(&mut self.params)?;
                }
            }
            curve.push(total / train.len().max(1) as f64);
        }
        Ok(curve)
    }

    /// Train on one task of a sequential stream with fresh optimizer state.
    pub fn run_task(&mut self, task: TaskId, train: &Dataset) -> Result<LossCurve> {
        if let Some(s) = train.samples.iter().find(|s| s.pattern != task.pattern()) {
            return Err(Error::Contract(format!(
                "sample {} has pattern {} but task {task} expects {}",
                s.id,
                s.pattern,
                task.pattern()
            )));
        }
        if let Some(pool) = self.pool.as_mut() {
            if self.cfg.trainer.mode == Mode::Ours {
                pool.add_task(task, &mut self.rng, &mut self.params)?;
                pool.set_active_task(Some(task), &mut self.params)?;
            }
        }
        let epoch_losses = self.fit(train)?;
        log::info!(
            "task {task}: loss {:.6} -> {:.6}",
            epoch_losses.first().copied().unwrap_or(f64::NAN),
            epoch_losses.last().copied().unwrap_or(f64::NAN)
        );
        Ok(LossCurve {
            task: Some(task),
            epoch_losses,
        })
    }

    /// Accuracy on `data`, prompts resolved from each sample's pattern.
    pub fn evaluate(&self, data: &Dataset) -> Result<f64> {
        let mut frozen = self.params.clone();
        frozen.set_trainable_prefix("", false);
        let (preds, labels) = predict(&self.backbone, &frozen, data, 256, &|b| self.context(&frozen, &b.patterns))?;
        accuracy_with_threshold(
            &preds,
            &labels,
            self.cfg.backbone.task_kind(),
            self.cfg.trainer.regression_threshold,
        )
    }

    fn parameter_counts(&self) -> ParameterCounts {
        let backbone = self.params.count_prefix(BACKBONE_PREFIX);
        let prompts = self.params.count_prefix("prompts/");
        let trainable = match self.cfg.trainer.mode {
            Mode::Ours => prompts,
            _ => backbone + prompts,
        };
        let total = backbone + prompts;
        ParameterCounts {
            backbone,
            prompts,
            trainable,
            total,
            prompt_to_backbone: prompts as f64 / backbone as f64,
            trainable_fraction: trainable as f64 / total as f64,
        }
    }
}

fn split_for(data: &SyntheticData, task: TaskId) -> Result<&crate::data::TaskSplit> {
    data.task(task).ok_or_else(|| {
        Error::io(
            format!("<task {task} split>"),
            std::io::Error::new(std::io::ErrorKind::NotFound, "split missing from dataset"),
        )
    })
}

fn check_stream_mode(cfg: &RunConfig) -> Result<()> {
    if cfg.trainer.mode.is_pooled() {
        return Err(Error::Usage(format!(
            "mode {} trains on pooled data; use run_iid_upperbound",
            cfg.trainer.mode.name()
        )));
    }
    Ok(())
}

/// Train the stream task by task; after task `n`, evaluate tasks `1..=n`.
pub fn run_stream(cfg: &RunConfig, data: &SyntheticData, pretrained: &ParameterSet) -> Result<RunRecord> {
    check_stream_mode(cfg)?;
    let stream = TaskStream::from_config(&cfg.stream)?;
    let splits = stream
        .entries()
        .iter()
        .map(|e| split_for(data, e.task))
        .collect::<Result<Vec<_>>>()?;
    let mut learner = Learner::new(cfg, pretrained)?;
    let t = stream.len();
    let mut matrix = AccuracyMatrix::new(t);
    let mut curves = Vec::with_capacity(t);
    let mut sweep = cfg.trainer.full_eval.then(Vec::new);
    for (n, split) in splits.iter().enumerate() {
        curves.push(learner.run_task(split.task, &split.train)?);
        for (i, seen) in splits.iter().enumerate().take(n + 1) {
            matrix.set(i + 1, n + 1, learner.evaluate(&seen.test)?)?;
        }
        if let Some(rows) = sweep.as_mut() {
            rows.push(splits.iter().map(|s| learner.evaluate(&s.test)).collect::<Result<Vec<_>>>()?);
        }
    }
    let final_accuracies = splits
        .iter()
        .enumerate()
        .map(|(i, s)| {
            Ok(TaskAccuracy {
                task: s.task,
                accuracy: matrix.get(i + 1, t)?.expect("final column filled"),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(RunRecord {
        schema: RUN_RECORD_SCHEMA.into(),
        mode: cfg.trainer.mode,
        config: cfg.clone(),
        task_order: stream.tasks(),
        average_accuracy: average_accuracy(&matrix, t)?,
        forgetting: forgetting_measure(&matrix, t)?,
        accuracy_matrix: Some(matrix),
        final_accuracies,
        parameters: learner.parameter_counts(),
        loss_curves: curves,
        full_sweep: sweep,
    })
}

/// Single-phase training on the union of every task's training split.
pub fn run_iid_upperbound(cfg: &RunConfig, data: &SyntheticData, pretrained: &ParameterSet) -> Result<RunRecord> {
    if !cfg.trainer.mode.is_pooled() {
        return Err(Error::Usage(format!(
            "mode {} is sequential; use run_stream",
            cfg.trainer.mode.name()
        )));
    }
    let stream = TaskStream::from_config(&cfg.stream)?;
    let splits = stream
        .entries()
        .iter()
        .map(|e| split_for(data, e.task))
        .collect::<Result<Vec<_>>>()?;
    let union = Dataset::concat(&splits.iter().map(|s| &s.train).collect::<Vec<_>>());
    let mut learner = Learner::new(cfg, pretrained)?;
    let curve = LossCurve {
        task: None,
        epoch_losses: learner.fit(&union)?,
    };
    let final_accuracies = splits
        .iter()
        .map(|s| {
            Ok(TaskAccuracy {
                task: s.task,
                accuracy: learner.evaluate(&s.test)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let average = final_accuracies.iter().map(|a| a.accuracy).sum::<f64>() / final_accuracies.len() as f64;
    Ok(RunRecord {
        schema: RUN_RECORD_SCHEMA.into(),
        mode: cfg.trainer.mode,
        config: cfg.clone(),
        task_order: stream.tasks(),
        accuracy_matrix: None,
        final_accuracies,
        average_accuracy: average,
        forgetting: None,
        parameters: learner.parameter_counts(),
        loss_curves: vec![curve],
        full_sweep: None,
    })
}

/// Dispatch on the configured mode.
pub fn run(cfg: &RunConfig, data: &SyntheticData, pretrained: &ParameterSet) -> Result<RunRecord> {
    if cfg.trainer.mode.is_pooled() {
        run_iid_upperbound(cfg, data, pretrained)
    } else {
        run_stream(cfg, data, pretrained)
    }
}
