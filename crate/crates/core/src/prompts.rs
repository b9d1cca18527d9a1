//! Prompt families, missing patterns, and the continual prompt pool.
//!
//! Three families are attached to the per-modality attention stacks:
//!
//! * modality-specific prompts `P_MS` (one `ℓ×d` block per modality, shared by all tasks),
//! * task-aware prompts `P_TA`, generated from `P_MS` and the missing keys `K_m`/`K_u`
//!   according to which modalities are absent, identical for all three streams,
//! * task-specific prompts `P_TS^(t)`, one `M×ℓ×d` entry per task.
//!
//! All of them live in the model's [`ParameterSet`] under `prompts/`.

use std::collections::BTreeSet;
use std::fmt;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::optim::ParameterSet;
use crate::tensor::Tensor;

pub const NUM_MODALITIES: usize = 3;
pub const NUM_TASKS: usize = 7;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Modality {
    Audio,
    Video,
    Text,
}

impl Modality {
    pub const ALL: [Modality; NUM_MODALITIES] = [Modality::Audio, Modality::Video, Modality::Text];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Modality::Audio => "audio",
            Modality::Video => "video",
            Modality::Text => "text",
        }
    }

    pub fn short(self) -> &'static str {
        match self {
            Modality::Audio => "a",
            Modality::Video => "v",
            Modality::Text => "t",
        }
    }
}

/// Which modalities are absent from a sample (`true` = missing).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "[u8; 3]", into = "[u8; 3]")]
pub struct MissingPattern {
    missing: [bool; NUM_MODALITIES],
}

/// Canonical order of the seven non-empty availability cases, as `(audio, video, text)` missing flags.
const TASK_TABLE: [[bool; 3]; NUM_TASKS] = [
    [false, false, false],
    [false, false, true],
    [false, true, false],
    [true, false, false],
    [false, true, true],
    [true, false, true],
    [true, true, false],
];

impl MissingPattern {
    pub const COMPLETE: MissingPattern = MissingPattern { missing: [false; 3] };

    pub fn new(audio_missing: bool, video_missing: bool, text_missing: bool) -> Result<Self> {
        let missing = [audio_missing, video_missing, text_missing];
        if missing.iter().all(|&m| m) {
            return Err(Error::Domain("a sample must keep at least one modality".into()));
        }
        Ok(Self { missing })
    }

    pub fn is_missing(&self, m: Modality) -> bool {
        self.missing[m.index()]
    }

    /// Missing indicator `μ_k` as a number.
    pub fn indicator(&self, m: Modality) -> f64 {
        if self.is_missing(m) {
            1.0
        } else {
            0.0
        }
    }

    pub fn is_complete(&self) -> bool {
        !self.missing.iter().any(|&m| m)
    }

    pub fn task_id(&self) -> TaskId {
        let idx = TASK_TABLE
            .iter()
            .position(|row| *row == self.missing)
            .expect("constructor rejects the only pattern absent from the table");
        TaskId(idx as u8 + 1)
    }

    pub fn all() -> impl Iterator<Item = MissingPattern> {
        TaskId::all().map(TaskId::pattern)
    }
}

impl fmt::Display for MissingPattern {
    /// `(a, v, tm)`-style marker: missing modalities carry an `m` suffix.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = Modality::ALL
            .iter()
            .map(|&m| format!("{}{}", m.short(), if self.is_missing(m) { "m" } else { "" }))
            .collect();
        write!(f, "({})", parts.join(", "))
    }
}

impl TryFrom<[u8; 3]> for MissingPattern {
    type Error = Error;

    fn try_from(v: [u8; 3]) -> Result<Self> {
        if v.iter().any(|&x| x > 1) {
            return Err(Error::Domain(format!("missing indicators must be 0 or 1, got {v:?}")));
        }
        MissingPattern::new(v[0] == 1, v[1] == 1, v[2] == 1)
    }
}

impl From<MissingPattern> for [u8; 3] {
    fn from(p: MissingPattern) -> Self {
        p.missing.map(u8::from)
    }
}

/// Task identity `1..=7`, bijective with [`MissingPattern`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub struct TaskId(u8);

impl TaskId {
    pub fn new(id: u8) -> Result<Self> {
        if (1..=NUM_TASKS as u8).contains(&id) {
            Ok(TaskId(id))
        } else {
            Err(Error::TaskMapping(format!("task id {id} (valid ids are 1..=7)")))
        }
    }

    pub fn get(self) -> u8 {
        self.0
    }

    pub fn pattern(self) -> MissingPattern {
        let [a, v, t] = TASK_TABLE[self.0 as usize - 1];
        MissingPattern { missing: [a, v, t] }
    }

    pub fn all() -> impl Iterator<Item = TaskId> {
        (1..=NUM_TASKS as u8).map(TaskId)
    }
}

impl TryFrom<u8> for TaskId {
    type Error = Error;
    fn try_from(v: u8) -> Result<Self> {
        TaskId::new(v)
    }
}

impl From<TaskId> for u8 {
    fn from(t: TaskId) -> u8 {
        t.0
    }
}

impl fmt::Display for TaskId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

pub fn task_id_from_pattern(pattern: MissingPattern) -> TaskId {
    pattern.task_id()
}

pub fn pattern_from_task_id(id: TaskId) -> MissingPattern {
    id.pattern()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum PromptFamily {
    #[serde(rename = "MS")]
    ModalitySpecific,
    #[serde(rename = "TA")]
    TaskAware,
    #[serde(rename = "TS")]
    TaskSpecific,
}

impl PromptFamily {
    pub const ALL: [PromptFamily; 3] = [
        PromptFamily::ModalitySpecific,
        PromptFamily::TaskAware,
        PromptFamily::TaskSpecific,
    ];

    pub fn short(self) -> &'static str {
        match self {
            PromptFamily::ModalitySpecific => "MS",
            PromptFamily::TaskAware => "TA",
            PromptFamily::TaskSpecific => "TS",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "MS" => Ok(PromptFamily::ModalitySpecific),
            "TA" => Ok(PromptFamily::TaskAware),
            "TS" => Ok(PromptFamily::TaskSpecific),
            other => Err(Error::Config(format!("unknown prompt family `{other}`"))),
        }
    }
}

/// 1-based layer indices carrying each family.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PromptSchedule {
    pub ms: Vec<usize>,
    pub ta: Vec<usize>,
    pub ts: Vec<usize>,
}

impl Default for PromptSchedule {
    fn default() -> Self {
        Self::from_order(PromptFamily::ALL, [2, 3, 3])
    }
}

impl PromptSchedule {
    pub fn empty() -> Self {
        Self {
            ms: vec![],
            ta: vec![],
            ts: vec![],
        }
    }

    /// Contiguous blocks starting at layer 1: `order[0]` gets the first
    /// `counts[0]` layers, `order[1]` the next `counts[1]`, and so on.
    pub fn from_order(order: [PromptFamily; 3], counts: [usize; 3]) -> Self {
        let mut s = Self::empty();
        let mut next = 1;
        for (family, count) in order.into_iter().zip(counts) {
            *s.layers_mut(family) = (next..next + count).collect();
            next += count;
        }
        s
    }

    pub fn layers(&self, family: PromptFamily) -> &[usize] {
        match family {
            PromptFamily::ModalitySpecific => &self.ms,
            PromptFamily::TaskAware => &self.ta,
            PromptFamily::TaskSpecific => &self.ts,
        }
    }

    fn layers_mut(&mut self, family: PromptFamily) -> &mut Vec<usize> {
        match family {
            PromptFamily::ModalitySpecific => &mut self.ms,
            PromptFamily::TaskAware => &mut self.ta,
            PromptFamily::TaskSpecific => &mut self.ts,
        }
    }

    /// Keep only the listed families; the others attach nowhere.
    pub fn restricted_to(&self, families: &BTreeSet<PromptFamily>) -> Self {
        let mut s = self.clone();
        for f in PromptFamily::ALL {
            if !families.contains(&f) {
                s.layers_mut(f).clear();
            }
        }
        s
    }

    pub fn is_enabled(&self, family: PromptFamily) -> bool {
        !self.layers(family).is_empty()
    }

    pub fn is_empty(&self) -> bool {
        PromptFamily::ALL.iter().all(|&f| !self.is_enabled(f))
    }

    pub fn total_layers(&self) -> usize {
        self.ms.len() + self.ta.len() + self.ts.len()
    }

    /// Family attached at `layer` and its position within that family's list.
    pub fn family_at(&self, layer: usize) -> Option<(PromptFamily, usize)> {
        PromptFamily::ALL
            .into_iter()
            .find_map(|f| self.layers(f).iter().position(|&l| l == layer).map(|pos| (f, pos)))
    }

    pub fn validate(&self, num_layers: usize) -> Result<()> {
        let mut seen = BTreeSet::new();
        for f in PromptFamily::ALL {
            for &l in self.layers(f) {
                if l == 0 || l > num_layers {
                    return Err(Error::Config(format!(
                        "{} prompt layer {l} outside 1..={num_layers}",
                        f.short()
                    )));
                }
                if !seen.insert(l) {
                    return Err(Error::Config(format!("layer {l} carries more than one prompt family")));
                }
            }
        }
        Ok(())
    }
}

fn default_length() -> usize {
    16
}

fn default_init_std() -> f64 {
    0.02
}

fn default_families() -> BTreeSet<PromptFamily> {
    PromptFamily::ALL.into_iter().collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PromptConfig {
    /// Prompt length `ℓ`.
    pub length: usize,
    pub init_std: f64,
    /// Initialize `K_m` and `K_u` to all-ones instead of random values.
    pub keys_init_ones: bool,
    /// Let the key indicator mark available modalities instead of missing ones.
    pub availability_indicator: bool,
    /// Independent prompt copies per attached layer.
    pub per_layer_prompts: bool,
    /// Families that are attached at all.
    pub families: BTreeSet<PromptFamily>,
    pub schedule: PromptSchedule,
}

impl Default for PromptConfig {
    fn default() -> Self {
        Self {
            length: default_length(),
            init_std: default_init_std(),
            keys_init_ones: false,
            availability_indicator: false,
            per_layer_prompts: false,
            families: default_families(),
            schedule: PromptSchedule::default(),
        }
    }
}

impl PromptConfig {
    /// Schedule with disabled families removed.
    pub fn effective_schedule(&self) -> PromptSchedule {
        self.schedule.restricted_to(&self.families)
    }

    pub fn validate(&self, num_layers: usize) -> Result<()> {
        if self.length == 0 {
            return Err(Error::Config("prompt length must be positive".into()));
        }
        if !(self.init_std >= 0.0) {
            return Err(Error::Config("prompt init_std must be non-negative".into()));
        }
        self.schedule.validate(num_layers)
    }
}

pub const MS_ID: &str = "prompts/ms";
pub const KEY_MISSING_ID: &str = "prompts/keys/m";
pub const KEY_AVAILABLE_ID: &str = "prompts/keys/u";

fn copy_suffix(copy: usize) -> String {
    if copy == 0 {
        String::new()
    } else {
        format!("/{copy}")
    }
}

pub fn ms_id(copy: usize) -> String {
    format!("{MS_ID}{}", copy_suffix(copy))
}

pub fn ts_id(task: TaskId, copy: usize) -> String {
    format!("prompts/ts/{task}{}", copy_suffix(copy))
}

/// Layout of the prompt parameters held in a [`ParameterSet`].
#[derive(Clone, Debug)]
pub struct PromptPool {
    cfg: PromptConfig,
    schedule: PromptSchedule,
    dim: usize,
    tasks: BTreeSet<TaskId>,
}

fn normal_block(rng: &mut impl Rng, n: usize, std: f64) -> Vec<f64> {
    if std == 0.0 {
        return vec![0.0; n];
    }
    let normal = Normal::new(0.0, std).expect("std validated non-negative");
    (0..n).map(|_| normal.sample(rng)).collect()
}

impl PromptPool {
    /// Creates `P_MS` (when MS or TA is enabled) and the keys (when TA is
    /// enabled) in `params`, drawn i.i.d. from `Normal(0, init_std²)`.
    /// Task-specific entries are added per task with [`PromptPool::add_task`].
    pub fn init(cfg: &PromptConfig, dim: usize, num_layers: usize, rng: &mut impl Rng, params: &mut ParameterSet) -> Result<Self> {
        cfg.validate(num_layers)?;
        let schedule = cfg.effective_schedule();
        let pool = Self {
            cfg: cfg.clone(),
            schedule,
            dim,
            tasks: BTreeSet::new(),
        };
        let block = NUM_MODALITIES * cfg.length * dim;
        let shape = [NUM_MODALITIES, cfg.length, dim];
        if pool.uses_ms_params() {
            for copy in 0..pool.copies(PromptFamily::ModalitySpecific) {
                params.add(ms_id(copy), normal_block(rng, block, cfg.init_std), &shape, true)?;
            }
        }
        if pool.schedule.is_enabled(PromptFamily::TaskAware) {
            for id in [KEY_MISSING_ID, KEY_AVAILABLE_ID] {
                let data = if cfg.keys_init_ones {
                    vec![1.0; dim]
                } else {
                    normal_block(rng, dim, cfg.init_std)
                };
                params.add(id, data, &[dim], true)?;
            }
        }
        Ok(pool)
    }

    /// Rebuild the layout for prompts already present in `params`.
    pub fn attach(cfg: &PromptConfig, dim: usize, num_layers: usize, params: &ParameterSet) -> Result<Self> {
        cfg.validate(num_layers)?;
        let mut pool = Self {
            cfg: cfg.clone(),
            schedule: cfg.effective_schedule(),
            dim,
            tasks: BTreeSet::new(),
        };
        if pool.schedule.is_enabled(PromptFamily::TaskSpecific) {
            pool.tasks = TaskId::all().filter(|&t| params.contains(&ts_id(t, 0))).collect();
        }
        Ok(pool)
    }

    fn uses_ms_params(&self) -> bool {
        self.schedule.is_enabled(PromptFamily::ModalitySpecific) || self.schedule.is_enabled(PromptFamily::TaskAware)
    }

    /// Number of independent tensors for a family.
    fn copies(&self, family: PromptFamily) -> usize {
        if self.cfg.per_layer_prompts {
            self.schedule.layers(family).len().max(1)
        } else {
            1
        }
    }

    pub fn config(&self) -> &PromptConfig {
        &self.cfg
    }

    pub fn schedule(&self) -> &PromptSchedule {
        &self.schedule
    }

    pub fn length(&self) -> usize {
        self.cfg.length
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn has_task(&self, task: TaskId) -> bool {
        self.tasks.contains(&task)
    }

    pub fn tasks(&self) -> impl Iterator<Item = TaskId> + '_ {
        self.tasks.iter().copied()
    }

    /// Create `P_TS^(task)` (no-op when the TS family is disabled).
    pub fn add_task(&mut self, task: TaskId, rng: &mut impl Rng, params: &mut ParameterSet) -> Result<()> {
        if !self.schedule.is_enabled(PromptFamily::TaskSpecific) {
            return Ok(());
        }
        if !self.tasks.insert(task) {
            return Err(Error::Contract(format!("task-specific prompts for task {task} already exist")));
        }
        let block = NUM_MODALITIES * self.cfg.length * self.dim;
        for copy in 0..self.copies(PromptFamily::TaskSpecific) {
            params.add(
                ts_id(task, copy),
                normal_block(rng, block, self.cfg.init_std),
                &[NUM_MODALITIES, self.cfg.length, self.dim],
                true,
            )?;
        }
        Ok(())
    }

    /// Ids of every prompt parameter that is trained while `active` is the current task.
    pub fn trainable_ids(&self, active: Option<TaskId>) -> Vec<String> {
        let mut ids = Vec::new();
        if self.uses_ms_params() {
            ids.extend((0..self.copies(PromptFamily::ModalitySpecific)).map(ms_id));
        }
        if self.schedule.is_enabled(PromptFamily::TaskAware) {
            ids.push(KEY_MISSING_ID.into());
            ids.push(KEY_AVAILABLE_ID.into());
        }
        if let Some(t) = active.filter(|t| self.has_task(*t)) {
            ids.extend((0..self.copies(PromptFamily::TaskSpecific)).map(|c| ts_id(t, c)));
        }
        ids
    }

    /// Mark exactly the prompts trained on `active` as trainable; every other
    /// prompt entry is frozen.
    pub fn set_active_task(&self, active: Option<TaskId>, params: &mut ParameterSet) -> Result<()> {
        params.set_trainable_prefix("prompts/", false);
        for id in self.trainable_ids(active) {
            params.set_trainable(&id, true)?;
        }
        Ok(())
    }

    /// `P_TA` for `pattern` from the current `P_MS` (copy 0) and keys.
    pub fn task_aware(&self, params: &ParameterSet, pattern: MissingPattern) -> Result<Tensor> {
        generate_task_aware(
            params.tensor(MS_ID)?,
            params.tensor(KEY_MISSING_ID)?,
            params.tensor(KEY_AVAILABLE_ID)?,
            pattern,
            self.cfg.availability_indicator,
        )
    }

    fn modality_rows(block: &Tensor, m: Modality) -> Result<Tensor> {
        let [_, l, d] = block.shape() else {
            return Err(Error::dim("prompt", format!("expected M×ℓ×d, got {:?}", block.shape())));
        };
        let (l, d) = (*l, *d);
        block.slice(0, m.index(), m.index() + 1)?.reshape(&[l, d])
    }

    /// Prompt tensors for every prompted layer, for a batch whose samples carry `patterns`.
    ///
    /// Homogeneous batches get `ℓ×d` prompts shared by all samples; mixed batches
    /// get per-sample `B×ℓ×d` stacks.
    pub fn resolve(&self, params: &ParameterSet, patterns: &[MissingPattern]) -> Result<PromptContext> {
        let first = *patterns
            .first()
            .ok_or_else(|| Error::Contract("cannot resolve prompts for an empty batch".into()))?;
        if patterns.iter().all(|p| *p == first) {
            return self.resolve_prompt_context(params, first);
        }
        let mut distinct: Vec<MissingPattern> = patterns.to_vec();
        distinct.sort();
        distinct.dedup();
        let per_pattern = distinct
            .iter()
            .map(|&p| self.resolve_prompt_context(params, p))
            .collect::<Result<Vec<_>>>()?;
        let pick = |p: &MissingPattern| distinct.binary_search(p).expect("pattern collected above");
        let mut layers = Vec::with_capacity(per_pattern[0].layers.len());
        for (li, (layer, slot)) in per_pattern[0].layers.iter().enumerate() {
            let slot = match slot {
                None => None,
                Some(_) => {
                    let mut per_modality = Vec::with_capacity(NUM_MODALITIES);
                    for m in 0..NUM_MODALITIES {
                        let rows = patterns
                            .iter()
                            .map(|p| {
                                let t = &per_pattern[pick(p)].layers[li].1.as_ref().expect("same schedule")[m];
                                let mut shape = vec![1];
                                shape.extend_from_slice(t.shape());
                                t.reshape(&shape)
                            })
                            .collect::<Result<Vec<_>>>()?;
                        per_modality.push(Tensor::concat(&rows, 0)?);
                    }
                    Some(per_modality)
                }
            };
            layers.push((*layer, slot));
        }
        Ok(PromptContext { layers })
    }

    /// Prompts for one missing pattern.
    ///
    /// MS layers receive each modality's own block, TA layers the same
    /// generated tensor for all three streams, and TS layers the task's entry.
    /// A task without a TS entry falls back to zeros with a warning.
    pub fn resolve_prompt_context(&self, params: &ParameterSet, pattern: MissingPattern) -> Result<PromptContext> {
        let task = pattern.task_id();
        let ta = if self.schedule.is_enabled(PromptFamily::TaskAware) {
            Some(self.task_aware(params, pattern)?)
        } else {
            None
        };
        let ts_missing = self.schedule.is_enabled(PromptFamily::TaskSpecific) && !self.has_task(task);
        if ts_missing {
            log::warn!("no task-specific prompts for task {task}; using zeros");
        }
        let zero = Tensor::zeros(&[self.cfg.length, self.dim])?;
        let mut layers = Vec::new();
        let max_layer = PromptFamily::ALL
            .iter()
            .flat_map(|&f| self.schedule.layers(f).iter().copied())
            .max()
            .unwrap_or(0);
        for layer in 1..=max_layer {
            let slot = match self.schedule.family_at(layer) {
                None => None,
                Some((family, pos)) => {
                    let copy = if self.cfg.per_layer_prompts { pos } else { 0 };
                    let per_modality = match family {
                        PromptFamily::ModalitySpecific => {
                            let block = params.tensor(&ms_id(copy))?;
                            Modality::ALL
                                .iter()
                                .map(|&m| Self::modality_rows(block, m))
                                .collect::<Result<Vec<_>>>()?
                        }
                        PromptFamily::TaskAware => {
                            let ta = ta.as_ref().expect("TA enabled when scheduled");
                            vec![ta.clone(), ta.clone(), ta.clone()]
                        }
                        PromptFamily::TaskSpecific if ts_missing => vec![zero.clone(), zero.clone(), zero.clone()],
                        PromptFamily::TaskSpecific => {
                            let block = params.tensor(&ts_id(task, copy))?;
                            Modality::ALL
                                .iter()
                                .map(|&m| Self::modality_rows(block, m))
                                .collect::<Result<Vec<_>>>()?
                        }
                    };
                    Some(per_modality)
                }
            };
            layers.push((layer, slot));
        }
        Ok(PromptContext { layers })
    }

    /// Scalar count of prompt parameters for a stream over `num_tasks` tasks.
    pub fn parameter_count(cfg: &PromptConfig, dim: usize, num_tasks: usize) -> usize {
        let schedule = cfg.effective_schedule();
        let copies = |f: PromptFamily| {
            if cfg.per_layer_prompts {
                schedule.layers(f).len().max(1)
            } else {
                1
            }
        };
        let block = NUM_MODALITIES * cfg.length * dim;
        let mut n = 0;
        if schedule.is_enabled(PromptFamily::ModalitySpecific) || schedule.is_enabled(PromptFamily::TaskAware) {
            n += copies(PromptFamily::ModalitySpecific) * block;
        }
        if schedule.is_enabled(PromptFamily::TaskAware) {
            n += 2 * dim;
        }
        if schedule.is_enabled(PromptFamily::TaskSpecific) {
            n += num_tasks * copies(PromptFamily::TaskSpecific) * block;
        }
        n
    }
}

/// Per-layer prompts handed to the backbone: `layers[i] = (layer, prompts per modality)`.
#[derive(Clone, Debug)]
pub struct PromptContext {
    layers: Vec<(usize, Option<Vec<Tensor>>)>,
}

impl PromptContext {
    pub fn none() -> Self {
        Self { layers: vec![] }
    }

    pub fn prompt_for(&self, layer: usize, m: Modality) -> Option<&Tensor> {
        self.layers
            .iter()
            .find(|(l, _)| *l == layer)
            .and_then(|(_, slot)| slot.as_ref())
            .map(|v| &v[m.index()])
    }

    pub fn max_layer(&self) -> usize {
        self.layers.iter().filter(|(_, s)| s.is_some()).map(|(l, _)| *l).max().unwrap_or(0)
    }
}

/// Task-aware prompt for one missing pattern:
/// `P_k = μ_k·(K_m ⊙ P_MS^k) + (1−μ_k)·(K_u ⊙ P_MS^k)` summed over modalities,
/// with `μ_k = 1` when modality `k` is missing. `marks_available` swaps the roles of
/// the two keys (the indicator then marks availability).
pub fn generate_task_aware(
    ms: &Tensor,
    key_missing: &Tensor,
    key_available: &Tensor,
    pattern: MissingPattern,
    marks_available: bool,
) -> Result<Tensor> {
    let [m, l, d] = ms.shape() else {
        return Err(Error::dim("generate_task_aware", format!("P_MS must be M×ℓ×d, got {:?}", ms.shape())));
    };
    if *m != NUM_MODALITIES || key_missing.shape() != [*d] || key_available.shape() != [*d] {
        return Err(Error::dim(
            "generate_task_aware",
            format!(
                "P_MS {:?} with keys {:?} / {:?}",
                ms.shape(),
                key_missing.shape(),
                key_available.shape()
            ),
        ));
    }
    let (l, d) = (*l, *d);
    let mut total: Option<Tensor> = None;
    for modality in Modality::ALL {
        let rows = ms.slice(0, modality.index(), modality.index() + 1)?.reshape(&[l, d])?;
        let mu = if marks_available {
            1.0 - pattern.indicator(modality)
        } else {
            pattern.indicator(modality)
        };
        let gated = rows
            .broadcast_mul_vector(key_missing)?
            .scale(mu)
            .add(&rows.broadcast_mul_vector(key_available)?.scale(1.0 - mu))?;
        total = Some(match total {
            None => gated,
            Some(acc) => acc.add(&gated)?,
        });
    }
    Ok(total.expect("three modalities"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn patterns_map_to_task_ids() {
        assert_eq!(MissingPattern::new(false, false, false).unwrap().task_id().get(), 1);
        assert_eq!(MissingPattern::new(false, false, true).unwrap().task_id().get(), 2);
        assert_eq!(MissingPattern::new(true, true, false).unwrap().task_id().get(), 7);
        assert_eq!(MissingPattern::new(true, false, false).unwrap().task_id().get(), 4);
    }

    #[test]
    fn all_missing_is_a_domain_error() {
        assert!(matches!(MissingPattern::new(true, true, true), Err(Error::Domain(_))));
        assert!(matches!(MissingPattern::try_from([1, 1, 1]), Err(Error::Domain(_))));
        assert!(matches!(TaskId::new(8), Err(Error::TaskMapping(_))));
    }

    #[test]
    fn pattern_round_trip() {
        for t in TaskId::all() {
            assert_eq!(task_id_from_pattern(pattern_from_task_id(t)), t);
        }
        assert_eq!(MissingPattern::all().count(), 7);
    }

    #[test]
    fn display_marks_missing_modalities() {
        assert_eq!(TaskId::new(7).unwrap().pattern().to_string(), "(am, vm, t)");
    }

    #[test]
    fn default_schedule_is_contiguous() {
        let s = PromptSchedule::default();
        assert_eq!(s.ms, vec![1, 2]);
        assert_eq!(s.ta, vec![3, 4, 5]);
        assert_eq!(s.ts, vec![6, 7, 8]);
        s.validate(10).unwrap();
        assert!(s.validate(7).is_err());
    }

    #[test]
    fn reordered_schedule_keeps_block_sizes_by_position() {
        let s = PromptSchedule::from_order(
            [PromptFamily::TaskAware, PromptFamily::ModalitySpecific, PromptFamily::TaskSpecific],
            [2, 3, 3],
        );
        assert_eq!(s.ta, vec![1, 2]);
        assert_eq!(s.ms, vec![3, 4, 5]);
        assert_eq!(s.family_at(4), Some((PromptFamily::ModalitySpecific, 1)));
    }

    #[test]
    fn overlapping_layers_rejected() {
        let s = PromptSchedule {
            ms: vec![1, 2],
            ta: vec![2],
            ts: vec![],
        };
        assert!(matches!(s.validate(10), Err(Error::Config(_))));
    }

    #[test]
    fn init_sizes_and_determinism() {
        let cfg = PromptConfig::default();
        let build = || {
            let mut ps = ParameterSet::new();
            let mut rng = ChaCha8Rng::seed_from_u64(3);
            let mut pool = PromptPool::init(&cfg, 30, 10, &mut rng, &mut ps).unwrap();
            for t in TaskId::all() {
                pool.add_task(t, &mut rng, &mut ps).unwrap();
            }
            ps
        };
        let ps = build();
        assert_eq!(ps.get(MS_ID).unwrap().data().len(), 1440);
        assert_eq!(ps.count(false), 11_580);
        assert_eq!(PromptPool::parameter_count(&cfg, 30, 7), 11_580);
        assert!(ps.bit_equal(&build()));
    }

    #[test]
    fn disabled_families_create_no_parameters() {
        let cfg = PromptConfig {
            families: [PromptFamily::ModalitySpecific].into_iter().collect(),
            ..PromptConfig::default()
        };
        let mut ps = ParameterSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut pool = PromptPool::init(&cfg, 6, 10, &mut rng, &mut ps).unwrap();
        pool.add_task(TaskId::new(1).unwrap(), &mut rng, &mut ps).unwrap();
        assert_eq!(ps.len(), 1);
        assert_eq!(ps.count(false), PromptPool::parameter_count(&cfg, 6, 7));
    }

    #[test]
    fn ms_layers_get_per_modality_prompts_ta_layers_share_one() {
        let cfg = PromptConfig {
            length: 2,
            ..PromptConfig::default()
        };
        let mut ps = ParameterSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut pool = PromptPool::init(&cfg, 4, 10, &mut rng, &mut ps).unwrap();
        let task = TaskId::new(3).unwrap();
        pool.add_task(task, &mut rng, &mut ps).unwrap();
        let ctx = pool.resolve_prompt_context(&ps, task.pattern()).unwrap();
        let a = ctx.prompt_for(1, Modality::Audio).unwrap();
        let v = ctx.prompt_for(1, Modality::Video).unwrap();
        assert_ne!(a.data(), v.data());
        let ta: Vec<_> = Modality::ALL.iter().map(|&m| ctx.prompt_for(3, m).unwrap().data().to_vec()).collect();
        assert_eq!(ta[0], ta[1]);
        assert_eq!(ta[1], ta[2]);
        assert!(ctx.prompt_for(9, Modality::Text).is_none());
    }

    #[test]
    fn unseen_task_falls_back_to_zero_task_specific_prompts() {
        let cfg = PromptConfig {
            length: 2,
            ..PromptConfig::default()
        };
        let mut ps = ParameterSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let pool = PromptPool::init(&cfg, 4, 10, &mut rng, &mut ps).unwrap();
        let ctx = pool.resolve_prompt_context(&ps, MissingPattern::COMPLETE).unwrap();
        assert!(ctx.prompt_for(6, Modality::Audio).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn routing_marks_only_current_task_trainable() {
        let cfg = PromptConfig::default();
        let mut ps = ParameterSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut pool = PromptPool::init(&cfg, 30, 10, &mut rng, &mut ps).unwrap();
        let (t1, t2) = (TaskId::new(1).unwrap(), TaskId::new(2).unwrap());
        pool.add_task(t1, &mut rng, &mut ps).unwrap();
        pool.add_task(t2, &mut rng, &mut ps).unwrap();
        pool.set_active_task(Some(t2), &mut ps).unwrap();
        assert!(ps.get(&ts_id(t2, 0)).unwrap().trainable());
        assert!(!ps.get(&ts_id(t1, 0)).unwrap().trainable());
        assert!(ps.get(MS_ID).unwrap().trainable());
        assert!(ps.get(KEY_MISSING_ID).unwrap().trainable());
    }
}
