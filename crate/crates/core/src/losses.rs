//! Task losses, the pairwise contrastive loss over task embeddings, and the
//! combined training objective.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::optim::ParameterSet;
use crate::prompts::{PromptPool, TaskId};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    CrossEntropy,
    L1Regression,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ContrastiveConfig {
    pub tau: f64,
    /// Weight of the contrastive term in the total loss.
    pub lambda1: f64,
    /// Weight of the (5, 7) pair inside the contrastive term.
    pub lambda2: f64,
    /// Leave the complete-modality task out of the negatives.
    pub exclude_complete_task: bool,
    /// Include the positive pair in the denominator (textbook NT-Xent).
    pub standard_ntxent: bool,
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        Self {
            tau: 0.5,
            lambda1: 0.1,
            lambda2: 1.0,
            exclude_complete_task: true,
            standard_ntxent: false,
        }
    }
}

impl ContrastiveConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) {
            return Err(Error::Config("tau must be positive".into()));
        }
        if !(self.lambda1 >= 0.0 && self.lambda2 >= 0.0) {
            return Err(Error::Config("lambda1 and lambda2 must be non-negative".into()));
        }
        Ok(())
    }
}

fn dot(u: &Tensor, v: &Tensor) -> Result<Tensor> {
    Ok(u.mul(v)?.sum_all())
}

/// `u·v / (‖u‖·‖v‖)` as a differentiable scalar.
pub fn cosine_sim(u: &Tensor, v: &Tensor) -> Result<Tensor> {
    if u.rank() != 1 || u.shape() != v.shape() {
        return Err(Error::dim("cosine_sim", format!("{:?} vs {:?}", u.shape(), v.shape())));
    }
    for (name, t) in [("u", u), ("v", v)] {
        if t.data().iter().all(|&x| x == 0.0) {
            return Err(Error::Degenerate(format!("cosine similarity of zero vector `{name}`")));
        }
    }
    let norms = dot(u, u)?.mul(&dot(v, v)?)?.sqrt();
    dot(u, v)?.div(&norms)
}

/// Sequence-mean of each task's task-aware prompt.
#[derive(Clone, Debug)]
pub struct TaskEmbeddings {
    pub z: BTreeMap<TaskId, Tensor>,
}

impl TaskEmbeddings {
    pub fn from_pool(pool: &PromptPool, params: &ParameterSet) -> Result<Self> {
        let z = TaskId::all()
            .map(|t| Ok((t, pool.task_aware(params, t.pattern())?.mean(0)?)))
            .collect::<Result<_>>()?;
        Ok(Self { z })
    }

    pub fn get(&self, task: TaskId) -> Result<&Tensor> {
        self.z
            .get(&task)
            .ok_or_else(|| Error::Contract(format!("no embedding for task {task}")))
    }
}

/// Contrastive loss of the positive pair `(i, j)`, anchored at `z_i`:
/// `−log[exp(sim(z_i,z_j)/τ) / Σ_t exp(sim(z_i,z_t)/τ)]` with the sum over the
/// negatives `t ∉ {i, j}` (and `t ≠ 1` when `exclude_complete_task`).
pub fn nt_xent_pair(emb: &TaskEmbeddings, i: TaskId, j: TaskId, cfg: &ContrastiveConfig) -> Result<Tensor> {
    if i == j {
        return Err(Error::Contract(format!("positive pair needs two tasks, got ({i}, {j})")));
    }
    cfg.validate()?;
    let zi = emb.get(i)?;
    let logit = |t: TaskId| -> Result<Tensor> { cosine_sim(zi, emb.get(t)?)?.scale(1.0 / cfg.tau).reshape(&[1]) };
    let positive = logit(j)?;
    let mut terms = Vec::new();
    if cfg.standard_ntxent {
        terms.push(positive.clone());
    }
    for &t in emb.z.keys() {
        if t == i || t == j || (cfg.exclude_complete_task && t.get() == 1) {
            continue;
        }
        terms.push(logit(t)?);
    }
    if terms.len() < 1 + cfg.standard_ntxent as usize {
        return Err(Error::Degenerate(format!("pair ({i}, {j}) has no negatives")));
    }
    let log_denominator = Tensor::concat(&terms, 0)?.exp().sum_all().log();
    log_denominator.reshape(&[1])?.sub(&positive)?.reshape(&[])
}

fn task(id: u8) -> TaskId {
    TaskId::new(id).expect("valid task id")
}

/// `ℓ_{2,4} + λ2·ℓ_{5,7}`.
pub fn contrastive_loss(emb: &TaskEmbeddings, cfg: &ContrastiveConfig) -> Result<Tensor> {
    let first = nt_xent_pair(emb, task(2), task(4), cfg)?;
    let second = nt_xent_pair(emb, task(5), task(7), cfg)?;
    first.add(&second.scale(cfg.lambda2))
}

/// Mean-over-batch task loss. `pred` is `[batch, classes]` (or `[batch, 1]`
/// for regression); `target` holds class indices or real scores.
pub fn task_loss(pred: &Tensor, target: &[f64], kind: TaskKind) -> Result<Tensor> {
    let [n, c] = pred.shape() else {
        return Err(Error::dim("task_loss", format!("predictions must be [batch, out], got {:?}", pred.shape())));
    };
    let (n, c) = (*n, *c);
    if target.len() != n {
        return Err(Error::dim("task_loss", format!("{n} predictions for {} targets", target.len())));
    }
    match kind {
        TaskKind::CrossEntropy => {
            let mut onehot = vec![0.0; n * c];
            for (row, &y) in target.iter().enumerate() {
                if y.fract() != 0.0 || y < 0.0 || y >= c as f64 {
                    return Err(Error::Domain(format!("label {y} outside classes 0..{c}")));
                }
                onehot[row * c + y as usize] = 1.0;
            }
            let picked = pred.log_softmax().mul(&Tensor::new(onehot, &[n, c])?)?;
            Ok(picked.sum_all().scale(-1.0 / n as f64))
        }
        TaskKind::L1Regression => {
            if c != 1 {
                return Err(Error::dim("task_loss", format!("regression needs one output, got {c}")));
            }
            Ok(pred.sub(&Tensor::new(target.to_vec(), &[n, 1])?)?.abs().mean_all())
        }
    }
}

/// `L_task + λ1·L_con`.
pub fn total_loss(task_l: &Tensor, con_l: &Tensor, cfg: &ContrastiveConfig) -> Result<Tensor> {
    task_l.add(&con_l.scale(cfg.lambda1))
}
