//! Per-modality transformer stacks with prompt injection points and a fusion head.
//!
//! Each modality is projected to the hidden width, passed through its own
//! stack of pre-norm attention blocks, mean-pooled, and the three pooled
//! vectors are concatenated into a linear head. Before a prompted block the
//! `ℓ` prompt rows are prepended to the sequence; after it they are dropped
//! again unless `propagate_prompts` is set.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{Batch, Dataset};
use crate::error::{Error, Result};
use crate::losses::{task_loss, TaskKind};
use crate::metrics::accuracy;
use crate::optim::{AdamState, ParameterSet};
use crate::prompts::{Modality, PromptContext, NUM_MODALITIES};
use crate::tensor::Tensor;

pub const LAYER_NORM_EPS: f64 = 1e-12;
pub const BACKBONE_PREFIX: &str = "backbone/";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    /// Input width of (audio, video, text).
    pub input_dims: [usize; NUM_MODALITIES],
    pub hidden_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    /// Feed-forward width as a multiple of `hidden_dim`.
    pub ffn_mult: usize,
    pub num_classes: usize,
    /// Single regression output instead of class logits.
    pub regression: bool,
    /// Keep prompt rows in the sequence after their block.
    pub propagate_prompts: bool,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            input_dims: [20, 35, 50],
            hidden_dim: 30,
            num_layers: 10,
            num_heads: 3,
            ffn_mult: 4,
            num_classes: 4,
            regression: false,
            propagate_prompts: false,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if self.hidden_dim == 0 || self.num_layers == 0 || self.num_heads == 0 || self.ffn_mult == 0 {
            return bad("backbone dimensions must be positive");
        }
        if self.hidden_dim % self.num_heads != 0 {
            return bad("num_heads must divide hidden_dim");
        }
        if self.input_dims.contains(&0) {
            return bad("input dims must be positive");
        }
        if !self.regression && self.num_classes < 2 {
            return bad("classification needs at least two classes");
        }
        Ok(())
    }

    pub fn output_dim(&self) -> usize {
        if self.regression {
            1
        } else {
            self.num_classes
        }
    }

    pub fn task_kind(&self) -> TaskKind {
        if self.regression {
            TaskKind::L1Regression
        } else {
            TaskKind::CrossEntropy
        }
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.num_heads
    }
}

fn block_prefix(m: Modality, layer: usize) -> String {
    format!("{BACKBONE_PREFIX}{}/layer{layer}", m.short())
}

/// Parameter ids of one attention block.
#[derive(Clone, Debug)]
pub struct MsaBlock {
    prefix: String,
    num_heads: usize,
}

impl MsaBlock {
    fn id(&self, name: &str) -> String {
        format!("{}/{name}", self.prefix)
    }

    fn register(&self, cfg: &BackboneConfig, rng: &mut impl Rng, params: &mut ParameterSet) -> Result<()> {
        let d = cfg.hidden_dim;
        let f = cfg.ffn_mult * d;
        params.add(self.id("ln1/g"), vec![1.0; d], &[d], true)?;
        params.add(self.id("ln1/b"), vec![0.0; d], &[d], true)?;
        for w in ["wq", "wk", "wv", "wo"] {
            params.add(self.id(&format!("attn/{w}")), xavier(rng, d, d), &[d, d], true)?;
            params.add(self.id(&format!("attn/b{}", &w[1..])), vec![0.0; d], &[d], true)?;
        }
        params.add(self.id("ln2/g"), vec![1.0; d], &[d], true)?;
        params.add(self.id("ln2/b"), vec![0.0; d], &[d], true)?;
        params.add(self.id("ffn/w1"), xavier(rng, d, f), &[d, f], true)?;
        params.add(self.id("ffn/b1"), vec![0.0; f], &[f], true)?;
        params.add(self.id("ffn/w2"), xavier(rng, f, d), &[f, d], true)?;
        params.add(self.id("ffn/b2"), vec![0.0; d], &[d], true)?;
        Ok(())
    }

    fn affine(&self, params: &ParameterSet, x: &Tensor, w: &str, b: &str) -> Result<Tensor> {
        x.linear(params.tensor(&self.id(w))?, params.tensor(&self.id(b))?)
    }

    fn norm(&self, params: &ParameterSet, x: &Tensor, which: &str) -> Result<Tensor> {
        x.layer_norm(LAYER_NORM_EPS)
            .broadcast_mul_vector(params.tensor(&self.id(&format!("{which}/g")))?)?
            .add(params.tensor(&self.id(&format!("{which}/b")))?)
    }

    /// Pre-norm block `h + MHSA(LN(h))` followed by `+ FFN(LN(·))`.
    ///
    /// `h` is `seq×d` or `batch×seq×d`; the output has the same shape.
    pub fn forward(&self, params: &ParameterSet, h: &Tensor) -> Result<Tensor> {
        if h.rank() == 2 {
            let shape = h.shape().to_vec();
            let batched = h.reshape(&[1, shape[0], shape[1]])?;
            return self.forward(params, &batched)?.reshape(&shape);
        }
        let d = params.tensor(&self.id("attn/wq"))?.shape()[0];
        if h.rank() != 3 || h.shape()[2] != d {
            return Err(Error::dim(
                "msa_block",
                format!("expected [batch, seq, {d}], got {:?}", h.shape()),
            ));
        }
        let x = self.norm(params, h, "ln1")?;
        let q = self.affine(params, &x, "attn/wq", "attn/bq")?;
        let k = self.affine(params, &x, "attn/wk", "attn/bk")?;
        let v = self.affine(params, &x, "attn/wv", "attn/bv")?;
        let attn = Tensor::attention(&q, &k, &v, self.num_heads)?;
        let h = h.add(&self.affine(params, &attn, "attn/wo", "attn/bo")?)?;
        let x = self.norm(params, &h, "ln2")?;
        let ff = self.affine(params, &self.affine(params, &x, "ffn/w1", "ffn/b1")?.gelu(), "ffn/w2", "ffn/b2")?;
        h.add(&ff)
    }

    /// Attention weights of head 0 for a single-sequence input (diagnostics).
    pub fn attention_weights(&self, params: &ParameterSet, h: &Tensor, head: usize) -> Result<Tensor> {
        let x = self.norm(params, h, "ln1")?;
        let q = self.affine(params, &x, "attn/wq", "attn/bq")?;
        let k = self.affine(params, &x, "attn/wk", "attn/bk")?;
        let d = q.shape()[q.rank() - 1];
        let dh = d / self.num_heads;
        let axis = q.rank() - 1;
        let qh = q.slice(axis, head * dh, (head + 1) * dh)?;
        let kh = k.slice(axis, head * dh, (head + 1) * dh)?;
        Ok(qh.matmul(&kh.transpose()?)?.scale(1.0 / (dh as f64).sqrt()).softmax())
    }
}

fn xavier(rng: &mut impl Rng, fan_in: usize, fan_out: usize) -> Vec<f64> {
    let std = (2.0 / (fan_in + fan_out) as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("positive std");
    (0..fan_in * fan_out).map(|_| normal.sample(rng)).collect()
}

/// Projection and block stack of one modality.
#[derive(Clone, Debug)]
pub struct ModalityStream {
    pub modality: Modality,
    pub blocks: Vec<MsaBlock>,
}

impl ModalityStream {
    fn proj_w(&self) -> String {
        format!("{BACKBONE_PREFIX}{}/proj/w", self.modality.short())
    }

    fn proj_b(&self) -> String {
        format!("{BACKBONE_PREFIX}{}/proj/b", self.modality.short())
    }
}

/// Per-layer outputs captured by [`Backbone::forward_traced`].
#[derive(Clone, Debug, Default)]
pub struct Trace {
    /// `layers[m][i]` is modality `m`'s sequence after block `i + 1`.
    pub layers: [Vec<Tensor>; NUM_MODALITIES],
}

#[derive(Clone, Debug)]
pub struct Backbone {
    cfg: BackboneConfig,
    streams: Vec<ModalityStream>,
}

pub const HEAD_W: &str = "backbone/head/w";
pub const HEAD_B: &str = "backbone/head/b";

impl Backbone {
    pub fn new(cfg: &BackboneConfig) -> Result<Self> {
        cfg.validate()?;
        let streams = Modality::ALL
            .iter()
            .map(|&m| ModalityStream {
                modality: m,
                blocks: (1..=cfg.num_layers)
                    .map(|layer| MsaBlock {
                        prefix: block_prefix(m, layer),
                        num_heads: cfg.num_heads,
                    })
                    .collect(),
            })
            .collect();
        Ok(Self {
            cfg: cfg.clone(),
            streams,
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.cfg
    }

    pub fn block(&self, m: Modality, layer: usize) -> &MsaBlock {
        &self.streams[m.index()].blocks[layer - 1]
    }

    /// Fresh trainable parameters for every backbone weight.
    pub fn init_params(&self, rng: &mut impl Rng) -> Result<ParameterSet> {
        let mut params = ParameterSet::new();
        let d = self.cfg.hidden_dim;
        for s in &self.streams {
            let din = self.cfg.input_dims[s.modality.index()];
            params.add(s.proj_w(), xavier(rng, din, d), &[din, d], true)?;
            params.add(s.proj_b(), vec![0.0; d], &[d], true)?;
            for b in &s.blocks {
                b.register(&self.cfg, rng, &mut params)?;
            }
        }
        let (fin, out) = (NUM_MODALITIES * d, self.cfg.output_dim());
        params.add(HEAD_W, xavier(rng, fin, out), &[fin, out], true)?;
        params.add(HEAD_B, vec![0.0; out], &[out], true)?;
        Ok(params)
    }

    pub fn forward(&self, params: &ParameterSet, inputs: &[Tensor; NUM_MODALITIES], ctx: &PromptContext) -> Result<Tensor> {
        self.run(params, inputs, ctx, None)
    }

    /// Like [`Backbone::forward`], additionally returning every block output.
    pub fn forward_traced(
        &self,
        params: &ParameterSet,
        inputs: &[Tensor; NUM_MODALITIES],
        ctx: &PromptContext,
    ) -> Result<(Tensor, Trace)> {
        let mut trace = Trace::default();
        let out = self.run(params, inputs, ctx, Some(&mut trace))?;
        Ok((out, trace))
    }

    fn run(
        &self,
        params: &ParameterSet,
        inputs: &[Tensor; NUM_MODALITIES],
        ctx: &PromptContext,
        mut trace: Option<&mut Trace>,
    ) -> Result<Tensor> {
        if ctx.max_layer() > self.cfg.num_layers {
            return Err(Error::Config(format!(
                "prompt schedule reaches layer {} but the backbone has {}",
                ctx.max_layer(),
                self.cfg.num_layers
            )));
        }
        let mut pooled = Vec::with_capacity(NUM_MODALITIES);
        for stream in &self.streams {
            let m = stream.modality;
            let x = &inputs[m.index()];
            if x.rank() != 3 || x.shape()[2] != self.cfg.input_dims[m.index()] {
                return Err(Error::dim(
                    "backbone",
                    format!(
                        "{} input must be [batch, seq, {}], got {:?}",
                        m.name(),
                        self.cfg.input_dims[m.index()],
                        x.shape()
                    ),
                ));
            }
            let batch = x.shape()[0];
            let mut h = x.linear(params.tensor(&stream.proj_w())?, params.tensor(&stream.proj_b())?)?;
            for (i, block) in stream.blocks.iter().enumerate() {
                let layer = i + 1;
                h = match ctx.prompt_for(layer, m) {
                    None => block.forward(params, &h)?,
                    Some(prompt) => {
                        let rows = match prompt.rank() {
                            2 => prompt.expand(batch)?,
                            _ => prompt.clone(),
                        };
                        let plen = rows.shape()[1];
                        let out = block.forward(params, &Tensor::concat(&[rows, h], 1)?)?;
                        if self.cfg.propagate_prompts {
                            out
                        } else {
                            let len = out.shape()[1];
                            out.slice(1, plen, len)?
                        }
                    }
                };
                if let Some(t) = trace.as_deref_mut() {
                    t.layers[m.index()].push(h.clone());
                }
            }
            pooled.push(h.mean(1)?);
        }
        let fused = Tensor::concat(&pooled, 1)?;
        fused.linear(params.tensor(HEAD_W)?, params.tensor(HEAD_B)?)
    }

    /// Forward pass and task loss for one batch.
    pub fn batch_loss(&self, params: &ParameterSet, batch: &Batch, ctx: &PromptContext) -> Result<(Tensor, Tensor)> {
        let out = self.forward(params, &batch.inputs, ctx)?;
        let loss = task_loss(&out, &batch.labels, self.cfg.task_kind())?;
        Ok((out, loss))
    }

    /// Scalar count of backbone weights.
    pub fn parameter_count(&self) -> usize {
        let d = self.cfg.hidden_dim;
        let f = self.cfg.ffn_mult * d;
        let block = 4 * (d * d + d) + 2 * (d * f) + f + d + 4 * d;
        let proj: usize = self.cfg.input_dims.iter().map(|din| din * d + d).sum();
        let head = NUM_MODALITIES * d * self.cfg.output_dim() + self.cfg.output_dim();
        proj + NUM_MODALITIES * self.cfg.num_layers * block + head
    }
}

/// Outcome of complete-modality pretraining.
#[derive(Clone, Debug)]
pub struct Pretrained {
    pub params: ParameterSet,
    pub epoch_losses: Vec<f64>,
    pub train_accuracy: f64,
}

/// Predictions for every sample of `data` in order, as `[n, out]` rows.
pub fn predict(
    backbone: &Backbone,
    params: &ParameterSet,
    data: &Dataset,
    batch_size: usize,
    ctx_for: &dyn Fn(&Batch) -> Result<PromptContext>,
) -> Result<(Vec<Vec<f64>>, Vec<f64>)> {
    let mut preds = Vec::with_capacity(data.len());
    let mut labels = Vec::with_capacity(data.len());
    let indices: Vec<usize> = (0..data.len()).collect();
    for chunk in indices.chunks(batch_size.max(1)) {
        for batch in data.batches(chunk)? {
            let ctx = ctx_for(&batch)?;
            let out = backbone.forward(params, &batch.inputs, &ctx)?;
            let width = out.shape()[1];
            preds.extend(out.data().chunks(width).map(<[f64]>::to_vec));
            labels.extend_from_slice(&batch.labels);
        }
    }
    Ok((preds, labels))
}

/// Train every backbone weight with the task loss on complete-modality data,
/// no prompts attached. Returns the parameters with the trainable flag cleared.
pub fn pretrain(
    cfg: &BackboneConfig,
    dataset: &Dataset,
    epochs: usize,
    lr: f64,
    batch_size: usize,
    seed: u64,
) -> Result<Pretrained> {
    if let Some(s) = dataset.samples.iter().find(|s| !s.pattern.is_complete()) {
        return Err(Error::Contract(format!(
            "pretraining needs complete modalities; sample {} has pattern {}",
            s.id, s.pattern
        )));
    }
    if batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    let backbone = Backbone::new(cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = backbone.init_params(&mut rng)?;
    let mut adam = AdamState::new(lr);
    let ctx = PromptContext::none();
    let mut epoch_losses = Vec::with_capacity(epochs);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    for _ in 0..epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(batch_size) {
            let batches = dataset.batches(chunk)?;
            let loss = crate::continual::weighted_batch_loss(&batches, chunk.len(), |b| {
                backbone.batch_loss(&params, b, &ctx).map(|(_, l)| l)
            })?;
            total += loss.item() * chunk.len() as f64;
            loss.backward()?;
            adam.step(&mut params)?;
        }
        epoch_losses.push(total / dataset.len().max(1) as f64);
        log::info!("pretrain epoch {}: loss {:.6}", epoch_losses.len(), epoch_losses.last().unwrap());
    }
    params.set_trainable_prefix(BACKBONE_PREFIX, false);
    let train_accuracy = if dataset.is_empty() {
        0.0
    } else {
        let (preds, labels) = predict(&backbone, &params, dataset, 256, &|_| Ok(PromptContext::none()))?;
        accuracy(&preds, &labels, cfg.task_kind())?
    };
    Ok(Pretrained {
        params,
        epoch_losses,
        train_accuracy,
    })
}
