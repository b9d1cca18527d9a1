//! Independent reference implementations used by the integration tests.
//!
//! Nothing here calls into the library's math: every oracle works on plain
//! `f64` slices so that agreement with the library is meaningful.

#![allow(dead_code)]

use std::collections::BTreeMap;

use promptstream::backbone::BackboneConfig;
use promptstream::config::RunConfig;
use promptstream::data::{Dataset, SyntheticSpec};
use promptstream::tensor::Tensor;
use rand::Rng;
use rand_distr::StandardNormal;

pub const FD_STEP: f64 = 1e-5;

pub fn random_vec(rng: &mut impl Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect()
}

/// Norm-wise relative error between two gradient vectors; norms below
/// `1e-8` are treated as `1e-8` so vanishing gradients compare absolutely.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nb).max(1e-8)
}

/// Largest relative error between analytic and central-difference gradients
/// of the scalar `f` with respect to each input.
pub fn gradient_check(inputs: &[(Vec<f64>, Vec<usize>)], f: &dyn Fn(&[Tensor]) -> Tensor) -> f64 {
    let leaves: Vec<Tensor> = inputs.iter().map(|(d, s)| Tensor::param(d.clone(), s).unwrap()).collect();
    f(&leaves).backward().unwrap();
    let mut worst: f64 = 0.0;
    for (which, (data, _)) in inputs.iter().enumerate() {
        let analytic = leaves[which].grad().unwrap_or_else(|| vec![0.0; data.len()]);
        let mut numeric = vec![0.0; data.len()];
        for i in 0..data.len() {
            let eval = |delta: f64| {
                let probe: Vec<Tensor> = inputs
                    .iter()
                    .enumerate()
                    .map(|(k, (d, s))| {
                        let mut d = d.clone();
                        if k == which {
                            d[i] += delta;
                        }
                        Tensor::new(d, s).unwrap()
                    })
                    .collect();
                f(&probe).item()
            };
            numeric[i] = (eval(FD_STEP) - eval(-FD_STEP)) / (2.0 * FD_STEP);
        }
        worst = worst.max(relative_error(&analytic, &numeric));
    }
    worst
}

/// `P_TA` written straight from the definition, `ms` laid out `[3][ℓ][d]`.
pub fn task_aware_oracle(
    ms: &[f64],
    key_missing: &[f64],
    key_available: &[f64],
    missing: [bool; 3],
    marks_available: bool,
    len: usize,
    dim: usize,
) -> Vec<f64> {
    let mut out = vec![0.0; len * dim];
    for (k, &is_missing) in missing.iter().enumerate() {
        let mu = if is_missing { 1.0 } else { 0.0 };
        let (first, second) = if marks_available {
            (key_available, key_missing)
        } else {
            (key_missing, key_available)
        };
        for r in 0..len {
            for c in 0..dim {
                let p = ms[(k * len + r) * dim + c];
                out[r * dim + c] += mu * first[c] * p + (1.0 - mu) * second[c] * p;
            }
        }
    }
    out
}

fn cosine(u: &[f64], v: &[f64]) -> f64 {
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    let nu: f64 = u.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nv: f64 = v.iter().map(|a| a * a).sum::<f64>().sqrt();
    dot / (nu * nv)
}

/// Pair loss with explicit loops over the seven task embeddings.
pub fn ntxent_oracle(z: &BTreeMap<u8, Vec<f64>>, i: u8, j: u8, tau: f64, exclude_complete: bool, standard: bool) -> f64 {
    let num = (cosine(&z[&i], &z[&j]) / tau).exp();
    let mut den = if standard { num } else { 0.0 };
    for t in 1..=7u8 {
        if t == i || t == j || (exclude_complete && t == 1) {
            continue;
        }
        den += (cosine(&z[&i], &z[&t]) / tau).exp();
    }
    -(num / den).ln()
}

pub fn contrastive_oracle(z: &BTreeMap<u8, Vec<f64>>, tau: f64, lambda2: f64, exclude_complete: bool) -> f64 {
    ntxent_oracle(z, 2, 4, tau, exclude_complete, false) + lambda2 * ntxent_oracle(z, 5, 7, tau, exclude_complete, false)
}

/// Row mean of an `ℓ×d` block.
pub fn sequence_mean(block: &[f64], len: usize, dim: usize) -> Vec<f64> {
    (0..dim)
        .map(|c| (0..len).map(|r| block[r * dim + c]).sum::<f64>() / len as f64)
        .collect()
}

/// `a[i][j]` (0-based, `j ≥ i`) straight from the definition.
pub fn forgetting_oracle(a: &[Vec<f64>], n: usize) -> f64 {
    let mut total = 0.0;
    for i in 0..n - 1 {
        let mut best = f64::NEG_INFINITY;
        for j in i..n - 1 {
            let gap = a[i][j] - a[i][n - 1];
            if gap > best {
                best = gap;
            }
        }
        total += best;
    }
    total / (n - 1) as f64
}

pub fn average_oracle(a: &[Vec<f64>], n: usize) -> f64 {
    (0..n).map(|i| a[i][n - 1]).sum::<f64>() / n as f64
}

fn flatten(data: &Dataset) -> Vec<Vec<f64>> {
    data.samples
        .iter()
        .map(|s| s.features.iter().flat_map(|m| m.data.iter().copied()).collect())
        .collect()
}

/// Multinomial logistic regression on flattened features, full-batch
/// gradient descent with light L2 regularisation; returns test accuracy.
pub fn logistic_regression_accuracy(train: &Dataset, test: &Dataset, classes: usize, steps: usize) -> f64 {
    let x = flatten(train);
    let dim = x[0].len();
    let y: Vec<usize> = train.samples.iter().map(|s| s.label as usize).collect();
    let mut w = vec![vec![0.0; dim + 1]; classes];
    let lr = 0.1;
    let l2 = 1e-3;
    for _ in 0..steps {
        let mut grad = vec![vec![0.0; dim + 1]; classes];
        for (xi, &yi) in x.iter().zip(&y) {
            let logits: Vec<f64> = w
                .iter()
                .map(|wc| wc[dim] + wc[..dim].iter().zip(xi).map(|(a, b)| a * b).sum::<f64>())
                .collect();
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
            let z: f64 = exps.iter().sum();
            for c in 0..classes {
                let err = exps[c] / z - if c == yi { 1.0 } else { 0.0 };
                for (g, v) in grad[c][..dim].iter_mut().zip(xi) {
                    *g += err * v;
                }
                grad[c][dim] += err;
            }
        }
        let n = x.len() as f64;
        for c in 0..classes {
            for k in 0..=dim {
                let reg = if k < dim { l2 * w[c][k] } else { 0.0 };
                w[c][k] -= lr * (grad[c][k] / n + reg);
            }
        }
    }
    let correct = flatten(test)
        .iter()
        .zip(&test.samples)
        .filter(|(xi, s)| {
            let scores: Vec<f64> = w
                .iter()
                .map(|wc| wc[dim] + wc[..dim].iter().zip(xi.iter()).map(|(a, b)| a * b).sum::<f64>())
                .collect();
            let best = (0..classes).fold(0, |b, c| if scores[c] > scores[b] { c } else { b });
            best as f64 == s.label
        })
        .count();
    correct as f64 / test.len() as f64
}

/// Classify by the nearest class mean of the training features.
pub fn nearest_centroid_accuracy(train: &Dataset, test: &Dataset, classes: usize) -> f64 {
    let x = flatten(train);
    let dim = x[0].len();
    let mut centroids = vec![vec![0.0; dim]; classes];
    let mut counts = vec![0usize; classes];
    for (xi, s) in x.iter().zip(&train.samples) {
        let c = s.label as usize;
        counts[c] += 1;
        centroids[c].iter_mut().zip(xi).for_each(|(a, b)| *a += b);
    }
    for (c, n) in centroids.iter_mut().zip(&counts) {
        c.iter_mut().for_each(|v| *v /= (*n).max(1) as f64);
    }
    let correct = flatten(test)
        .iter()
        .zip(&test.samples)
        .filter(|(xi, s)| {
            let dist = |c: &Vec<f64>| c.iter().zip(xi.iter()).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
            let best = (0..classes).fold(0, |b, c| if dist(&centroids[c]) < dist(&centroids[b]) { c } else { b });
            best as f64 == s.label
        })
        .count();
    correct as f64 / test.len() as f64
}

/// A configuration small enough for end-to-end tests to finish in seconds.
pub fn tiny_config() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.backbone = BackboneConfig {
        input_dims: [4, 5, 6],
        hidden_dim: 6,
        num_layers: 8,
        num_heads: 2,
        ffn_mult: 2,
        num_classes: 3,
        ..BackboneConfig::default()
    };
    cfg.prompts.length = 2;
    cfg.data = SyntheticSpec {
        num_classes: 3,
        pretrain_samples: 24,
        train_per_task: 12,
        test_per_task: 6,
        seq_lens: [3, 4, 2],
        input_dims: [4, 5, 6],
        center_scale: 1.0,
        ..SyntheticSpec::default()
    };
    cfg.pretrain.epochs = 2;
    cfg.pretrain.batch_size = 8;
    cfg.trainer.epochs = 2;
    cfg.trainer.batch_size = 8;
    cfg
}
