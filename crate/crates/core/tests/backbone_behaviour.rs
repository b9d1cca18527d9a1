mod common;

use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use promptstream::backbone::{pretrain, Backbone, BackboneConfig};
use promptstream::continual::Learner;
use promptstream::data::{generate_synthetic, SyntheticSpec};
use promptstream::optim::ParameterSet;
use promptstream::prompts::{ts_id, PromptContext, PromptFamily, PromptPool, TaskId};
use promptstream::tensor::Tensor;

fn tiny_backbone(propagate: bool) -> (Backbone, ParameterSet, PromptPool, BackboneConfig) {
    let mut cfg = common::tiny_config();
    cfg.backbone.propagate_prompts = propagate;
    cfg.prompts.init_std = 0.5;
    let backbone = Backbone::new(&cfg.backbone).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut params = backbone.init_params(&mut rng).unwrap();
    let mut pool = PromptPool::init(&cfg.prompts, 6, 8, &mut rng, &mut params).unwrap();
    for t in TaskId::all() {
        pool.add_task(t, &mut rng, &mut params).unwrap();
    }
    (backbone, params, pool, cfg.backbone)
}

fn inputs(cfg: &BackboneConfig, seqs: [usize; 3], batch: usize, seed: u64) -> [Tensor; 3] {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    [0, 1, 2].map(|m| {
        let shape = [batch, seqs[m], cfg.input_dims[m]];
        Tensor::new(common::random_vec(&mut rng, shape.iter().product(), 1.0), &shape).unwrap()
    })
}

fn permute_rows(x: &Tensor, perm: &[usize]) -> Tensor {
    let [b, s, d] = x.shape() else { unreachable!() };
    let (b, s, d) = (*b, *s, *d);
    let mut out = Vec::with_capacity(x.len());
    for bi in 0..b {
        for &r in perm {
            out.extend_from_slice(&x.data()[(bi * s + r) * d..(bi * s + r + 1) * d]);
        }
    }
    Tensor::new(out, &[b, s, d]).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn output_is_invariant_to_sequence_order(seed in any::<u64>(), id in 1u8..=7) {
        let (backbone, params, pool, cfg) = tiny_backbone(false);
        let x = inputs(&cfg, [3, 4, 2], 2, seed);
        let ctx = pool.resolve_prompt_context(&params, TaskId::new(id).unwrap().pattern()).unwrap();
        let base = backbone.forward(&params, &x, &ctx).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
        let shuffled = x.clone().map(|t| {
            let mut perm: Vec<usize> = (0..t.shape()[1]).collect();
            perm.shuffle(&mut rng);
            permute_rows(&t, &perm)
        });
        let out = backbone.forward(&params, &shuffled, &ctx).unwrap();
        for (a, b) in base.data().iter().zip(out.data()) {
            prop_assert!((a - b).abs() < 1e-10);
        }
    }
}

#[test]
fn changing_a_prompt_leaves_earlier_layers_untouched() {
    let (backbone, params, pool, cfg) = tiny_backbone(false);
    let x = inputs(&cfg, [3, 4, 2], 2, 7);
    let t = TaskId::new(3).unwrap();
    let ctx = pool.resolve_prompt_context(&params, t.pattern()).unwrap();
    let (_, base) = backbone.forward_traced(&params, &x, &ctx).unwrap();

    let mut edited = params.clone();
    let id = ts_id(t, 0);
    let old = edited.remove(&id).unwrap();
    let bumped: Vec<f64> = old.data().iter().map(|v| v + 0.3).collect();
    edited.add(&id, bumped, old.shape(), false).unwrap();
    let ctx = pool.resolve_prompt_context(&edited, t.pattern()).unwrap();
    let (_, moved) = backbone.forward_traced(&edited, &x, &ctx).unwrap();

    let first_ts = pool.schedule().layers(PromptFamily::TaskSpecific)[0];
    for m in 0..3 {
        for layer in 1..first_ts {
            assert_eq!(base.layers[m][layer - 1].data(), moved.layers[m][layer - 1].data(), "layer {layer}");
        }
        assert_ne!(base.layers[m][first_ts - 1].data(), moved.layers[m][first_ts - 1].data());
    }
}

#[test]
fn dropped_prompts_preserve_sequence_length() {
    let (backbone, params, pool, cfg) = tiny_backbone(false);
    let seqs = [3, 4, 2];
    let x = inputs(&cfg, seqs, 1, 3);
    let ctx = pool.resolve_prompt_context(&params, TaskId::new(1).unwrap().pattern()).unwrap();
    let (_, trace) = backbone.forward_traced(&params, &x, &ctx).unwrap();
    for m in 0..3 {
        assert!(trace.layers[m].iter().all(|h| h.shape()[1] == seqs[m]));
    }

    let (backbone, params, pool, cfg) = tiny_backbone(true);
    let x = inputs(&cfg, seqs, 1, 3);
    let ctx = pool.resolve_prompt_context(&params, TaskId::new(1).unwrap().pattern()).unwrap();
    let (_, trace) = backbone.forward_traced(&params, &x, &ctx).unwrap();
    let len = pool.length();
    for m in 0..3 {
        let lens: Vec<usize> = trace.layers[m].iter().map(|h| h.shape()[1]).collect();
        let expected: Vec<usize> = (1..=8).map(|layer| seqs[m] + len * layer).collect();
        assert_eq!(lens, expected);
    }
}

#[test]
fn empty_schedule_is_the_plain_backbone() {
    let (backbone, params, _, cfg) = tiny_backbone(false);
    let x = inputs(&cfg, [3, 4, 2], 2, 4);
    let plain = backbone.forward(&params, &x, &PromptContext::none()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut scratch = params.clone();
    let prompt_cfg = promptstream::prompts::PromptConfig {
        families: Default::default(),
        ..Default::default()
    };
    let pool = PromptPool::init(&prompt_cfg, 6, 8, &mut rng, &mut scratch).unwrap();
    let ctx = pool.resolve_prompt_context(&scratch, TaskId::new(2).unwrap().pattern()).unwrap();
    assert_eq!(backbone.forward(&params, &x, &ctx).unwrap().data(), plain.data());
}

#[test]
fn pretraining_fits_a_three_class_benchmark() {
    let spec = SyntheticSpec {
        num_classes: 3,
        pretrain_samples: 600,
        ..SyntheticSpec::default()
    };
    let cfg = BackboneConfig {
        num_classes: 3,
        ..BackboneConfig::default()
    };
    let data = generate_synthetic(&spec).unwrap();
    let result = pretrain(&cfg, &data.pretrain, 30, 1e-3, 64, 0).unwrap();
    assert!(result.train_accuracy > 0.9, "train accuracy {}", result.train_accuracy);
    assert!(result.epoch_losses.last().unwrap() < result.epoch_losses.first().unwrap());
    assert!(result.params.iter().all(|p| !p.trainable()));
}

#[test]
fn task_loss_decreases_over_training() {
    let mut cfg = common::tiny_config();
    cfg.trainer.epochs = 30;
    let data = generate_synthetic(&cfg.data).unwrap();
    let pre = pretrain(&cfg.backbone, &data.pretrain, 5, 1e-3, 8, 0).unwrap();
    let mut learner = Learner::new(&cfg, &pre.params).unwrap();
    for id in [1, 2] {
        let t = TaskId::new(id).unwrap();
        let curve = learner.run_task(t, &data.task(t).unwrap().train).unwrap();
        assert_eq!(curve.epoch_losses.len(), 30);
        assert!(curve.epoch_losses[29] < curve.epoch_losses[0], "task {id}: {:?}", curve.epoch_losses);
    }
}
