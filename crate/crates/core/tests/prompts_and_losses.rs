mod common;

use std::collections::BTreeMap;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use promptstream::backbone::pretrain;
use promptstream::continual::Learner;
use promptstream::data::generate_synthetic;
use promptstream::losses::{
    contrastive_loss, cosine_sim, nt_xent_pair, ContrastiveConfig, TaskEmbeddings,
};
use promptstream::optim::ParameterSet;
use promptstream::prompts::{
    generate_task_aware, pattern_from_task_id, task_id_from_pattern, ts_id, MissingPattern, Modality, PromptConfig,
    PromptFamily, PromptPool, TaskId, KEY_AVAILABLE_ID, KEY_MISSING_ID, MS_ID,
};
use promptstream::tensor::Tensor;
use promptstream::Error;

fn task(id: u8) -> TaskId {
    TaskId::new(id).unwrap()
}

fn missing_flags(p: MissingPattern) -> [bool; 3] {
    Modality::ALL.map(|m| p.is_missing(m))
}

#[test]
fn task_ids_round_trip_through_patterns() {
    for t in TaskId::all() {
        assert_eq!(task_id_from_pattern(pattern_from_task_id(t)), t);
    }
    for p in MissingPattern::all() {
        assert_eq!(pattern_from_task_id(task_id_from_pattern(p)), p);
    }
    assert_eq!(task_id_from_pattern(MissingPattern::COMPLETE).get(), 1);
    assert_eq!(task_id_from_pattern(MissingPattern::new(false, false, true).unwrap()).get(), 2);
    assert_eq!(task_id_from_pattern(MissingPattern::new(true, true, false).unwrap()).get(), 7);
    assert!(matches!(MissingPattern::new(true, true, true), Err(Error::Domain(_))));
    assert!(matches!(TaskId::new(8), Err(Error::TaskMapping(_))));
}

fn ms_and_keys(seed: u64, l: usize, d: usize) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (
        common::random_vec(&mut rng, 3 * l * d, 1.0),
        common::random_vec(&mut rng, d, 1.0),
        common::random_vec(&mut rng, d, 1.0),
    )
}

fn task_aware(ms: &[f64], km: &[f64], ku: &[f64], p: MissingPattern, marks_available: bool, l: usize, d: usize) -> Vec<f64> {
    let t = |v: &[f64], s: &[usize]| Tensor::new(v.to_vec(), s).unwrap();
    generate_task_aware(&t(ms, &[3, l, d]), &t(km, &[d]), &t(ku, &[d]), p, marks_available)
        .unwrap()
        .data()
        .to_vec()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn task_aware_matches_the_definition(l in 1usize..=5, d in 1usize..=5, id in 1u8..=7, marks_available in any::<bool>(), seed in any::<u64>()) {
        let (ms, km, ku) = ms_and_keys(seed, l, d);
        let p = task(id).pattern();
        let got = task_aware(&ms, &km, &ku, p, marks_available, l, d);
        let want = common::task_aware_oracle(&ms, &km, &ku, missing_flags(p), marks_available, l, d);
        for (a, b) in got.iter().zip(&want) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn marking_availability_equals_swapped_keys(l in 1usize..=5, d in 1usize..=5, id in 1u8..=7, seed in any::<u64>()) {
        let (ms, km, ku) = ms_and_keys(seed, l, d);
        let p = task(id).pattern();
        prop_assert_eq!(task_aware(&ms, &km, &ku, p, true, l, d), task_aware(&ms, &ku, &km, p, false, l, d));
    }

    #[test]
    fn distinct_patterns_give_distinct_prompts(l in 1usize..=4, d in 2usize..=5, seed in any::<u64>()) {
        let (ms, km, ku) = ms_and_keys(seed, l, d);
        let all: Vec<Vec<f64>> = MissingPattern::all().map(|p| task_aware(&ms, &km, &ku, p, false, l, d)).collect();
        for i in 0..all.len() {
            for j in i + 1..all.len() {
                let gap = all[i].iter().zip(&all[j]).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
                prop_assert!(gap > 1e-9, "patterns {} and {} collide", i + 1, j + 1);
            }
        }
    }

    #[test]
    fn pair_loss_matches_brute_force(d in 2usize..=6, seed in any::<u64>(), tau in 0.1..1.0f64, exclude in any::<bool>(), standard in any::<bool>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let raw: BTreeMap<u8, Vec<f64>> = (1..=7).map(|t| (t, common::random_vec(&mut rng, d, 1.0))).collect();
        let emb = TaskEmbeddings {
            z: raw.iter().map(|(&t, v)| (task(t), Tensor::new(v.clone(), &[d]).unwrap())).collect(),
        };
        let cfg = ContrastiveConfig { tau, exclude_complete_task: exclude, standard_ntxent: standard, ..ContrastiveConfig::default() };
        for (i, j) in [(2, 4), (5, 7), (4, 2), (3, 6)] {
            let got = nt_xent_pair(&emb, task(i), task(j), &cfg).unwrap().item();
            let want = common::ntxent_oracle(&raw, i, j, tau, exclude, standard);
            prop_assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn cosine_ignores_positive_scale(d in 1usize..=6, seed in any::<u64>(), a in 0.1..10.0f64, b in 0.1..10.0f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let u = common::random_vec(&mut rng, d, 1.0);
        let v = common::random_vec(&mut rng, d, 1.0);
        let t = |x: &[f64], s: f64| Tensor::new(x.iter().map(|e| e * s).collect(), &[d]).unwrap();
        let base = cosine_sim(&t(&u, 1.0), &t(&v, 1.0)).unwrap().item();
        let scaled = cosine_sim(&t(&u, a), &t(&v, b)).unwrap().item();
        prop_assert!((base - scaled).abs() < 1e-12);
        prop_assert!(base.abs() <= 1.0 + 1e-12);
    }
}

#[test]
fn closed_forms_of_the_task_aware_prompt() {
    let (l, d) = (2, 3);
    let (ms, km, ku) = ms_and_keys(1, l, d);
    let scaled = |k: usize, key: &[f64]| -> Vec<f64> { (0..l * d).map(|i| key[i % d] * ms[k * l * d + i]).collect() };
    let add = |xs: [Vec<f64>; 3]| -> Vec<f64> { (0..l * d).map(|i| xs[0][i] + xs[1][i] + xs[2][i]).collect() };
    assert_eq!(
        task_aware(&ms, &km, &ku, MissingPattern::COMPLETE, false, l, d),
        add([scaled(0, &ku), scaled(1, &ku), scaled(2, &ku)])
    );
    assert_eq!(
        task_aware(&ms, &km, &ku, MissingPattern::new(true, false, false).unwrap(), false, l, d),
        add([scaled(0, &km), scaled(1, &ku), scaled(2, &ku)])
    );
    let ones = vec![1.0; d];
    let plain = add([scaled(0, &ones), scaled(1, &ones), scaled(2, &ones)]);
    for p in MissingPattern::all() {
        assert_eq!(task_aware(&ms, &ones, &ones, p, false, l, d), plain);
    }
}

#[test]
fn pair_loss_is_anchored_at_the_first_task() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let emb = TaskEmbeddings {
        z: TaskId::all()
            .map(|t| (t, Tensor::new(common::random_vec(&mut rng, 5, 1.0), &[5]).unwrap()))
            .collect(),
    };
    let cfg = ContrastiveConfig::default();
    let forward = nt_xent_pair(&emb, task(2), task(4), &cfg).unwrap().item();
    let backward = nt_xent_pair(&emb, task(4), task(2), &cfg).unwrap().item();
    assert!((forward - backward).abs() > 1e-6);
    assert!(matches!(nt_xent_pair(&emb, task(3), task(3), &cfg), Err(Error::Contract(_))));
}

#[test]
fn pair_loss_falls_as_the_positive_aligns() {
    // z_2 = e1, z_4 rotates from -e1 to e1 in the (e1, e2) plane; negatives stay put.
    let d = 4;
    let unit = |i: usize| (0..d).map(|k| if k == i { 1.0 } else { 0.0 }).collect::<Vec<f64>>();
    let cfg = ContrastiveConfig::default();
    let mut last = f64::INFINITY;
    for step in 0..=20 {
        let theta = std::f64::consts::PI * (1.0 - step as f64 / 20.0);
        let mut z: BTreeMap<TaskId, Tensor> = BTreeMap::new();
        for t in TaskId::all() {
            let v = match t.get() {
                2 => unit(0),
                4 => vec![theta.cos(), theta.sin(), 0.0, 0.0],
                other => {
                    let mut v = unit(2 + (other as usize % 2));
                    v[0] = 0.1 * other as f64;
                    v
                }
            };
            z.insert(t, Tensor::new(v, &[d]).unwrap());
        }
        let loss = nt_xent_pair(&TaskEmbeddings { z }, task(2), task(4), &cfg).unwrap().item();
        assert!(loss < last, "loss did not decrease at step {step}");
        last = loss;
    }
}

#[test]
fn degenerate_embeddings_are_reported() {
    let zero = Tensor::new(vec![0.0; 3], &[3]).unwrap();
    let one = Tensor::new(vec![1.0, 0.0, 0.0], &[3]).unwrap();
    assert!(matches!(cosine_sim(&zero, &one), Err(Error::Degenerate(_))));
}

fn tiny_pool(families: &[PromptFamily], seed: u64) -> (PromptConfig, PromptPool, ParameterSet) {
    let cfg = PromptConfig {
        length: 2,
        init_std: 0.5,
        families: families.iter().copied().collect(),
        ..PromptConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ParameterSet::new();
    let mut pool = PromptPool::init(&cfg, 4, 10, &mut rng, &mut params).unwrap();
    for t in TaskId::all() {
        pool.add_task(t, &mut rng, &mut params).unwrap();
    }
    (cfg, pool, params)
}

#[test]
fn prompt_context_routes_families_to_layers() {
    let (_, pool, params) = tiny_pool(&PromptFamily::ALL, 3);
    let p = task(4).pattern();
    let ctx = pool.resolve_prompt_context(&params, p).unwrap();
    let data = |layer: usize, m: Modality| ctx.prompt_for(layer, m).unwrap().data().to_vec();
    for layer in [1, 2] {
        assert_ne!(data(layer, Modality::Audio), data(layer, Modality::Video));
        assert_ne!(data(layer, Modality::Video), data(layer, Modality::Text));
    }
    for layer in [3, 4, 5] {
        assert_eq!(data(layer, Modality::Audio), data(layer, Modality::Video));
        assert_eq!(data(layer, Modality::Audio), data(layer, Modality::Text));
        assert_eq!(data(layer, Modality::Audio), pool.task_aware(&params, p).unwrap().data());
    }
    let ts = params.tensor(&ts_id(task(4), 0)).unwrap();
    assert_eq!(data(6, Modality::Video), ts.slice(0, 1, 2).unwrap().data());
    assert!(ctx.prompt_for(9, Modality::Audio).is_none());

    let again = pool.resolve_prompt_context(&params, p).unwrap();
    for layer in 1..=8 {
        for m in Modality::ALL {
            assert_eq!(again.prompt_for(layer, m).unwrap().data(), data(layer, m).as_slice());
        }
    }
    let neighbour = pool.resolve_prompt_context(&params, task(1).pattern()).unwrap();
    assert_eq!(neighbour.prompt_for(1, Modality::Audio).unwrap().data(), data(1, Modality::Audio).as_slice());
    assert_ne!(neighbour.prompt_for(3, Modality::Audio).unwrap().data(), data(3, Modality::Audio).as_slice());
}

#[test]
fn contrastive_loss_ignores_task_specific_prompts() {
    let (_, pool, mut params) = tiny_pool(&PromptFamily::ALL, 4);
    pool.set_active_task(Some(task(3)), &mut params).unwrap();
    let emb = TaskEmbeddings::from_pool(&pool, &params).unwrap();
    contrastive_loss(&emb, &ContrastiveConfig::default()).unwrap().backward().unwrap();
    let ts = params.get(&ts_id(task(3), 0)).unwrap();
    assert!(ts.trainable());
    assert!(ts.tensor().grad().unwrap_or_default().iter().all(|&g| g == 0.0));
    for id in [MS_ID, KEY_MISSING_ID, KEY_AVAILABLE_ID] {
        let g = params.tensor(id).unwrap().grad().unwrap();
        assert!(g.iter().any(|&x| x != 0.0), "{id} received no gradient");
    }
}

#[test]
fn embeddings_are_sequence_means_of_the_task_aware_prompts() {
    let (_, pool, params) = tiny_pool(&[PromptFamily::ModalitySpecific, PromptFamily::TaskAware], 5);
    let emb = TaskEmbeddings::from_pool(&pool, &params).unwrap();
    for t in TaskId::all() {
        let full = pool.task_aware(&params, t.pattern()).unwrap();
        assert_eq!(emb.get(t).unwrap().data(), common::sequence_mean(full.data(), 2, 4).as_slice());
    }
}

#[test]
fn training_a_task_touches_only_its_prompts() {
    let cfg = common::tiny_config();
    let data = generate_synthetic(&cfg.data).unwrap();
    let pre = pretrain(&cfg.backbone, &data.pretrain, 1, 1e-3, 8, 0).unwrap();
    let mut learner = Learner::new(&cfg, &pre.params).unwrap();
    learner.run_task(task(1), &data.task(task(1)).unwrap().train).unwrap();
    let before = learner.params().clone();
    learner.run_task(task(2), &data.task(task(2)).unwrap().train).unwrap();
    let after = learner.params();
    for p in before.iter() {
        let now = after.get(p.id()).unwrap();
        let changed = now.data() != p.data();
        let should_change = [MS_ID, KEY_MISSING_ID, KEY_AVAILABLE_ID].contains(&p.id());
        assert_eq!(changed, should_change, "{} changed: {changed}", p.id());
    }
    assert!(after.contains(&ts_id(task(2), 0)));
    assert!(!after.contains(&ts_id(task(3), 0)));
}

#[test]
fn running_the_same_task_twice_is_rejected() {
    let cfg = common::tiny_config();
    let data = generate_synthetic(&cfg.data).unwrap();
    let pre = pretrain(&cfg.backbone, &data.pretrain, 1, 1e-3, 8, 0).unwrap();
    let mut learner = Learner::new(&cfg, &pre.params).unwrap();
    let train = &data.task(task(5)).unwrap().train;
    learner.run_task(task(5), train).unwrap();
    assert!(matches!(learner.run_task(task(5), train), Err(Error::Contract(_))));
    assert!(matches!(learner.run_task(task(6), train), Err(Error::Contract(_))));
}
