mod common;

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use promptstream::backbone::Backbone;
use promptstream::checkpoint;
use promptstream::data::{
    apply_missing_pattern, generate_synthetic, load_jsonl, read_dataset, write_dataset, write_jsonl, SyntheticSpec,
};
use promptstream::metrics::{average_accuracy, forgetting_measure, AccuracyMatrix};
use promptstream::prompts::{Modality, TaskId};
use promptstream::Error;

fn small_spec() -> SyntheticSpec {
    common::tiny_config().data
}

#[test]
fn dataset_directory_round_trips() {
    let spec = small_spec();
    let data = generate_synthetic(&spec).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let manifest = write_dataset(dir.path(), &spec, &data).unwrap();
    assert_eq!(manifest.tasks.len(), 7);
    assert_eq!(manifest.spec_hash, spec.hash());
    let (read_manifest, read_data) = read_dataset(dir.path()).unwrap();
    assert_eq!(read_manifest, manifest);
    assert_eq!(read_data.pretrain, data.pretrain);
    for (a, b) in read_data.tasks.iter().zip(&data.tasks) {
        assert_eq!(a.task, b.task);
        assert_eq!(a.train, b.train);
        assert_eq!(a.test, b.test);
    }
}

#[test]
fn parse_errors_carry_the_line_number() {
    let spec = small_spec();
    let data = generate_synthetic(&spec).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("broken.jsonl");
    write_jsonl(&path, &data.tasks[0].test).unwrap();
    let mut f = std::fs::OpenOptions::new().append(true).open(&path).unwrap();
    writeln!(f, "{{\"id\": \"x\", \"label\": 0").unwrap();
    drop(f);
    match load_jsonl(&path, Some(spec.input_dims)) {
        Err(Error::Parse { line, .. }) => assert_eq!(line, data.tasks[0].test.len() + 1),
        other => panic!("expected a parse error, got {other:?}"),
    }
    assert!(matches!(load_jsonl(&dir.path().join("absent.jsonl"), None), Err(Error::Io { .. })));
}

#[test]
fn wrong_row_width_is_a_schema_error() {
    let spec = small_spec();
    let data = generate_synthetic(&spec).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("t.jsonl");
    write_jsonl(&path, &data.pretrain).unwrap();
    let mut dims = spec.input_dims;
    dims[1] += 1;
    assert!(matches!(load_jsonl(&path, Some(dims)), Err(Error::Schema { .. })));
}

#[test]
fn missing_flag_requires_zero_fill() {
    let spec = small_spec();
    let data = generate_synthetic(&spec).unwrap();
    let mut sample = data.pretrain.samples[0].clone();
    sample.pattern = TaskId::new(2).unwrap().pattern();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("t.jsonl");
    write_jsonl(&path, &promptstream::data::Dataset::new(vec![sample])).unwrap();
    assert!(matches!(load_jsonl(&path, None), Err(Error::Schema { .. })));
}

#[test]
fn missing_field_is_inferred_from_zero_rows() {
    let spec = small_spec();
    let data = generate_synthetic(&spec).unwrap();
    let task = TaskId::new(5).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("t.jsonl");
    write_jsonl(&path, &data.task(task).unwrap().test).unwrap();
    let stripped: String = std::fs::read_to_string(&path)
        .unwrap()
        .lines()
        .map(|l| {
            let mut v: serde_json::Value = serde_json::from_str(l).unwrap();
            v.as_object_mut().unwrap().remove("missing");
            v.to_string() + "\n"
        })
        .collect();
    std::fs::write(&path, stripped).unwrap();
    let back = load_jsonl(&path, Some(spec.input_dims)).unwrap();
    assert!(back.samples.iter().all(|s| s.pattern == task.pattern()));
}

#[test]
fn splits_are_balanced_disjoint_and_pattern_faithful() {
    let spec = SyntheticSpec {
        train_per_task: 30,
        test_per_task: 15,
        ..small_spec()
    };
    let data = generate_synthetic(&spec).unwrap();
    assert!(data.pretrain.samples.iter().all(|s| s.pattern.is_complete()));

    let mut seen = BTreeSet::new();
    for id in data.pretrain.ids() {
        assert!(seen.insert(id.to_string()));
    }
    for split in &data.tasks {
        for (set, n) in [(&split.train, 30), (&split.test, 15)] {
            assert_eq!(set.len(), n);
            let mut counts = BTreeMap::new();
            for s in &set.samples {
                *counts.entry(s.label as usize).or_insert(0usize) += 1;
                assert_eq!(s.pattern, split.task.pattern());
                for m in Modality::ALL {
                    assert_eq!(s.modality(m).is_zero(), s.pattern.is_missing(m), "{} {}", s.id, m.name());
                    assert_eq!(s.modality(m).rows, spec.seq_lens[m.index()]);
                }
                assert!(seen.insert(s.id.clone()), "duplicate id {}", s.id);
            }
            let (lo, hi) = (counts.values().min().unwrap(), counts.values().max().unwrap());
            assert_eq!(counts.len(), spec.num_classes);
            assert!(hi - lo <= 1, "class counts {counts:?}");
        }
    }
}

#[test]
fn applying_a_pattern_zero_fills_only_missing_modalities() {
    let data = generate_synthetic(&small_spec()).unwrap();
    let src = &data.pretrain.samples[3];
    for t in TaskId::all() {
        let out = apply_missing_pattern(src, t.pattern());
        assert_eq!(out.pattern, t.pattern());
        for m in Modality::ALL {
            if t.pattern().is_missing(m) {
                assert!(out.modality(m).is_zero());
                assert_eq!(out.modality(m).rows, src.modality(m).rows);
            } else {
                assert_eq!(out.modality(m), src.modality(m));
            }
        }
    }
}

#[test]
fn generation_is_deterministic_per_seed() {
    let spec = small_spec();
    let a = generate_synthetic(&spec).unwrap();
    let b = generate_synthetic(&spec).unwrap();
    assert_eq!(a.pretrain, b.pretrain);
    let c = generate_synthetic(&SyntheticSpec { seed: 1, ..spec.clone() }).unwrap();
    assert_ne!(a.pretrain, c.pretrain);
    assert_ne!(spec.hash(), SyntheticSpec { seed: 1, ..spec }.hash());
}

#[test]
fn benchmark_is_learnable_from_the_available_modalities() {
    let spec = SyntheticSpec {
        train_per_task: 120,
        test_per_task: 120,
        ..SyntheticSpec::default()
    };
    let data = generate_synthetic(&spec).unwrap();
    let chance = 1.0 / spec.num_classes as f64;
    for split in &data.tasks {
        let acc = common::logistic_regression_accuracy(&split.train, &split.test, spec.num_classes, 200);
        assert!(acc > chance + 0.2, "task {} accuracy {acc}", split.task);
    }
}

#[test]
fn checkpoints_round_trip_bit_for_bit() {
    let cfg = common::tiny_config();
    let mut params = Backbone::new(&cfg.backbone)
        .unwrap()
        .init_params(&mut ChaCha8Rng::seed_from_u64(3))
        .unwrap();
    params.set_trainable_prefix("backbone/head", false);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("b.psv");
    checkpoint::save(&path, &params).unwrap();
    let back = checkpoint::load(&path).unwrap();
    assert!(back.bit_equal(&params));
    let flags: Vec<bool> = params.iter().map(|p| p.trainable()).collect();
    assert_eq!(back.iter().map(|p| p.trainable()).collect::<Vec<_>>(), flags);
}

#[test]
fn corrupt_checkpoints_are_rejected() {
    let cfg = common::tiny_config();
    let params = Backbone::new(&cfg.backbone)
        .unwrap()
        .init_params(&mut ChaCha8Rng::seed_from_u64(3))
        .unwrap();
    let bytes = checkpoint::encode(&params);
    let mut bad_magic = bytes.clone();
    bad_magic[0] = b'X';
    assert!(matches!(checkpoint::decode(&bad_magic), Err(Error::Version { .. })));
    assert!(matches!(checkpoint::decode(&bytes[..bytes.len() - 3]), Err(Error::Schema { .. })));
    let mut trailing = bytes.clone();
    trailing.push(0);
    assert!(matches!(checkpoint::decode(&trailing), Err(Error::Schema { .. })));
    assert!(matches!(checkpoint::decode(b"PS"), Err(Error::Version { .. })));
}

fn matrix_from(rows: &[Vec<f64>]) -> AccuracyMatrix {
    let n = rows.len();
    let mut m = AccuracyMatrix::new(n);
    for j in 1..=n {
        for i in 1..=j {
            m.set(i, j, rows[i - 1][j - 1]).unwrap();
        }
    }
    m
}

fn square(n: usize, lo: f64, hi: f64) -> impl Strategy<Value = Vec<Vec<f64>>> {
    prop::collection::vec(prop::collection::vec(lo..hi, n), n)
}

proptest! {
    #[test]
    fn forgetting_ignores_a_uniform_shift(rows in (2usize..=7).prop_flat_map(|n| square(n, 0.2, 0.8)), shift in -0.2..0.2f64) {
        let n = rows.len();
        let shifted: Vec<Vec<f64>> = rows.iter().map(|r| r.iter().map(|v| v + shift).collect()).collect();
        let a = forgetting_measure(&matrix_from(&rows), n).unwrap().unwrap();
        let b = forgetting_measure(&matrix_from(&shifted), n).unwrap().unwrap();
        prop_assert!((a - b).abs() < 1e-12);
        let aa = average_accuracy(&matrix_from(&rows), n).unwrap();
        let ab = average_accuracy(&matrix_from(&shifted), n).unwrap();
        prop_assert!((ab - aa - shift).abs() < 1e-12);
    }

    #[test]
    fn average_accuracy_stays_in_the_unit_interval(rows in (1usize..=7).prop_flat_map(|n| square(n, 0.0, 1.0))) {
        let n = rows.len();
        let m = matrix_from(&rows);
        for k in 1..=n {
            let aa = average_accuracy(&m, k).unwrap();
            prop_assert!((0.0..=1.0).contains(&aa));
            prop_assert!((aa - common::average_oracle(&rows, k)).abs() < 1e-12);
        }
    }

    #[test]
    fn improving_rows_never_forget(rows in (2usize..=7).prop_flat_map(|n| square(n, 0.0, 0.1))) {
        let n = rows.len();
        let rising: Vec<Vec<f64>> = rows
            .iter()
            .map(|r| r.iter().scan(0.0, |acc, v| { *acc += v; Some(*acc / n as f64 * 9.0) }).collect())
            .collect();
        let fm = forgetting_measure(&matrix_from(&rising), n).unwrap().unwrap();
        prop_assert!(fm <= 1e-12);
        prop_assert!((fm - common::forgetting_oracle(&rising, n)).abs() < 1e-12);
    }
}

#[test]
fn matrix_cells_are_validated() {
    let mut m = AccuracyMatrix::new(3);
    assert!(matches!(m.set(2, 1, 0.5), Err(Error::Index { .. })));
    assert!(matches!(m.set(1, 4, 0.5), Err(Error::Index { .. })));
    assert!(matches!(m.set(1, 1, 1.5), Err(Error::Domain(_))));
    assert!(matches!(average_accuracy(&m, 1), Err(Error::Contract(_))));
    m.set(1, 1, 0.5).unwrap();
    assert_eq!(forgetting_measure(&m, 1).unwrap(), None);
}
