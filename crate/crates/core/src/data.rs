//! Multimodal samples, the synthetic benchmark generator, and JSONL I/O.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::prompts::{Modality, MissingPattern, TaskId, NUM_MODALITIES};
use crate::tensor::Tensor;

/// Row-major `rows × cols` feature sequence for one modality.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl FeatureMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn is_zero(&self) -> bool {
        self.data.iter().all(|&v| v == 0.0)
    }

    fn to_rows(&self) -> Vec<Vec<f64>> {
        self.data.chunks(self.cols).map(<[f64]>::to_vec).collect()
    }

    fn from_rows(field: &str, rows: Vec<Vec<f64>>, want_cols: Option<usize>) -> Result<Self> {
        let schema = |detail: String| Error::Schema {
            field: field.to_string(),
            detail,
        };
        if rows.is_empty() {
            return Err(schema("needs at least one row".into()));
        }
        let cols = rows[0].len();
        if cols == 0 {
            return Err(schema("rows must be non-empty".into()));
        }
        if let Some(w) = want_cols {
            if cols != w {
                return Err(schema(format!("row width {cols}, expected {w}")));
            }
        }
        if let Some((i, r)) = rows.iter().enumerate().find(|(_, r)| r.len() != cols) {
            return Err(schema(format!("row {i} has width {}, expected {cols}", r.len())));
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data: rows.into_iter().flatten().collect(),
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    /// Class index for classification, real score for regression.
    pub label: f64,
    pub features: [FeatureMatrix; NUM_MODALITIES],
    /// Pattern actually applied to `features`.
    pub pattern: MissingPattern,
}

impl Sample {
    pub fn modality(&self, m: Modality) -> &FeatureMatrix {
        &self.features[m.index()]
    }

    fn shape_key(&self) -> [usize; NUM_MODALITIES] {
        [self.features[0].rows, self.features[1].rows, self.features[2].rows]
    }
}

/// Zero-fill every modality marked missing in `pattern`; lengths are preserved.
pub fn apply_missing_pattern(sample: &Sample, pattern: MissingPattern) -> Sample {
    let mut out = sample.clone();
    for m in Modality::ALL {
        if pattern.is_missing(m) {
            let f = &mut out.features[m.index()];
            f.data.iter_mut().for_each(|v| *v = 0.0);
        }
    }
    out.pattern = pattern;
    out
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
}

/// A shape-homogeneous group of samples as `B×seq_m×d_m` tensors.
#[derive(Clone, Debug)]
pub struct Batch {
    pub inputs: [Tensor; NUM_MODALITIES],
    pub labels: Vec<f64>,
    pub patterns: Vec<MissingPattern>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

impl Dataset {
    pub fn new(samples: Vec<Sample>) -> Self {
        Self { samples }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn ids(&self) -> BTreeSet<&str> {
        self.samples.iter().map(|s| s.id.as_str()).collect()
    }

    /// Input width of each modality, taken from the first sample.
    pub fn input_dims(&self) -> Option<[usize; NUM_MODALITIES]> {
        self.samples
            .first()
            .map(|s| [s.features[0].cols, s.features[1].cols, s.features[2].cols])
    }

    /// Tensors for the samples at `indices`, split into groups of equal
    /// sequence lengths (order of first appearance).
    pub fn batches(&self, indices: &[usize]) -> Result<Vec<Batch>> {
        let mut groups: Vec<([usize; NUM_MODALITIES], Vec<usize>)> = Vec::new();
        for &i in indices {
            let key = self.samples[i].shape_key();
            match groups.iter_mut().find(|(k, _)| *k == key) {
                Some((_, members)) => members.push(i),
                None => groups.push((key, vec![i])),
            }
        }
        groups
            .into_iter()
            .map(|(key, members)| {
                let inputs = Modality::ALL.map(|m| {
                    let first = self.samples[members[0]].modality(m);
                    let mut data = Vec::with_capacity(members.len() * first.data.len());
                    for &i in &members {
                        data.extend_from_slice(&self.samples[i].modality(m).data);
                    }
                    Tensor::new(data, &[members.len(), key[m.index()], first.cols])
                });
                let [a, v, t] = inputs;
                Ok(Batch {
                    inputs: [a?, v?, t?],
                    labels: members.iter().map(|&i| self.samples[i].label).collect(),
                    patterns: members.iter().map(|&i| self.samples[i].pattern).collect(),
                })
            })
            .collect()
    }

    pub fn concat(parts: &[&Dataset]) -> Dataset {
        Dataset::new(parts.iter().flat_map(|d| d.samples.iter().cloned()).collect())
    }
}

fn default_num_classes() -> usize {
    4
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    /// Emit real-valued scores centred on zero instead of class indices.
    pub regression: bool,
    pub pretrain_samples: usize,
    pub train_per_task: usize,
    pub test_per_task: usize,
    /// Sequence length of (audio, video, text).
    pub seq_lens: [usize; NUM_MODALITIES],
    pub input_dims: [usize; NUM_MODALITIES],
    pub center_scale: f64,
    pub noise: f64,
    /// Per-modality informativeness multipliers on the class centres.
    pub weights: [f64; NUM_MODALITIES],
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            num_classes: default_num_classes(),
            regression: false,
            pretrain_samples: 600,
            train_per_task: 200,
            test_per_task: 300,
            seq_lens: [8, 12, 10],
            input_dims: [20, 35, 50],
            center_scale: 0.5,
            noise: 1.0,
            weights: [1.0, 1.0, 1.0],
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.num_classes < 2 {
            return bad("synthetic data needs at least two classes".into());
        }
        if self.seq_lens.contains(&0) || self.input_dims.contains(&0) {
            return bad("sequence lengths and input dims must be positive".into());
        }
        if self.weights.iter().any(|&w| !(w > 0.0)) {
            return bad("modality weights must be positive".into());
        }
        if !(self.noise >= 0.0) || !(self.center_scale > 0.0) {
            return bad("noise must be non-negative and center_scale positive".into());
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("spec serializes");
        hex::encode(Sha256::digest(&json))
    }

    /// Label written for class `c`.
    pub fn label_for(&self, class: usize) -> f64 {
        if self.regression {
            class as f64 - (self.num_classes as f64 - 1.0) / 2.0
        } else {
            class as f64
        }
    }
}

#[derive(Clone, Debug)]
pub struct TaskSplit {
    pub task: TaskId,
    pub train: Dataset,
    pub test: Dataset,
}

#[derive(Clone, Debug)]
pub struct SyntheticData {
    pub pretrain: Dataset,
    pub tasks: Vec<TaskSplit>,
}

impl SyntheticData {
    pub fn task(&self, id: TaskId) -> Option<&TaskSplit> {
        self.tasks.iter().find(|t| t.task == id)
    }
}

/// Gaussian class-centre benchmark.
///
/// Each class gets one centre matrix per modality (scaled by the modality
/// weight); a sample is its class centre plus isotropic noise. Labels cycle
/// through the classes so per-class counts differ by at most one. Task splits
/// are zero-filled according to their task's missing pattern.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<SyntheticData> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let centers: Vec<[FeatureMatrix; NUM_MODALITIES]> = (0..spec.num_classes)
        .map(|_| {
            Modality::ALL.map(|m| {
                let (rows, cols) = (spec.seq_lens[m.index()], spec.input_dims[m.index()]);
                let scale = spec.center_scale * spec.weights[m.index()];
                FeatureMatrix {
                    rows,
                    cols,
                    data: (0..rows * cols)
                        .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
                        .collect(),
                }
            })
        })
        .collect();

    let draw = |prefix: &str, n: usize, pattern: MissingPattern, rng: &mut ChaCha8Rng| {
        let samples = (0..n)
            .map(|i| {
                let class = i % spec.num_classes;
                let features = centers[class].clone().map(|mut f| {
                    for v in f.data.iter_mut() {
                        let z: f64 = rng.sample(StandardNormal);
                        *v += spec.noise * z;
                    }
                    f
                });
                let sample = Sample {
                    id: format!("{prefix}-{i:05}"),
                    label: spec.label_for(class),
                    features,
                    pattern: MissingPattern::COMPLETE,
                };
                apply_missing_pattern(&sample, pattern)
            })
            .collect();
        Dataset::new(samples)
    };

    let pretrain = draw("pretrain", spec.pretrain_samples, MissingPattern::COMPLETE, &mut rng);
    let tasks = TaskId::all()
        .map(|task| {
            let pattern = task.pattern();
            let train = draw(&format!("task{task}-train"), spec.train_per_task, pattern, &mut rng);
            let test = draw(&format!("task{task}-test"), spec.test_per_task, pattern, &mut rng);
            TaskSplit { task, train, test }
        })
        .collect();
    Ok(SyntheticData { pretrain, tasks })
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct JsonSample {
    id: String,
    label: f64,
    audio: Vec<Vec<f64>>,
    video: Vec<Vec<f64>>,
    text: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    missing: Option<MissingPattern>,
}

fn to_line(sample: &Sample) -> Result<String> {
    let js = JsonSample {
        id: sample.id.clone(),
        label: sample.label,
        audio: sample.features[0].to_rows(),
        video: sample.features[1].to_rows(),
        text: sample.features[2].to_rows(),
        missing: Some(sample.pattern),
    };
    serde_json::to_string(&js).map_err(|e| Error::Schema {
        field: "sample".into(),
        detail: e.to_string(),
    })
}

pub fn write_jsonl(path: &Path, data: &Dataset) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for s in &data.samples {
        writeln!(w, "{}", to_line(s)?).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Read one sample per line. `dims` checks each modality's row width.
///
/// The optional `missing` field records the applied pattern; without it,
/// all-zero modalities are taken as missing.
pub fn load_jsonl(path: &Path, dims: Option<[usize; NUM_MODALITIES]>) -> Result<Dataset> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut samples = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            line: idx + 1,
            msg,
        };
        let js: JsonSample = serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        let want = |m: usize| dims.map(|d| d[m]);
        let features = [
            FeatureMatrix::from_rows("audio", js.audio, want(0)),
            FeatureMatrix::from_rows("video", js.video, want(1)),
            FeatureMatrix::from_rows("text", js.text, want(2)),
        ];
        let [a, v, t] = features;
        let features = [a?, v?, t?];
        let pattern = match js.missing {
            Some(p) => {
                for m in Modality::ALL {
                    if p.is_missing(m) && !features[m.index()].is_zero() {
                        return Err(Error::Schema {
                            field: m.name().into(),
                            detail: format!("line {}: flagged missing but not zero-filled", idx + 1),
                        });
                    }
                }
                p
            }
            None => MissingPattern::new(features[0].is_zero(), features[1].is_zero(), features[2].is_zero())
                .map_err(|e| parse_err(e.to_string()))?,
        };
        samples.push(Sample {
            id: js.id,
            label: js.label,
            features,
            pattern,
        });
    }
    Ok(Dataset::new(samples))
}

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskEntry {
    pub task: TaskId,
    pub pattern: MissingPattern,
    pub train: String,
    pub test: String,
}

/// Index of a dataset directory: split files relative to the manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub spec_hash: String,
    pub spec: SyntheticSpec,
    pub pretrain: String,
    pub tasks: Vec<TaskEntry>,
}

/// Write every split plus `manifest.json` into `dir`.
pub fn write_dataset(dir: &Path, spec: &SyntheticSpec, data: &SyntheticData) -> Result<Manifest> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let pretrain = "pretrain.jsonl".to_string();
    write_jsonl(&dir.join(&pretrain), &data.pretrain)?;
    let mut tasks = Vec::new();
    for split in &data.tasks {
        let train = format!("task{}_train.jsonl", split.task);
        let test = format!("task{}_test.jsonl", split.task);
        write_jsonl(&dir.join(&train), &split.train)?;
        write_jsonl(&dir.join(&test), &split.test)?;
        tasks.push(TaskEntry {
            task: split.task,
            pattern: split.task.pattern(),
            train,
            test,
        });
    }
    let manifest = Manifest {
        spec_hash: spec.hash(),
        spec: spec.clone(),
        pretrain,
        tasks,
    };
    let path = dir.join(MANIFEST_FILE);
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    std::fs::write(&path, json + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

/// Load a dataset directory written by [`write_dataset`], checking that
/// every task split carries exactly its task's pattern.
pub fn read_dataset(dir: &Path) -> Result<(Manifest, SyntheticData)> {
    let path = dir.join(MANIFEST_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.clone(),
        line: e.line(),
        msg: e.to_string(),
    })?;
    let dims = Some(manifest.spec.input_dims);
    let resolve = |f: &str| -> PathBuf { dir.join(f) };
    let pretrain = load_jsonl(&resolve(&manifest.pretrain), dims)?;
    let mut tasks = Vec::new();
    for entry in &manifest.tasks {
        if entry.task.pattern() != entry.pattern {
            return Err(Error::Contract(format!("manifest pairs task {} with pattern {}", entry.task, entry.pattern)));
        }
        let train = load_jsonl(&resolve(&entry.train), dims)?;
        let test = load_jsonl(&resolve(&entry.test), dims)?;
        for s in train.samples.iter().chain(&test.samples) {
            if s.pattern != entry.pattern {
                return Err(Error::Contract(format!(
                    "sample {} has pattern {} but task {} expects {}",
                    s.id, s.pattern, entry.task, entry.pattern
                )));
            }
        }
        tasks.push(TaskSplit {
            task: entry.task,
            train,
            test,
        });
    }
    Ok((manifest, SyntheticData { pretrain, tasks }))
}
