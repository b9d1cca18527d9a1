//! Run configuration and ablation grids.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::backbone::BackboneConfig;
use crate::continual::{StreamConfig, TrainerConfig};
use crate::data::SyntheticSpec;
use crate::error::{Error, Result};
use crate::losses::ContrastiveConfig;
use crate::prompts::{PromptConfig, PromptFamily, PromptSchedule};

/// Settings of complete-modality backbone pretraining.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            lr: 1e-3,
            batch_size: 64,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub backbone: BackboneConfig,
    pub prompts: PromptConfig,
    pub loss: ContrastiveConfig,
    pub trainer: TrainerConfig,
    pub pretrain: PretrainConfig,
    pub data: SyntheticSpec,
    pub stream: StreamConfig,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.prompts.validate(self.backbone.num_layers)?;
        self.loss.validate()?;
        self.trainer.validate()?;
        self.data.validate()?;
        if self.data.input_dims != self.backbone.input_dims {
            return Err(Error::Config(format!(
                "data input dims {:?} differ from backbone input dims {:?}",
                self.data.input_dims, self.backbone.input_dims
            )));
        }
        if self.data.regression != self.backbone.regression {
            return Err(Error::Config("data and backbone disagree on regression".into()));
        }
        if !self.backbone.regression && self.data.num_classes != self.backbone.num_classes {
            return Err(Error::Config(format!(
                "data has {} classes, backbone {}",
                self.data.num_classes, self.backbone.num_classes
            )));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Leaf values as `section.field[.index] → value`.
    pub fn flatten(&self) -> BTreeMap<String, Value> {
        let mut out = BTreeMap::new();
        flatten_into(&serde_json::to_value(self).expect("config serializes"), String::new(), &mut out);
        out
    }
}

fn flatten_into(v: &Value, prefix: String, out: &mut BTreeMap<String, Value>) {
    let join = |k: &str| if prefix.is_empty() { k.to_string() } else { format!("{prefix}.{k}") };
    match v {
        Value::Object(map) => {
            for (k, child) in map {
                flatten_into(child, join(k), out);
            }
        }
        other => {
            out.insert(prefix, other.clone());
        }
    }
}

/// Fields whose values differ, as `(path, left, right)`.
pub fn config_diff(a: &RunConfig, b: &RunConfig) -> Vec<(String, Value, Value)> {
    let (fa, fb) = (a.flatten(), b.flatten());
    let keys: BTreeSet<&String> = fa.keys().chain(fb.keys()).collect();
    keys.into_iter()
        .filter_map(|k| {
            let (x, y) = (fa.get(k).unwrap_or(&Value::Null), fb.get(k).unwrap_or(&Value::Null));
            (x != y).then(|| (k.clone(), x.clone(), y.clone()))
        })
        .collect()
}

/// Layer layouts of the position study: (MS, TA, TS) layers.
pub const LAYOUTS: [(&[usize], &[usize], &[usize]); 4] = [
    (&[1, 2], &[3, 4, 5], &[6, 7, 8, 9]),
    (&[1, 2], &[3, 4, 5], &[6, 7, 8]),
    (&[1, 2], &[3, 4, 5], &[6, 7]),
    (&[1, 2, 3], &[4, 5], &[6, 7, 8]),
];

/// Layer counts used when reordering families.
pub const ORDER_COUNTS: [usize; 3] = [2, 3, 3];

pub fn layout_schedule(index: usize) -> Result<PromptSchedule> {
    let (ms, ta, ts) = LAYOUTS
        .get(index.wrapping_sub(1))
        .ok_or_else(|| Error::Usage(format!("layout {index} outside 1..={}", LAYOUTS.len())))?;
    Ok(PromptSchedule {
        ms: ms.to_vec(),
        ta: ta.to_vec(),
        ts: ts.to_vec(),
    })
}

/// Every non-repeating order of the three families.
pub fn all_orders() -> Vec<[PromptFamily; 3]> {
    use PromptFamily::*;
    vec![
        [ModalitySpecific, TaskAware, TaskSpecific],
        [ModalitySpecific, TaskSpecific, TaskAware],
        [TaskAware, ModalitySpecific, TaskSpecific],
        [TaskAware, TaskSpecific, ModalitySpecific],
        [TaskSpecific, ModalitySpecific, TaskAware],
        [TaskSpecific, TaskAware, ModalitySpecific],
    ]
}

/// Every subset of the three families, smallest first.
pub fn all_family_subsets() -> Vec<BTreeSet<PromptFamily>> {
    let mut subsets: Vec<BTreeSet<PromptFamily>> = (0u8..8)
        .map(|mask| {
            PromptFamily::ALL
                .into_iter()
                .enumerate()
                .filter(|(i, _)| mask & (1 << i) != 0)
                .map(|(_, f)| f)
                .collect()
        })
        .collect();
    subsets.sort_by_key(|s| (s.len(), s.iter().copied().collect::<Vec<_>>()));
    subsets
}

fn family_list_name(families: &BTreeSet<PromptFamily>) -> String {
    if families.is_empty() {
        "none".into()
    } else {
        families.iter().map(|f| f.short()).collect::<Vec<_>>().join("+")
    }
}

/// One configuration of an ablation grid.
#[derive(Clone, Debug, PartialEq)]
pub struct Variant {
    /// Directory-safe label, e.g. `prompts-MS+TA_length-8`.
    pub name: String,
    pub config: RunConfig,
}

type Edit = (String, Box<dyn Fn(&mut RunConfig)>);

fn parse_families(s: &str) -> Result<BTreeSet<PromptFamily>> {
    if s.eq_ignore_ascii_case("none") {
        return Ok(BTreeSet::new());
    }
    s.split([',', '+'])
        .map(|f| PromptFamily::parse(f).map_err(|e| Error::Usage(e.to_string())))
        .collect()
}

fn parse_axis(key: &str, value: &str) -> Result<Vec<Edit>> {
    let alternatives: Vec<&str> = value.split('|').map(str::trim).collect();
    let mut edits: Vec<Edit> = Vec::new();
    match key {
        "prompts" => {
            let sets = if value == "all" {
                all_family_subsets()
            } else {
                alternatives.iter().map(|a| parse_families(a)).collect::<Result<_>>()?
            };
            for set in sets {
                let name = format!("prompts-{}", family_list_name(&set));
                edits.push((name, Box::new(move |c: &mut RunConfig| c.prompts.families = set.clone())));
            }
        }
        "order" => {
            let orders = if value == "all" {
                all_orders()
            } else {
                alternatives
                    .iter()
                    .map(|a| {
                        let fams = a
                            .split([',', '-', '>'])
                            .filter(|s| !s.is_empty())
                            .map(|f| PromptFamily::parse(f).map_err(|e| Error::Usage(e.to_string())))
                            .collect::<Result<Vec<_>>>()?;
                        let order: [PromptFamily; 3] = fams
                            .try_into()
                            .map_err(|_| Error::Usage(format!("order `{a}` must list three families")))?;
                        if order.iter().collect::<BTreeSet<_>>().len() != 3 {
                            return Err(Error::Usage(format!("order `{a}` repeats a family")));
                        }
                        Ok(order)
                    })
                    .collect::<Result<_>>()?
            };
            for order in orders {
                let name = format!("order-{}", order.map(|f| f.short()).join("-"));
                edits.push((
                    name,
                    Box::new(move |c: &mut RunConfig| c.prompts.schedule = PromptSchedule::from_order(order, ORDER_COUNTS)),
                ));
            }
        }
        "layout" => {
            let indices: Vec<usize> = if value == "all" {
                (1..=LAYOUTS.len()).collect()
            } else {
                alternatives
                    .iter()
                    .flat_map(|a| a.split(','))
                    .map(|a| a.trim().parse().map_err(|_| Error::Usage(format!("bad layout `{a}`"))))
                    .collect::<Result<_>>()?
            };
            for i in indices {
                let schedule = layout_schedule(i)?;
                edits.push((
                    format!("layout-{i}"),
                    Box::new(move |c: &mut RunConfig| c.prompts.schedule = schedule.clone()),
                ));
            }
        }
        "length" => {
            for a in alternatives.iter().flat_map(|a| a.split(',')) {
                let len: usize = a
                    .trim()
                    .parse()
                    .map_err(|_| Error::Usage(format!("bad prompt length `{a}`")))?;
                edits.push((format!("length-{len}"), Box::new(move |c: &mut RunConfig| c.prompts.length = len)));
            }
        }
        other => {
            return Err(Error::Usage(format!(
                "unknown ablation axis `{other}` (expected prompts, order, layout, length)"
            )))
        }
    }
    Ok(edits)
}

/// Expand an ablation spec such as `prompts=all;length=4,8` into the
/// cartesian product of its axes applied to `base`.
///
/// Axes: `prompts=MS,TA|TS|all|none`, `order=MS,TA,TS|all`,
/// `layout=1..4|all`, `length=4,8,16,32`.
pub fn parse_ablation(spec: &str, base: &RunConfig) -> Result<Vec<Variant>> {
    let mut variants = vec![Variant {
        name: String::new(),
        config: base.clone(),
    }];
    for axis in spec.split(';').map(str::trim).filter(|s| !s.is_empty()) {
        let (key, value) = axis
            .split_once('=')
            .ok_or_else(|| Error::Usage(format!("ablation axis `{axis}` must look like key=value")))?;
        let edits = parse_axis(key.trim(), value.trim())?;
        let mut next = Vec::with_capacity(variants.len() * edits.len());
        for v in &variants {
            for (label, apply) in &edits {
                let mut config = v.config.clone();
                apply(&mut config);
                let name = if v.name.is_empty() {
                    label.clone()
                } else {
                    format!("{}_{label}", v.name)
                };
                next.push(Variant { name, config });
            }
        }
        variants = next;
    }
    if variants.len() == 1 && variants[0].name.is_empty() {
        return Err(Error::Usage("empty ablation spec".into()));
    }
    for v in &variants {
        v.config
            .validate()
            .map_err(|e| Error::Config(format!("variant {}: {e}", v.name)))?;
    }
    Ok(variants)
}
