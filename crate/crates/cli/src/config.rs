//! Experiment configuration: a profile's defaults with a JSON document merged on top.

use std::path::{Path, PathBuf};

use ddreg::augment::AugmentConfig;
use ddreg::data::Split;
use ddreg::nn::NetConfig;
use ddreg::synthetic::PhantomKind;
use ddreg::train::{Design, SchedulerConfig, TrainConfig};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::CliError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Profile {
    /// 32³ synthetic phantoms and a depth-3 network.
    Desk,
    /// 128³ inputs and the full six-level network.
    Paper,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub kind: PhantomKind,
    pub size: usize,
    pub spacing: f64,
    /// Subjects in the train, val and test splits.
    pub counts: [usize; 3],
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            kind: PhantomKind::Spheres,
            size: 32,
            spacing: 1.0,
            counts: [12, 2, 4],
            seed: 7,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PreprocessSpec {
    pub spacing: Option<f64>,
    pub crop_margin_mm: Option<f64>,
    pub shape: Option<[usize; 3]>,
    pub normalize: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    /// Dataset manifest; when absent the synthetic phantoms are used.
    pub manifest: Option<PathBuf>,
    pub synthetic: SyntheticSpec,
    /// Pair list written by `gen-pairs`.
    pub pairs: Option<PathBuf>,
    pub preprocess: PreprocessSpec,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub design: Design,
    pub lr: f64,
    pub accumulation: usize,
    pub scheduler: SchedulerConfig,
    pub max_epochs: usize,
    pub seed: u64,
    pub reg_weight: f64,
    pub val_pairs_per_subject: usize,
    pub precompute_pairs: bool,
    pub finetune_lr: f64,
    pub step1_epochs: Option<usize>,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            design: t.design,
            lr: t.lr,
            accumulation: t.accumulation,
            scheduler: t.scheduler,
            max_epochs: t.max_epochs,
            seed: t.seed,
            reg_weight: t.reg_weight,
            val_pairs_per_subject: t.val_pairs_per_subject,
            precompute_pairs: t.precompute_pairs,
            finetune_lr: t.finetune_lr,
            step1_epochs: t.step1_epochs,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub split: Split,
    pub pairs_per_subject: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            split: Split::Test,
            pairs_per_subject: 1,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub data: DataSection,
    pub augment: AugmentConfig,
    pub net: NetConfig,
    pub train: TrainSection,
    pub eval: EvalSection,
}

impl ExperimentConfig {
    pub fn profile(p: Profile) -> Self {
        match p {
            Profile::Paper => Self {
                data: DataSection {
                    preprocess: PreprocessSpec {
                        spacing: Some(1.0),
                        crop_margin_mm: None,
                        shape: Some([128; 3]),
                        normalize: true,
                    },
                    ..DataSection::default()
                },
                ..Self::default()
            },
            Profile::Desk => {
                let t = TrainConfig::desk();
                Self {
                    augment: t.augment,
                    net: t.net,
                    train: TrainSection {
                        accumulation: t.accumulation,
                        val_pairs_per_subject: t.val_pairs_per_subject,
                        ..TrainSection::default()
                    },
                    eval: EvalSection {
                        split: Split::Test,
                        pairs_per_subject: 2,
                    },
                    ..Self::default()
                }
            }
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            design: t.design,
            lr: t.lr,
            accumulation: t.accumulation,
            scheduler: t.scheduler.clone(),
            max_epochs: t.max_epochs,
            seed: t.seed,
            reg_weight: t.reg_weight,
            val_pairs_per_subject: t.val_pairs_per_subject,
            precompute_pairs: t.precompute_pairs,
            finetune_lr: t.finetune_lr,
            step1_epochs: t.step1_epochs,
            augment: self.augment.clone(),
            net: self.net.clone(),
        }
    }

    fn resolve_paths(&mut self, base: &Path) {
        for p in [&mut self.data.manifest, &mut self.data.pairs].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
    }
}

/// Recursively overlays `patch` onto `base`; objects merge key by key, anything
/// else replaces.
pub fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

fn pointer(path: &serde_path_to_error::Path) -> String {
    use serde_path_to_error::Segment;
    let mut out = String::new();
    for seg in path.iter() {
        out.push('/');
        match seg {
            Segment::Seq { index } => out.push_str(&index.to_string()),
            Segment::Map { key } | Segment::Enum { variant: key } => {
                out.push_str(&key.replace('~', "~0").replace('/', "~1"))
            }
            Segment::Unknown => out.push('?'),
        }
    }
    if out.is_empty() {
        out.push('/');
    }
    out
}

/// Deserialises a merged document strictly, reporting the JSON pointer of the
/// offending key on failure.
pub fn from_value(v: Value) -> Result<ExperimentConfig, CliError> {
    serde_path_to_error::deserialize(v).map_err(|e| {
        let at = pointer(e.path());
        CliError::Validation(format!("config error at {at}: {}", e.into_inner()))
    })
}

/// Profile defaults, overlaid with the file at `path` (if any). Relative data
/// paths in the file are taken relative to the file.
pub fn load(profile: Profile, path: Option<&Path>) -> Result<ExperimentConfig, CliError> {
    let mut doc = serde_json::to_value(ExperimentConfig::profile(profile)).map_err(|e| CliError::Runtime(e.into()))?;
    let Some(path) = path else {
        return from_value(doc);
    };
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Validation(format!("cannot read config {}: {e}", path.display())))?;
    let patch: Value = serde_json::from_str(&text)
        .map_err(|e| CliError::Validation(format!("config {} is not valid JSON: {e}", path.display())))?;
    if !patch.is_object() {
        return Err(CliError::Validation(format!(
            "config {} must be a JSON object",
            path.display()
        )));
    }
    merge(&mut doc, patch);
    let mut cfg = from_value(doc)?;
    cfg.resolve_paths(path.parent().unwrap_or(Path::new("")));
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn profiles_round_trip_through_json() {
        for p in [Profile::Desk, Profile::Paper] {
            let c = ExperimentConfig::profile(p);
            assert_eq!(from_value(serde_json::to_value(&c).unwrap()).unwrap(), c);
        }
    }

    #[test]
    fn merge_overlays_nested_keys() {
        let mut base = json!({"a": {"b": 1, "c": 2}, "d": [1, 2]});
        merge(&mut base, json!({"a": {"c": 3}, "d": [5]}));
        assert_eq!(base, json!({"a": {"b": 1, "c": 3}, "d": [5]}));
    }

    #[test]
    fn unknown_and_mistyped_keys_are_pointed_at() {
        let mut doc = serde_json::to_value(ExperimentConfig::profile(Profile::Desk)).unwrap();
        merge(&mut doc, json!({"train": {"lr": "fast"}}));
        let CliError::Validation(msg) = from_value(doc).unwrap_err() else {
            panic!()
        };
        assert!(msg.contains("/train/lr"), "{msg}");

        let mut doc = serde_json::to_value(ExperimentConfig::profile(Profile::Desk)).unwrap();
        merge(&mut doc, json!({"net": {"filterz": [4]}}));
        let CliError::Validation(msg) = from_value(doc).unwrap_err() else {
            panic!()
        };
        assert!(msg.contains("/net") && msg.contains("filterz"), "{msg}");
    }
}
