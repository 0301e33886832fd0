//! Dataset manifests and pre-generated evaluation pairs.
//!
//! A dataset manifest is a JSON list of `{"fixed", "labels", "split"}` entries
//! whose paths are relative to the manifest file. A pair manifest lists the
//! files written by [`save_pairs`], one entry per pair.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::augment::{generate_pair, AugmentConfig, AugmentParams};
use crate::error::{Error, Result};
use crate::io;
use crate::volume::{LabelMap, Volume};

/// Augmentation stream offsets keep validation and test pairs disjoint from the
/// training samples (which use stream `epoch * n_train + i`).
pub const VAL_STREAM_BASE: u64 = 1 << 62;
pub const TEST_STREAM_BASE: u64 = 1 << 63;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub fixed: PathBuf,
    pub labels: PathBuf,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Subject {
    pub name: String,
    pub image: Volume,
    pub labels: LabelMap,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub train: Vec<Subject>,
    pub val: Vec<Subject>,
    pub test: Vec<Subject>,
}

impl Dataset {
    pub fn split(&self, s: Split) -> &[Subject] {
        match s {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.train.is_empty() && self.val.is_empty() && self.test.is_empty()
    }

    /// Sorted non-background labels over every subject.
    pub fn label_set(&self) -> Vec<u8> {
        let mut all: Vec<u8> = self
            .train
            .iter()
            .chain(&self.val)
            .chain(&self.test)
            .flat_map(|s| s.labels.labels().iter().copied())
            .filter(|&l| l != 0)
            .collect();
        all.sort_unstable();
        all.dedup();
        all
    }
}

pub(crate) fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, serde_json::to_string_pretty(value)?).map_err(|e| Error::io(path, e))
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

fn base_dir(path: &Path) -> PathBuf {
    path.parent().map(Path::to_path_buf).unwrap_or_default()
}

/// Reads a dataset manifest; returned paths are resolved against its directory.
pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let entries: Vec<ManifestEntry> = read_json(path)?;
    let base = base_dir(path);
    Ok(entries
        .into_iter()
        .map(|e| ManifestEntry {
            fixed: resolve(&base, &e.fixed),
            labels: resolve(&base, &e.labels),
            split: e.split,
        })
        .collect())
}

fn subject_name(p: &Path) -> String {
    let s = p
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    s.strip_suffix(".ddvol").unwrap_or(&s).to_string()
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let entries = read_manifest(path)?;
    if entries.is_empty() {
        return Err(Error::InvalidArgument(format!("manifest {} is empty", path.display())));
    }
    let mut ds = Dataset::default();
    for e in entries {
        let image = io::read_volume(&e.fixed)?;
        let labels = io::read_labels(&e.labels)?;
        image
            .grid
            .ensure_matches(&labels.grid, &format!("subject {}", e.fixed.display()))?;
        let s = Subject {
            name: subject_name(&e.fixed),
            image,
            labels,
        };
        match e.split {
            Split::Train => ds.train.push(s),
            Split::Val => ds.val.push(s),
            Split::Test => ds.test.push(s),
        }
    }
    Ok(ds)
}

/// Writes every subject as `<dir>/<name>.ddvol` + `<dir>/<name>_labels.ddvol` and
/// a `manifest.json` next to them; returns the manifest path.
pub fn save_dataset(dir: &Path, ds: &Dataset) -> Result<PathBuf> {
    let mut entries = Vec::new();
    for split in [Split::Train, Split::Val, Split::Test] {
        for s in ds.split(split) {
            let img = PathBuf::from(format!("{}.ddvol", s.name));
            let lab = PathBuf::from(format!("{}_labels.ddvol", s.name));
            io::write_volume(&dir.join(&img), &s.image)?;
            io::write_labels(&dir.join(&lab), &s.labels)?;
            entries.push(ManifestEntry {
                fixed: img,
                labels: lab,
                split,
            });
        }
    }
    let path = dir.join("manifest.json");
    write_json(&path, &entries)?;
    Ok(path)
}

/// A fixed/moving pair with the parameters that produced it.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalPair {
    pub name: String,
    pub fixed: Volume,
    pub fixed_labels: LabelMap,
    pub moving: Volume,
    pub moving_labels: LabelMap,
    pub params: AugmentParams,
}

/// `pairs_per_subject` pairs per subject, drawn from stream `base + k`.
pub fn make_pairs(
    subjects: &[Subject],
    cfg: &AugmentConfig,
    pairs_per_subject: usize,
    base: u64,
) -> Result<Vec<EvalPair>> {
    let mut out = Vec::with_capacity(subjects.len() * pairs_per_subject);
    for (si, s) in subjects.iter().enumerate() {
        for r in 0..pairs_per_subject {
            let index = base + (si * pairs_per_subject + r) as u64;
            let sample = generate_pair(&s.image, &s.labels, cfg, index)?;
            out.push(EvalPair {
                name: format!("{}_pair{r}", s.name),
                fixed: s.image.clone(),
                fixed_labels: s.labels.clone(),
                moving: sample.moving,
                moving_labels: sample.moving_labels,
                params: sample.params,
            });
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PairEntry {
    pub name: String,
    pub fixed: PathBuf,
    pub fixed_labels: PathBuf,
    pub moving: PathBuf,
    pub moving_labels: PathBuf,
    pub params: PathBuf,
}

/// Materialises pairs under `dir` (volumes plus a params sidecar per pair) and
/// writes `pairs.json`; returns its path.
pub fn save_pairs(dir: &Path, pairs: &[EvalPair]) -> Result<PathBuf> {
    let mut entries = Vec::with_capacity(pairs.len());
    for p in pairs {
        let e = PairEntry {
            name: p.name.clone(),
            fixed: format!("{}_fixed.ddvol", p.name).into(),
            fixed_labels: format!("{}_fixed_labels.ddvol", p.name).into(),
            moving: format!("{}_moving.ddvol", p.name).into(),
            moving_labels: format!("{}_moving_labels.ddvol", p.name).into(),
            params: format!("{}_params.json", p.name).into(),
        };
        io::write_volume(&dir.join(&e.fixed), &p.fixed)?;
        io::write_labels(&dir.join(&e.fixed_labels), &p.fixed_labels)?;
        io::write_volume(&dir.join(&e.moving), &p.moving)?;
        io::write_labels(&dir.join(&e.moving_labels), &p.moving_labels)?;
        write_json(&dir.join(&e.params), &p.params)?;
        entries.push(e);
    }
    let path = dir.join("pairs.json");
    write_json(&path, &entries)?;
    Ok(path)
}

pub fn load_pairs(path: &Path) -> Result<Vec<EvalPair>> {
    let entries: Vec<PairEntry> = read_json(path)?;
    let base = base_dir(path);
    entries
        .into_iter()
        .map(|e| {
            Ok(EvalPair {
                name: e.name,
                fixed: io::read_volume(&resolve(&base, &e.fixed))?,
                fixed_labels: io::read_labels(&resolve(&base, &e.fixed_labels))?,
                moving: io::read_volume(&resolve(&base, &e.moving))?,
                moving_labels: io::read_labels(&resolve(&base, &e.moving_labels))?,
                params: read_json(&resolve(&base, &e.params))?,
            })
        })
        .collect()
}
