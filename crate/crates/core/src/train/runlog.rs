use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::write_json;
use crate::error::{Error, Result};
use crate::train::checkpoint::sha256_hex;
use crate::weighting::{weight_history_csv, WeightRow};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub phase: String,
    /// Learning rate used during the epoch.
    pub lr: f64,
    /// The scheduler cut the rate after this epoch.
    pub lr_reduced: bool,
    pub train_loss: f64,
    /// `None` when there is no validation split (the training loss is monitored instead).
    pub val_loss: Option<f64>,
    /// Mean raw term values over the epoch's training samples.
    pub components: BTreeMap<String, f64>,
    /// Loss weights at the end of the epoch.
    pub weights: WeightRow,
    pub epoch_seconds: f64,
    pub on_the_fly: bool,
    pub encoder_digest: String,
    pub params_digest: String,
}

impl EpochRecord {
    pub fn monitored(&self) -> f64 {
        self.val_loss.unwrap_or(self.train_loss)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunLog {
    pub design: String,
    pub labels: Vec<u8>,
    pub epochs: Vec<EpochRecord>,
    /// First epoch of every phase after the first.
    pub phase_boundaries: Vec<usize>,
    pub best_epoch: Option<usize>,
    pub best_val_loss: Option<f64>,
}

impl RunLog {
    pub fn new(design: &str, labels: &[u8]) -> Self {
        Self {
            design: design.into(),
            labels: labels.to_vec(),
            epochs: Vec::new(),
            phase_boundaries: Vec::new(),
            best_epoch: None,
            best_val_loss: None,
        }
    }

    pub fn weight_history(&self) -> Vec<WeightRow> {
        self.epochs.iter().map(|e| e.weights.clone()).collect()
    }

    /// Epochs after which the learning rate was cut.
    pub fn reductions(&self) -> Vec<usize> {
        self.epochs.iter().filter(|e| e.lr_reduced).map(|e| e.epoch).collect()
    }

    pub fn mean_epoch_seconds(&self, skip: usize) -> Option<f64> {
        let t: Vec<f64> = self.epochs.iter().skip(skip).map(|e| e.epoch_seconds).collect();
        (!t.is_empty()).then(|| t.iter().sum::<f64>() / t.len() as f64)
    }

    /// Digest of everything except wall-clock timings, which never repeat.
    pub fn digest(&self) -> String {
        let mut c = self.clone();
        c.epochs.iter_mut().for_each(|e| e.epoch_seconds = 0.0);
        sha256_hex(serde_json::to_string(&c).expect("run log serialises").as_bytes())
    }

    pub fn to_csv(&self) -> String {
        let terms: Vec<String> = self
            .epochs
            .first()
            .map(|e| e.components.keys().cloned().collect())
            .unwrap_or_default();
        let mut s = String::from("epoch,phase,lr,lr_reduced,train_loss,val_loss");
        for t in &terms {
            s.push_str(&format!(",loss_{}", t.to_lowercase()));
        }
        s.push_str(",w_ncc,w_ssim,w_dsc,w_hd,lambda_reg,epoch_seconds,on_the_fly\n");
        for e in &self.epochs {
            s.push_str(&format!(
                "{},{},{},{},{},{}",
                e.epoch,
                e.phase,
                e.lr,
                e.lr_reduced,
                e.train_loss,
                e.val_loss.map(|v| v.to_string()).unwrap_or_default()
            ));
            for t in &terms {
                s.push_str(&format!(",{}", e.components.get(t).copied().unwrap_or(f64::NAN)));
            }
            let w = &e.weights;
            s.push_str(&format!(
                ",{},{},{},{},{},{:.6},{}\n",
                w.w_ncc, w.w_ssim, w.w_dsc, w.w_hd, w.lambda_reg, e.epoch_seconds, e.on_the_fly
            ));
        }
        s
    }

    /// Writes `<stem>.csv`, `<stem>.json` and `<stem>_weights.csv` into `dir`.
    pub fn save(&self, dir: &Path, stem: &str) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let csv = dir.join(format!("{stem}.csv"));
        std::fs::write(&csv, self.to_csv()).map_err(|e| Error::io(&csv, e))?;
        let w = dir.join(format!("{stem}_weights.csv"));
        std::fs::write(&w, weight_history_csv(&self.weight_history())).map_err(|e| Error::io(&w, e))?;
        write_json(&dir.join(format!("{stem}.json")), self)
    }
}
