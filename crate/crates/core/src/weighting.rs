//! Loss weights constrained to the probability simplex.
//!
//! Every loss term and every regulariser owns one logit; the weights are the
//! softmax of all logits jointly, so they stay strictly positive and sum to one.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::LossKind;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightState {
    /// One entry per term; `LossKind::Reg` entries are regularisers.
    pub kinds: Vec<LossKind>,
    pub logits: Vec<f64>,
    /// Fixed-weight designs keep their initial logits.
    pub trainable: bool,
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|&l| (l - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

/// Target weights: each regulariser gets `reg_weight / n_regs`, the losses split the rest equally.
pub fn initial_weights(n_losses: usize, n_regs: usize, reg_weight: f64) -> Result<Vec<f64>> {
    if n_losses == 0 {
        return Err(Error::InvalidArgument("at least one loss term is required".into()));
    }
    if n_regs > 0 && !(reg_weight > 0.0 && reg_weight < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "regulariser weight {reg_weight} outside (0, 1)"
        )));
    }
    let (loss_share, reg_share) = if n_regs == 0 {
        (1.0, 0.0)
    } else {
        (1.0 - reg_weight, reg_weight / n_regs as f64)
    };
    let mut w = vec![loss_share / n_losses as f64; n_losses];
    w.extend(std::iter::repeat_n(reg_share, n_regs));
    Ok(w)
}

/// Builds a state whose softmax weights equal [`initial_weights`] for `kinds`.
pub fn init_weights(kinds: &[LossKind], reg_weight: f64, trainable: bool) -> Result<WeightState> {
    let n_regs = kinds.iter().filter(|&&k| k == LossKind::Reg).count();
    let n_losses = kinds.len() - n_regs;
    let losses = initial_weights(n_losses, n_regs, reg_weight)?;
    let (mut li, mut ri) = (0, n_losses);
    let logits = kinds
        .iter()
        .map(|&k| {
            let w = if k == LossKind::Reg {
                ri += 1;
                losses[ri - 1]
            } else {
                li += 1;
                losses[li - 1]
            };
            w.ln()
        })
        .collect();
    Ok(WeightState {
        kinds: kinds.to_vec(),
        logits,
        trainable,
    })
}

impl WeightState {
    pub fn weights(&self) -> Vec<f64> {
        softmax(&self.logits)
    }

    pub fn len(&self) -> usize {
        self.kinds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.kinds.is_empty()
    }

    pub fn weight_of(&self, kind: LossKind) -> Option<f64> {
        let w = self.weights();
        self.kinds.iter().position(|&k| k == kind).map(|i| w[i])
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Combined {
    pub total: f64,
    pub weights: Vec<f64>,
    /// d total / d logit.
    pub d_logits: Vec<f64>,
}

/// `Σ w_k T_k` with `w = softmax(logits)`. The upstream gradient into term `k`
/// is `weights[k]`; into logit `k` it is `w_k (T_k − total)`.
pub fn combine(terms: &[f64], state: &WeightState) -> Result<Combined> {
    if terms.len() != state.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} loss terms for {} weights",
            terms.len(),
            state.len()
        )));
    }
    if let Some(i) = terms.iter().position(|t| !t.is_finite()) {
        return Err(Error::NonFinite(format!(
            "loss term {} is {}",
            state.kinds[i].name(),
            terms[i]
        )));
    }
    let weights = state.weights();
    let total: f64 = weights.iter().zip(terms).map(|(w, t)| w * t).sum();
    let d_logits = weights.iter().zip(terms).map(|(w, t)| w * (t - total)).collect();
    Ok(Combined {
        total,
        weights,
        d_logits,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightRow {
    pub epoch: usize,
    pub w_ncc: f64,
    pub w_ssim: f64,
    pub w_dsc: f64,
    pub w_hd: f64,
    pub lambda_reg: f64,
}

impl WeightRow {
    pub fn sum(&self) -> f64 {
        self.w_ncc + self.w_ssim + self.w_dsc + self.w_hd + self.lambda_reg
    }
}

/// Snapshot of the current weights; terms not in the design read as 0.
pub fn record_weights(state: &WeightState, epoch: usize) -> WeightRow {
    let mut row = WeightRow {
        epoch,
        w_ncc: 0.0,
        w_ssim: 0.0,
        w_dsc: 0.0,
        w_hd: 0.0,
        lambda_reg: 0.0,
    };
    for (k, w) in state.kinds.iter().zip(state.weights()) {
        let slot = match k {
            LossKind::Ncc => &mut row.w_ncc,
            LossKind::Ssim => &mut row.w_ssim,
            LossKind::Dice => &mut row.w_dsc,
            LossKind::Hd => &mut row.w_hd,
            LossKind::Reg => &mut row.lambda_reg,
        };
        *slot += w;
    }
    row
}

pub fn weight_history_csv(rows: &[WeightRow]) -> String {
    let mut s = String::from("epoch,w_ncc,w_ssim,w_dsc,w_hd,lambda_reg\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.epoch, r.w_ncc, r.w_ssim, r.w_dsc, r.w_hd, r.lambda_reg
        ));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use LossKind::*;

    #[test]
    fn init_examples() {
        let s = init_weights(&[Ncc, Ssim, Dice, Reg], 5e-3, true).unwrap();
        let w = s.weights();
        for (a, b) in w.iter().zip([0.995 / 3.0, 0.995 / 3.0, 0.995 / 3.0, 0.005]) {
            assert!((a - b).abs() < 1e-12);
        }
        let s = init_weights(&[Ncc, Dice], 5e-3, false).unwrap();
        assert_eq!(s.weights(), vec![0.5, 0.5]);
        assert!(init_weights(&[Reg], 5e-3, true).is_err());
        assert!(init_weights(&[Ncc, Reg], 1.0, true).is_err());
    }

    #[test]
    fn combine_examples() {
        let s = init_weights(&[Ncc, Dice], 0.5, true).unwrap();
        assert_eq!(combine(&[1.0, 1.0], &s).unwrap().total, 1.0);
        let s = init_weights(&[Ncc, Ssim, Dice, Reg], 5e-3, true).unwrap();
        let c = combine(&[1.0, 1.0, 1.0, 10.0], &s).unwrap();
        assert!((c.total - 1.045).abs() < 1e-12);
        let err = combine(&[1.0, f64::NAN, 1.0, 1.0], &s).unwrap_err();
        assert!(err.to_string().contains("SSIM"));
    }

    #[test]
    fn shift_invariance_and_history() {
        let mut s = init_weights(&[Ncc, Hd, Reg], 5e-3, true).unwrap();
        let before = combine(&[0.3, 2.0, 0.1], &s).unwrap().total;
        s.logits.iter_mut().for_each(|l| *l += 7.5);
        let after = combine(&[0.3, 2.0, 0.1], &s).unwrap().total;
        assert!((before - after).abs() < 1e-14);
        let row = record_weights(&s, 0);
        assert!((row.sum() - 1.0).abs() < 1e-12);
        assert_eq!(row.w_ssim, 0.0);
        let csv = weight_history_csv(&[row]);
        assert!(csv.starts_with("epoch,w_ncc,w_ssim,w_dsc,w_hd,lambda_reg\n0,"));
    }
}
