//! Training losses, the smoothness regulariser and the Euclidean distance transform.
//!
//! Every loss returns its value together with the gradient with respect to its
//! differentiable input (the predicted image, the warped soft labels, or the field).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par;
use crate::volume::{DisplacementField, Grid, LabelMap, Volume};
use crate::warp::OneHotStack;

pub const NCC_EPS: f64 = 1e-8;
pub const SSIM_RADIUS: usize = 3;
pub const SSIM_C1: f64 = 1e-4;
pub const SSIM_C2: f64 = 9e-4;
pub const DICE_EPS: f64 = 1e-7;
pub const HD_EPS: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LossKind {
    #[serde(rename = "NCC")]
    Ncc,
    #[serde(rename = "SSIM")]
    Ssim,
    #[serde(rename = "DSC")]
    Dice,
    #[serde(rename = "HD")]
    Hd,
    #[serde(rename = "REG")]
    Reg,
}

impl LossKind {
    pub fn name(self) -> &'static str {
        match self {
            LossKind::Ncc => "NCC",
            LossKind::Ssim => "SSIM",
            LossKind::Dice => "DSC",
            LossKind::Hd => "HD",
            LossKind::Reg => "REG",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossValue {
    pub kind: LossKind,
    pub value: f64,
    /// Input was degenerate (e.g. constant images for NCC).
    pub degenerate: bool,
    /// Labels left out of a label loss because they were empty.
    pub skipped_labels: Vec<u8>,
}

impl LossValue {
    fn new(kind: LossKind, value: f64) -> Self {
        Self {
            kind,
            value,
            degenerate: false,
            skipped_labels: Vec::new(),
        }
    }
}

fn same_len(a: usize, b: usize, what: &str) -> Result<()> {
    if a == b {
        Ok(())
    } else {
        Err(Error::ShapeMismatch(format!("{what}: {a} vs {b} values")))
    }
}

/// Standard deviations at rounding level of the mean count as zero.
fn flat_to_zero(sd: f64, mean: f64) -> f64 {
    if sd <= 1e-12 * mean.abs().max(1.0) {
        0.0
    } else {
        sd
    }
}

/// Global zero-normalised cross-correlation `cov / (σ_a σ_b + ε)`.
/// Returns `(zncc, degenerate)`.
pub fn zncc(a: &[f64], b: &[f64]) -> (f64, bool) {
    let n = a.len() as f64;
    let ma = par::sum_range(a.len(), |i| a[i]) / n;
    let mb = par::sum_range(b.len(), |i| b[i]) / n;
    let sab = par::sum_range(a.len(), |i| (a[i] - ma) * (b[i] - mb)) / n;
    let sa = flat_to_zero((par::sum_range(a.len(), |i| (a[i] - ma).powi(2)) / n).sqrt(), ma);
    let sb = flat_to_zero((par::sum_range(b.len(), |i| (b[i] - mb).powi(2)) / n).sqrt(), mb);
    let denom = sa * sb;
    (sab / (denom + NCC_EPS), denom == 0.0)
}

/// `1 − ZNCC(pred, fixed)` and its gradient with respect to `pred`.
pub fn loss_ncc(pred: &Volume, fixed: &Volume) -> Result<(LossValue, Vec<f64>)> {
    same_len(pred.data.len(), fixed.data.len(), "loss_ncc")?;
    let (p, f) = (&pred.data, &fixed.data);
    let n = p.len() as f64;
    let mp = par::sum_range(p.len(), |i| p[i]) / n;
    let mf = par::sum_range(f.len(), |i| f[i]) / n;
    let cov = par::sum_range(p.len(), |i| (p[i] - mp) * (f[i] - mf)) / n;
    let sp = flat_to_zero((par::sum_range(p.len(), |i| (p[i] - mp).powi(2)) / n).sqrt(), mp);
    let sf = flat_to_zero((par::sum_range(f.len(), |i| (f[i] - mf).powi(2)) / n).sqrt(), mf);
    let d = sp * sf + NCC_EPS;
    let z = cov / d;
    let mut lv = LossValue::new(LossKind::Ncc, 1.0 - z);
    lv.degenerate = sp * sf == 0.0;
    let second = if sp > 0.0 { cov * sf / (sp * d * d) } else { 0.0 };
    let grad = par::map_range(p.len(), |i| -((f[i] - mf) / d - second * (p[i] - mp)) / n);
    Ok((lv, grad))
}

/// Sum over the window `|offset|∞ ≤ radius`, truncated at the borders.
pub(crate) fn box_sum(data: &[f64], shape: [usize; 3], radius: usize) -> Vec<f64> {
    let mut cur = data.to_vec();
    let strides = [1, shape[0], shape[0] * shape[1]];
    for axis in 0..3 {
        let n = shape[axis];
        let stride = strides[axis];
        let mut next = vec![0.0; cur.len()];
        let total = cur.len();
        // every line along `axis` starts at an index whose `axis` coordinate is 0
        let starts: Vec<usize> = (0..total).filter(|&i| (i / stride).is_multiple_of(n)).collect();
        let src = &cur;
        let lines: Vec<Vec<f64>> = par::map_range(starts.len(), |k| {
            let s = starts[k];
            let mut prefix = vec![0.0; n + 1];
            for j in 0..n {
                prefix[j + 1] = prefix[j] + src[s + j * stride];
            }
            (0..n)
                .map(|j| {
                    let lo = j.saturating_sub(radius);
                    let hi = (j + radius + 1).min(n);
                    prefix[hi] - prefix[lo]
                })
                .collect()
        });
        for (k, line) in lines.into_iter().enumerate() {
            let s = starts[k];
            for (j, v) in line.into_iter().enumerate() {
                next[s + j * stride] = v;
            }
        }
        cur = next;
    }
    cur
}

fn window_counts(shape: [usize; 3], radius: usize) -> Vec<f64> {
    let count = |j: usize, n: usize| ((j + radius + 1).min(n) - j.saturating_sub(radius)) as f64;
    let g = Grid {
        shape,
        spacing: [1.0; 3],
        origin: [0.0; 3],
    };
    (0..g.len())
        .map(|i| {
            let c = g.coords(i);
            count(c[0], shape[0]) * count(c[1], shape[1]) * count(c[2], shape[2])
        })
        .collect()
}

struct SsimMaps {
    ssim: Vec<f64>,
    /// ∂S/∂μ_pred, ∂S/∂E[pred²], ∂S/∂E[pred·fixed] per window, already divided by the window count.
    d_mu: Vec<f64>,
    d_exx: Vec<f64>,
    d_exy: Vec<f64>,
}

fn ssim_maps(p: &[f64], f: &[f64], shape: [usize; 3], want_grad: bool) -> SsimMaps {
    let r = SSIM_RADIUS;
    let cnt = window_counts(shape, r);
    let sp = box_sum(p, shape, r);
    let sf = box_sum(f, shape, r);
    let pp: Vec<f64> = p.iter().map(|v| v * v).collect();
    let ff: Vec<f64> = f.iter().map(|v| v * v).collect();
    let pf: Vec<f64> = p.iter().zip(f).map(|(a, b)| a * b).collect();
    let spp = box_sum(&pp, shape, r);
    let sff = box_sum(&ff, shape, r);
    let spf = box_sum(&pf, shape, r);
    let n = p.len();
    let mut out = SsimMaps {
        ssim: vec![0.0; n],
        d_mu: Vec::new(),
        d_exx: Vec::new(),
        d_exy: Vec::new(),
    };
    if want_grad {
        out.d_mu = vec![0.0; n];
        out.d_exx = vec![0.0; n];
        out.d_exy = vec![0.0; n];
    }
    for i in 0..n {
        let k = cnt[i];
        let (mx, my) = (sp[i] / k, sf[i] / k);
        let (exx, eyy, exy) = (spp[i] / k, sff[i] / k, spf[i] / k);
        let vx = exx - mx * mx;
        let vy = eyy - my * my;
        let cxy = exy - mx * my;
        let n1 = 2.0 * mx * my + SSIM_C1;
        let n2 = 2.0 * cxy + SSIM_C2;
        let d1 = mx * mx + my * my + SSIM_C1;
        let d2 = vx + vy + SSIM_C2;
        let s = n1 * n2 / (d1 * d2);
        out.ssim[i] = s;
        if want_grad {
            let dmu = (2.0 * my * n2 + n1 * (-2.0 * my)) / (d1 * d2) - s * (2.0 * mx / d1 + (-2.0 * mx) / d2);
            out.d_mu[i] = dmu / k;
            out.d_exx[i] = (-s / d2) / k;
            out.d_exy[i] = (2.0 * n1 / (d1 * d2)) / k;
        }
    }
    out
}

/// Mean local SSIM over 7×7×7 windows (truncated at borders).
pub fn ssim_value(a: &Volume, b: &Volume) -> Result<f64> {
    same_len(a.data.len(), b.data.len(), "ssim")?;
    let m = ssim_maps(&a.data, &b.data, a.grid.shape, false);
    Ok(par::compensated_sum(m.ssim.iter().copied()) / m.ssim.len() as f64)
}

/// `1 − mean SSIM` and its gradient with respect to `pred`.
pub fn loss_ssim(pred: &Volume, fixed: &Volume) -> Result<(LossValue, Vec<f64>)> {
    same_len(pred.data.len(), fixed.data.len(), "loss_ssim")?;
    let shape = pred.grid.shape;
    let m = ssim_maps(&pred.data, &fixed.data, shape, true);
    let n = m.ssim.len() as f64;
    let mean = par::compensated_sum(m.ssim.iter().copied()) / n;
    // symmetric truncated windows: u ∈ W(v) ⇔ v ∈ W(u), so the adjoint is another box sum
    let a = box_sum(&m.d_mu, shape, SSIM_RADIUS);
    let b = box_sum(&m.d_exx, shape, SSIM_RADIUS);
    let c = box_sum(&m.d_exy, shape, SSIM_RADIUS);
    let (p, f) = (&pred.data, &fixed.data);
    let grad = (0..p.len())
        .map(|u| -(a[u] + 2.0 * p[u] * b[u] + f[u] * c[u]) / n)
        .collect();
    Ok((LossValue::new(LossKind::Ssim, 1.0 - mean), grad))
}

fn check_stacks(a: &OneHotStack, b: &OneHotStack, what: &str) -> Result<()> {
    if a.channels.len() != b.channels.len() {
        return Err(Error::ShapeMismatch(format!(
            "{what}: {} vs {} channels",
            a.channels.len(),
            b.channels.len()
        )));
    }
    for (x, y) in a.channels.iter().zip(&b.channels) {
        same_len(x.len(), y.len(), what)?;
    }
    Ok(())
}

/// `1 − mean soft Dice` over labels present in either stack, with gradients
/// with respect to every channel of `pred`.
pub fn loss_dice(pred: &OneHotStack, fixed: &OneHotStack) -> Result<(LossValue, Vec<Vec<f64>>)> {
    check_stacks(pred, fixed, "loss_dice")?;
    let mut lv = LossValue::new(LossKind::Dice, 0.0);
    let mut grads = Vec::with_capacity(pred.channels.len());
    let mut dices = Vec::new();
    let mut active = Vec::new();
    for (c, (p, q)) in pred.channels.iter().zip(&fixed.channels).enumerate() {
        let sp: f64 = p.iter().sum();
        let sq: f64 = q.iter().sum();
        if sp.abs() + sq.abs() <= 1e-12 {
            lv.skipped_labels.push(pred.labels.get(c).copied().unwrap_or(0));
            grads.push(vec![0.0; p.len()]);
            continue;
        }
        let num = 2.0 * par::sum_range(p.len(), |i| p[i] * q[i]);
        let den = par::sum_range(p.len(), |i| p[i] * p[i] + q[i] * q[i]) + DICE_EPS;
        dices.push(num / den);
        active.push(c);
        grads.push(
            p.iter()
                .zip(q)
                .map(|(&pi, &qi)| (2.0 * qi * den - num * 2.0 * pi) / (den * den))
                .collect(),
        );
    }
    if dices.is_empty() {
        lv.degenerate = true;
        return Ok((lv, grads));
    }
    let k = dices.len() as f64;
    lv.value = 1.0 - dices.iter().sum::<f64>() / k;
    for c in active {
        grads[c].iter_mut().for_each(|g| *g *= -1.0 / k);
    }
    Ok((lv, grads))
}

/// Distance-map surrogate of the Hausdorff distance: per label, the
/// probability-weighted mean squared distance (mm²) of predicted mass to the
/// fixed mask, averaged over labels. One-sided by construction.
pub fn loss_hd_approx(
    pred: &OneHotStack,
    fixed: &OneHotStack,
    dt_fixed: &[Volume],
) -> Result<(LossValue, Vec<Vec<f64>>)> {
    check_stacks(pred, fixed, "loss_hd_approx")?;
    if dt_fixed.len() != pred.channels.len() {
        return Err(Error::ShapeMismatch("one distance map per label is required".into()));
    }
    let mut lv = LossValue::new(LossKind::Hd, 0.0);
    let mut grads = Vec::with_capacity(pred.channels.len());
    let mut terms = Vec::new();
    let mut active = Vec::new();
    for (c, ((p, q), dt)) in pred.channels.iter().zip(&fixed.channels).zip(dt_fixed).enumerate() {
        same_len(p.len(), dt.data.len(), "loss_hd_approx distance map")?;
        if q.iter().all(|&v| v == 0.0) {
            lv.skipped_labels.push(pred.labels.get(c).copied().unwrap_or(0));
            grads.push(vec![0.0; p.len()]);
            continue;
        }
        let d2: Vec<f64> = dt.data.iter().map(|d| d * d).collect();
        let mass = par::sum_range(p.len(), |i| p[i]) + HD_EPS;
        let num = par::sum_range(p.len(), |i| p[i] * d2[i]);
        terms.push(num / mass);
        active.push(c);
        grads.push(d2.iter().map(|&d| (d * mass - num) / (mass * mass)).collect());
    }
    if terms.is_empty() {
        lv.degenerate = true;
        return Ok((lv, grads));
    }
    let k = terms.len() as f64;
    lv.value = terms.iter().sum::<f64>() / k;
    for c in active {
        grads[c].iter_mut().for_each(|g| *g /= k);
    }
    Ok((lv, grads))
}

/// Diffusion regulariser: `(1/3) Σ_c Σ_d mean over valid forward differences of
/// (ΔΦ_c / h_d)²`, with its gradient with respect to the field.
pub fn reg_smoothness(field: &DisplacementField) -> (LossValue, Vec<[f64; 3]>) {
    let g = field.grid;
    let n = g.len();
    let strides = [1, g.shape[0], g.shape[0] * g.shape[1]];
    let mut value = 0.0;
    let mut grad = vec![[0.0; 3]; n];
    for d in 0..3 {
        if g.shape[d] < 2 {
            continue;
        }
        let pairs = n / g.shape[d] * (g.shape[d] - 1);
        let h2 = g.spacing[d] * g.spacing[d];
        let scale = 1.0 / (3.0 * pairs as f64 * h2);
        let mut acc = 0.0;
        for i in 0..n {
            if g.coords(i)[d] + 1 == g.shape[d] {
                continue;
            }
            let j = i + strides[d];
            for c in 0..3 {
                let diff = field.vectors[j][c] - field.vectors[i][c];
                acc += diff * diff;
                grad[j][c] += 2.0 * diff * scale;
                grad[i][c] -= 2.0 * diff * scale;
            }
        }
        value += acc * scale;
    }
    (LossValue::new(LossKind::Reg, value), grad)
}

/// Exact Euclidean distance (mm) from every voxel centre to the nearest voxel
/// carrying `label`.
pub fn distance_transform(mask: &LabelMap, label: u8) -> Result<Volume> {
    if label == 0 || !mask.contains(label) {
        return Err(Error::LabelAbsent {
            label,
            context: " for distance transform".into(),
        });
    }
    let sites: Vec<bool> = mask.data().iter().map(|&v| v == label).collect();
    let d2 = squared_edt(&sites, &mask.grid);
    Ok(Volume {
        grid: mask.grid,
        data: d2.into_iter().map(f64::sqrt).collect(),
    })
}

/// Squared EDT of a boolean site mask by separable lower envelopes of parabolas
/// (Felzenszwalb–Huttenlocher), one axis at a time.
pub(crate) fn squared_edt(sites: &[bool], grid: &Grid) -> Vec<f64> {
    let mut cur: Vec<f64> = sites.iter().map(|&s| if s { 0.0 } else { f64::INFINITY }).collect();
    let shape = grid.shape;
    let strides = [1, shape[0], shape[0] * shape[1]];
    for axis in 0..3 {
        let n = shape[axis];
        let stride = strides[axis];
        let w = grid.spacing[axis];
        let starts: Vec<usize> = (0..cur.len()).filter(|&i| (i / stride).is_multiple_of(n)).collect();
        let src = &cur;
        let lines: Vec<Vec<f64>> = par::map_range(starts.len(), |k| {
            let s = starts[k];
            let f: Vec<f64> = (0..n).map(|j| src[s + j * stride]).collect();
            envelope_1d(&f, w)
        });
        let mut next = vec![0.0; cur.len()];
        for (k, line) in lines.into_iter().enumerate() {
            let s = starts[k];
            for (j, v) in line.into_iter().enumerate() {
                next[s + j * stride] = v;
            }
        }
        cur = next;
    }
    cur
}

#[inline]
fn sq(delta: f64, w: f64) -> f64 {
    let d = delta * w;
    d * d
}

/// `out[q] = min_p f[p] + ((q − p)·w)²`.
fn envelope_1d(f: &[f64], w: f64) -> Vec<f64> {
    let n = f.len();
    let mut out = vec![f64::INFINITY; n];
    let finite: Vec<usize> = (0..n).filter(|&p| f[p].is_finite()).collect();
    if finite.is_empty() {
        return out;
    }
    let w2 = w * w;
    let mut v: Vec<usize> = Vec::with_capacity(finite.len());
    let mut z: Vec<f64> = Vec::with_capacity(finite.len() + 1);
    for &q in &finite {
        loop {
            match v.last() {
                None => {
                    v.push(q);
                    z.clear();
                    z.push(f64::NEG_INFINITY);
                    break;
                }
                Some(&p) => {
                    let s = ((f[q] + w2 * (q * q) as f64) - (f[p] + w2 * (p * p) as f64))
                        / (2.0 * w2 * (q as f64 - p as f64));
                    if s <= *z.last().expect("z tracks v") {
                        v.pop();
                        z.pop();
                        if v.is_empty() {
                            continue;
                        }
                    } else {
                        v.push(q);
                        z.push(s);
                        break;
                    }
                }
            }
        }
    }
    let mut k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while k + 1 < v.len() && z[k + 1] < q as f64 {
            k += 1;
        }
        // the envelope picks the minimiser; evaluate the exact candidates around it
        let mut best = f[v[k]] + sq(q as f64 - v[k] as f64, w);
        if k + 1 < v.len() {
            best = best.min(f[v[k + 1]] + sq(q as f64 - v[k + 1] as f64, w));
        }
        *o = best;
    }
    out
}
