//! Registration metrics, per-pair evaluation of a trained model, and report tables.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::EvalPair;
use crate::error::{Error, Result};
use crate::losses::{squared_edt, ssim_value};
use crate::nn::unet_forward;
use crate::par;
use crate::train::Checkpoint;
use crate::volume::{centroid_mm, resize, DisplacementField, LabelMap, Resample, Volume};
use crate::warp::{warp_nearest, warp_trilinear};

/// Global ZNCC; `None` when either image is constant.
pub fn metric_ncc(a: &Volume, b: &Volume) -> Result<Option<f64>> {
    a.grid.ensure_matches(&b.grid, "metric_ncc")?;
    let n = a.data.len() as f64;
    let ma = par::sum_range(a.data.len(), |i| a.data[i]) / n;
    let mb = par::sum_range(b.data.len(), |i| b.data[i]) / n;
    let sab = par::sum_range(a.data.len(), |i| (a.data[i] - ma) * (b.data[i] - mb)) / n;
    let saa = par::sum_range(a.data.len(), |i| (a.data[i] - ma).powi(2)) / n;
    let sbb = par::sum_range(b.data.len(), |i| (b.data[i] - mb).powi(2)) / n;
    let (sa, sb) = (saa.sqrt(), sbb.sqrt());
    let flat = |s: f64, m: f64| s <= 1e-12 * m.abs().max(1.0);
    if flat(sa, ma) || flat(sb, mb) {
        return Ok(None);
    }
    Ok(Some(sab / (sa * sb)))
}

/// Mean windowed SSIM, reported raw.
pub fn metric_ssim(a: &Volume, b: &Volume) -> Result<f64> {
    a.grid.ensure_matches(&b.grid, "metric_ssim")?;
    ssim_value(a, b)
}

/// Hard Dice; `None` when `label` is absent from both maps.
pub fn metric_dsc(a: &LabelMap, b: &LabelMap, label: u8) -> Result<Option<f64>> {
    a.grid.ensure_matches(&b.grid, "metric_dsc")?;
    let (mut na, mut nb, mut both) = (0usize, 0usize, 0usize);
    for (&x, &y) in a.data().iter().zip(b.data()) {
        let (ia, ib) = (x == label, y == label);
        na += usize::from(ia);
        nb += usize::from(ib);
        both += usize::from(ia && ib);
    }
    if na + nb == 0 {
        return Ok(None);
    }
    Ok(Some(2.0 * both as f64 / (na + nb) as f64))
}

/// Voxels of `label` with at least one 6-neighbour outside the label (voxels
/// on the volume border count as boundary).
pub fn boundary(m: &LabelMap, label: u8) -> Vec<bool> {
    let g = m.grid;
    let d = m.data();
    let [nx, ny, nz] = g.shape;
    (0..g.len())
        .map(|i| {
            if d[i] != label {
                return false;
            }
            let [x, y, z] = g.coords(i);
            let inside = |xx: usize, yy: usize, zz: usize| d[g.index(xx, yy, zz)] == label;
            !(x > 0
                && x + 1 < nx
                && y > 0
                && y + 1 < ny
                && z > 0
                && z + 1 < nz
                && inside(x - 1, y, z)
                && inside(x + 1, y, z)
                && inside(x, y - 1, z)
                && inside(x, y + 1, z)
                && inside(x, y, z - 1)
                && inside(x, y, z + 1))
        })
        .collect()
}

/// Distances (mm) from every boundary voxel of `from` to the nearest boundary
/// voxel of `to`.
fn directed_distances(from: &[bool], to: &[bool], grid: &crate::volume::Grid) -> Vec<f64> {
    let d2 = squared_edt(to, grid);
    from.iter()
        .zip(&d2)
        .filter(|(&f, _)| f)
        .map(|(_, &d)| d.sqrt())
        .collect()
}

fn surface_distances(a: &LabelMap, b: &LabelMap, label: u8) -> Result<Option<Vec<f64>>> {
    a.grid.ensure_matches(&b.grid, "surface distance")?;
    if !a.contains(label) || !b.contains(label) || label == 0 {
        return Ok(None);
    }
    let ba = boundary(a, label);
    let bb = boundary(b, label);
    let mut pooled = directed_distances(&ba, &bb, &a.grid);
    let back = directed_distances(&bb, &ba, &a.grid);
    pooled.extend(back);
    Ok(Some(pooled))
}

/// Symmetric Hausdorff distance between the label boundaries (mm); `None` when
/// the label is missing on either side.
pub fn metric_hd(a: &LabelMap, b: &LabelMap, label: u8) -> Result<Option<f64>> {
    Ok(surface_distances(a, b, label)?.map(|d| d.into_iter().fold(0.0, f64::max)))
}

/// 95th percentile (linear interpolation) of the pooled directed boundary distances.
pub fn metric_hd95(a: &LabelMap, b: &LabelMap, label: u8) -> Result<Option<f64>> {
    Ok(surface_distances(a, b, label)?.map(|d| percentile(d, 95.0)))
}

/// Percentile with linear interpolation between closest ranks, rank `p/100·(n−1)`.
pub fn percentile(mut v: Vec<f64>, p: f64) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(f64::total_cmp);
    let r = p / 100.0 * (v.len() - 1) as f64;
    let lo = r.floor() as usize;
    let hi = r.ceil() as usize;
    let t = r - lo as f64;
    if t == 0.0 {
        v[lo]
    } else {
        v[lo] + t * (v[hi] - v[lo])
    }
}

/// Distance between label centroids in world space (mm); `None` when the label
/// is missing on either side.
pub fn metric_tre(fixed: &LabelMap, pred: &LabelMap, label: u8) -> Result<Option<f64>> {
    fixed.grid.ensure_matches(&pred.grid, "metric_tre")?;
    if label == 0 || !fixed.contains(label) || !pred.contains(label) {
        return Ok(None);
    }
    let a = centroid_mm(fixed, label)?;
    let b = centroid_mm(pred, label)?;
    Ok(Some(
        ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt(),
    ))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairMetrics {
    pub name: String,
    pub ssim: f64,
    pub ncc: Option<f64>,
    /// Means over the labels for which the metric is defined.
    pub dsc: Option<f64>,
    pub hd: Option<f64>,
    pub hd95: Option<f64>,
    pub tre: Option<f64>,
    pub runtime_s: f64,
    /// Labels of the fixed map that vanished from the registered map.
    pub missing_labels: Vec<u8>,
}

fn mean_defined(v: &[Option<f64>]) -> Option<f64> {
    let d: Vec<f64> = v.iter().flatten().copied().collect();
    (!d.is_empty()).then(|| par::compensated_sum(d.iter().copied()) / d.len() as f64)
}

/// All metrics of a registered pair.
pub fn pair_metrics(
    name: &str,
    fixed: &Volume,
    fixed_labels: &LabelMap,
    pred: &Volume,
    pred_labels: &LabelMap,
    labels: &[u8],
    runtime_s: f64,
) -> Result<PairMetrics> {
    let mut dsc = Vec::new();
    let mut hd = Vec::new();
    let mut hd95 = Vec::new();
    let mut tre = Vec::new();
    let mut missing = Vec::new();
    for &l in labels {
        if fixed_labels.contains(l) && !pred_labels.contains(l) {
            missing.push(l);
        }
        dsc.push(metric_dsc(fixed_labels, pred_labels, l)?);
        let d = surface_distances(fixed_labels, pred_labels, l)?;
        hd.push(d.as_ref().map(|d| d.iter().copied().fold(0.0, f64::max)));
        hd95.push(d.map(|d| percentile(d, 95.0)));
        tre.push(metric_tre(fixed_labels, pred_labels, l)?);
    }
    Ok(PairMetrics {
        name: name.into(),
        ssim: metric_ssim(pred, fixed)?,
        ncc: metric_ncc(pred, fixed)?,
        dsc: mean_defined(&dsc),
        hd: mean_defined(&hd),
        hd95: mean_defined(&hd95),
        tre: mean_defined(&tre),
        runtime_s,
        missing_labels: missing,
    })
}

/// Smallest shape ≥ `shape` whose axes are multiples of `2^depth`.
pub fn network_shape(shape: [usize; 3], depth: usize) -> [usize; 3] {
    let m = 1usize << depth;
    shape.map(|n| n.div_ceil(m).max(1) * m)
}

/// Predicts Φ on the pair's own grid: if the grid is not a legal network input,
/// both images are resized to the nearest legal shape and the predicted field
/// is resampled back.
pub fn predict_field(ck: &Checkpoint, fixed: &Volume, moving: &Volume) -> Result<DisplacementField> {
    fixed.grid.ensure_matches(&moving.grid, "predict_field")?;
    if ck.net.check_input(fixed.grid.shape).is_ok() {
        return unet_forward(fixed, moving, &ck.params, &ck.net);
    }
    let shape = network_shape(fixed.grid.shape, ck.net.depth);
    let f = resize(fixed, shape)?;
    let m = resize(moving, shape)?;
    let field = unet_forward(&f, &m, &ck.params, &ck.net)?;
    Ok(field.resample_onto(fixed.grid))
}

/// Registers one pair: returns the warped image, warped labels and the field.
pub fn register_pair(
    ck: &Checkpoint,
    fixed: &Volume,
    moving: &Volume,
    moving_labels: Option<&LabelMap>,
) -> Result<(Volume, Option<LabelMap>, DisplacementField)> {
    let field = predict_field(ck, fixed, moving)?;
    let warped = warp_trilinear(moving, &field)?;
    let labels = moving_labels.map(|m| warp_nearest(m, &field)).transpose()?;
    Ok((warped, labels, field))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    /// Unbiased (n − 1) estimator; 0 for a single sample.
    pub std: f64,
    pub n: usize,
    /// Pairs where the metric was undefined.
    pub excluded: usize,
}

impl Stat {
    pub fn from_values(values: &[Option<f64>]) -> Self {
        let d: Vec<f64> = values.iter().flatten().copied().collect();
        let n = d.len();
        let excluded = values.len() - n;
        if n == 0 {
            return Self {
                mean: f64::NAN,
                std: f64::NAN,
                n,
                excluded,
            };
        }
        let mean = par::compensated_sum(d.iter().copied()) / n as f64;
        let std = if n > 1 {
            (par::compensated_sum(d.iter().map(|x| (x - mean).powi(2))) / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        Self { mean, std, n, excluded }
    }
}

pub const METRICS: [&str; 7] = ["SSIM", "NCC", "DSC", "HD", "HD95", "TRE", "Runtime"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub method: String,
    pub n_pairs: usize,
    pub ssim: Stat,
    pub ncc: Stat,
    pub dsc: Stat,
    pub hd: Stat,
    pub hd95: Stat,
    pub tre: Stat,
    pub runtime: Stat,
    /// Label disappearances summed over pairs.
    pub missing_labels: usize,
}

impl MetricRow {
    pub fn from_pairs(method: &str, pairs: &[PairMetrics]) -> Self {
        let col = |f: &dyn Fn(&PairMetrics) -> Option<f64>| -> Stat {
            Stat::from_values(&pairs.iter().map(f).collect::<Vec<_>>())
        };
        Self {
            method: method.into(),
            n_pairs: pairs.len(),
            ssim: col(&|p| Some(p.ssim)),
            ncc: col(&|p| p.ncc),
            dsc: col(&|p| p.dsc),
            hd: col(&|p| p.hd),
            hd95: col(&|p| p.hd95),
            tre: col(&|p| p.tre),
            runtime: col(&|p| Some(p.runtime_s)),
            missing_labels: pairs.iter().map(|p| p.missing_labels.len()).sum(),
        }
    }

    pub fn stats(&self) -> [Stat; 7] {
        [
            self.ssim,
            self.ncc,
            self.dsc,
            self.hd,
            self.hd95,
            self.tre,
            self.runtime,
        ]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub pairs: Vec<PairMetrics>,
    pub row: MetricRow,
}

/// Evaluates `ck` on pre-generated pairs. Only prediction and application of
/// the field are timed.
pub fn evaluate_model(method: &str, ck: &Checkpoint, pairs: &[EvalPair]) -> Result<Evaluation> {
    if pairs.is_empty() {
        return Err(Error::InvalidArgument("no evaluation pairs".into()));
    }
    let mut registered = Vec::with_capacity(pairs.len());
    for p in pairs {
        let t0 = Instant::now();
        let (warped, labels, _) = register_pair(ck, &p.fixed, &p.moving, Some(&p.moving_labels))?;
        let secs = t0.elapsed().as_secs_f64();
        registered.push((warped, labels.expect("labels requested"), secs));
    }
    let metrics = par::map_range(pairs.len(), |k| {
        let p = &pairs[k];
        let (w, l, s) = &registered[k];
        let labels: Vec<u8> = p.fixed_labels.labels().iter().copied().filter(|&l| l != 0).collect();
        pair_metrics(&p.name, &p.fixed, &p.fixed_labels, w, l, &labels, *s)
    });
    let metrics = metrics.into_iter().collect::<Result<Vec<_>>>()?;
    let row = MetricRow::from_pairs(method, &metrics);
    Ok(Evaluation { pairs: metrics, row })
}

/// Metrics of the unregistered pairs (moving image taken as the prediction).
pub fn initial_alignment(pairs: &[EvalPair]) -> Result<Evaluation> {
    let metrics = pairs
        .iter()
        .map(|p| {
            let labels: Vec<u8> = p.fixed_labels.labels().iter().copied().filter(|&l| l != 0).collect();
            pair_metrics(
                &p.name,
                &p.fixed,
                &p.fixed_labels,
                &p.moving,
                &p.moving_labels,
                &labels,
                0.0,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let row = MetricRow::from_pairs("initial", &metrics);
    Ok(Evaluation { pairs: metrics, row })
}

fn higher_is_better(metric: usize) -> bool {
    metric < 3
}

/// Index of the best row per metric: best mean, then lower std, then first row.
pub fn best_rows(rows: &[MetricRow]) -> [Option<usize>; 7] {
    let mut out = [None; 7];
    for (m, slot) in out.iter_mut().enumerate() {
        let mut best: Option<(usize, Stat)> = None;
        for (i, r) in rows.iter().enumerate() {
            let s = r.stats()[m];
            if s.n == 0 || !s.mean.is_finite() {
                continue;
            }
            let better = match best {
                None => true,
                Some((_, b)) => {
                    let (x, y) = if higher_is_better(m) {
                        (s.mean, b.mean)
                    } else {
                        (-s.mean, -b.mean)
                    };
                    x > y || (x == y && s.std < b.std)
                }
            };
            if better {
                best = Some((i, s));
            }
        }
        *slot = best.map(|(i, _)| i);
    }
    out
}

/// Aligned plain-text table (best entries wrapped in `**`) and the matching CSV.
pub fn report_table(rows: &[MetricRow]) -> (String, String) {
    let best = best_rows(rows);
    let fmt_cell = |s: &Stat, m: usize| -> String {
        if s.n == 0 {
            return "n/a".into();
        }
        if m == 6 {
            format!("{:.4}±{:.4}", s.mean, s.std)
        } else {
            format!("{:.3}±{:.3}", s.mean, s.std)
        }
    };
    let mut cells: Vec<Vec<String>> = vec![std::iter::once("Method".to_string())
        .chain(METRICS.iter().map(|m| {
            if *m == "HD" || *m == "HD95" || *m == "TRE" {
                format!("{m} (mm)")
            } else if *m == "Runtime" {
                "Runtime (s)".to_string()
            } else {
                m.to_string()
            }
        }))
        .collect()];
    for (i, r) in rows.iter().enumerate() {
        let mut line = vec![r.method.clone()];
        for (m, s) in r.stats().iter().enumerate() {
            let c = fmt_cell(s, m);
            line.push(if best[m] == Some(i) { format!("**{c}**") } else { c });
        }
        cells.push(line);
    }
    let widths: Vec<usize> = (0..cells[0].len())
        .map(|c| cells.iter().map(|l| l[c].chars().count()).max().unwrap_or(0))
        .collect();
    let mut text = String::new();
    for (k, line) in cells.iter().enumerate() {
        let padded: Vec<String> = line
            .iter()
            .zip(&widths)
            .map(|(s, &w)| format!("{s}{}", " ".repeat(w - s.chars().count())))
            .collect();
        text.push_str(padded.join("  ").trim_end());
        text.push('\n');
        if k == 0 {
            let rule: Vec<String> = widths.iter().map(|&w| "-".repeat(w)).collect();
            text.push_str(&rule.join("  "));
            text.push('\n');
        }
    }
    let mut csv = String::from("method,n_pairs");
    for m in METRICS {
        let m = m.to_lowercase();
        csv.push_str(&format!(",{m}_mean,{m}_std,{m}_n,{m}_best"));
    }
    csv.push('\n');
    for (i, r) in rows.iter().enumerate() {
        csv.push_str(&format!("{},{}", r.method, r.n_pairs));
        for (m, s) in r.stats().iter().enumerate() {
            csv.push_str(&format!(",{},{},{},{}", s.mean, s.std, s.n, best[m] == Some(i)));
        }
        csv.push('\n');
    }
    (text, csv)
}
