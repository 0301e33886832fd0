//! Central finite-difference checks of every analytic gradient in the crate.
//!
//! Each check draws `seeds` random instances, evaluates the analytic gradient of
//! a scalar functional, and compares selected entries with
//! `(f(x + h) − f(x − h)) / 2h`. The error of one entry is
//! `|analytic − numeric| / max(|analytic|, |numeric|, floor)` where `floor` is
//! 1e-3 of the largest numeric gradient of that instance, so entries that are
//! zero up to rounding do not produce meaningless ratios. Inputs are drawn away
//! from the kinks of the piecewise-linear ops (ReLU at 0, pooling ties,
//! trilinear cell faces) so the derivative exists.
//!
//! The end-to-end network check cannot steer every hidden activation away from
//! a kink. It also evaluates `f(x)` and compares the one-sided slopes. A kink
//! inside `(x − h, x + h)` makes the central difference wrong by exactly half
//! their gap, so entries whose gap exceeds the tolerance are counted as skipped
//! instead of compared. A wrong analytic gradient leaves the slopes in
//! agreement and is still caught.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::Result;
use crate::losses::{loss_dice, loss_hd_approx, loss_ncc, loss_ssim, reg_smoothness, LossKind};
use crate::nn::ops;
use crate::nn::{init_parameters, NetConfig, Network, Tensor};
use crate::train::{prepare, sample_loss, Design};
use crate::volume::{DisplacementField, Grid, LabelMap, Volume};
use crate::warp::{warp_backward, warp_trilinear, OneHotStack};
use crate::weighting::{combine, WeightState};

pub const OP_TOLERANCE: f64 = 1e-4;
pub const NET_TOLERANCE: f64 = 1e-3;
pub const LOGIT_TOLERANCE: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradReport {
    pub name: String,
    pub seeds: usize,
    /// Gradient entries compared.
    pub checked: usize,
    /// Entries left out because a kink lay within the difference step.
    pub skipped: usize,
    pub max_rel_err: f64,
    pub tolerance: f64,
}

impl GradReport {
    pub fn passed(&self) -> bool {
        // at most one entry in ten may be lost to kinks
        self.max_rel_err <= self.tolerance && self.checked > 0 && self.skipped * 9 <= self.checked
    }
}

struct Acc {
    name: String,
    tol: f64,
    seeds: usize,
    checked: usize,
    skipped: usize,
    worst: f64,
    detect_kinks: bool,
}

impl Acc {
    fn new(name: &str, tol: f64) -> Self {
        Self {
            name: name.into(),
            tol,
            seeds: 0,
            checked: 0,
            skipped: 0,
            worst: 0.0,
            detect_kinks: false,
        }
    }

    /// Compares `analytic[i]` with the central difference of `f` at `x` for
    /// every index in `idx`, as one instance.
    fn compare(&mut self, f: &mut dyn FnMut(&[f64]) -> f64, x: &[f64], analytic: &[f64], idx: &[usize], h: f64) {
        let entries = self.measure(f, x, analytic, idx, h);
        self.score(&entries);
    }

    /// `(analytic, numeric, one-sided slope gap)` for every index in `idx`.
    fn measure(
        &self,
        f: &mut dyn FnMut(&[f64]) -> f64,
        x: &[f64],
        analytic: &[f64],
        idx: &[usize],
        h: f64,
    ) -> Vec<(f64, f64, f64)> {
        let mut x = x.to_vec();
        let f0 = if self.detect_kinks { f(&x) } else { 0.0 };
        idx.iter()
            .map(|&i| {
                let orig = x[i];
                x[i] = orig + h;
                let fp = f(&x);
                x[i] = orig - h;
                let fm = f(&x);
                x[i] = orig;
                (analytic[i], (fp - fm) / (2.0 * h), ((fp - f0) - (f0 - fm)).abs() / h)
            })
            .collect()
    }

    /// Scores the entries of one instance against its shared floor.
    fn score(&mut self, entries: &[(f64, f64, f64)]) {
        let floor = 1e-3 * entries.iter().fold(0.0f64, |m, e| m.max(e.1.abs())).max(1e-12);
        for &(a, n, gap) in entries {
            let scale = a.abs().max(n.abs()).max(floor);
            if self.detect_kinks && gap > self.tol * scale {
                self.skipped += 1;
                continue;
            }
            self.worst = self.worst.max((a - n).abs() / scale);
            self.checked += 1;
        }
    }

    fn finish(self) -> GradReport {
        GradReport {
            name: self.name,
            seeds: self.seeds,
            checked: self.checked,
            skipped: self.skipped,
            max_rel_err: self.worst,
            tolerance: self.tol,
        }
    }
}

fn rng_for(check: u64, seed: usize) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(0x6772_6164 ^ check);
    r.set_stream(seed as u64);
    r
}

fn random_vec(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(lo..hi)).collect()
}

fn all(n: usize) -> Vec<usize> {
    (0..n).collect()
}

fn subset(rng: &mut ChaCha8Rng, n: usize, k: usize) -> Vec<usize> {
    let mut v = all(n);
    v.shuffle(rng);
    v.truncate(k);
    v
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn check_conv3d(seeds: usize) -> Result<GradReport> {
    let mut acc = Acc::new("conv3d", OP_TOLERANCE);
    for s in 0..seeds {
        let mut rng = rng_for(1, s);
        let xs = [1, 2, 4, 4, 4];
        let ks = [3, 2, 3, 3, 3];
        let bs = [1, 1, 1, 1, 3];
        let x = Tensor::new(xs, random_vec(&mut rng, 128, -1.0, 1.0))?;
        let k = Tensor::new(ks, random_vec(&mut rng, 162, -1.0, 1.0))?;
        let b = Tensor::new(bs, random_vec(&mut rng, 3, -1.0, 1.0))?;
        let y = ops::conv3d(&x, &k, &b)?;
        let r = random_vec(&mut rng, y.len(), -1.0, 1.0);
        let gy = Tensor::new(y.shape, r.clone())?;
        let g = ops::conv3d_backward(&x, &k, &gy, true, true);
        let gx = g.input.expect("input gradient").data;
        let gk = g.kernel.expect("kernel gradient");
        let gb = g.bias.expect("bias gradient");
        let h = 1e-5;
        acc.compare(
            &mut |v| {
                dot(
                    &ops::conv3d(&Tensor::new(xs, v.to_vec()).unwrap(), &k, &b).unwrap().data,
                    &r,
                )
            },
            &x.data,
            &gx,
            &all(128),
            h,
        );
        acc.compare(
            &mut |v| {
                dot(
                    &ops::conv3d(&x, &Tensor::new(ks, v.to_vec()).unwrap(), &b).unwrap().data,
                    &r,
                )
            },
            &k.data,
            &gk,
            &all(162),
            h,
        );
        acc.compare(
            &mut |v| {
                dot(
                    &ops::conv3d(&x, &k, &Tensor::new(bs, v.to_vec()).unwrap()).unwrap().data,
                    &r,
                )
            },
            &b.data,
            &gb,
            &all(3),
            h,
        );
        acc.seeds += 1;
    }
    Ok(acc.finish())
}

pub fn check_leaky_relu(seeds: usize) -> Result<GradReport> {
    let mut acc = Acc::new("leaky_relu", OP_TOLERANCE);
    for s in 0..seeds {
        let mut rng = rng_for(2, s);
        let shape = [1, 2, 3, 3, 3];
        let x: Vec<f64> = (0..54)
            .map(|_| {
                let m = rng.gen_range(0.05..2.0);
                if rng.gen_bool(0.5) {
                    m
                } else {
                    -m
                }
            })
            .collect();
        let slope = rng.gen_range(0.05..0.5);
        let r = random_vec(&mut rng, 54, -1.0, 1.0);
        let xt = Tensor::new(shape, x.clone())?;
        let g = ops::leaky_relu_backward(&xt, slope, &r);
        acc.compare(
            &mut |v| {
                dot(
                    &ops::leaky_relu(&Tensor::new(shape, v.to_vec()).unwrap(), slope).data,
                    &r,
                )
            },
            &x,
            &g,
            &all(54),
            1e-6,
        );
        acc.seeds += 1;
    }
    Ok(acc.finish())
}

pub fn check_maxpool3d(seeds: usize) -> Result<GradReport> {
    let mut acc = Acc::new("maxpool3d", OP_TOLERANCE);
    for s in 0..seeds {
        let mut rng = rng_for(3, s);
        let shape = [1, 2, 4, 4, 2];
        let n = 64;
        // distinct values at least 0.01 apart: no ties within the step
        let mut x: Vec<f64> = (0..n).map(|i| i as f64 * 0.01).collect();
        x.shuffle(&mut rng);
        let (y, arg) = ops::maxpool3d(&Tensor::new(shape, x.clone())?)?;
        let r = random_vec(&mut rng, y.len(), -1.0, 1.0);
        let g = ops::maxpool3d_backward(n, &arg, &r);
        acc.compare(
            &mut |v| {
                dot(
                    &ops::maxpool3d(&Tensor::new(shape, v.to_vec()).unwrap()).unwrap().0.data,
                    &r,
                )
            },
            &x,
            &g,
            &all(n),
            1e-5,
        );
        acc.seeds += 1;
    }
    Ok(acc.finish())
}

pub fn check_upsample_nn(seeds: usize) -> Result<GradReport> {
    let mut acc = Acc::new("upsample_nn", OP_TOLERANCE);
    for s in 0..seeds {
        let mut rng = rng_for(4, s);
        let shape = [1, 2, 2, 3, 2];
        let x = random_vec(&mut rng, 24, -1.0, 1.0);
        let y = ops::upsample_nn(&Tensor::new(shape, x.clone())?);
        let r = random_vec(&mut rng, y.len(), -1.0, 1.0);
        let g = ops::upsample_nn_backward(shape, &r);
        acc.compare(
            &mut |v| dot(&ops::upsample_nn(&Tensor::new(shape, v.to_vec()).unwrap()).data, &r),
            &x,
            &g,
            &all(24),
            1e-5,
        );
        acc.seeds += 1;
    }
    Ok(acc.finish())
}

/// Field whose source points sit strictly inside lattice cells (fractional parts
/// in [0.15, 0.85]) and away from the clamped border.
fn interior_field(rng: &mut ChaCha8Rng, g: Grid) -> DisplacementField {
    let vectors = (0..g.len())
        .map(|i| {
            let c = g.coords(i);
            let mut v = [0.0; 3];
            for a in 0..3 {
                let cell = rng.gen_range(0..g.shape[a] - 1) as f64;
                let src = cell + rng.gen_range(0.15..0.85);
                v[a] = (src - c[a] as f64) * g.spacing[a];
            }
            v
        })
        .collect();
    DisplacementField::new(g, vectors).expect("finite field")
}

fn flatten(f: &DisplacementField) -> Vec<f64> {
    f.vectors.iter().flatten().copied().collect()
}

fn unflatten(g: Grid, v: &[f64]) -> DisplacementField {
    DisplacementField::new(g, v.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect()).expect("finite field")
}

pub fn check_warp_trilinear(seeds: usize) -> Result<GradReport> {
    let mut acc = Acc::new("warp_trilinear", OP_TOLERANCE);
    for s in 0..seeds {
        let mut rng = rng_for(5, s);
        let g = Grid::new([5, 4, 4], [1.0, 1.5, 0.75], [0.0; 3])?;
        let v = Volume::new(g, random_vec(&mut rng, g.len(), 0.0, 1.0))?;
        let f = interior_field(&mut rng, g);
        let r = Volume::new(g, random_vec(&mut rng, g.len(), -1.0, 1.0))?;
        let (gv, gf) = warp_backward(&v, &f, &r)?;
        acc.compare(
            &mut |x| {
                dot(
                    &warp_trilinear(&Volume::new(g, x.to_vec()).unwrap(), &f).unwrap().data,
                    &r.data,
                )
            },
            &v.data,
            &gv.data,
            &all(g.len()),
            1e-5,
        );
        acc.compare(
            &mut |x| dot(&warp_trilinear(&v, &unflatten(g, x)).unwrap().data, &r.data),
            &flatten(&f),
            &flatten(&gf),
            &all(3 * g.len()),
            1e-6,
        );
        acc.seeds += 1;
    }
    Ok(acc.finish())
}

fn soft_stack(rng: &mut ChaCha8Rng, g: Grid, labels: &[u8]) -> OneHotStack {
    OneHotStack {
        grid: g,
        labels: labels.to_vec(),
        channels: labels.iter().map(|_| random_vec(rng, g.len(), 0.05, 0.95)).collect(),
    }
}

fn stack_from_flat(like: &OneHotStack, v: &[f64]) -> OneHotStack {
    let n = like.grid.len();
    OneHotStack {
        grid: like.grid,
        labels: like.labels.clone(),
        channels: v.chunks_exact(n).map(<[f64]>::to_vec).collect(),
    }
}

pub fn check_losses(seeds: usize) -> Result<Vec<GradReport>> {
    let mut ncc = Acc::new("loss_ncc", OP_TOLERANCE);
    let mut ssim = Acc::new("loss_ssim", OP_TOLERANCE);
    let mut dice = Acc::new("loss_dice", OP_TOLERANCE);
    let mut hd = Acc::new("loss_hd_approx", OP_TOLERANCE);
    let mut reg = Acc::new("reg_smoothness", OP_TOLERANCE);
    for s in 0..seeds {
        let mut rng = rng_for(6, s);
        let g = Grid::new([5, 5, 5], [1.0, 1.25, 0.8], [0.0; 3])?;
        let p = Volume::new(g, random_vec(&mut rng, g.len(), 0.0, 1.0))?;
        let f = Volume::new(g, random_vec(&mut rng, g.len(), 0.0, 1.0))?;
        let (_, gn) = loss_ncc(&p, &f)?;
        ncc.compare(
            &mut |x| loss_ncc(&Volume::new(g, x.to_vec()).unwrap(), &f).unwrap().0.value,
            &p.data,
            &gn,
            &all(g.len()),
            1e-6,
        );
        let g9 = Grid::new([9, 8, 7], [1.0, 1.0, 1.0], [0.0; 3])?;
        let p9 = Volume::new(g9, random_vec(&mut rng, g9.len(), 0.0, 1.0))?;
        let f9 = Volume::new(g9, random_vec(&mut rng, g9.len(), 0.0, 1.0))?;
        let (_, gs) = loss_ssim(&p9, &f9)?;
        let idx = subset(&mut rng, g9.len(), 60);
        ssim.compare(
            &mut |x| loss_ssim(&Volume::new(g9, x.to_vec()).unwrap(), &f9).unwrap().0.value,
            &p9.data,
            &gs,
            &idx,
            1e-6,
        );

        let labels = [1u8, 2];
        let ps = soft_stack(&mut rng, g, &labels);
        let fm = LabelMap::new(g, (0..g.len()).map(|_| rng.gen_range(0..3u8)).collect())?;
        let fs = OneHotStack::from_labels(&fm, &labels);
        let flat: Vec<f64> = ps.channels.concat();
        let (_, gd) = loss_dice(&ps, &fs)?;
        dice.compare(
            &mut |x| loss_dice(&stack_from_flat(&ps, x), &fs).unwrap().0.value,
            &flat,
            &gd.concat(),
            &all(flat.len()),
            1e-6,
        );
        let dts = labels
            .iter()
            .map(|&l| crate::losses::distance_transform(&fm, l))
            .collect::<Result<Vec<_>>>()?;
        let (_, gh) = loss_hd_approx(&ps, &fs, &dts)?;
        hd.compare(
            &mut |x| loss_hd_approx(&stack_from_flat(&ps, x), &fs, &dts).unwrap().0.value,
            &flat,
            &gh.concat(),
            &all(flat.len()),
            1e-6,
        );

        let field = DisplacementField::new(
            g,
            (0..g.len())
                .map(|_| {
                    [
                        rng.gen_range(-2.0..2.0),
                        rng.gen_range(-2.0..2.0),
                        rng.gen_range(-2.0..2.0),
                    ]
                })
                .collect(),
        )?;
        let (_, gr) = reg_smoothness(&field);
        reg.compare(
            &mut |x| reg_smoothness(&unflatten(g, x)).0.value,
            &flatten(&field),
            &gr.iter().flatten().copied().collect::<Vec<_>>(),
            &all(3 * g.len()),
            1e-5,
        );
        for a in [&mut ncc, &mut ssim, &mut dice, &mut hd, &mut reg] {
            a.seeds += 1;
        }
    }
    Ok(vec![
        ncc.finish(),
        ssim.finish(),
        dice.finish(),
        hd.finish(),
        reg.finish(),
    ])
}

/// Gradient of the weighted sum with respect to the logits.
pub fn check_combine(seeds: usize) -> Result<GradReport> {
    let mut acc = Acc::new("combine", LOGIT_TOLERANCE);
    let kinds = [
        LossKind::Ncc,
        LossKind::Ssim,
        LossKind::Dice,
        LossKind::Hd,
        LossKind::Reg,
    ];
    for s in 0..seeds {
        let mut rng = rng_for(7, s);
        let n = rng.gen_range(2..=5);
        let state = WeightState {
            kinds: kinds[5 - n..].to_vec(),
            logits: random_vec(&mut rng, n, -3.0, 3.0),
            trainable: true,
        };
        let terms = random_vec(&mut rng, n, 0.0, 5.0);
        let c = combine(&terms, &state)?;
        acc.compare(
            &mut |l| {
                let st = WeightState {
                    logits: l.to_vec(),
                    ..state.clone()
                };
                combine(&terms, &st).unwrap().total
            },
            &state.logits,
            &c.d_logits,
            &all(n),
            1e-5,
        );
        acc.seeds += 1;
    }
    Ok(acc.finish())
}

/// Whole training objective (network, warp, every loss, weighting) with respect
/// to sampled entries of every parameter tensor of a depth-2 network.
pub fn check_network(seeds: usize, per_tensor: usize) -> Result<GradReport> {
    let mut acc = Acc::new("network end-to-end", NET_TOLERANCE);
    acc.detect_kinks = true;
    let cfg = NetConfig::tiny(&[4, 8], 16);
    let g = Grid::isotropic([16, 16, 16], 1.0)?;
    for s in 0..seeds {
        let mut rng = rng_for(8, s);
        let mut params = init_parameters(&cfg, s as u64)?;
        for p in params.iter_mut() {
            // non-zero output layer and biases so the field is not identically zero
            let scale = if p.name.starts_with("out") { 0.05 } else { 0.1 };
            if p.name.ends_with("bias") || p.name.starts_with("out") {
                p.tensor.data.iter_mut().for_each(|v| *v = rng.gen_range(-scale..scale));
            }
        }
        let fixed_labels = LabelMap::from_fn(g, |c| {
            let d2 = (0..3).map(|a| (c[a] as f64 - 7.5).powi(2)).sum::<f64>();
            u8::from(d2 < 30.0) + u8::from(d2 < 8.0)
        });
        let fixed = Volume::from_fn(g, |c| {
            let d2 = (0..3).map(|a| (c[a] as f64 - 7.5).powi(2)).sum::<f64>();
            0.1 + 0.8 * (-d2 / 40.0).exp()
        });
        let moving = Volume::new(
            g,
            fixed
                .data
                .iter()
                .map(|v| (v + rng.gen_range(-0.05..0.05)).clamp(0.0, 1.0))
                .collect(),
        )?;
        let moving_labels = LabelMap::from_fn(g, |c| {
            let d2 = (0..3).map(|a| (c[a] as f64 - 8.3).powi(2)).sum::<f64>();
            u8::from(d2 < 30.0) + u8::from(d2 < 8.0)
        });
        let design = Design::UwNsdh;
        let mut weights = design.initial_weights(5e-3)?;
        weights.logits.iter_mut().for_each(|l| *l += rng.gen_range(-0.5..0.5));
        let prep = prepare(&fixed, &fixed_labels, &[1, 2], true)?;
        let net = Network::bind(&cfg, &params)?;
        let out = sample_loss(&net, &params, &weights, &prep, &moving, &moving_labels, true)?;
        let grads = out.param_grads.expect("gradients requested");
        let mut entries = Vec::new();
        for pid in 0..params.len() {
            let analytic = grads[pid].clone().expect("trainable parameter");
            let n = analytic.len();
            let idx = subset(&mut rng, n, per_tensor.min(n));
            let base = params.get(pid).tensor.data.clone();
            let mut work = params.clone();
            entries.extend(acc.measure(
                &mut |x| {
                    work.get_mut(pid).tensor.data.copy_from_slice(x);
                    sample_loss(&net, &work, &weights, &prep, &moving, &moving_labels, false)
                        .map(|o| o.total)
                        .unwrap_or(f64::NAN)
                },
                &base,
                &analytic,
                &idx,
                1e-6,
            ));
        }
        acc.score(&entries);
        acc.seeds += 1;
    }
    Ok(acc.finish())
}

/// Every check with `seeds` instances each.
pub fn run_all(seeds: usize) -> Result<Vec<GradReport>> {
    let mut out = vec![
        check_conv3d(seeds)?,
        check_leaky_relu(seeds)?,
        check_maxpool3d(seeds)?,
        check_upsample_nn(seeds)?,
        check_warp_trilinear(seeds)?,
    ];
    out.extend(check_losses(seeds)?);
    out.push(check_combine(seeds)?);
    out.push(check_network(seeds, 2)?);
    Ok(out)
}
