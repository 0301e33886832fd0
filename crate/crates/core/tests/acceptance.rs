//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Oracles here are written independently of the library code they check
//! (brute-force metric definitions, closed-form affine maps, replayed
//! scheduler rules). Run with `cargo test --release --test acceptance`.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ddreg::augment::{generate_pair, params_field, sample_params, AugmentConfig};
use ddreg::data::{make_pairs, Dataset, TEST_STREAM_BASE};
use ddreg::evaluation::{
    evaluate_model, initial_alignment, metric_dsc, metric_hd, metric_hd95, metric_ncc, metric_tre, register_pair,
};
use ddreg::gradcheck;
use ddreg::io;
use ddreg::nn::NetConfig;
use ddreg::synthetic::{synthetic_dataset, PhantomKind};
use ddreg::tps::{tps_evaluate, tps_fit, ControlGrid};
use ddreg::train::checkpoint::{load_checkpoint, params_digest, save_checkpoint};
use ddreg::train::{finetune_two_step, train, Checkpoint, Design, Plateau, RunLog, SchedulerConfig, TrainConfig};
use ddreg::volume::{DisplacementField, Grid, LabelMap, Volume};
use ddreg::warp::warp_trilinear;
use ddreg::weighting::{combine, softmax, WeightState};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

// ---------------------------------------------------------------- 1

fn gradient_oracles() -> Outcome {
    let t = Instant::now();
    let reports = gradcheck::run_all(20).expect("gradient checks run");
    let secs = t.elapsed().as_secs_f64();
    let mut lines = Vec::new();
    let mut ok = secs < 300.0;
    for r in &reports {
        ok &= r.passed() && r.seeds >= 20;
        let skipped = if r.skipped > 0 {
            format!(" ({} of {} skipped at kinks)", r.skipped, r.checked + r.skipped)
        } else {
            String::new()
        };
        lines.push(format!("{} {:.1e}/{:.0e}{skipped}", r.name, r.max_rel_err, r.tolerance));
    }
    outcome(ok, format!("{} in {secs:.1}s [{}]", reports.len(), lines.join(", ")))
}

// ---------------------------------------------------------------- 2

fn tps_exactness() -> Outcome {
    let mut worst_interp = 0.0f64;
    let mut worst_affine = 0.0f64;
    for (k, n) in [3usize, 4, 5].into_iter().enumerate() {
        let grid = Grid::new([11, 9, 10], [1.0, 1.5, 0.8], [-3.0, 2.0, 0.5]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(100 + k as u64);
        let mut cg = ControlGrid::uniform(&grid, [n, n, n]);
        for d in &mut cg.displacements {
            *d = [0, 1, 2].map(|_| rng.gen_range(-4.0..4.0));
        }
        let m = tps_fit(&cg, 0.0).unwrap();
        for (p, d) in cg.points.iter().zip(&cg.displacements) {
            let u = m.displacement(*p);
            for a in 0..3 {
                worst_interp = worst_interp.max((u[a] - d[a]).abs());
            }
        }

        let mut a = [[0.0; 3]; 3];
        for row in &mut a {
            for v in row.iter_mut() {
                *v = rng.gen_range(-0.1..0.1);
            }
        }
        let t = [0, 1, 2].map(|_| rng.gen_range(-5.0..5.0));
        let affine = |x: [f64; 3]| [0, 1, 2].map(|r| a[r][0] * x[0] + a[r][1] * x[1] + a[r][2] * x[2] + t[r]);
        let mut cg = ControlGrid::uniform(&grid, [n, n, n]);
        cg.displacements = cg.points.iter().map(|&p| affine(p)).collect();
        let m = tps_fit(&cg, 0.0).unwrap();
        let dense = tps_evaluate(&m, &grid);
        for (i, u) in dense.vectors.iter().enumerate() {
            let want = affine(grid.voxel_to_world(grid.coords(i).map(|c| c as f64)));
            for a in 0..3 {
                worst_affine = worst_affine.max((u[a] - want[a]).abs());
            }
        }
    }
    outcome(
        worst_interp <= 1e-9 && worst_affine <= 1e-7,
        format!("control residual {worst_interp:.2e} mm (≤1e-9), affine reproduction {worst_affine:.2e} mm (≤1e-7), grids 3³..5³"),
    )
}

// ---------------------------------------------------------------- 3

fn random_grid(rng: &mut ChaCha8Rng) -> Grid {
    // spacings with short binary expansions keep squared distances exact
    const SP: [f64; 5] = [0.5, 1.0, 1.25, 1.5, 2.0];
    let shape = [0, 1, 2].map(|_| rng.gen_range(3..=12));
    let spacing = [0, 1, 2].map(|_| SP[rng.gen_range(0..SP.len())]);
    Grid::new(shape, spacing, [0.0; 3]).unwrap()
}

fn random_mask(rng: &mut ChaCha8Rng, g: Grid) -> LabelMap {
    // a union of random boxes, sometimes sprinkled with noise
    let boxes: Vec<([usize; 3], [usize; 3])> = (0..rng.gen_range(1..4))
        .map(|_| {
            let lo = [0, 1, 2].map(|a| rng.gen_range(0..g.shape[a]));
            let hi = [0, 1, 2].map(|a| rng.gen_range(lo[a]..g.shape[a]));
            (lo, hi)
        })
        .collect();
    let noise = rng.gen_bool(0.3);
    let data = (0..g.len())
        .map(|i| {
            let c = g.coords(i);
            let inb = boxes
                .iter()
                .any(|(lo, hi)| (0..3).all(|a| c[a] >= lo[a] && c[a] <= hi[a]));
            let flip = noise && rng.gen_bool(0.05);
            u8::from(inb != flip) * 3
        })
        .collect();
    LabelMap::new(g, data).unwrap()
}

fn oracle_boundary(m: &LabelMap, label: u8) -> Vec<usize> {
    let g = m.grid;
    let mut out = Vec::new();
    for i in 0..g.len() {
        if m.data()[i] != label {
            continue;
        }
        let c = g.coords(i);
        let mut edge = false;
        for a in 0..3 {
            for s in [-1i64, 1] {
                let n = c[a] as i64 + s;
                if n < 0 || n >= g.shape[a] as i64 {
                    edge = true;
                } else {
                    let mut cc = c;
                    cc[a] = n as usize;
                    edge |= m.data()[g.index(cc[0], cc[1], cc[2])] != label;
                }
            }
        }
        if edge {
            out.push(i);
        }
    }
    out
}

fn world_dist(g: &Grid, i: usize, j: usize) -> f64 {
    let (a, b) = (g.coords(i), g.coords(j));
    let mut s = 0.0;
    for k in 0..3 {
        let d = (a[k] as f64 - b[k] as f64) * g.spacing[k];
        s += d * d;
    }
    s.sqrt()
}

fn oracle_directed(g: &Grid, from: &[usize], to: &[usize]) -> Vec<f64> {
    from.iter()
        .map(|&i| to.iter().map(|&j| world_dist(g, i, j)).fold(f64::INFINITY, f64::min))
        .collect()
}

fn oracle_percentile(mut v: Vec<f64>, p: f64) -> f64 {
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let r = p / 100.0 * (v.len() - 1) as f64;
    let (lo, hi) = (r.floor() as usize, r.ceil() as usize);
    if lo == hi {
        v[lo]
    } else {
        v[lo] + (r - lo as f64) * (v[hi] - v[lo])
    }
}

fn oracle_centroid(m: &LabelMap, label: u8) -> [f64; 3] {
    let g = m.grid;
    let mut s = [0.0; 3];
    let mut n = 0.0;
    for i in 0..g.len() {
        if m.data()[i] == label {
            let w = g.voxel_to_world(g.coords(i).map(|c| c as f64));
            for a in 0..3 {
                s[a] += w[a];
            }
            n += 1.0;
        }
    }
    s.map(|v| v / n)
}

fn oracle_ncc(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let mut sab = 0.0;
    let mut saa = 0.0;
    let mut sbb = 0.0;
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    sab / (saa * sbb).sqrt()
}

fn metric_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut mismatches = Vec::new();
    let mut worst_corr = 0.0f64;
    let mut worst_tre = 0.0f64;
    let cases = 200;
    for case in 0..cases {
        let g = random_grid(&mut rng);
        let a = random_mask(&mut rng, g);
        let b = random_mask(&mut rng, g);
        let l = 3;
        let (na, nb) = (a.count(l), b.count(l));
        let both = a
            .data()
            .iter()
            .zip(b.data())
            .filter(|(&x, &y)| x == l && y == l)
            .count();
        let dsc = metric_dsc(&a, &b, l).unwrap();
        let want_dsc = (na + nb > 0).then(|| 2.0 * both as f64 / (na + nb) as f64);
        if dsc != want_dsc {
            mismatches.push(format!("case {case} DSC {dsc:?} vs {want_dsc:?}"));
        }
        let hd = metric_hd(&a, &b, l).unwrap();
        let hd95 = metric_hd95(&a, &b, l).unwrap();
        let tre = metric_tre(&a, &b, l).unwrap();
        if na > 0 && nb > 0 {
            let (ba, bb) = (oracle_boundary(&a, l), oracle_boundary(&b, l));
            let mut pooled = oracle_directed(&g, &ba, &bb);
            pooled.extend(oracle_directed(&g, &bb, &ba));
            let want_hd = pooled.iter().copied().fold(0.0, f64::max);
            let want_hd95 = oracle_percentile(pooled, 95.0);
            if hd != Some(want_hd) {
                mismatches.push(format!("case {case} HD {hd:?} vs {want_hd}"));
            }
            if hd95 != Some(want_hd95) {
                mismatches.push(format!("case {case} HD95 {hd95:?} vs {want_hd95}"));
            }
            let (ca, cb) = (oracle_centroid(&a, l), oracle_centroid(&b, l));
            let want_tre = ((ca[0] - cb[0]).powi(2) + (ca[1] - cb[1]).powi(2) + (ca[2] - cb[2]).powi(2)).sqrt();
            match tre {
                Some(t) => worst_tre = worst_tre.max((t - want_tre).abs()),
                None => mismatches.push(format!("case {case} TRE undefined")),
            }
        } else if hd.is_some() || hd95.is_some() || tre.is_some() {
            mismatches.push(format!("case {case}: distance defined for an empty mask"));
        }

        let va: Vec<f64> = (0..g.len()).map(|_| rng.gen_range(0.0..1.0)).collect();
        let vb: Vec<f64> = va.iter().map(|v| 0.3 * v + rng.gen_range(0.0..1.0)).collect();
        let ncc = metric_ncc(
            &Volume::new(g, va.clone()).unwrap(),
            &Volume::new(g, vb.clone()).unwrap(),
        )
        .unwrap()
        .unwrap();
        worst_corr = worst_corr.max((ncc - oracle_ncc(&va, &vb)).abs());
    }
    let ok = mismatches.is_empty() && worst_corr <= 1e-10 && worst_tre <= 1e-10;
    let mut detail = format!(
        "{cases} cases; DSC/HD/HD95 exact mismatches {}, NCC err {worst_corr:.1e}, TRE err {worst_tre:.1e} (≤1e-10)",
        mismatches.len()
    );
    if let Some(m) = mismatches.first() {
        detail.push_str(&format!("; first: {m}"));
    }
    outcome(ok, detail)
}

// ---------------------------------------------------------------- 4

fn augmentation_contract() -> Outcome {
    let ds = synthetic_dataset(PhantomKind::Ellipsoids, 24, 1.5, [1, 0, 0], 11).unwrap();
    let fixed = ds.train[0].image.clone();
    let cfg = AugmentConfig {
        seed: 99,
        ..AugmentConfig::default()
    };
    let norm = |v: &[f64; 3]| (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    let mut violations = 0;
    let mut max_rot = 0.0f64;
    let mut max_trans = 0.0f64;
    let mut max_ctrl = 0.0f64;
    for index in 0..1000u64 {
        let p = sample_params(&fixed, &cfg, index);
        let rot = p.rotation_deg.iter().fold(0.0f64, |m, a| m.max(a.abs()));
        let trans = norm(&p.translation_mm);
        let ctrl = p.control_displacements.iter().map(norm).fold(0.0, f64::max);
        max_rot = max_rot.max(rot);
        max_trans = max_trans.max(trans);
        max_ctrl = max_ctrl.max(ctrl);
        let gamma_ok = (0.5..=2.0).contains(&p.gamma);
        let bright_ok = p.brightness.abs() <= 0.2;
        if rot > 10.0
            || trans > 30.0
            || ctrl > 6.0
            || !gamma_ok
            || !bright_ok
            || p != sample_params(&fixed, &cfg, index)
        {
            violations += 1;
        }
    }

    let labels = LabelMap::from_fn(fixed.grid, |c| u8::from(c[0] > 10) + u8::from(c[1] > 12));
    let mut regen_ok = true;
    let mut gt_exact = true;
    let geo = AugmentConfig {
        gamma_range: [1.0, 1.0],
        brightness_frac: 0.0,
        ..cfg.clone()
    };
    for index in [0u64, 7, 123, 999] {
        let s = generate_pair(&fixed, &labels, &cfg, index).unwrap();
        let again = generate_pair(&fixed, &labels, &cfg, index).unwrap();
        let bits = |v: &Volume| v.data.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        regen_ok &= bits(&s.moving) == bits(&again.moving)
            && s.moving_labels == again.moving_labels
            && s.params == again.params
            && params_field(&fixed, &s.params).unwrap() == s.gt_field;
        let g = generate_pair(&fixed, &labels, &geo, index).unwrap();
        let rewarped = warp_trilinear(&fixed, &g.gt_field).unwrap();
        gt_exact &= bits(&rewarped) == bits(&g.moving);
    }
    outcome(
        violations == 0 && regen_ok && gt_exact,
        format!(
            "1000 draws, {violations} out of bounds (max rot {max_rot:.2}°, trans {max_trans:.2} mm, control {max_ctrl:.2} mm); regeneration bit-identical {regen_ok}; gt-field warp exact {gt_exact}"
        ),
    )
}

// ---------------------------------------------------------------- 5

fn weighting() -> Outcome {
    let mut init_ok = true;
    for d in Design::ALL {
        let w = d.initial_weights(5e-3).unwrap().weights();
        let n = w.len() - 1;
        init_ok &= (w[n] - 5e-3).abs() <= 1e-12;
        init_ok &= w[..n].iter().all(|&x| (x - 0.995 / n as f64).abs() <= 1e-12);
    }

    // simplex along an optimisation trajectory of the logits
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut state = Design::UwNsdh.initial_weights(5e-3).unwrap();
    let mut adam = ddreg::train::Adam::new(&[state.len()]);
    let mut worst_sum = 0.0f64;
    for _ in 0..500 {
        let terms: Vec<f64> = (0..state.len()).map(|_| rng.gen_range(0.0..3.0)).collect();
        let c = combine(&terms, &state).unwrap();
        worst_sum = worst_sum.max((c.weights.iter().sum::<f64>() - 1.0).abs());
        let g = c.d_logits.clone();
        let mut slots = [state.logits.as_mut_slice()];
        adam.step(&mut slots, &[Some(&g)], 0.05).unwrap();
    }

    // and in the weights logged by a real training run
    let ds = synthetic_dataset(PhantomKind::Spheres, 16, 1.0, [2, 1, 0], 3).unwrap();
    let mut cfg = small_config(Design::UwNsdh);
    cfg.max_epochs = 3;
    let (_, log) = train(&ds, &cfg).unwrap();
    for row in log.weight_history() {
        worst_sum = worst_sum.max((row.sum() - 1.0).abs());
    }

    // logit gradient of the weighted sum against central differences
    let mut worst_fd = 0.0f64;
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(500 + seed);
        let n = rng.gen_range(2..=5);
        let logits: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let terms: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..4.0)).collect();
        let kinds = Design::UwNsdh.terms()[5 - n..].to_vec();
        let st = WeightState {
            kinds,
            logits: logits.clone(),
            trainable: true,
        };
        let c = combine(&terms, &st).unwrap();
        let total = |l: &[f64]| softmax(l).iter().zip(&terms).map(|(w, t)| w * t).sum::<f64>();
        for k in 0..n {
            let h = 1e-5;
            let (mut p, mut m) = (logits.clone(), logits.clone());
            p[k] += h;
            m[k] -= h;
            let fd = (total(&p) - total(&m)) / (2.0 * h);
            worst_fd = worst_fd.max((fd - c.d_logits[k]).abs() / fd.abs().max(c.d_logits[k].abs()).max(1e-3));
        }
    }
    outcome(
        init_ok && worst_sum <= 1e-12 && worst_fd <= 1e-6,
        format!("init {init_ok}; max |Σw − 1| {worst_sum:.1e} (≤1e-12); logit FD err {worst_fd:.1e} (≤1e-6)"),
    )
}

// ---------------------------------------------------------------- 6

fn small_config(design: Design) -> TrainConfig {
    TrainConfig {
        design,
        accumulation: 2,
        max_epochs: 3,
        seed: 4,
        net: NetConfig::tiny(&[4, 8], 8),
        ..TrainConfig::desk()
    }
}

fn bits(ck: &Checkpoint) -> Vec<u64> {
    ck.params
        .iter()
        .flat_map(|p| p.tensor.data.iter().map(|v| v.to_bits()))
        .chain(ck.weights.logits.iter().map(|v| v.to_bits()))
        .collect()
}

/// Independent replay of the plateau rule: the epochs whose observation
/// triggers a reduction.
fn replay_reductions(losses: &[f64], cfg: &SchedulerConfig) -> Vec<usize> {
    let mut best = f64::INFINITY;
    let mut wait = 0;
    let mut out = Vec::new();
    for (e, &l) in losses.iter().enumerate() {
        if best == f64::INFINITY || l < best - cfg.min_delta * best.abs() {
            best = l;
            wait = 0;
        } else {
            wait += 1;
            if wait >= cfg.patience {
                out.push(e);
                wait = 0;
            }
        }
    }
    out
}

fn determinism_and_scheduler() -> Outcome {
    let ds = synthetic_dataset(PhantomKind::Spheres, 16, 1.0, [3, 1, 0], 21).unwrap();
    let cfg = small_config(Design::UwNsdh);
    let run_with = |threads: usize| -> (Checkpoint, RunLog) {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| train(&ds, &cfg).unwrap())
    };
    let (c1, l1) = run_with(1);
    let (c3, l3) = run_with(3);
    let (c1b, _) = run_with(1);
    let deterministic = bits(&c1) == bits(&c3) && bits(&c1) == bits(&c1b) && l1.digest() == l3.digest();

    // a learning rate so small that the monitored loss cannot improve by min_delta
    let mut pcfg = small_config(Design::BlN);
    pcfg.lr = 1e-12;
    pcfg.max_epochs = 32;
    pcfg.accumulation = 3;
    let (ck, log) = train(&ds, &pcfg).unwrap();
    let vals: Vec<f64> = log.epochs.iter().map(|e| e.monitored()).collect();
    let want = replay_reductions(&vals, &pcfg.scheduler);
    let got = log.reductions();
    let mut factor_ok = true;
    for &e in &got {
        if let Some(next) = log.epochs.get(e + 1) {
            factor_ok &= next.lr == log.epochs[e].lr * 0.1;
        }
    }
    let plateau_ok = got == want && want.len() >= 2 && want[0] == 10;

    let min_val = vals.iter().copied().fold(f64::INFINITY, f64::min);
    let argmin = vals.iter().position(|&v| v == min_val).unwrap();
    let best_ok = ck.val_loss == Some(min_val)
        && ck.epoch == Some(argmin)
        && params_digest(&ck.params, "") == log.epochs[argmin].params_digest;

    // the scheduler on its own
    let mut p = Plateau::new(SchedulerConfig::default(), 1e-3);
    let mut reductions = Vec::new();
    for e in 0..35 {
        if p.observe(1.0) {
            reductions.push((e, p.lr));
        }
    }
    let standalone = reductions.len() == 3
        && reductions[0].0 == 10
        && reductions[1].0 == 20
        && reductions[0].1 == 1e-3 * 0.1
        && reductions[1].1 == 1e-3 * 0.1 * 0.1;

    outcome(
        deterministic && plateau_ok && factor_ok && best_ok && standalone,
        format!(
            "bit-identical across 1/3 threads {deterministic}; reductions at {got:?} (replayed {want:?}), ×0.1 {factor_ok}; best checkpoint = min val loss (epoch {argmin}) {best_ok}; standalone plateau {standalone}"
        ),
    )
}

// ---------------------------------------------------------------- 7

struct Desk {
    ds: Dataset,
    cfg: TrainConfig,
}

fn desk_setup() -> Desk {
    let ds = synthetic_dataset(PhantomKind::Spheres, 32, 1.0, [12, 2, 4], 7).unwrap();
    let cfg = TrainConfig {
        max_epochs: 200,
        net: NetConfig::tiny(&[4, 8], 8),
        ..TrainConfig::desk()
    };
    Desk { ds, cfg }
}

fn desk_experiment(desk: &Desk) -> (Outcome, Option<Checkpoint>) {
    let t = Instant::now();
    let pairs = make_pairs(&desk.ds.test, &desk.cfg.augment, 2, TEST_STREAM_BASE).unwrap();
    let initial = initial_alignment(&pairs).unwrap().row;
    let mut rows = BTreeMap::new();
    let mut sg = None;
    for d in [Design::BlN, Design::SgNd] {
        let cfg = TrainConfig {
            design: d,
            ..desk.cfg.clone()
        };
        let (ck, _) = train(&desk.ds, &cfg).unwrap();
        rows.insert(d.name(), evaluate_model(d.name(), &ck, &pairs).unwrap().row);
        if d == Design::SgNd {
            sg = Some(ck);
        }
    }
    let (bl, sgr) = (&rows["BL-N"], &rows["SG-ND"]);
    let ordering = sgr.dsc.mean > bl.dsc.mean && sgr.tre.mean < bl.tre.mean;
    let ratio = sgr.tre.mean / initial.tre.mean;
    let secs = t.elapsed().as_secs_f64();
    let o = outcome(
        ordering && ratio < 0.5 && secs < 1800.0,
        format!(
            "DSC SG-ND {:.3} vs BL-N {:.3}, TRE SG-ND {:.2} vs BL-N {:.2} mm; SG-ND TRE / initial {:.2}/{:.2} = {ratio:.2} (<0.5); {secs:.0}s",
            sgr.dsc.mean, bl.dsc.mean, sgr.tre.mean, bl.tre.mean, sgr.tre.mean, initial.tre.mean
        ),
    );
    (o, sg)
}

fn two_step_freeze(desk: &Desk, start: &Checkpoint) -> Outcome {
    let target = synthetic_dataset(PhantomKind::Ellipsoids, 32, 1.0, [3, 1, 0], 8).unwrap();
    let cfg = TrainConfig {
        design: Design::SgNd,
        max_epochs: 4,
        ..desk.cfg.clone()
    };
    let (_, log) = finetune_two_step(start, &target, &cfg, 2).unwrap();
    let enc0 = params_digest(&start.params, "enc");
    let frozen = log
        .epochs
        .iter()
        .filter(|e| e.phase == "decoder")
        .all(|e| e.encoder_digest == enc0);
    let decoder_moved = log
        .epochs
        .iter()
        .filter(|e| e.phase == "decoder")
        .all(|e| e.params_digest != params_digest(&start.params, ""));
    let thawed = log
        .epochs
        .iter()
        .filter(|e| e.phase == "full")
        .any(|e| e.encoder_digest != enc0);
    outcome(
        frozen && decoder_moved && thawed,
        format!("encoder bit-identical through phase 1 {frozen}; decoder updated {decoder_moved}; encoder updated in phase 2 {thawed}"),
    )
}

// ---------------------------------------------------------------- 8

fn augmentation_overhead(desk: &Desk) -> Outcome {
    let epochs = 6;
    let mk = |pre: bool| TrainConfig {
        design: Design::BlN,
        max_epochs: epochs,
        precompute_pairs: pre,
        ..desk.cfg.clone()
    };
    // interleaved repeats; the median epoch (first epoch of each run excluded)
    // keeps one-off stalls out of the ratio
    let median = |mut v: Vec<f64>| {
        v.sort_by(f64::total_cmp);
        let n = v.len();
        if n % 2 == 1 {
            v[n / 2]
        } else {
            0.5 * (v[n / 2 - 1] + v[n / 2])
        }
    };
    let (mut t_fly, mut t_pre) = (Vec::new(), Vec::new());
    let mut same = true;
    for _ in 0..2 {
        let (c_fly, l_fly) = train(&desk.ds, &mk(false)).unwrap();
        let (c_pre, l_pre) = train(&desk.ds, &mk(true)).unwrap();
        t_fly.extend(l_fly.epochs.iter().skip(1).map(|e| e.epoch_seconds));
        t_pre.extend(l_pre.epochs.iter().skip(1).map(|e| e.epoch_seconds));
        same &= bits(&c_fly) == bits(&c_pre);
    }
    let (fly, pre) = (median(t_fly), median(t_pre));
    let overhead = fly / pre - 1.0;
    outcome(
        overhead <= 0.25 && same,
        format!(
            "epoch {fly:.3}s on the fly vs {pre:.3}s precomputed: overhead {:.1}% (soft ceiling 25%); identical results {same}",
            overhead * 100.0
        ),
    )
}

// ---------------------------------------------------------------- 9

fn round_trips() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let g = Grid::new([7, 5, 6], [0.7, 1.3, 2.1], [-4.2, 0.3, 11.0]).unwrap();
    let v = Volume::new(g, (0..g.len()).map(|_| rng.gen_range(-1e3..1e3)).collect()).unwrap();
    let l = LabelMap::new(g, (0..g.len()).map(|_| rng.gen_range(0..5u8)).collect()).unwrap();
    let f = DisplacementField::new(
        g,
        (0..g.len())
            .map(|_| [0, 1, 2].map(|_| rng.gen_range(-9.0..9.0)))
            .collect(),
    )
    .unwrap();
    let p = |n: &str| dir.path().join(n);
    io::write_volume(&p("v.ddvol"), &v).unwrap();
    io::write_labels(&p("l.ddvol"), &l).unwrap();
    io::write_field(&p("f.ddvol"), &f).unwrap();
    let v2 = io::read_volume(&p("v.ddvol")).unwrap();
    let vol_ok = v2.grid == v.grid && v2.data.iter().zip(&v.data).all(|(a, b)| a.to_bits() == b.to_bits());
    let lab_ok = io::read_labels(&p("l.ddvol")).unwrap() == l;
    let f2 = io::read_field(&p("f.ddvol")).unwrap();
    let field_ok = f2.grid == f.grid
        && f2
            .vectors
            .iter()
            .flatten()
            .zip(f.vectors.iter().flatten())
            .all(|(a, b)| a.to_bits() == b.to_bits());

    let net = NetConfig::tiny(&[4, 8], 8);
    let mut ck = Checkpoint::fresh(&net, Design::UwNsdh.initial_weights(5e-3).unwrap(), 17).unwrap();
    ck.weights
        .logits
        .iter_mut()
        .for_each(|x| *x += rng.gen_range(-1.0..1.0));
    ck.epoch = Some(12);
    ck.val_loss = Some(0.1 + 1e-17);
    save_checkpoint(&p("m.ckpt"), &ck).unwrap();
    let ck2 = load_checkpoint(&p("m.ckpt")).unwrap();
    let ck_ok = bits(&ck2) == bits(&ck) && ck2 == ck;

    let id = Checkpoint::identity(&net).unwrap();
    let mut identity_ok = true;
    for shape in [[32, 32, 32], [20, 18, 22]] {
        let g = Grid::new(shape, [1.0, 1.2, 0.9], [0.0; 3]).unwrap();
        let fixed = Volume::new(g, (0..g.len()).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap();
        let moving = Volume::new(g, (0..g.len()).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap();
        let ml = LabelMap::new(g, (0..g.len()).map(|_| rng.gen_range(0..3u8)).collect()).unwrap();
        let (w, wl, _) = register_pair(&id, &fixed, &moving, Some(&ml)).unwrap();
        identity_ok &=
            w.data.iter().zip(&moving.data).all(|(a, b)| a.to_bits() == b.to_bits()) && wl.as_ref() == Some(&ml);
    }
    outcome(
        vol_ok && lab_ok && field_ok && ck_ok && identity_ok,
        format!("ddvol volume {vol_ok}, labels {lab_ok}, field {field_ok}; checkpoint {ck_ok}; identity register bit-exact {identity_ok}"),
    )
}

fn main() {
    // optional criterion ids as positional arguments, e.g. `-- 3 7c`
    let wanted: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let selected = |id: &str| wanted.is_empty() || wanted.iter().any(|w| id.starts_with(w.as_str()));
    let mut results: Vec<(Outcome, bool)> = Vec::new();
    let mut report = |id: &str, name: &str, o: Outcome, soft: bool| {
        println!("{} [{id}] {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        results.push((o, soft));
    };
    if selected("1") {
        report("1", "gradient oracle suite", gradient_oracles(), false);
    }
    if selected("2") {
        report("2", "TPS exactness", tps_exactness(), false);
    }
    if selected("3") {
        report("3", "metric oracles", metric_oracles(), false);
    }
    if selected("4") {
        report("4", "augmentation contract", augmentation_contract(), false);
    }
    if selected("5") {
        report("5", "loss weighting", weighting(), false);
    }
    if selected("6") {
        report("6", "determinism and scheduler", determinism_and_scheduler(), false);
    }
    let desk = desk_setup();
    if selected("7") {
        let (o7, sg) = desk_experiment(&desk);
        report("7ab", "desk experiment", o7, false);
        let start = sg.expect("SG-ND model trained");
        report("7c", "two-step encoder freeze", two_step_freeze(&desk, &start), false);
    }
    if selected("8") {
        report("8", "augmentation overhead", augmentation_overhead(&desk), true);
    }
    if selected("9") {
        report("9", "format round trips", round_trips(), false);
    }

    let hard = results.iter().filter(|(o, soft)| !o.pass && !soft).count();
    let soft = results.iter().filter(|(o, soft)| !o.pass && *soft).count();
    print!("{} criteria checked, {hard} failed", results.len());
    if soft > 0 {
        print!(", {soft} over a soft performance ceiling");
    }
    println!();
    if hard > 0 {
        std::process::exit(1);
    }
}
