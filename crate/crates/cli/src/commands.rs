use std::fs;
use std::path::{Path, PathBuf};

use ddreg::data::{self, Dataset, EvalPair, Split, Subject, TEST_STREAM_BASE, VAL_STREAM_BASE};
use ddreg::evaluation::{evaluate_model, initial_alignment, register_pair, report_table, Evaluation};
use ddreg::gradcheck;
use ddreg::io;
use ddreg::synthetic::synthetic_dataset;
use ddreg::train::checkpoint::{blob_path, sha256_hex};
use ddreg::train::{self, load_checkpoint, save_checkpoint, Checkpoint, Design, RunLog};
use ddreg::volume::{crop_labels, crop_to_mask, normalize_intensity, resample_isotropic, resize};

use crate::config::{self, ExperimentConfig};
use crate::{Cli, CliError, Command, FinetuneMode, Global};

type Res<T = ()> = Result<T, CliError>;

fn runtime(e: impl Into<anyhow::Error>) -> CliError {
    CliError::Runtime(e.into())
}

fn load_config(g: &Global) -> Res<ExperimentConfig> {
    let mut cfg = config::load(g.profile, g.config.as_deref())?;
    if let Some(s) = g.seed {
        cfg.train.seed = s;
        cfg.augment.seed = s;
    }
    if let Some(e) = g.epochs {
        cfg.train.max_epochs = e;
    }
    cfg.train_config().validate()?;
    Ok(cfg)
}

fn parse_design(s: &str) -> Res<Design> {
    Ok(s.parse::<Design>()?)
}

fn dataset(cfg: &ExperimentConfig) -> Res<Dataset> {
    match &cfg.data.manifest {
        Some(m) => Ok(data::load_dataset(m)?),
        None => {
            let s = &cfg.data.synthetic;
            Ok(synthetic_dataset(s.kind, s.size, s.spacing, s.counts, s.seed)?)
        }
    }
}

fn eval_pairs(cfg: &ExperimentConfig) -> Res<Vec<EvalPair>> {
    if let Some(p) = &cfg.data.pairs {
        return Ok(data::load_pairs(p)?);
    }
    let ds = dataset(cfg)?;
    let base = match cfg.eval.split {
        Split::Val => VAL_STREAM_BASE,
        _ => TEST_STREAM_BASE,
    };
    let subjects = ds.split(cfg.eval.split);
    if subjects.is_empty() {
        return Err(CliError::Validation(format!("the {:?} split is empty", cfg.eval.split)));
    }
    Ok(data::make_pairs(
        subjects,
        &cfg.augment,
        cfg.eval.pairs_per_subject,
        base,
    )?)
}

/// Prints the SHA-256 of each written file and of its payload companion.
fn log_digests(paths: &[PathBuf]) -> Res {
    for p in paths {
        for f in [p.clone(), io::payload_path(p), blob_path(p)] {
            if f == *p || f.exists() {
                let bytes = fs::read(&f).map_err(|e| runtime(anyhow::anyhow!("{}: {e}", f.display())))?;
                println!("sha256 {} {}", sha256_hex(&bytes), f.display());
            }
        }
    }
    Ok(())
}

fn files_in(dir: &Path) -> Res<Vec<PathBuf>> {
    let mut v: Vec<PathBuf> = fs::read_dir(dir)?
        .map(|e| e.map(|e| e.path()))
        .collect::<Result<_, _>>()?;
    v.retain(|p| p.is_file());
    v.sort();
    Ok(v)
}

pub fn run(cli: &Cli) -> Res {
    let g = &cli.global;
    match &cli.command {
        Command::Preprocess => preprocess(g),
        Command::GenPairs => gen_pairs(g),
        Command::Train { design } => train_cmd(g, design.as_deref()),
        Command::Finetune {
            checkpoint,
            mode,
            design,
        } => finetune(g, checkpoint, *mode, design.as_deref()),
        Command::Register {
            checkpoint,
            fixed,
            moving,
            moving_labels,
        } => register(g, checkpoint, fixed, moving, moving_labels.as_deref()),
        Command::Evaluate { checkpoint, name } => evaluate(g, checkpoint.as_deref(), name.as_deref()),
        Command::Gradcheck { seeds } => gradcheck_cmd(g, *seeds),
        Command::Report { metrics } => report(g, metrics),
    }
}

fn preprocess_subject(s: &Subject, cfg: &ExperimentConfig) -> Res<Subject> {
    let p = &cfg.data.preprocess;
    let (mut image, mut labels) = (s.image.clone(), s.labels.clone());
    if let Some(sp) = p.spacing {
        image = resample_isotropic(&image, sp)?;
        labels = resample_isotropic(&labels, sp)?;
    }
    if let Some(m) = p.crop_margin_mm {
        let (v, rec) = crop_to_mask(&image, &labels, m)?;
        labels = crop_labels(&labels, &rec)?;
        image = v;
    }
    if let Some(shape) = p.shape {
        image = resize(&image, shape)?;
        labels = resize(&labels, shape)?;
    }
    if p.normalize {
        image = normalize_intensity(&image);
    }
    Ok(Subject {
        name: s.name.clone(),
        image,
        labels,
    })
}

fn preprocess(g: &Global) -> Res {
    let cfg = load_config(g)?;
    let ds = dataset(&cfg)?;
    let map = |v: &[Subject]| v.iter().map(|s| preprocess_subject(s, &cfg)).collect::<Res<Vec<_>>>();
    let out = Dataset {
        train: map(&ds.train)?,
        val: map(&ds.val)?,
        test: map(&ds.test)?,
    };
    let manifest = data::save_dataset(&g.out, &out)?;
    println!("manifest {}", manifest.display());
    log_digests(
        &files_in(&g.out)?
            .into_iter()
            .filter(|p| p.extension().is_some_and(|e| e != "raw"))
            .collect::<Vec<_>>(),
    )
}

fn gen_pairs(g: &Global) -> Res {
    let mut cfg = load_config(g)?;
    cfg.data.pairs = None;
    let pairs = eval_pairs(&cfg)?;
    let list = data::save_pairs(&g.out, &pairs)?;
    println!("pairs {} ({} pairs)", list.display(), pairs.len());
    log_digests(
        &files_in(&g.out)?
            .into_iter()
            .filter(|p| p.extension().is_some_and(|e| e != "raw"))
            .collect::<Vec<_>>(),
    )
}

fn save_run(g: &Global, stem: &str, ck: &Checkpoint, log: &RunLog) -> Res {
    fs::create_dir_all(&g.out)?;
    let path = g.out.join(format!("{stem}.ckpt"));
    let digest = save_checkpoint(&path, ck)?;
    log.save(&g.out, &format!("{stem}_log"))?;
    println!(
        "best epoch {:?} monitored loss {:?}; run log digest {}",
        log.best_epoch,
        log.best_val_loss,
        log.digest()
    );
    println!("checkpoint digest {digest}");
    log_digests(&[path, g.out.join(format!("{stem}_log.json"))])
}

fn train_cmd(g: &Global, design: Option<&str>) -> Res {
    let cfg = load_config(g)?;
    let mut tc = cfg.train_config();
    if let Some(d) = design {
        tc.design = parse_design(d)?;
    }
    let ds = dataset(&cfg)?;
    let (ck, log) = train::train(&ds, &tc)?;
    save_run(g, tc.design.name(), &ck, &log)
}

fn finetune(g: &Global, ckpt: &Path, mode: FinetuneMode, design: Option<&str>) -> Res {
    let cfg = load_config(g)?;
    let mut tc = cfg.train_config();
    let start = load_checkpoint(ckpt)?;
    tc.net = start.net.clone();
    if let Some(d) = design {
        tc.design = parse_design(d)?;
    }
    let ds = dataset(&cfg)?;
    let (ck, log, stem) = match mode {
        FinetuneMode::Full => {
            let (c, l) = train::finetune_full(&start, &ds, &tc)?;
            (c, l, "finetune_full")
        }
        FinetuneMode::TwoStep => {
            let (c, l) = train::finetune_two_step(&start, &ds, &tc, tc.step1())?;
            (c, l, "finetune_two_step")
        }
    };
    save_run(g, stem, &ck, &log)
}

fn register(g: &Global, ckpt: &Path, fixed: &Path, moving: &Path, moving_labels: Option<&Path>) -> Res {
    let ck = load_checkpoint(ckpt)?;
    let f = io::read_volume(fixed)?;
    let m = io::read_volume(moving)?;
    let ml = moving_labels.map(io::read_labels).transpose()?;
    let (warped, labels, field) = register_pair(&ck, &f, &m, ml.as_ref())?;
    let mut written = vec![g.out.join("warped.ddvol"), g.out.join("field.ddvol")];
    io::write_volume(&written[0], &warped)?;
    io::write_field(&written[1], &field)?;
    if let Some(l) = labels {
        let p = g.out.join("warped_labels.ddvol");
        io::write_labels(&p, &l)?;
        written.push(p);
    }
    log_digests(&written)
}

fn evaluate(g: &Global, ckpt: Option<&Path>, name: Option<&str>) -> Res {
    let cfg = load_config(g)?;
    let pairs = eval_pairs(&cfg)?;
    let ev = match ckpt {
        Some(p) => {
            let ck = load_checkpoint(p)?;
            let method = name.map(str::to_string).unwrap_or_else(|| {
                p.file_stem()
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_default()
            });
            evaluate_model(&method, &ck, &pairs)?
        }
        None => {
            let mut ev = initial_alignment(&pairs)?;
            if let Some(n) = name {
                ev.row.method = n.into();
            }
            ev
        }
    };
    fs::create_dir_all(&g.out)?;
    let path = g.out.join(format!("{}_metrics.json", ev.row.method));
    fs::write(&path, serde_json::to_string_pretty(&ev)?)?;
    println!("{}", report_table(std::slice::from_ref(&ev.row)).0);
    log_digests(&[path])
}

fn gradcheck_cmd(g: &Global, seeds: usize) -> Res {
    if seeds == 0 {
        return Err(CliError::Validation("--seeds must be at least 1".into()));
    }
    let reports = gradcheck::run_all(seeds)?;
    let mut failed = 0;
    for r in &reports {
        println!(
            "{} {:<20} seeds {:>3} entries {:>6} skipped {:>3} max rel err {:.3e} (tol {:.0e})",
            if r.passed() { "PASS" } else { "FAIL" },
            r.name,
            r.seeds,
            r.checked,
            r.skipped,
            r.max_rel_err,
            r.tolerance
        );
        failed += usize::from(!r.passed());
    }
    fs::create_dir_all(&g.out)?;
    let path = g.out.join("gradcheck.json");
    fs::write(&path, serde_json::to_string_pretty(&reports)?)?;
    if failed > 0 {
        return Err(runtime(anyhow::anyhow!(
            "{failed} gradient checks exceeded their tolerance"
        )));
    }
    Ok(())
}

fn report(g: &Global, inputs: &[PathBuf]) -> Res {
    let mut rows = Vec::with_capacity(inputs.len());
    for p in inputs {
        let text = fs::read_to_string(p).map_err(|e| CliError::Validation(format!("{}: {e}", p.display())))?;
        let ev: Evaluation = serde_json::from_str(&text)
            .map_err(|e| CliError::Validation(format!("{} is not a metrics file: {e}", p.display())))?;
        rows.push(ev.row);
    }
    let (table, csv) = report_table(&rows);
    print!("{table}");
    fs::create_dir_all(&g.out)?;
    let t = g.out.join("report.txt");
    let c = g.out.join("report.csv");
    fs::write(&t, &table)?;
    fs::write(&c, &csv)?;
    log_digests(&[t, c])
}
