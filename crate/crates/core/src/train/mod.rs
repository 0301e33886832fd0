//! Weakly-supervised training: only the warped image and warped labels are
//! scored, never the displacement field itself (apart from its smoothness).

pub mod adam;
pub mod checkpoint;
pub mod runlog;
pub mod scheduler;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::augment::{generate_pair, AugmentConfig};
use crate::data::{make_pairs, Dataset, EvalPair, Subject, VAL_STREAM_BASE};
use crate::error::{Error, Result};
use crate::losses::{distance_transform, loss_dice, loss_hd_approx, loss_ncc, loss_ssim, reg_smoothness, LossKind};
use crate::nn::unet::{field_to_output_grad, output_to_field, pair_input};
use crate::nn::{NetConfig, Network, ParameterStore, Tape, ENCODER_PREFIX};
use crate::volume::{LabelMap, Volume};
use crate::warp::{field_gradient, warp_onehot, warp_trilinear, OneHotStack};
use crate::weighting::{combine, init_weights, record_weights, WeightState};

pub use adam::Adam;
pub use checkpoint::{load_checkpoint, params_digest, save_checkpoint, Checkpoint};
pub use runlog::{EpochRecord, RunLog};
pub use scheduler::{Plateau, SchedulerConfig};

/// Loss designs: baselines (intensity only), segmentation-guided with fixed
/// weights, and uncertainty-weighted with learned weights.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Design {
    #[serde(rename = "BL-N")]
    BlN,
    #[serde(rename = "BL-NS")]
    BlNs,
    #[serde(rename = "SG-ND")]
    SgNd,
    #[serde(rename = "SG-NSD")]
    SgNsd,
    #[serde(rename = "UW-NSD")]
    UwNsd,
    #[serde(rename = "UW-NSDH")]
    UwNsdh,
}

impl Design {
    pub const ALL: [Design; 6] = [
        Design::BlN,
        Design::BlNs,
        Design::SgNd,
        Design::SgNsd,
        Design::UwNsd,
        Design::UwNsdh,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Design::BlN => "BL-N",
            Design::BlNs => "BL-NS",
            Design::SgNd => "SG-ND",
            Design::SgNsd => "SG-NSD",
            Design::UwNsd => "UW-NSD",
            Design::UwNsdh => "UW-NSDH",
        }
    }

    /// Loss terms followed by the smoothness regulariser.
    pub fn terms(self) -> Vec<LossKind> {
        use LossKind::*;
        let mut t = match self {
            Design::BlN => vec![Ncc],
            Design::BlNs => vec![Ncc, Ssim],
            Design::SgNd => vec![Ncc, Dice],
            Design::SgNsd | Design::UwNsd => vec![Ncc, Ssim, Dice],
            Design::UwNsdh => vec![Ncc, Ssim, Dice, Hd],
        };
        t.push(Reg);
        t
    }

    pub fn learned_weights(self) -> bool {
        matches!(self, Design::UwNsd | Design::UwNsdh)
    }

    pub fn uses_labels(self) -> bool {
        self.terms().iter().any(|k| matches!(k, LossKind::Dice | LossKind::Hd))
    }

    pub fn initial_weights(self, reg_weight: f64) -> Result<WeightState> {
        init_weights(&self.terms(), reg_weight, self.learned_weights())
    }
}

impl fmt::Display for Design {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Design {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Design::ALL
            .into_iter()
            .find(|d| d.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown design {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub design: Design,
    pub lr: f64,
    /// Samples per optimizer step (batch size one, mean gradient).
    pub accumulation: usize,
    pub scheduler: SchedulerConfig,
    pub max_epochs: usize,
    /// Seed of the network initialisation.
    pub seed: u64,
    pub reg_weight: f64,
    pub val_pairs_per_subject: usize,
    /// Generate each epoch's pairs before its timer starts instead of on the fly.
    /// Results are identical; only the timing differs.
    pub precompute_pairs: bool,
    pub finetune_lr: f64,
    /// Phase-one length of two-step finetuning; `None` means a quarter of `max_epochs`.
    pub step1_epochs: Option<usize>,
    pub augment: AugmentConfig,
    pub net: NetConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            design: Design::UwNsd,
            lr: 1e-3,
            accumulation: 8,
            scheduler: SchedulerConfig::default(),
            max_epochs: 200,
            seed: 0,
            reg_weight: 5e-3,
            val_pairs_per_subject: 1,
            precompute_pairs: false,
            finetune_lr: 1e-4,
            step1_epochs: None,
            augment: AugmentConfig::default(),
            net: NetConfig::default(),
        }
    }
}

impl TrainConfig {
    /// Small-data settings: one optimizer step per sample and a larger fixed
    /// validation set, so the plateau rule sees a less noisy loss.
    pub fn desk() -> Self {
        Self {
            accumulation: 1,
            val_pairs_per_subject: 4,
            augment: AugmentConfig::desk(),
            net: NetConfig::desk(),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.accumulation == 0 {
            return Err(Error::Config("accumulation must be at least 1".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) || !(self.finetune_lr > 0.0 && self.finetune_lr.is_finite()) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        let s = &self.scheduler;
        if !(s.factor > 0.0 && s.factor < 1.0) || s.patience == 0 || s.min_delta < 0.0 {
            return Err(Error::Config(format!("invalid scheduler {s:?}")));
        }
        self.augment.validate()?;
        self.net.validate()
    }

    pub fn step1(&self) -> usize {
        self.step1_epochs.unwrap_or(self.max_epochs / 4).min(self.max_epochs)
    }
}

/// Fixed-side tensors of one subject, shared by every sample drawn from it.
pub struct Prepared<'a> {
    pub fixed: &'a Volume,
    pub onehot: OneHotStack,
    /// One distance map per label (only for designs with the distance term).
    pub dt: Vec<Volume>,
}

pub fn prepare<'a>(fixed: &'a Volume, labels: &LabelMap, label_set: &[u8], with_dt: bool) -> Result<Prepared<'a>> {
    let onehot = OneHotStack::from_labels(labels, label_set);
    let dt = if with_dt {
        label_set
            .iter()
            .map(|&l| {
                if labels.contains(l) {
                    distance_transform(labels, l)
                } else {
                    // absent label: the term is skipped, the map is never read
                    Ok(Volume::zeros(labels.grid))
                }
            })
            .collect::<Result<_>>()?
    } else {
        Vec::new()
    };
    Ok(Prepared { fixed, onehot, dt })
}

#[derive(Clone, Debug)]
pub struct SampleOutcome {
    /// Term values in design order.
    pub terms: Vec<f64>,
    pub total: f64,
    pub param_grads: Option<Vec<Option<Vec<f64>>>>,
    pub logit_grads: Vec<f64>,
}

/// Forward (and optionally backward) pass for one (fixed, moving) pair.
pub fn sample_loss(
    net: &Network,
    params: &ParameterStore,
    weights: &WeightState,
    prep: &Prepared<'_>,
    moving: &Volume,
    moving_labels: &LabelMap,
    want_grad: bool,
) -> Result<SampleOutcome> {
    let mut tape = Tape::new(params);
    let out = net.forward(&mut tape, pair_input(prep.fixed, moving)?)?;
    let field = output_to_field(tape.value(out), prep.fixed)?;
    let pred = warp_trilinear(moving, &field)?;
    let needs_labels = weights.kinds.iter().any(|k| matches!(k, LossKind::Dice | LossKind::Hd));
    let (moving_oh, warped_oh) = if needs_labels {
        let m = OneHotStack::from_labels(moving_labels, &prep.onehot.labels);
        let w = warp_onehot(&m, &field)?;
        (Some(m), Some(w))
    } else {
        (None, None)
    };

    enum Grad {
        Image(Vec<f64>),
        Labels(Vec<Vec<f64>>),
        Field(Vec<[f64; 3]>),
    }
    let mut terms = Vec::with_capacity(weights.len());
    let mut grads = Vec::with_capacity(weights.len());
    for &k in &weights.kinds {
        let (v, g) = match k {
            LossKind::Ncc => {
                let (v, g) = loss_ncc(&pred, prep.fixed)?;
                (v, Grad::Image(g))
            }
            LossKind::Ssim => {
                let (v, g) = loss_ssim(&pred, prep.fixed)?;
                (v, Grad::Image(g))
            }
            LossKind::Dice => {
                let (v, g) = loss_dice(warped_oh.as_ref().expect("labels warped"), &prep.onehot)?;
                (v, Grad::Labels(g))
            }
            LossKind::Hd => {
                let (v, g) = loss_hd_approx(warped_oh.as_ref().expect("labels warped"), &prep.onehot, &prep.dt)?;
                (v, Grad::Labels(g))
            }
            LossKind::Reg => {
                let (v, g) = reg_smoothness(&field);
                (v, Grad::Field(g))
            }
        };
        terms.push(v.value);
        grads.push(g);
    }
    let c = combine(&terms, weights)?;
    if !want_grad {
        return Ok(SampleOutcome {
            terms,
            total: c.total,
            param_grads: None,
            logit_grads: c.d_logits,
        });
    }

    let n = prep.fixed.data.len();
    let mut up_image = vec![0.0; n];
    let mut up_labels = vec![vec![0.0; n]; prep.onehot.labels.len()];
    let mut d_field = vec![[0.0; 3]; n];
    let mut any_image = false;
    let mut any_labels = false;
    for (g, &w) in grads.iter().zip(&c.weights) {
        match g {
            Grad::Image(g) => {
                any_image = true;
                up_image.iter_mut().zip(g).for_each(|(u, gi)| *u += w * gi);
            }
            Grad::Labels(gs) => {
                any_labels = true;
                for (u, g) in up_labels.iter_mut().zip(gs) {
                    u.iter_mut().zip(g).for_each(|(a, b)| *a += w * b);
                }
            }
            Grad::Field(g) => {
                for (d, gi) in d_field.iter_mut().zip(g) {
                    for a in 0..3 {
                        d[a] += w * gi[a];
                    }
                }
            }
        }
    }
    let mut pairs: Vec<(&[f64], &[f64])> = Vec::new();
    if any_image {
        pairs.push((&moving.data, &up_image));
    }
    if any_labels {
        let m = moving_oh.as_ref().expect("labels warped");
        for (ch, up) in m.channels.iter().zip(&up_labels) {
            pairs.push((ch, up));
        }
    }
    let through_warp = field_gradient(&pairs, &field);
    for (d, g) in d_field.iter_mut().zip(&through_warp) {
        for a in 0..3 {
            d[a] += g[a];
        }
    }
    let param_grads = tape.backward(out, field_to_output_grad(&d_field));
    Ok(SampleOutcome {
        terms,
        total: c.total,
        param_grads: Some(param_grads),
        logit_grads: c.d_logits,
    })
}

/// One stretch of epochs with a fixed freezing pattern and a fresh optimizer.
#[derive(Clone, Debug)]
pub struct Phase {
    pub name: String,
    pub epochs: usize,
    pub lr: f64,
    pub freeze_encoder: bool,
}

struct Snapshot {
    params: ParameterStore,
    weights: WeightState,
    optimizer: Adam,
    epoch: usize,
    val_loss: f64,
}

struct Context<'a> {
    label_set: Vec<u8>,
    train: Vec<(&'a Subject, Prepared<'a>)>,
    val: Vec<(EvalPair, usize)>,
    val_prep: Vec<Prepared<'a>>,
}

fn build_context<'a>(ds: &'a Dataset, cfg: &'a TrainConfig) -> Result<Context<'a>> {
    cfg.validate()?;
    if ds.train.is_empty() {
        return Err(Error::InvalidArgument("the training split is empty".into()));
    }
    let label_set = ds.label_set();
    if cfg.design.uses_labels() && label_set.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "design {} needs segmentations but no labels were found",
            cfg.design
        )));
    }
    let with_dt = cfg.design.terms().contains(&LossKind::Hd);
    let train = ds
        .train
        .iter()
        .map(|s| {
            cfg.net.check_input(s.image.grid.shape)?;
            Ok((s, prepare(&s.image, &s.labels, &label_set, with_dt)?))
        })
        .collect::<Result<Vec<_>>>()?;
    let pairs = make_pairs(&ds.val, &cfg.augment, cfg.val_pairs_per_subject, VAL_STREAM_BASE)?;
    let val: Vec<(EvalPair, usize)> = pairs
        .into_iter()
        .enumerate()
        .map(|(k, p)| (p, k / cfg.val_pairs_per_subject.max(1)))
        .collect();
    let val_prep = ds
        .val
        .iter()
        .map(|s| prepare(&s.image, &s.labels, &label_set, with_dt))
        .collect::<Result<Vec<_>>>()?;
    Ok(Context {
        label_set,
        train,
        val,
        val_prep,
    })
}

fn validation_loss(
    ctx: &Context<'_>,
    net: &Network,
    params: &ParameterStore,
    weights: &WeightState,
) -> Result<Option<f64>> {
    if ctx.val.is_empty() {
        return Ok(None);
    }
    let mut sum = 0.0;
    for (pair, s) in &ctx.val {
        let out = sample_loss(
            net,
            params,
            weights,
            &ctx.val_prep[*s],
            &pair.moving,
            &pair.moving_labels,
            false,
        )
        .map_err(|e| Error::Training(format!("validation pair {}: {e}", pair.name)))?;
        sum += out.total;
    }
    Ok(Some(sum / ctx.val.len() as f64))
}

fn run(start: Checkpoint, ds: &Dataset, cfg: &TrainConfig, phases: &[Phase]) -> Result<(Checkpoint, RunLog)> {
    let ctx = build_context(ds, cfg)?;
    let incompatible = checkpoint::incompatible_tensors(&start.params, &cfg.net)?;
    if !incompatible.is_empty() {
        return Err(Error::Incompatible(format!(
            "checkpoint does not fit the configured network: {}",
            incompatible.join(", ")
        )));
    }
    let mut params = start.params.clone();
    let mut weights = start.weights.clone();
    let net = &Network::bind(&cfg.net, &start.params)?;
    let n_train = ctx.train.len();
    let mut log = RunLog::new(cfg.design.name(), &ctx.label_set);
    let mut best: Option<Snapshot> = None;
    let mut epoch = 0usize;

    for (pi, phase) in phases.iter().enumerate() {
        if pi > 0 {
            log.phase_boundaries.push(epoch);
        }
        params.set_all_trainable(true);
        if phase.freeze_encoder {
            params.set_trainable_prefix(ENCODER_PREFIX, false);
        }
        let mut sizes: Vec<usize> = params.iter().map(|p| p.tensor.len()).collect();
        sizes.push(weights.len());
        let mut adam = Adam::new(&sizes);
        let mut sched = Plateau::new(cfg.scheduler.clone(), phase.lr);
        let mut acc: Vec<Vec<f64>> = sizes.iter().map(|&n| vec![0.0; n]).collect();
        let mut count = 0usize;

        for _ in 0..phase.epochs {
            let gen = |i: usize| {
                let (s, _) = &ctx.train[i];
                let index = (epoch * n_train + i) as u64;
                generate_pair(&s.image, &s.labels, &cfg.augment, index)
            };
            let pre: Option<Vec<_>> = if cfg.precompute_pairs {
                Some((0..n_train).map(gen).collect::<Result<_>>()?)
            } else {
                None
            };
            let t0 = Instant::now();
            let mut comp = vec![0.0; weights.len()];
            let mut train_sum = 0.0;
            for i in 0..n_train {
                let owned;
                let sample = match &pre {
                    Some(v) => &v[i],
                    None => {
                        owned = gen(i)?;
                        &owned
                    }
                };
                let (s, prep) = &ctx.train[i];
                let out = sample_loss(
                    net,
                    &params,
                    &weights,
                    prep,
                    &sample.moving,
                    &sample.moving_labels,
                    true,
                )
                .map_err(|e| {
                    Error::Training(format!(
                        "epoch {epoch}, sample {} (subject {}): {e}",
                        epoch * n_train + i,
                        s.name
                    ))
                })?;
                train_sum += out.total;
                comp.iter_mut().zip(&out.terms).for_each(|(c, t)| *c += t);
                let grads = out.param_grads.expect("gradients requested");
                for (a, g) in acc.iter_mut().zip(&grads) {
                    if let Some(g) = g {
                        a.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                    }
                }
                if weights.trainable {
                    let last = acc.len() - 1;
                    acc[last].iter_mut().zip(&out.logit_grads).for_each(|(x, y)| *x += y);
                }
                count += 1;
                let end_of_epoch = i + 1 == n_train;
                if count == cfg.accumulation || end_of_epoch {
                    optimizer_step(&mut adam, &mut params, &mut weights, &mut acc, count, sched.lr)?;
                    count = 0;
                }
            }
            let secs = t0.elapsed().as_secs_f64();
            let train_loss = train_sum / n_train as f64;
            let val = validation_loss(&ctx, net, &params, &weights)?;
            let monitored = val.unwrap_or(train_loss);
            let lr_used = sched.lr;
            let reduced = sched.observe(monitored);
            let components: BTreeMap<String, f64> = weights
                .kinds
                .iter()
                .zip(&comp)
                .map(|(k, c)| (k.name().to_string(), c / n_train as f64))
                .collect();
            log.epochs.push(EpochRecord {
                epoch,
                phase: phase.name.clone(),
                lr: lr_used,
                lr_reduced: reduced,
                train_loss,
                val_loss: val,
                components,
                weights: record_weights(&weights, epoch),
                epoch_seconds: secs,
                on_the_fly: !cfg.precompute_pairs,
                encoder_digest: params_digest(&params, ENCODER_PREFIX),
                params_digest: params_digest(&params, ""),
            });
            if best.as_ref().is_none_or(|b| monitored < b.val_loss) {
                best = Some(Snapshot {
                    params: params.clone(),
                    weights: weights.clone(),
                    optimizer: adam.clone(),
                    epoch,
                    val_loss: monitored,
                });
            }
            epoch += 1;
        }
    }

    let ck = match best {
        None => Checkpoint {
            params,
            weights,
            ..start
        },
        Some(b) => {
            log.best_epoch = Some(b.epoch);
            log.best_val_loss = Some(b.val_loss);
            let mut p = b.params;
            p.set_all_trainable(true);
            Checkpoint {
                net: cfg.net.clone(),
                params: p,
                weights: b.weights,
                optimizer: Some(b.optimizer),
                epoch: Some(b.epoch),
                val_loss: Some(b.val_loss),
            }
        }
    };
    Ok((ck, log))
}

fn optimizer_step(
    adam: &mut Adam,
    params: &mut ParameterStore,
    weights: &mut WeightState,
    acc: &mut [Vec<f64>],
    count: usize,
    lr: f64,
) -> Result<()> {
    let inv = 1.0 / count as f64;
    acc.iter_mut().for_each(|a| a.iter_mut().for_each(|x| *x *= inv));
    let mut on: Vec<bool> = params.iter().map(|p| p.trainable).collect();
    on.push(weights.trainable);
    let mut slots: Vec<&mut [f64]> = params.iter_mut().map(|p| p.tensor.data.as_mut_slice()).collect();
    slots.push(weights.logits.as_mut_slice());
    let grads: Vec<Option<&[f64]>> = acc.iter().zip(&on).map(|(a, &t)| t.then_some(a.as_slice())).collect();
    adam.step(&mut slots, &grads, lr)?;
    acc.iter_mut().for_each(|a| a.iter_mut().for_each(|x| *x = 0.0));
    Ok(())
}

/// Trains a freshly initialised network.
pub fn train(ds: &Dataset, cfg: &TrainConfig) -> Result<(Checkpoint, RunLog)> {
    let start = Checkpoint::fresh(&cfg.net, cfg.design.initial_weights(cfg.reg_weight)?, cfg.seed)?;
    let phase = Phase {
        name: "train".into(),
        epochs: cfg.max_epochs,
        lr: cfg.lr,
        freeze_encoder: false,
    };
    run(start, ds, cfg, &[phase])
}

/// Keeps the checkpoint's loss weights when they belong to the same design.
fn finetune_start(ck: &Checkpoint, cfg: &TrainConfig) -> Result<Checkpoint> {
    let mut start = ck.clone();
    if start.weights.kinds != cfg.design.terms() {
        start.weights = cfg.design.initial_weights(cfg.reg_weight)?;
    }
    start.weights.trainable = cfg.design.learned_weights();
    Ok(start)
}

/// Finetunes every parameter at `cfg.finetune_lr`.
pub fn finetune_full(ck: &Checkpoint, ds: &Dataset, cfg: &TrainConfig) -> Result<(Checkpoint, RunLog)> {
    let phase = Phase {
        name: "full".into(),
        epochs: cfg.max_epochs,
        lr: cfg.finetune_lr,
        freeze_encoder: false,
    };
    run(finetune_start(ck, cfg)?, ds, cfg, &[phase])
}

/// Decoder-only finetuning for `step1_epochs` with the encoder frozen, then the
/// full model for the remaining epochs with a fresh optimizer.
pub fn finetune_two_step(
    ck: &Checkpoint,
    ds: &Dataset,
    cfg: &TrainConfig,
    step1_epochs: usize,
) -> Result<(Checkpoint, RunLog)> {
    if step1_epochs > cfg.max_epochs {
        return Err(Error::Config(format!(
            "phase-one length {step1_epochs} exceeds max_epochs {}",
            cfg.max_epochs
        )));
    }
    let phases = [
        Phase {
            name: "decoder".into(),
            epochs: step1_epochs,
            lr: cfg.finetune_lr,
            freeze_encoder: true,
        },
        Phase {
            name: "full".into(),
            epochs: cfg.max_epochs - step1_epochs,
            lr: cfg.finetune_lr,
            freeze_encoder: false,
        },
    ];
    run(finetune_start(ck, cfg)?, ds, cfg, &phases)
}
