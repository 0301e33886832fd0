//! On-the-fly synthesis of moving images from a fixed image.
//!
//! Each sample is a pure function of `(fixed, fixed_labels, config, index)`: the
//! random stream is a ChaCha8 generator keyed by `config.seed` and positioned on
//! stream `index`, so samples can be generated in any order or in parallel.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tps::{compose_rigid_then_tps, tps_fit, ControlGrid, RigidTransform, TpsModel, DEFAULT_RIDGE};
use crate::volume::{DisplacementField, LabelMap, Volume};
use crate::warp::{warp_nearest, warp_trilinear};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    pub gamma_range: [f64; 2],
    pub brightness_frac: f64,
    pub max_rotation_deg: f64,
    pub max_rigid_translation_mm: f64,
    pub max_nonrigid_mm: f64,
    pub control_grid: [usize; 3],
    pub seed: u64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            gamma_range: [0.5, 2.0],
            brightness_frac: 0.2,
            max_rotation_deg: 10.0,
            max_rigid_translation_mm: 30.0,
            max_nonrigid_mm: 6.0,
            control_grid: [8, 8, 8],
            seed: 0,
        }
    }
}

impl AugmentConfig {
    /// Geometry scaled for small (≈32³ mm) phantoms, with milder intensity jitter.
    pub fn desk() -> Self {
        Self {
            gamma_range: [0.8, 1.25],
            brightness_frac: 0.1,
            max_rotation_deg: 6.0,
            max_rigid_translation_mm: 3.0,
            max_nonrigid_mm: 2.5,
            control_grid: [5, 5, 5],
            ..Self::default()
        }
    }

    /// No geometric or intensity change at all.
    pub fn identity() -> Self {
        Self {
            gamma_range: [1.0, 1.0],
            brightness_frac: 0.0,
            max_rotation_deg: 0.0,
            max_rigid_translation_mm: 0.0,
            max_nonrigid_mm: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let [g0, g1] = self.gamma_range;
        if !(g0 > 0.0 && g0 <= g1 && g1.is_finite()) {
            return Err(Error::InvalidArgument(format!("gamma range {:?}", self.gamma_range)));
        }
        let maxima = [
            self.brightness_frac,
            self.max_rotation_deg,
            self.max_rigid_translation_mm,
            self.max_nonrigid_mm,
        ];
        if maxima.iter().any(|m| !(*m >= 0.0) || !m.is_finite()) {
            return Err(Error::InvalidArgument(
                "augmentation maxima must be finite and >= 0".into(),
            ));
        }
        if self.control_grid.iter().product::<usize>() < 4 || self.control_grid.iter().filter(|&&n| n >= 2).count() < 3
        {
            return Err(Error::InvalidArgument(format!(
                "control grid {:?} needs at least 2 nodes per axis",
                self.control_grid
            )));
        }
        Ok(())
    }
}

/// Every random draw behind one sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentParams {
    pub index: u64,
    pub gamma: f64,
    pub brightness: f64,
    pub rotation_deg: [f64; 3],
    pub translation_mm: [f64; 3],
    pub control_points: Vec<[f64; 3]>,
    pub control_displacements: Vec<[f64; 3]>,
}

impl AugmentParams {
    pub fn rigid(&self, center: [f64; 3]) -> RigidTransform {
        RigidTransform::from_euler(self.rotation_deg.map(f64::to_radians), self.translation_mm, center)
    }

    pub fn tps(&self) -> Result<TpsModel> {
        if self.control_displacements.iter().flatten().all(|&v| v == 0.0) {
            return Ok(TpsModel::zero());
        }
        tps_fit(
            &ControlGrid {
                points: self.control_points.clone(),
                displacements: self.control_displacements.clone(),
            },
            DEFAULT_RIDGE,
        )
    }

    /// Checks the recorded draws against the configured maxima.
    pub fn within_bounds(&self, cfg: &AugmentConfig) -> bool {
        let tol = 1e-12;
        let norm = |v: &[f64; 3]| (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        self.gamma >= cfg.gamma_range[0]
            && self.gamma <= cfg.gamma_range[1]
            && self.brightness.abs() <= cfg.brightness_frac
            && self.rotation_deg.iter().all(|a| a.abs() <= cfg.max_rotation_deg)
            && norm(&self.translation_mm) <= cfg.max_rigid_translation_mm + tol
            && self
                .control_displacements
                .iter()
                .all(|d| norm(d) <= cfg.max_nonrigid_mm + tol)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AugmentSample {
    pub moving: Volume,
    pub moving_labels: LabelMap,
    pub gt_field: DisplacementField,
    pub params: AugmentParams,
}

fn sample_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

fn uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    if hi > lo {
        rng.gen_range(lo..=hi)
    } else {
        lo
    }
}

/// Uniform point in the ball of radius `r`.
fn in_ball(rng: &mut ChaCha8Rng, r: f64) -> [f64; 3] {
    if r <= 0.0 {
        return [0.0; 3];
    }
    loop {
        let p = [
            rng.gen_range(-1.0..=1.0),
            rng.gen_range(-1.0..=1.0),
            rng.gen_range(-1.0..=1.0),
        ];
        if p[0] * p[0] + p[1] * p[1] + p[2] * p[2] <= 1.0 {
            return p.map(|v: f64| v * r);
        }
    }
}

/// Draws the parameters of sample `index` for a fixed image on `grid`.
pub fn sample_params(fixed: &Volume, cfg: &AugmentConfig, index: u64) -> AugmentParams {
    let mut rng = sample_rng(cfg.seed, index);
    let gamma = uniform(&mut rng, cfg.gamma_range[0], cfg.gamma_range[1]);
    let b = cfg.brightness_frac;
    let brightness = uniform(&mut rng, -b, b);
    let r = cfg.max_rotation_deg;
    let rotation_deg = [
        uniform(&mut rng, -r, r),
        uniform(&mut rng, -r, r),
        uniform(&mut rng, -r, r),
    ];
    let translation_mm = in_ball(&mut rng, cfg.max_rigid_translation_mm);
    let control = ControlGrid::uniform(&fixed.grid, cfg.control_grid);
    let control_displacements = control
        .points
        .iter()
        .map(|_| in_ball(&mut rng, cfg.max_nonrigid_mm))
        .collect();
    AugmentParams {
        index,
        gamma,
        brightness,
        rotation_deg,
        translation_mm,
        control_points: control.points,
        control_displacements,
    }
}

/// Ground-truth backward-warp field for a set of parameters.
pub fn params_field(fixed: &Volume, params: &AugmentParams) -> Result<DisplacementField> {
    let rigid = params.rigid(fixed.grid.center_world());
    Ok(compose_rigid_then_tps(&rigid, &params.tps()?, &fixed.grid))
}

/// Moving image geometry only: fixed warped by `field`, no intensity change.
pub fn geometric_moving(fixed: &Volume, field: &DisplacementField) -> Result<Volume> {
    warp_trilinear(fixed, field)
}

pub fn generate_pair(
    fixed: &Volume,
    fixed_labels: &LabelMap,
    cfg: &AugmentConfig,
    index: u64,
) -> Result<AugmentSample> {
    cfg.validate()?;
    fixed.grid.ensure_matches(&fixed_labels.grid, "generate_pair")?;
    let params = sample_params(fixed, cfg, index);
    let gt_field = params_field(fixed, &params)?;
    let warped = geometric_moving(fixed, &gt_field)?;
    let moving = apply_brightness(&apply_gamma(&warped, params.gamma), params.brightness);
    let moving_labels = warp_nearest(fixed_labels, &gt_field)?;
    Ok(AugmentSample {
        moving,
        moving_labels,
        gt_field,
        params,
    })
}

/// Elementwise `v^gamma` on [0, 1] data.
pub fn apply_gamma(v: &Volume, gamma: f64) -> Volume {
    if gamma == 1.0 {
        return v.clone();
    }
    Volume {
        grid: v.grid,
        data: v.data.iter().map(|&x| x.max(0.0).powf(gamma)).collect(),
    }
}

/// Elementwise `clamp(v + delta, 0, 1)`.
pub fn apply_brightness(v: &Volume, delta: f64) -> Volume {
    if delta == 0.0 {
        return v.clone();
    }
    Volume {
        grid: v.grid,
        data: v.data.iter().map(|&x| (x + delta).clamp(0.0, 1.0)).collect(),
    }
}
