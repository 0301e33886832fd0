//! Synthetic phantoms: a soft-edged body with an embedded bright structure and a
//! dark unlabelled inclusion. Two families exist so that transfer between them
//! can be exercised: near-spherical shapes and elongated, rotated ellipsoids.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Subject};
use crate::error::Result;
use crate::tps::RigidTransform;
use crate::volume::{Grid, LabelMap, Volume};

pub const BODY_LABEL: u8 = 1;
pub const CORE_LABEL: u8 = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PhantomKind {
    Spheres,
    Ellipsoids,
}

impl PhantomKind {
    pub fn name(self) -> &'static str {
        match self {
            PhantomKind::Spheres => "spheres",
            PhantomKind::Ellipsoids => "ellipsoids",
        }
    }
}

struct Blob {
    center: [f64; 3],
    radii: [f64; 3],
    /// World-to-local rotation.
    rot: [[f64; 3]; 3],
}

impl Blob {
    /// Approximate signed distance in mm (negative inside).
    fn sdf(&self, p: [f64; 3]) -> f64 {
        let d = [p[0] - self.center[0], p[1] - self.center[1], p[2] - self.center[2]];
        let mut q = 0.0;
        for r in 0..3 {
            let l = self.rot[r][0] * d[0] + self.rot[r][1] * d[1] + self.rot[r][2] * d[2];
            q += (l / self.radii[r]).powi(2);
        }
        let rmin = self.radii.iter().copied().fold(f64::INFINITY, f64::min);
        (q.sqrt() - 1.0) * rmin
    }
}

fn soft_inside(sd: f64, width: f64) -> f64 {
    1.0 / (1.0 + (sd / width).exp())
}

fn blob(rng: &mut ChaCha8Rng, kind: PhantomKind, center: [f64; 3], radius: f64) -> Blob {
    let (radii, rot) = match kind {
        PhantomKind::Spheres => {
            let s = radius * rng.gen_range(0.92..1.08);
            ([s, s, s], [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]])
        }
        PhantomKind::Ellipsoids => {
            let radii = [
                radius * rng.gen_range(1.15..1.4),
                radius * rng.gen_range(0.8..1.0),
                radius * rng.gen_range(0.6..0.8),
            ];
            let angles = [
                rng.gen_range(-0.5..0.5),
                rng.gen_range(-0.5..0.5),
                rng.gen_range(-0.5..0.5),
            ];
            let r = RigidTransform::from_euler(angles, [0.0; 3], [0.0; 3]).rotation;
            // transpose: world → local
            let mut t = [[0.0; 3]; 3];
            for i in 0..3 {
                for j in 0..3 {
                    t[i][j] = r[j][i];
                }
            }
            (radii, t)
        }
    };
    Blob { center, radii, rot }
}

/// One phantom subject on `grid`, fully determined by `(kind, seed, index)`.
pub fn phantom(kind: PhantomKind, grid: Grid, seed: u64, index: u64) -> Subject {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index + 1);
    let c = grid.center_world();
    let (lo, hi) = grid.world_bounds();
    let half = (0..3).map(|a| (hi[a] - lo[a]) / 2.0).fold(f64::INFINITY, f64::min);
    let jitter = |rng: &mut ChaCha8Rng, s: f64| [0, 1, 2].map(|a| c[a] + rng.gen_range(-s..s) * half);
    let body_center = jitter(&mut rng, 0.06);
    let body = blob(&mut rng, kind, body_center, 0.62 * half);
    let core = {
        let cc = body.center;
        let off = [0, 1, 2].map(|_| rng.gen_range(-0.22..0.22) * half);
        blob(
            &mut rng,
            kind,
            [cc[0] + off[0], cc[1] + off[1], cc[2] + off[2]],
            0.26 * half,
        )
    };
    let hole = {
        let cc = body.center;
        let off = [0, 1, 2].map(|_| rng.gen_range(-0.3..0.3) * half);
        blob(
            &mut rng,
            kind,
            [cc[0] + off[0], cc[1] + off[1], cc[2] + off[2]],
            0.16 * half,
        )
    };
    let width = 0.6 * grid.spacing.iter().copied().fold(f64::INFINITY, f64::min);
    let tilt = [0, 1, 2].map(|_| rng.gen_range(-0.05..0.05) / half);
    let image = Volume::from_fn(grid, |ix| {
        let p = grid.voxel_to_world([ix[0] as f64, ix[1] as f64, ix[2] as f64]);
        let b = soft_inside(body.sdf(p), width);
        let k = soft_inside(core.sdf(p), width);
        let h = soft_inside(hole.sdf(p), width);
        let shade = (0..3).map(|a| tilt[a] * (p[a] - c[a])).sum::<f64>();
        let v = 0.05 + b * (0.45 + shade) + k * b * 0.1 - h * b * 0.3;
        v.clamp(0.0, 1.0)
    });
    let labels = LabelMap::from_fn(grid, |ix| {
        let p = grid.voxel_to_world([ix[0] as f64, ix[1] as f64, ix[2] as f64]);
        if body.sdf(p) > 0.0 {
            0
        } else if core.sdf(p) <= 0.0 {
            CORE_LABEL
        } else {
            BODY_LABEL
        }
    });
    Subject {
        name: format!("{}_{index:03}", kind.name()),
        image,
        labels,
    }
}

/// `n_train + n_val + n_test` phantoms on an isotropic cube of `size` voxels.
pub fn synthetic_dataset(
    kind: PhantomKind,
    size: usize,
    spacing: f64,
    counts: [usize; 3],
    seed: u64,
) -> Result<Dataset> {
    let grid = Grid::isotropic([size; 3], spacing)?;
    let mut k = 0u64;
    let mut take = |n: usize| -> Vec<Subject> {
        (0..n)
            .map(|_| {
                k += 1;
                phantom(kind, grid, seed, k - 1)
            })
            .collect()
    };
    let train = take(counts[0]);
    let val = take(counts[1]);
    let test = take(counts[2]);
    Ok(Dataset { train, val, test })
}
