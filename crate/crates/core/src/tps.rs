//! Three-dimensional thin-plate splines and rigid transforms.
//!
//! A [`TpsModel`] interpolates displacement vectors prescribed at control points
//! with the 3D biharmonic kernel `φ(r) = r` plus an affine part:
//!
//! ```text
//! u(x) = A · [x; 1] + Σ_i w_i · |x − p_i|
//! ```
//!
//! subject to the side conditions `Σ w_i = 0` and `Σ w_i p_iᵀ = 0`.

use nalgebra::{DMatrix, SVD};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par;
use crate::volume::{DisplacementField, Grid};

pub const DEFAULT_RIDGE: f64 = 1e-8;

/// Scattered displacements to interpolate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ControlGrid {
    pub points: Vec<[f64; 3]>,
    pub displacements: Vec<[f64; 3]>,
}

impl ControlGrid {
    /// Nodes of a uniform lattice spanning the voxel-centre bounding box of `grid`,
    /// boundaries included, with zero displacements. A single node on an axis sits
    /// at the centre of that axis.
    pub fn uniform(grid: &Grid, nodes: [usize; 3]) -> Self {
        let (lo, hi) = grid.world_bounds();
        let axis = |a: usize| -> Vec<f64> {
            let n = nodes[a].max(1);
            if n == 1 {
                vec![0.5 * (lo[a] + hi[a])]
            } else {
                (0..n)
                    .map(|i| lo[a] + (hi[a] - lo[a]) * i as f64 / (n - 1) as f64)
                    .collect()
            }
        };
        let (xs, ys, zs) = (axis(0), axis(1), axis(2));
        let mut points = Vec::with_capacity(xs.len() * ys.len() * zs.len());
        for &z in &zs {
            for &y in &ys {
                for &x in &xs {
                    points.push([x, y, z]);
                }
            }
        }
        let displacements = vec![[0.0; 3]; points.len()];
        Self { points, displacements }
    }
}

/// Fitted thin-plate spline.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TpsModel {
    pub control_points: Vec<[f64; 3]>,
    pub kernel_weights: Vec<[f64; 3]>,
    /// Row `c` holds the affine part of displacement component `c`:
    /// `[∂/∂x, ∂/∂y, ∂/∂z, constant]`.
    pub affine: [[f64; 4]; 3],
    pub ridge: f64,
}

#[inline]
fn dist(a: [f64; 3], b: [f64; 3]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    (dx * dx + dy * dy + dz * dz).sqrt()
}

impl TpsModel {
    /// Model whose displacement is zero everywhere.
    pub fn zero() -> Self {
        Self {
            control_points: Vec::new(),
            kernel_weights: Vec::new(),
            affine: [[0.0; 4]; 3],
            ridge: 0.0,
        }
    }

    /// Displacement at world point `x`.
    #[inline]
    pub fn displacement(&self, x: [f64; 3]) -> [f64; 3] {
        let mut u = [0.0; 3];
        for (c, row) in self.affine.iter().enumerate() {
            u[c] = row[0] * x[0] + row[1] * x[1] + row[2] * x[2] + row[3];
        }
        for (p, w) in self.control_points.iter().zip(&self.kernel_weights) {
            let r = dist(x, *p);
            u[0] += w[0] * r;
            u[1] += w[1] * r;
            u[2] += w[2] * r;
        }
        u
    }
}

/// Fits a TPS through the control displacements.
///
/// `ridge` is added to the kernel diagonal; with `ridge = 0` the model
/// interpolates exactly.
pub fn tps_fit(cg: &ControlGrid, ridge: f64) -> Result<TpsModel> {
    let n = cg.points.len();
    if cg.displacements.len() != n {
        return Err(Error::TpsFit(format!(
            "{} points but {} displacements",
            n,
            cg.displacements.len()
        )));
    }
    if !(ridge >= 0.0) || !ridge.is_finite() {
        return Err(Error::TpsFit(format!("ridge {ridge} must be non-negative")));
    }
    if cg
        .points
        .iter()
        .chain(&cg.displacements)
        .flatten()
        .any(|v| !v.is_finite())
    {
        return Err(Error::TpsFit("non-finite control point or displacement".into()));
    }
    if n < 4 {
        return Err(Error::TpsFit(format!(
            "need at least 4 non-coplanar control points, got {n}"
        )));
    }
    check_spread(&cg.points)?;

    let m = n + 4;
    let mut a = DMatrix::<f64>::zeros(m, m);
    for i in 0..n {
        for j in 0..n {
            a[(i, j)] = dist(cg.points[i], cg.points[j]);
        }
        a[(i, i)] += ridge;
        let p = cg.points[i];
        let row = [1.0, p[0], p[1], p[2]];
        for (k, &v) in row.iter().enumerate() {
            a[(i, n + k)] = v;
            a[(n + k, i)] = v;
        }
    }
    let mut rhs = DMatrix::<f64>::zeros(m, 3);
    for (i, d) in cg.displacements.iter().enumerate() {
        for c in 0..3 {
            rhs[(i, c)] = d[c];
        }
    }
    let lu = a.clone().lu();
    let sol = lu
        .solve(&rhs)
        .ok_or_else(|| Error::TpsFit("singular system (duplicate control points?)".into()))?;
    if sol.iter().any(|v| !v.is_finite()) {
        return Err(Error::TpsFit(
            "ill-conditioned system produced non-finite weights".into(),
        ));
    }
    let kernel_weights = (0..n).map(|i| [sol[(i, 0)], sol[(i, 1)], sol[(i, 2)]]).collect();
    let mut affine = [[0.0; 4]; 3];
    for (c, row) in affine.iter_mut().enumerate() {
        // solution rows n..n+4 are [constant, x, y, z]
        *row = [sol[(n + 1, c)], sol[(n + 2, c)], sol[(n + 3, c)], sol[(n, c)]];
    }
    let model = TpsModel {
        control_points: cg.points.clone(),
        kernel_weights,
        affine,
        ridge,
    };
    // A near-singular solve can still return finite garbage; check the fit.
    let scale = cg.displacements.iter().flatten().fold(1.0f64, |s, v| s.max(v.abs()));
    let tol = 1e-6 * scale + ridge * 1e3 * scale;
    for (p, d) in cg.points.iter().zip(&cg.displacements) {
        let u = model.displacement(*p);
        if (0..3).any(|c| (u[c] - d[c]).abs() > tol) {
            return Err(Error::TpsFit(
                "ill-conditioned system: interpolation residual too large".into(),
            ));
        }
    }
    Ok(model)
}

/// Rejects point sets lying (numerically) in a plane or on a line.
fn check_spread(points: &[[f64; 3]]) -> Result<()> {
    let n = points.len() as f64;
    let mut mean = [0.0; 3];
    for p in points {
        for a in 0..3 {
            mean[a] += p[a] / n;
        }
    }
    let centered = DMatrix::from_fn(points.len(), 3, |i, a| points[i][a] - mean[a]);
    let sv = SVD::new(centered, false, false).singular_values;
    let max = sv.max();
    let min = sv.min();
    if !(max > 0.0) || min <= 1e-10 * max {
        return Err(Error::TpsFit(
            "control points are coplanar or collinear; the affine part is undetermined".into(),
        ));
    }
    Ok(())
}

/// Dense evaluation of the model at every voxel centre of `grid`.
pub fn tps_evaluate(model: &TpsModel, grid: &Grid) -> DisplacementField {
    let vectors = par::map_range(grid.len(), |i| model.displacement(grid.world_of(i)));
    DisplacementField { grid: *grid, vectors }
}

/// Rotation about `center` followed by translation: `x ↦ R (x − c) + c + t`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RigidTransform {
    pub rotation: [[f64; 3]; 3],
    pub translation: [f64; 3],
    pub center: [f64; 3],
}

impl RigidTransform {
    pub fn identity() -> Self {
        Self {
            rotation: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            translation: [0.0; 3],
            center: [0.0; 3],
        }
    }

    /// `R = Rz(γ) · Ry(β) · Rx(α)` with angles in radians.
    pub fn from_euler(angles: [f64; 3], translation: [f64; 3], center: [f64; 3]) -> Self {
        let (sa, ca) = angles[0].sin_cos();
        let (sb, cb) = angles[1].sin_cos();
        let (sg, cg) = angles[2].sin_cos();
        let rx = [[1.0, 0.0, 0.0], [0.0, ca, -sa], [0.0, sa, ca]];
        let ry = [[cb, 0.0, sb], [0.0, 1.0, 0.0], [-sb, 0.0, cb]];
        let rz = [[cg, -sg, 0.0], [sg, cg, 0.0], [0.0, 0.0, 1.0]];
        Self {
            rotation: matmul(&rz, &matmul(&ry, &rx)),
            translation,
            center,
        }
    }

    #[inline]
    pub fn apply(&self, x: [f64; 3]) -> [f64; 3] {
        let u = self.displacement(x);
        [x[0] + u[0], x[1] + u[1], x[2] + u[2]]
    }

    /// `apply(x) − x`, computed without cancellation: `(R − I)(x − c) + t`.
    #[inline]
    pub fn displacement(&self, x: [f64; 3]) -> [f64; 3] {
        let d = [x[0] - self.center[0], x[1] - self.center[1], x[2] - self.center[2]];
        let r = &self.rotation;
        let mut u = [0.0; 3];
        for a in 0..3 {
            u[a] = (r[a][0] * d[0] + r[a][1] * d[1] + r[a][2] * d[2] - d[a]) + self.translation[a];
        }
        u
    }
}

fn matmul(a: &[[f64; 3]; 3], b: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let mut c = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            c[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    c
}

/// Backward-warp field of the composition: `x + Φ(x) = T_tps(T_rigid(x))`,
/// where `T_tps(y) = y + u(y)`.
pub fn compose_rigid_then_tps(r: &RigidTransform, model: &TpsModel, grid: &Grid) -> DisplacementField {
    let vectors = par::map_range(grid.len(), |i| {
        let x = grid.world_of(i);
        let v = r.displacement(x);
        let u = model.displacement([x[0] + v[0], x[1] + v[1], x[2] + v[2]]);
        [v[0] + u[0], v[1] + u[1], v[2] + u[2]]
    });
    DisplacementField { grid: *grid, vectors }
}

/// Largest Euclidean vector norm in the field (0 for an empty field).
pub fn max_displacement(field: &DisplacementField) -> f64 {
    field
        .vectors
        .iter()
        .map(|v| (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt())
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_grid(nodes: [usize; 3], seed: u64) -> ControlGrid {
        let g = Grid::new([9, 8, 7], [1.0, 1.5, 2.0], [-3.0, 1.0, 2.0]).unwrap();
        let mut cg = ControlGrid::uniform(&g, nodes);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for d in cg.displacements.iter_mut() {
            *d = [
                rng.gen_range(-3.0..3.0),
                rng.gen_range(-3.0..3.0),
                rng.gen_range(-3.0..3.0),
            ];
        }
        cg
    }

    #[test]
    fn zero_displacements_give_zero_model() {
        let g = Grid::isotropic([10, 10, 10], 1.0).unwrap();
        let cg = ControlGrid::uniform(&g, [3, 3, 3]);
        let m = tps_fit(&cg, 0.0).unwrap();
        assert!(m.kernel_weights.iter().flatten().all(|&w| w == 0.0));
        assert_eq!(m.affine, [[0.0; 4]; 3]);
        assert!(tps_evaluate(&m, &g).vectors.iter().flatten().all(|&v| v == 0.0));
        assert!(tps_evaluate(&TpsModel::zero(), &g)
            .vectors
            .iter()
            .flatten()
            .all(|&v| v == 0.0));
    }

    #[test]
    fn constant_displacement_goes_to_affine() {
        let g = Grid::isotropic([10, 10, 10], 1.0).unwrap();
        let mut cg = ControlGrid::uniform(&g, [3, 3, 3]);
        cg.displacements.iter_mut().for_each(|d| *d = [1.5, -2.0, 0.25]);
        let m = tps_fit(&cg, 0.0).unwrap();
        assert!(m.kernel_weights.iter().flatten().all(|w| w.abs() < 1e-10));
        for c in 0..3 {
            assert!((m.affine[c][3] - [1.5, -2.0, 0.25][c]).abs() < 1e-10);
        }
        for v in tps_evaluate(&m, &g).vectors {
            assert!((v[0] - 1.5).abs() < 1e-9 && (v[1] + 2.0).abs() < 1e-9);
        }
    }

    #[test]
    fn interpolates_and_satisfies_side_conditions() {
        let cg = random_grid([3, 3, 3], 3);
        let m = tps_fit(&cg, 0.0).unwrap();
        for (p, d) in cg.points.iter().zip(&cg.displacements) {
            let u = m.displacement(*p);
            for c in 0..3 {
                assert!((u[c] - d[c]).abs() <= 1e-9);
            }
        }
        for c in 0..3 {
            let s: f64 = m.kernel_weights.iter().map(|w| w[c]).sum();
            assert!(s.abs() < 1e-8);
            for a in 0..3 {
                let s: f64 = m
                    .kernel_weights
                    .iter()
                    .zip(&m.control_points)
                    .map(|(w, p)| w[c] * p[a])
                    .sum();
                assert!(s.abs() < 1e-8);
            }
        }
    }

    #[test]
    fn single_displaced_point_is_reproduced() {
        let g = Grid::isotropic([8, 8, 8], 1.0).unwrap();
        let mut cg = ControlGrid::uniform(&g, [3, 3, 3]);
        cg.displacements[13] = [2.0, -1.0, 0.5];
        let m = tps_fit(&cg, 0.0).unwrap();
        let u = m.displacement(cg.points[13]);
        assert!((u[0] - 2.0).abs() < 1e-9 && (u[1] + 1.0).abs() < 1e-9 && (u[2] - 0.5).abs() < 1e-9);
    }

    #[test]
    fn coplanar_points_are_rejected() {
        let cg = ControlGrid {
            points: vec![
                [0.0, 0.0, 0.0],
                [1.0, 0.0, 0.0],
                [0.0, 1.0, 0.0],
                [1.0, 1.0, 0.0],
                [2.0, 3.0, 0.0],
            ],
            displacements: vec![[0.0; 3]; 5],
        };
        let err = tps_fit(&cg, 0.0).unwrap_err().to_string();
        assert!(err.contains("coplanar"), "{err}");
        let few = ControlGrid {
            points: vec![[0.0; 3], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]],
            displacements: vec![[0.0; 3]; 3],
        };
        assert!(tps_fit(&few, 0.0).is_err());
    }

    #[test]
    fn linearity_in_displacements() {
        let cg = random_grid([3, 3, 3], 8);
        let mut scaled = cg.clone();
        scaled.displacements.iter_mut().flatten().for_each(|v| *v *= -2.5);
        let g = Grid::isotropic([6, 5, 4], 2.0).unwrap();
        let a = tps_evaluate(&tps_fit(&cg, 0.0).unwrap(), &g);
        let b = tps_evaluate(&tps_fit(&scaled, 0.0).unwrap(), &g);
        for (u, v) in a.vectors.iter().zip(&b.vectors) {
            for c in 0..3 {
                assert!((v[c] + 2.5 * u[c]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn translation_equivariance() {
        let cg = random_grid([3, 3, 3], 9);
        let shift = [12.5, -7.0, 3.25];
        let mut moved = cg.clone();
        moved
            .points
            .iter_mut()
            .for_each(|p| (0..3).for_each(|a| p[a] += shift[a]));
        let m0 = tps_fit(&cg, 0.0).unwrap();
        let m1 = tps_fit(&moved, 0.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let x = [
                rng.gen_range(-5.0..15.0),
                rng.gen_range(-5.0..15.0),
                rng.gen_range(-5.0..15.0),
            ];
            let y = [x[0] + shift[0], x[1] + shift[1], x[2] + shift[2]];
            let (u, v) = (m0.displacement(x), m1.displacement(y));
            for c in 0..3 {
                assert!((u[c] - v[c]).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn rigid_is_orthonormal_and_distance_preserving() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            let r = RigidTransform::from_euler(
                [
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                ],
                [rng.gen_range(-30.0..30.0), 1.0, -2.0],
                [5.0, 6.0, 7.0],
            );
            let m = r.rotation;
            let det = m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
                - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
                + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
            assert!((det - 1.0).abs() < 1e-10);
            for i in 0..3 {
                for j in 0..3 {
                    let d: f64 = (0..3).map(|k| m[k][i] * m[k][j]).sum();
                    assert!((d - f64::from(u8::from(i == j))).abs() < 1e-10);
                }
            }
            let a = [rng.gen_range(-50.0..50.0), 3.0, 1.0];
            let b = [0.5, rng.gen_range(-50.0..50.0), 9.0];
            assert!((dist(r.apply(a), r.apply(b)) - dist(a, b)).abs() < 1e-9);
        }
    }

    #[test]
    fn composition_cases() {
        let g = Grid::isotropic([5, 6, 7], 1.5).unwrap();
        let f = compose_rigid_then_tps(&RigidTransform::identity(), &TpsModel::zero(), &g);
        assert!(f.vectors.iter().flatten().all(|&v| v == 0.0));
        let mut t = RigidTransform::identity();
        t.translation = [1.0, -2.0, 3.0];
        let f = compose_rigid_then_tps(&t, &TpsModel::zero(), &g);
        assert!(f.vectors.iter().all(|v| *v == [1.0, -2.0, 3.0]));
    }

    #[test]
    fn max_displacement_cases() {
        let g = Grid::isotropic([2, 2, 1], 1.0).unwrap();
        assert_eq!(max_displacement(&DisplacementField::zeros(g)), 0.0);
        let mut f = DisplacementField::zeros(g);
        f.vectors[2] = [3.0, 4.0, 0.0];
        assert_eq!(max_displacement(&f), 5.0);
    }
}
