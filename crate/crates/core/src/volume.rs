//! Volumetric data model and preprocessing.
//!
//! All dense arrays are stored x-fastest: the linear index of voxel `(x, y, z)`
//! is `x + nx * (y + ny * z)`. World coordinates are in millimetres and refer to
//! voxel centres: `world = origin + index * spacing` per axis.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par;

/// Voxel lattice with physical spacing and origin.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub shape: [usize; 3],
    pub spacing: [f64; 3],
    pub origin: [f64; 3],
}

impl Grid {
    pub fn new(shape: [usize; 3], spacing: [f64; 3], origin: [f64; 3]) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::InvalidGrid(format!("shape {shape:?} has a zero axis")));
        }
        if spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::InvalidGrid(format!(
                "spacing {spacing:?} must be positive and finite"
            )));
        }
        if origin.iter().any(|o| !o.is_finite()) {
            return Err(Error::InvalidGrid(format!("origin {origin:?} is not finite")));
        }
        Ok(Self { shape, spacing, origin })
    }

    /// Grid with the given isotropic spacing and zero origin.
    pub fn isotropic(shape: [usize; 3], spacing: f64) -> Result<Self> {
        Self::new(shape, [spacing; 3], [0.0; 3])
    }

    pub fn len(&self) -> usize {
        self.shape[0] * self.shape[1] * self.shape[2]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.shape[0] * (y + self.shape[1] * z)
    }

    #[inline]
    pub fn coords(&self, index: usize) -> [usize; 3] {
        let x = index % self.shape[0];
        let r = index / self.shape[0];
        [x, r % self.shape[1], r / self.shape[1]]
    }

    #[inline]
    pub fn voxel_to_world(&self, v: [f64; 3]) -> [f64; 3] {
        [
            self.origin[0] + v[0] * self.spacing[0],
            self.origin[1] + v[1] * self.spacing[1],
            self.origin[2] + v[2] * self.spacing[2],
        ]
    }

    #[inline]
    pub fn world_to_voxel(&self, w: [f64; 3]) -> [f64; 3] {
        [
            (w[0] - self.origin[0]) / self.spacing[0],
            (w[1] - self.origin[1]) / self.spacing[1],
            (w[2] - self.origin[2]) / self.spacing[2],
        ]
    }

    /// World position of the centre of voxel `index`.
    #[inline]
    pub fn world_of(&self, index: usize) -> [f64; 3] {
        let c = self.coords(index);
        self.voxel_to_world([c[0] as f64, c[1] as f64, c[2] as f64])
    }

    /// Bounding box spanned by the first and last voxel centres.
    pub fn world_bounds(&self) -> ([f64; 3], [f64; 3]) {
        let last = [
            (self.shape[0] - 1) as f64,
            (self.shape[1] - 1) as f64,
            (self.shape[2] - 1) as f64,
        ];
        (self.origin, self.voxel_to_world(last))
    }

    pub fn center_world(&self) -> [f64; 3] {
        let (lo, hi) = self.world_bounds();
        [0.5 * (lo[0] + hi[0]), 0.5 * (lo[1] + hi[1]), 0.5 * (lo[2] + hi[2])]
    }

    /// Same lattice (shape and spacing, origin within 1e-9 mm).
    pub fn matches(&self, other: &Grid) -> bool {
        self.shape == other.shape
            && (0..3).all(|a| {
                (self.spacing[a] - other.spacing[a]).abs() <= 1e-12 * self.spacing[a].max(1.0)
                    && (self.origin[a] - other.origin[a]).abs() <= 1e-9
            })
    }

    pub(crate) fn ensure_matches(&self, other: &Grid, what: &str) -> Result<()> {
        if self.matches(other) {
            Ok(())
        } else {
            Err(Error::ShapeMismatch(format!(
                "{what}: grid {:?}/{:?} vs {:?}/{:?}",
                self.shape, self.spacing, other.shape, other.spacing
            )))
        }
    }
}

/// Scalar intensity volume.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    pub grid: Grid,
    pub data: Vec<f64>,
}

impl Volume {
    pub fn new(grid: Grid, data: Vec<f64>) -> Result<Self> {
        if data.len() != grid.len() {
            return Err(Error::ShapeMismatch(format!(
                "volume data has {} values, grid needs {}",
                data.len(),
                grid.len()
            )));
        }
        Ok(Self { grid, data })
    }

    pub fn zeros(grid: Grid) -> Self {
        Self::filled(grid, 0.0)
    }

    pub fn filled(grid: Grid, value: f64) -> Self {
        Self {
            grid,
            data: vec![value; grid.len()],
        }
    }

    pub fn from_fn(grid: Grid, f: impl Fn([usize; 3]) -> f64 + Sync + Send) -> Self {
        let data = par::map_range(grid.len(), |i| f(grid.coords(i)));
        Self { grid, data }
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize, z: usize) -> f64 {
        self.data[self.grid.index(x, y, z)]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.data
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            })
    }

    /// Trilinear sample at a continuous voxel coordinate with clamp-to-edge.
    #[inline]
    pub fn sample_voxel(&self, c: [f64; 3]) -> f64 {
        let s = Stencil::new(&self.grid.shape, c);
        s.sample(&self.grid, &self.data)
    }
}

/// Segmentation with 8-bit labels; 0 is background.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelMap {
    pub grid: Grid,
    data: Vec<u8>,
    labels: Vec<u8>,
}

impl LabelMap {
    pub fn new(grid: Grid, data: Vec<u8>) -> Result<Self> {
        if data.len() != grid.len() {
            return Err(Error::ShapeMismatch(format!(
                "label data has {} values, grid needs {}",
                data.len(),
                grid.len()
            )));
        }
        let labels = present_labels(&data);
        Ok(Self { grid, data, labels })
    }

    pub fn empty(grid: Grid) -> Self {
        Self {
            grid,
            data: vec![0; grid.len()],
            labels: Vec::new(),
        }
    }

    pub fn from_fn(grid: Grid, f: impl Fn([usize; 3]) -> u8 + Sync + Send) -> Self {
        let data = par::map_range(grid.len(), |i| f(grid.coords(i)));
        let labels = present_labels(&data);
        Self { grid, data, labels }
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn into_data(self) -> Vec<u8> {
        self.data
    }

    /// Sorted distinct nonzero labels present in the map.
    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn contains(&self, label: u8) -> bool {
        self.labels.binary_search(&label).is_ok()
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize, z: usize) -> u8 {
        self.data[self.grid.index(x, y, z)]
    }

    pub fn count(&self, label: u8) -> usize {
        self.data.iter().filter(|&&v| v == label).count()
    }

    /// Nearest-neighbour lookup at a continuous voxel coordinate, clamped to the grid.
    #[inline]
    pub fn sample_nearest(&self, c: [f64; 3]) -> u8 {
        let g = &self.grid;
        let ix = nearest_index(c[0], g.shape[0]);
        let iy = nearest_index(c[1], g.shape[1]);
        let iz = nearest_index(c[2], g.shape[2]);
        self.data[g.index(ix, iy, iz)]
    }
}

fn present_labels(data: &[u8]) -> Vec<u8> {
    let mut seen = [false; 256];
    for &v in data {
        seen[v as usize] = true;
    }
    (1..=255u8).filter(|&l| seen[l as usize]).collect()
}

#[inline]
pub(crate) fn nearest_index(c: f64, n: usize) -> usize {
    let r = c.round();
    if r <= 0.0 {
        0
    } else if r >= (n - 1) as f64 {
        n - 1
    } else {
        r as usize
    }
}

/// Dense displacement field Φ in millimetres, one world-axis-aligned vector per voxel.
#[derive(Clone, Debug, PartialEq)]
pub struct DisplacementField {
    pub grid: Grid,
    pub vectors: Vec<[f64; 3]>,
}

impl DisplacementField {
    pub fn new(grid: Grid, vectors: Vec<[f64; 3]>) -> Result<Self> {
        if vectors.len() != grid.len() {
            return Err(Error::ShapeMismatch(format!(
                "field has {} vectors, grid needs {}",
                vectors.len(),
                grid.len()
            )));
        }
        if vectors.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("displacement field".into()));
        }
        Ok(Self { grid, vectors })
    }

    pub fn zeros(grid: Grid) -> Self {
        Self {
            grid,
            vectors: vec![[0.0; 3]; grid.len()],
        }
    }

    pub fn constant(grid: Grid, v: [f64; 3]) -> Self {
        Self {
            grid,
            vectors: vec![v; grid.len()],
        }
    }

    /// Continuous voxel coordinate sampled by output voxel `index` (backward warp).
    #[inline]
    pub fn source_voxel(&self, index: usize) -> [f64; 3] {
        let g = &self.grid;
        let c = g.coords(index);
        let d = self.vectors[index];
        [
            c[0] as f64 + d[0] / g.spacing[0],
            c[1] as f64 + d[1] / g.spacing[1],
            c[2] as f64 + d[2] / g.spacing[2],
        ]
    }

    /// Planar copy of one component.
    pub fn component(&self, axis: usize) -> Volume {
        Volume {
            grid: self.grid,
            data: self.vectors.iter().map(|v| v[axis]).collect(),
        }
    }

    pub fn from_components(grid: Grid, cx: &[f64], cy: &[f64], cz: &[f64]) -> Result<Self> {
        if cx.len() != grid.len() || cy.len() != grid.len() || cz.len() != grid.len() {
            return Err(Error::ShapeMismatch("field components do not match grid".into()));
        }
        let vectors = (0..grid.len()).map(|i| [cx[i], cy[i], cz[i]]).collect();
        Self::new(grid, vectors)
    }
}

/// Per-axis linear interpolation stencil with clamp-to-edge.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Axis1 {
    pub i0: usize,
    pub i1: usize,
    pub t: f64,
    /// Coordinate was clamped (or the axis is degenerate); derivative is zero.
    pub clamped: bool,
}

impl Axis1 {
    #[inline]
    pub fn new(c: f64, n: usize) -> Self {
        if n == 1 {
            return Self {
                i0: 0,
                i1: 0,
                t: 0.0,
                clamped: true,
            };
        }
        let hi = (n - 1) as f64;
        let clamped = !(c >= 0.0 && c <= hi);
        let cc = if c.is_nan() { 0.0 } else { c.clamp(0.0, hi) };
        let i0 = (cc.floor() as usize).min(n - 2);
        Self {
            i0,
            i1: i0 + 1,
            t: cc - i0 as f64,
            clamped,
        }
    }

    #[inline]
    pub fn weights(&self) -> [f64; 2] {
        [1.0 - self.t, self.t]
    }
}

#[inline]
pub(crate) fn lerp(a: f64, b: f64, t: f64) -> f64 {
    if t == 0.0 {
        a
    } else if t == 1.0 {
        b
    } else {
        a * (1.0 - t) + b * t
    }
}

/// Trilinear stencil: eight corner indices and interpolation fractions.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Stencil {
    pub ax: [Axis1; 3],
}

impl Stencil {
    #[inline]
    pub fn new(shape: &[usize; 3], c: [f64; 3]) -> Self {
        Self {
            ax: [
                Axis1::new(c[0], shape[0]),
                Axis1::new(c[1], shape[1]),
                Axis1::new(c[2], shape[2]),
            ],
        }
    }

    #[inline]
    pub fn corner(&self, grid: &Grid, bx: usize, by: usize, bz: usize) -> usize {
        let x = if bx == 0 { self.ax[0].i0 } else { self.ax[0].i1 };
        let y = if by == 0 { self.ax[1].i0 } else { self.ax[1].i1 };
        let z = if bz == 0 { self.ax[2].i0 } else { self.ax[2].i1 };
        grid.index(x, y, z)
    }

    #[inline]
    pub fn sample(&self, grid: &Grid, data: &[f64]) -> f64 {
        let [ax, ay, az] = self.ax;
        let row = |y: usize, z: usize| {
            let base = grid.shape[0] * (y + grid.shape[1] * z);
            lerp(data[base + ax.i0], data[base + ax.i1], ax.t)
        };
        let plane = |z: usize| lerp(row(ay.i0, z), row(ay.i1, z), ay.t);
        lerp(plane(az.i0), plane(az.i1), az.t)
    }

    /// Interpolated value and its derivative with respect to each continuous voxel coordinate.
    #[inline]
    pub fn sample_with_gradient(&self, grid: &Grid, data: &[f64]) -> (f64, [f64; 3]) {
        let [ax, ay, az] = self.ax;
        let (wx, wy, wz) = (ax.weights(), ay.weights(), az.weights());
        let mut v = [[[0.0; 2]; 2]; 2];
        for (bz, vz) in v.iter_mut().enumerate() {
            for (by, vy) in vz.iter_mut().enumerate() {
                for (bx, vx) in vy.iter_mut().enumerate() {
                    *vx = data[self.corner(grid, bx, by, bz)];
                }
            }
        }
        let mut value = 0.0;
        for bz in 0..2 {
            for by in 0..2 {
                for bx in 0..2 {
                    value += wx[bx] * wy[by] * wz[bz] * v[bz][by][bx];
                }
            }
        }
        // differences first, so a locally constant image has an exactly zero gradient
        let mut grad = [0.0; 3];
        for i in 0..2 {
            for j in 0..2 {
                grad[0] += wy[i] * wz[j] * (v[j][i][1] - v[j][i][0]);
                grad[1] += wx[i] * wz[j] * (v[j][1][i] - v[j][0][i]);
                grad[2] += wx[i] * wy[j] * (v[1][j][i] - v[0][j][i]);
            }
        }
        for (g, a) in grad.iter_mut().zip(self.ax.iter()) {
            if a.clamped {
                *g = 0.0;
            }
        }
        (value, grad)
    }
}

/// Images that can be resampled onto another grid.
pub trait Resample: Sized {
    fn grid(&self) -> &Grid;
    fn check_finite(&self) -> Result<()> {
        Ok(())
    }
    /// Samples `self` at every voxel centre of `target` (world coordinates).
    fn resample_onto(&self, target: Grid) -> Self;
}

impl Resample for Volume {
    fn grid(&self) -> &Grid {
        &self.grid
    }

    fn check_finite(&self) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite("volume".into()))
        }
    }

    fn resample_onto(&self, target: Grid) -> Self {
        let src = self.grid;
        let data = par::map_range(target.len(), |i| {
            let c = src.world_to_voxel(target.world_of(i));
            Stencil::new(&src.shape, c).sample(&src, &self.data)
        });
        Volume { grid: target, data }
    }
}

impl Resample for LabelMap {
    fn grid(&self) -> &Grid {
        &self.grid
    }

    fn resample_onto(&self, target: Grid) -> Self {
        let src = self.grid;
        let data = par::map_range(target.len(), |i| {
            self.sample_nearest(src.world_to_voxel(target.world_of(i)))
        });
        let labels = present_labels(&data);
        LabelMap {
            grid: target,
            data,
            labels,
        }
    }
}

impl Resample for DisplacementField {
    fn grid(&self) -> &Grid {
        &self.grid
    }

    fn check_finite(&self) -> Result<()> {
        if self.vectors.iter().flatten().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite("displacement field".into()))
        }
    }

    /// Vectors keep their millimetre values; only the lattice changes.
    fn resample_onto(&self, target: Grid) -> Self {
        let src = self.grid;
        let comps: Vec<Vec<f64>> = (0..3).map(|a| self.component(a).data).collect();
        let vectors = par::map_range(target.len(), |i| {
            let s = Stencil::new(&src.shape, src.world_to_voxel(target.world_of(i)));
            [
                s.sample(&src, &comps[0]),
                s.sample(&src, &comps[1]),
                s.sample(&src, &comps[2]),
            ]
        });
        DisplacementField { grid: target, vectors }
    }
}

/// Resamples to isotropic `target_spacing`, keeping the origin and the span of voxel centres.
pub fn resample_isotropic<T: Resample + Clone>(v: &T, target_spacing: f64) -> Result<T> {
    if !(target_spacing > 0.0) || !target_spacing.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "target spacing {target_spacing} must be positive"
        )));
    }
    v.check_finite()?;
    let g = *v.grid();
    if g.spacing.iter().all(|&s| s == target_spacing) {
        return Ok(v.clone());
    }
    let mut shape = [1; 3];
    for a in 0..3 {
        let span = (g.shape[a] - 1) as f64 * g.spacing[a];
        shape[a] = (span / target_spacing + 1e-9).floor() as usize + 1;
    }
    let target = Grid::new(shape, [target_spacing; 3], g.origin)?;
    Ok(v.resample_onto(target))
}

/// Resizes to `shape`, rescaling spacing so the physical extent (`shape * spacing`) is preserved.
pub fn resize<T: Resample + Clone>(v: &T, shape: [usize; 3]) -> Result<T> {
    let g = *v.grid();
    if g.is_empty() {
        return Err(Error::InvalidGrid("cannot resize an empty volume".into()));
    }
    if shape.contains(&0) {
        return Err(Error::InvalidArgument(format!(
            "target shape {shape:?} has a zero axis"
        )));
    }
    v.check_finite()?;
    if shape == g.shape {
        return Ok(v.clone());
    }
    let mut spacing = [0.0; 3];
    let mut origin = [0.0; 3];
    for a in 0..3 {
        spacing[a] = g.spacing[a] * g.shape[a] as f64 / shape[a] as f64;
        origin[a] = g.origin[a] - 0.5 * g.spacing[a] + 0.5 * spacing[a];
    }
    let target = Grid::new(shape, spacing, origin)?;
    Ok(v.resample_onto(target))
}

/// Voxel offsets of a crop, for mapping results back to the source lattice.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CropRecord {
    pub offset: [usize; 3],
    pub shape: [usize; 3],
    pub source_shape: [usize; 3],
}

impl CropRecord {
    pub fn to_source_index(&self, c: [usize; 3]) -> [usize; 3] {
        [c[0] + self.offset[0], c[1] + self.offset[1], c[2] + self.offset[2]]
    }

    fn cropped_grid(&self, g: &Grid) -> Result<Grid> {
        let o = g.voxel_to_world([self.offset[0] as f64, self.offset[1] as f64, self.offset[2] as f64]);
        Grid::new(self.shape, g.spacing, o)
    }

    fn gather<T: Copy>(&self, g: &Grid, data: &[T]) -> Vec<T> {
        let mut out = Vec::with_capacity(self.shape.iter().product());
        for z in 0..self.shape[2] {
            for y in 0..self.shape[1] {
                let base = g.index(self.offset[0], y + self.offset[1], z + self.offset[2]);
                out.extend_from_slice(&data[base..base + self.shape[0]]);
            }
        }
        out
    }
}

/// Crops `v` to the tight bounding box of the nonzero voxels of `m`, dilated by
/// `margin_mm` on every side and clamped to the volume.
pub fn crop_to_mask(v: &Volume, m: &LabelMap, margin_mm: f64) -> Result<(Volume, CropRecord)> {
    v.grid.ensure_matches(&m.grid, "crop_to_mask")?;
    if !(margin_mm >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "margin {margin_mm} must be non-negative"
        )));
    }
    let g = v.grid;
    let mut lo = g.shape;
    let mut hi = [0usize; 3];
    let mut any = false;
    for (i, &l) in m.data().iter().enumerate() {
        if l != 0 {
            any = true;
            let c = g.coords(i);
            for a in 0..3 {
                lo[a] = lo[a].min(c[a]);
                hi[a] = hi[a].max(c[a]);
            }
        }
    }
    if !any {
        return Err(Error::EmptyMask(
            "crop mask has no labelled voxels; sample unusable".into(),
        ));
    }
    let mut offset = [0; 3];
    let mut shape = [0; 3];
    for a in 0..3 {
        let pad = (margin_mm / g.spacing[a] + 1e-9).floor() as usize;
        let a0 = lo[a].saturating_sub(pad);
        let a1 = (hi[a] + pad).min(g.shape[a] - 1);
        offset[a] = a0;
        shape[a] = a1 - a0 + 1;
    }
    let rec = CropRecord {
        offset,
        shape,
        source_shape: g.shape,
    };
    let out = Volume {
        grid: rec.cropped_grid(&g)?,
        data: rec.gather(&g, &v.data),
    };
    Ok((out, rec))
}

/// Applies a crop computed by [`crop_to_mask`] to a label map on the same grid.
pub fn crop_labels(m: &LabelMap, rec: &CropRecord) -> Result<LabelMap> {
    if m.grid.shape != rec.source_shape {
        return Err(Error::ShapeMismatch("crop record does not match label map".into()));
    }
    LabelMap::new(rec.cropped_grid(&m.grid)?, rec.gather(&m.grid, m.data()))
}

/// Affine map of the intensity range onto [0, 1]. A constant volume maps to zeros.
pub fn normalize_intensity(v: &Volume) -> Volume {
    let (lo, hi) = v.min_max();
    let range = hi - lo;
    let data = if range > 0.0 && range.is_finite() {
        v.data.iter().map(|&x| (x - lo) / range).collect()
    } else {
        vec![0.0; v.data.len()]
    };
    Volume { grid: v.grid, data }
}

/// Unweighted mean of the world coordinates of all voxels carrying `label`.
pub fn centroid_mm(m: &LabelMap, label: u8) -> Result<[f64; 3]> {
    if m.labels().is_empty() {
        return Err(Error::EmptyMask("label map has no labelled voxels".into()));
    }
    if label == 0 || !m.contains(label) {
        return Err(Error::LabelAbsent {
            label,
            context: " in label map".into(),
        });
    }
    let mut sum = [0.0; 3];
    let mut n = 0usize;
    for (i, &l) in m.data().iter().enumerate() {
        if l == label {
            let c = m.grid.coords(i);
            for a in 0..3 {
                sum[a] += c[a] as f64;
            }
            n += 1;
        }
    }
    let mean = [sum[0] / n as f64, sum[1] / n as f64, sum[2] / n as f64];
    Ok(m.grid.voxel_to_world(mean))
}
