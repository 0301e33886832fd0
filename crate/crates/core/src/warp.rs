//! Spatial resampling through a displacement field, with analytic gradients.
//!
//! Backward-warp convention: output voxel `x` samples the source at world point
//! `x + Φ(x)`. Sampling clamps to the edge; derivatives with respect to a clamped
//! coordinate are zero.

use crate::error::{Error, Result};
use crate::par;
use crate::volume::{DisplacementField, Grid, LabelMap, Stencil, Volume};

/// Soft per-label channels, used to warp segmentations differentiably.
#[derive(Clone, Debug, PartialEq)]
pub struct OneHotStack {
    pub grid: Grid,
    pub labels: Vec<u8>,
    pub channels: Vec<Vec<f64>>,
}

impl OneHotStack {
    /// Hard one-hot encoding of `m` over `labels` (labels absent from `m` give empty channels).
    pub fn from_labels(m: &LabelMap, labels: &[u8]) -> Self {
        let channels = labels
            .iter()
            .map(|&l| m.data().iter().map(|&v| f64::from(u8::from(v == l))).collect())
            .collect();
        Self {
            grid: m.grid,
            labels: labels.to_vec(),
            channels,
        }
    }

    pub fn channel_sum(&self, c: usize) -> f64 {
        self.channels[c].iter().sum()
    }
}

pub fn warp_trilinear(v: &Volume, f: &DisplacementField) -> Result<Volume> {
    v.grid.ensure_matches(&f.grid, "warp_trilinear")?;
    Ok(Volume {
        grid: v.grid,
        data: warp_channel(&v.data, f),
    })
}

fn warp_channel(data: &[f64], f: &DisplacementField) -> Vec<f64> {
    let g = f.grid;
    let mut out = vec![0.0; g.len()];
    let row = g.shape[0];
    par::for_each_chunk_mut(&mut out, row * g.shape[1], |k, chunk| {
        let base = k * row * g.shape[1];
        for (j, o) in chunk.iter_mut().enumerate() {
            let s = Stencil::new(&g.shape, f.source_voxel(base + j));
            *o = s.sample(&g, data);
        }
    });
    out
}

pub fn warp_nearest(m: &LabelMap, f: &DisplacementField) -> Result<LabelMap> {
    m.grid.ensure_matches(&f.grid, "warp_nearest")?;
    let data = par::map_range(m.grid.len(), |i| m.sample_nearest(f.source_voxel(i)));
    LabelMap::new(m.grid, data)
}

pub fn warp_onehot(s: &OneHotStack, f: &DisplacementField) -> Result<OneHotStack> {
    s.grid.ensure_matches(&f.grid, "warp_onehot")?;
    Ok(OneHotStack {
        grid: s.grid,
        labels: s.labels.clone(),
        channels: s.channels.iter().map(|c| warp_channel(c, f)).collect(),
    })
}

/// Gradient of `Σ upstream · warp(channel)` with respect to the field, summed over
/// all `(channel, upstream)` pairs. Units: per millimetre of displacement.
pub fn field_gradient(pairs: &[(&[f64], &[f64])], f: &DisplacementField) -> Vec<[f64; 3]> {
    let g = f.grid;
    let inv = [1.0 / g.spacing[0], 1.0 / g.spacing[1], 1.0 / g.spacing[2]];
    par::map_range(g.len(), |i| {
        let s = Stencil::new(&g.shape, f.source_voxel(i));
        let mut acc = [0.0; 3];
        for (data, up) in pairs {
            let u = up[i];
            if u == 0.0 {
                continue;
            }
            let (_, d) = s.sample_with_gradient(&g, data);
            for a in 0..3 {
                acc[a] += u * d[a] * inv[a];
            }
        }
        acc
    })
}

/// Adjoint of the trilinear warp with respect to the warped values.
pub fn value_gradient(upstream: &[f64], f: &DisplacementField) -> Vec<f64> {
    let g = f.grid;
    let mut out = vec![0.0; g.len()];
    // Scatter; kept sequential so accumulation order is fixed.
    for (i, &u) in upstream.iter().enumerate() {
        if u == 0.0 {
            continue;
        }
        let s = Stencil::new(&g.shape, f.source_voxel(i));
        let [wx, wy, wz] = [s.ax[0].weights(), s.ax[1].weights(), s.ax[2].weights()];
        for bz in 0..2 {
            for by in 0..2 {
                for bx in 0..2 {
                    out[s.corner(&g, bx, by, bz)] += u * wx[bx] * wy[by] * wz[bz];
                }
            }
        }
    }
    out
}

/// Gradients of `Σ upstream · warp_trilinear(v, f)` with respect to `v` and `f`.
pub fn warp_backward(v: &Volume, f: &DisplacementField, upstream: &Volume) -> Result<(Volume, DisplacementField)> {
    v.grid.ensure_matches(&f.grid, "warp_backward")?;
    if upstream.data.len() != v.data.len() {
        return Err(Error::ShapeMismatch("upstream gradient does not match volume".into()));
    }
    let gv = value_gradient(&upstream.data, f);
    let gf = field_gradient(&[(&v.data, &upstream.data)], f);
    Ok((
        Volume { grid: v.grid, data: gv },
        DisplacementField {
            grid: f.grid,
            vectors: gf,
        },
    ))
}
