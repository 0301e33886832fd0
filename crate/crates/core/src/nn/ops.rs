//! Network primitives with hand-written backward passes.
//!
//! Every routine parallelises over independent output planes only, and each
//! output element is accumulated in a fixed order, so results do not depend on
//! the number of worker threads.

use crate::error::{Error, Result};
use crate::nn::tensor::Tensor;
use crate::par;

/// Kernel layout: `[out, in, 3, 3, 3]` with the x tap fastest.
pub fn conv3d(x: &Tensor, k: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (cin, cout) = check_conv(x, k, b)?;
    let [nb, _, nx, ny, nz] = x.shape;
    let plane = x.plane();
    let mut out = Tensor::zeros([nb, cout, nx, ny, nz]);
    par::for_each_chunk_mut(&mut out.data, plane, |idx, o| {
        let (n, co) = (idx / cout, idx % cout);
        o.iter_mut().for_each(|v| *v = b.data[co]);
        for ci in 0..cin {
            let src = x.channel(n, ci);
            let w = &k.data[(co * cin + ci) * 27..(co * cin + ci + 1) * 27];
            for z in 0..nz {
                for y in 0..ny {
                    let orow = &mut o[nx * (y + ny * z)..nx * (y + ny * z + 1)];
                    for dz in 0..3 {
                        let Some(zz) = shifted(z, dz, nz) else { continue };
                        for dy in 0..3 {
                            let Some(yy) = shifted(y, dy, ny) else { continue };
                            let irow = &src[nx * (yy + ny * zz)..nx * (yy + ny * zz + 1)];
                            let t = &w[9 * dz + 3 * dy..9 * dz + 3 * dy + 3];
                            row_taps(orow, irow, t);
                        }
                    }
                }
            }
        }
    });
    Ok(out)
}

#[inline]
fn shifted(i: usize, d: usize, n: usize) -> Option<usize> {
    let j = i + d;
    if j == 0 || j > n {
        None
    } else {
        Some(j - 1)
    }
}

/// `out[x] += t0·in[x−1] + t1·in[x] + t2·in[x+1]` with zero padding.
#[inline]
fn row_taps(out: &mut [f64], inp: &[f64], t: &[f64]) {
    let n = out.len();
    let (t0, t1, t2) = (t[0], t[1], t[2]);
    if n == 1 {
        out[0] += t1 * inp[0];
        return;
    }
    out[0] += t1 * inp[0] + t2 * inp[1];
    for x in 1..n - 1 {
        out[x] += t0 * inp[x - 1] + t1 * inp[x] + t2 * inp[x + 1];
    }
    out[n - 1] += t0 * inp[n - 2] + t1 * inp[n - 1];
}

/// Transposed taps: `out[x] += t0·in[x+1] + t1·in[x] + t2·in[x−1]`.
#[inline]
fn row_taps_t(out: &mut [f64], inp: &[f64], t: &[f64]) {
    let flipped = [t[2], t[1], t[0]];
    row_taps(out, inp, &flipped);
}

fn check_conv(x: &Tensor, k: &Tensor, b: &Tensor) -> Result<(usize, usize)> {
    let cin = x.channels();
    let [cout, kin, k0, k1, k2] = k.shape;
    if [k0, k1, k2] != [3, 3, 3] {
        return Err(Error::ShapeMismatch(format!("conv kernel {:?} must be 3×3×3", k.shape)));
    }
    if kin != cin {
        return Err(Error::ShapeMismatch(format!(
            "conv expects {kin} input channels, got {cin}"
        )));
    }
    if b.len() != cout {
        return Err(Error::ShapeMismatch(format!(
            "bias has {} entries for {cout} filters",
            b.len()
        )));
    }
    Ok((cin, cout))
}

pub struct ConvGrads {
    pub input: Option<Tensor>,
    pub kernel: Option<Vec<f64>>,
    pub bias: Option<Vec<f64>>,
}

/// Gradients of `Σ gy · conv3d(x, k, b)`; each part is computed only if requested.
pub fn conv3d_backward(x: &Tensor, k: &Tensor, gy: &Tensor, want_input: bool, want_params: bool) -> ConvGrads {
    let cin = x.channels();
    let cout = k.shape[0];
    let [nb, _, nx, ny, nz] = x.shape;
    let plane = x.plane();

    let input = want_input.then(|| {
        let mut gx = Tensor::zeros(x.shape);
        par::for_each_chunk_mut(&mut gx.data, plane, |idx, g| {
            let (n, ci) = (idx / cin, idx % cin);
            for co in 0..cout {
                let up = gy.channel(n, co);
                let w = &k.data[(co * cin + ci) * 27..(co * cin + ci + 1) * 27];
                for z in 0..nz {
                    for y in 0..ny {
                        let grow = &mut g[nx * (y + ny * z)..nx * (y + ny * z + 1)];
                        // input row (y, z) feeds output rows (y − dy + 1, z − dz + 1)
                        for dz in 0..3 {
                            let Some(oz) = shifted(z, 2 - dz, nz) else { continue };
                            for dy in 0..3 {
                                let Some(oy) = shifted(y, 2 - dy, ny) else { continue };
                                let urow = &up[nx * (oy + ny * oz)..nx * (oy + ny * oz + 1)];
                                row_taps_t(grow, urow, &w[9 * dz + 3 * dy..9 * dz + 3 * dy + 3]);
                            }
                        }
                    }
                }
            }
        });
        gx
    });

    let (kernel, bias) = if want_params {
        let mut gk = vec![0.0; k.len()];
        par::for_each_chunk_mut(&mut gk, cin * 27, |co, gkc| {
            for n in 0..nb {
                let up = gy.channel(n, co);
                for ci in 0..cin {
                    let src = x.channel(n, ci);
                    let acc = &mut gkc[ci * 27..(ci + 1) * 27];
                    for z in 0..nz {
                        for y in 0..ny {
                            let urow = &up[nx * (y + ny * z)..nx * (y + ny * z + 1)];
                            for dz in 0..3 {
                                let Some(zz) = shifted(z, dz, nz) else { continue };
                                for dy in 0..3 {
                                    let Some(yy) = shifted(y, dy, ny) else { continue };
                                    let irow = &src[nx * (yy + ny * zz)..nx * (yy + ny * zz + 1)];
                                    let t = &mut acc[9 * dz + 3 * dy..9 * dz + 3 * dy + 3];
                                    row_dots(urow, irow, t);
                                }
                            }
                        }
                    }
                }
            }
        });
        let gb = (0..cout)
            .map(|co| (0..nb).map(|n| gy.channel(n, co).iter().sum::<f64>()).sum())
            .collect();
        (Some(gk), Some(gb))
    } else {
        (None, None)
    };
    ConvGrads { input, kernel, bias }
}

/// `t[d] += Σ_x up[x] · inp[x + d − 1]` for the three taps.
#[inline]
fn row_dots(up: &[f64], inp: &[f64], t: &mut [f64]) {
    let n = up.len();
    let mut s0 = 0.0;
    let mut s1 = 0.0;
    let mut s2 = 0.0;
    for x in 0..n {
        s1 += up[x] * inp[x];
    }
    for x in 1..n {
        s0 += up[x] * inp[x - 1];
        s2 += up[x - 1] * inp[x];
    }
    t[0] += s0;
    t[1] += s1;
    t[2] += s2;
}

pub fn leaky_relu(x: &Tensor, slope: f64) -> Tensor {
    let data = x.data.iter().map(|&v| if v >= 0.0 { v } else { slope * v }).collect();
    Tensor {
        shape: x.shape,
        data,
        grad: None,
    }
}

pub fn leaky_relu_backward(x: &Tensor, slope: f64, gy: &[f64]) -> Vec<f64> {
    x.data
        .iter()
        .zip(gy)
        .map(|(&v, &g)| if v >= 0.0 { g } else { slope * g })
        .collect()
}

/// 2×2×2 max pooling with stride 2. Returns the pooled tensor and, for each
/// output element, the flat index of the selected input element (first maximum
/// in z, y, x scan order).
pub fn maxpool3d(x: &Tensor) -> Result<(Tensor, Vec<usize>)> {
    let [nb, c, nx, ny, nz] = x.shape;
    if nx % 2 != 0 || ny % 2 != 0 || nz % 2 != 0 {
        return Err(Error::ShapeMismatch(format!(
            "max pooling needs even spatial dims, got {:?}",
            x.spatial()
        )));
    }
    let (ox, oy, oz) = (nx / 2, ny / 2, nz / 2);
    let oplane = ox * oy * oz;
    let mut out = Tensor::zeros([nb, c, ox, oy, oz]);
    let mut arg = vec![0usize; out.len()];
    let plane = x.plane();
    for p in 0..nb * c {
        let base = p * plane;
        for z in 0..oz {
            for y in 0..oy {
                for xx in 0..ox {
                    let mut best = f64::NEG_INFINITY;
                    let mut at = 0;
                    for dz in 0..2 {
                        for dy in 0..2 {
                            for dx in 0..2 {
                                let i = base + (2 * xx + dx) + nx * ((2 * y + dy) + ny * (2 * z + dz));
                                if x.data[i] > best {
                                    best = x.data[i];
                                    at = i;
                                }
                            }
                        }
                    }
                    let o = p * oplane + xx + ox * (y + oy * z);
                    out.data[o] = best;
                    arg[o] = at;
                }
            }
        }
    }
    Ok((out, arg))
}

pub fn maxpool3d_backward(input_len: usize, argmax: &[usize], gy: &[f64]) -> Vec<f64> {
    let mut g = vec![0.0; input_len];
    for (&i, &u) in argmax.iter().zip(gy) {
        g[i] += u;
    }
    g
}

/// Nearest-neighbour ×2 upsampling in every spatial dimension.
pub fn upsample_nn(x: &Tensor) -> Tensor {
    let [nb, c, nx, ny, nz] = x.shape;
    let (ux, uy, uz) = (2 * nx, 2 * ny, 2 * nz);
    let mut out = Tensor::zeros([nb, c, ux, uy, uz]);
    let plane = x.plane();
    let uplane = ux * uy * uz;
    for p in 0..nb * c {
        for z in 0..uz {
            for y in 0..uy {
                let src = p * plane + nx * (y / 2 + ny * (z / 2));
                let dst = p * uplane + ux * (y + uy * z);
                for xx in 0..ux {
                    out.data[dst + xx] = x.data[src + xx / 2];
                }
            }
        }
    }
    out
}

/// Sums the eight children of every coarse voxel.
pub fn upsample_nn_backward(shape: [usize; 5], gy: &[f64]) -> Vec<f64> {
    let [nb, c, nx, ny, nz] = shape;
    let (ux, uy, uz) = (2 * nx, 2 * ny, 2 * nz);
    let plane = nx * ny * nz;
    let uplane = ux * uy * uz;
    let mut g = vec![0.0; nb * c * plane];
    for p in 0..nb * c {
        for z in 0..uz {
            for y in 0..uy {
                let dst = p * plane + nx * (y / 2 + ny * (z / 2));
                let src = p * uplane + ux * (y + uy * z);
                for xx in 0..ux {
                    g[dst + xx / 2] += gy[src + xx];
                }
            }
        }
    }
    g
}

/// Channel concatenation `[a, b]`.
pub fn concat(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape[0] != b.shape[0] || a.spatial() != b.spatial() {
        return Err(Error::ShapeMismatch(format!(
            "cannot concatenate {:?} and {:?}",
            a.shape, b.shape
        )));
    }
    let [nb, ca, nx, ny, nz] = a.shape;
    let cb = b.shape[1];
    let mut data = Vec::with_capacity(a.len() + b.len());
    for n in 0..nb {
        let pa = ca * a.plane();
        let pb = cb * b.plane();
        data.extend_from_slice(&a.data[n * pa..(n + 1) * pa]);
        data.extend_from_slice(&b.data[n * pb..(n + 1) * pb]);
    }
    Tensor::new([nb, ca + cb, nx, ny, nz], data)
}

/// Splits an upstream gradient of `concat(a, b)` into its two parts.
pub fn concat_backward(a_shape: [usize; 5], b_shape: [usize; 5], gy: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let nb = a_shape[0];
    let pa: usize = a_shape[1..].iter().product();
    let pb: usize = b_shape[1..].iter().product();
    let mut ga = Vec::with_capacity(nb * pa);
    let mut gb = Vec::with_capacity(nb * pb);
    for n in 0..nb {
        let o = n * (pa + pb);
        ga.extend_from_slice(&gy[o..o + pa]);
        gb.extend_from_slice(&gy[o + pa..o + pa + pb]);
    }
    (ga, gb)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: [usize; 5], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Six nested loops straight from the cross-correlation definition.
    fn conv_oracle(x: &Tensor, k: &Tensor, b: &Tensor) -> Tensor {
        let [nb, cin, nx, ny, nz] = x.shape;
        let cout = k.shape[0];
        let mut out = Tensor::zeros([nb, cout, nx, ny, nz]);
        let at = |t: &Tensor, n: usize, c: usize, i: i64, j: i64, l: i64| -> f64 {
            if i < 0 || j < 0 || l < 0 || i >= nx as i64 || j >= ny as i64 || l >= nz as i64 {
                return 0.0;
            }
            t.data[(i as usize) + nx * ((j as usize) + ny * ((l as usize) + nz * (c + t.shape[1] * n)))]
        };
        for n in 0..nb {
            for co in 0..cout {
                for z in 0..nz {
                    for y in 0..ny {
                        for xx in 0..nx {
                            let mut s = b.data[co];
                            for ci in 0..cin {
                                for dz in 0..3 {
                                    for dy in 0..3 {
                                        for dx in 0..3 {
                                            let w = k.data[dx + 3 * (dy + 3 * (dz + 3 * (ci + cin * co)))];
                                            s += w * at(
                                                x,
                                                n,
                                                ci,
                                                xx as i64 + dx as i64 - 1,
                                                y as i64 + dy as i64 - 1,
                                                z as i64 + dz as i64 - 1,
                                            );
                                        }
                                    }
                                }
                            }
                            out.data[xx + nx * (y + ny * (z + nz * (co + cout * n)))] = s;
                        }
                    }
                }
            }
        }
        out
    }

    #[test]
    fn delta_kernel_is_identity() {
        let x = random([1, 2, 4, 3, 5], 1);
        let mut k = Tensor::zeros([2, 2, 3, 3, 3]);
        k.data[13] = 1.0;
        k.data[27 * 3 + 13] = 1.0;
        let y = conv3d(&x, &k, &Tensor::zeros([1, 1, 1, 1, 2])).unwrap();
        assert_eq!(y.data, x.data);
    }

    #[test]
    fn ones_kernel_interior_is_27() {
        let x = Tensor::new([1, 1, 4, 4, 4], vec![1.0; 64]).unwrap();
        let k = Tensor::new([1, 1, 3, 3, 3], vec![1.0; 27]).unwrap();
        let y = conv3d(&x, &k, &Tensor::zeros([1, 1, 1, 1, 1])).unwrap();
        assert_eq!(y.data[1 + 4 * (1 + 4)], 27.0);
        assert_eq!(y.data[0], 8.0);
    }

    #[test]
    fn conv_matches_loop_oracle() {
        for seed in 0..5 {
            let x = random([2, 2, 4, 3, 5], seed);
            let k = random([3, 2, 3, 3, 3], seed + 100);
            let b = random([1, 1, 1, 1, 3], seed + 200);
            let fast = conv3d(&x, &k, &b).unwrap();
            let slow = conv_oracle(&x, &k, &b);
            for (a, o) in fast.data.iter().zip(&slow.data) {
                assert!((a - o).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conv_rejects_channel_mismatch() {
        let x = random([1, 2, 4, 4, 4], 0);
        let k = random([3, 1, 3, 3, 3], 1);
        assert!(matches!(
            conv3d(&x, &k, &Tensor::zeros([1, 1, 1, 1, 3])),
            Err(Error::ShapeMismatch(_))
        ));
    }

    #[test]
    fn conv_backward_is_adjoint_of_forward() {
        // <conv(x), gy> is bilinear; check <gy, conv(x)> − b·Σgy = <gx, x> = <gk, k>.
        let x = random([1, 3, 5, 4, 3], 5);
        let k = random([2, 3, 3, 3, 3], 6);
        let zero_b = Tensor::zeros([1, 1, 1, 1, 2]);
        let gy = random([1, 2, 5, 4, 3], 7);
        let y = conv3d(&x, &k, &zero_b).unwrap();
        let lhs: f64 = y.data.iter().zip(&gy.data).map(|(a, b)| a * b).sum();
        let g = conv3d_backward(&x, &k, &gy, true, true);
        let gx = g.input.unwrap();
        let via_x: f64 = gx.data.iter().zip(&x.data).map(|(a, b)| a * b).sum();
        let via_k: f64 = g.kernel.unwrap().iter().zip(&k.data).map(|(a, b)| a * b).sum();
        assert!((lhs - via_x).abs() < 1e-10);
        assert!((lhs - via_k).abs() < 1e-10);
    }

    #[test]
    fn leaky_examples() {
        let x = Tensor::new([1, 1, 2, 1, 1], vec![2.0, -1.0]).unwrap();
        assert_eq!(leaky_relu(&x, 0.2).data, vec![2.0, -0.2]);
    }

    #[test]
    fn pool_examples() {
        let x = Tensor::new([1, 1, 2, 2, 2], vec![0.5; 8]).unwrap();
        let (y, _) = maxpool3d(&x).unwrap();
        assert_eq!(y.data, vec![0.5]);
        let mut x = random([1, 2, 4, 4, 2], 3);
        x.data.iter_mut().for_each(|v| *v = v.abs() * 0.1);
        x.data[5] = 9.0;
        let (y, arg) = maxpool3d(&x).unwrap();
        assert_eq!(y.data[0], 9.0);
        assert_eq!(arg[0], 5);
        assert!(maxpool3d(&random([1, 1, 3, 2, 2], 0)).is_err());
        // loop oracle
        for (o, &a) in y.data.iter().zip(&arg) {
            assert_eq!(*o, x.data[a]);
        }
        let [_, c, nx, ny, nz] = x.shape;
        for p in 0..c {
            for z in 0..nz / 2 {
                for yy in 0..ny / 2 {
                    for xx in 0..nx / 2 {
                        let mut m = f64::NEG_INFINITY;
                        for d in 0..8 {
                            let (dx, dy, dz) = (d & 1, (d >> 1) & 1, d >> 2);
                            m = m.max(x.data[(2 * xx + dx) + nx * ((2 * yy + dy) + ny * ((2 * z + dz) + nz * p))]);
                        }
                        assert_eq!(y.data[xx + nx / 2 * (yy + ny / 2 * (z + nz / 2 * p))], m);
                    }
                }
            }
        }
    }

    #[test]
    fn upsample_examples() {
        let x = Tensor::new([1, 1, 1, 1, 1], vec![3.0]).unwrap();
        assert_eq!(upsample_nn(&x).data, vec![3.0; 8]);
        let c = Tensor::new([1, 2, 4, 4, 4], vec![0.25; 128]).unwrap();
        let (p, _) = maxpool3d(&c).unwrap();
        assert_eq!(upsample_nn(&p), c);
        let g = upsample_nn_backward([1, 1, 1, 1, 1], &[1.0; 8]);
        assert_eq!(g, vec![8.0]);
    }

    #[test]
    fn concat_round_trip() {
        let a = random([2, 1, 2, 2, 2], 1);
        let b = random([2, 3, 2, 2, 2], 2);
        let c = concat(&a, &b).unwrap();
        assert_eq!(c.shape, [2, 4, 2, 2, 2]);
        let (ga, gb) = concat_backward(a.shape, b.shape, &c.data);
        assert_eq!(ga, a.data);
        assert_eq!(gb, b.data);
    }
}
