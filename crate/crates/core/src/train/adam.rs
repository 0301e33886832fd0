use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Adam moments for a list of parameter slots. A slot whose gradient is `None`
/// (frozen) keeps its moments untouched.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(sizes: &[usize]) -> Self {
        Self {
            beta1: BETA1,
            beta2: BETA2,
            eps: ADAM_EPS,
            step: 0,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.m.iter().map(Vec::len).collect()
    }

    /// One bias-corrected update of every slot with a gradient.
    pub fn step(&mut self, params: &mut [&mut [f64]], grads: &[Option<&[f64]>], lr: f64) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::ShapeMismatch(format!(
                "optimizer has {} slots, got {} parameters and {} gradients",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let Some(g) = g else { continue };
            if p.len() != g.len() || p.len() != self.m[k].len() {
                return Err(Error::ShapeMismatch(format!("optimizer slot {k}: length mismatch")));
            }
            adam_update(
                p,
                g,
                &mut self.m[k],
                &mut self.v[k],
                self.beta1,
                self.beta2,
                self.eps,
                c1,
                c2,
                lr,
            );
        }
        Ok(())
    }
}

#[allow(clippy::too_many_arguments)]
fn adam_update(
    p: &mut [f64],
    g: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    b1: f64,
    b2: f64,
    eps: f64,
    c1: f64,
    c2: f64,
    lr: f64,
) {
    for i in 0..p.len() {
        m[i] = b1 * m[i] + (1.0 - b1) * g[i];
        v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
        let mh = m[i] / c1;
        let vh = v[i] / c2;
        p[i] -= lr * mh / (vh.sqrt() + eps);
    }
}
