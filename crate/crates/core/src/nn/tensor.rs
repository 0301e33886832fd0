use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense `(batch, channels, x, y, z)` tensor, x fastest in memory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub shape: [usize; 5],
    pub data: Vec<f64>,
    /// Gradient accumulator, allocated on first use.
    #[serde(skip)]
    pub grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: [usize; 5], data: Vec<f64>) -> Result<Self> {
        if data.len() != shape.iter().product::<usize>() {
            return Err(Error::ShapeMismatch(format!(
                "tensor {:?} needs {} values, got {}",
                shape,
                shape.iter().product::<usize>(),
                data.len()
            )));
        }
        Ok(Self {
            shape,
            data,
            grad: None,
        })
    }

    pub fn zeros(shape: [usize; 5]) -> Self {
        Self {
            shape,
            data: vec![0.0; shape.iter().product()],
            grad: None,
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn batch(&self) -> usize {
        self.shape[0]
    }

    pub fn channels(&self) -> usize {
        self.shape[1]
    }

    pub fn spatial(&self) -> [usize; 3] {
        [self.shape[2], self.shape[3], self.shape[4]]
    }

    /// Number of voxels in one channel plane.
    pub fn plane(&self) -> usize {
        self.shape[2] * self.shape[3] * self.shape[4]
    }

    pub fn channel(&self, n: usize, c: usize) -> &[f64] {
        let p = self.plane();
        let o = (n * self.shape[1] + c) * p;
        &self.data[o..o + p]
    }

    pub fn ensure_finite(&self, what: &str) -> Result<()> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite(what.to_string()))
        }
    }

    /// Adds `g` into the gradient accumulator.
    pub fn accumulate_grad(&mut self, g: &[f64]) {
        let acc = self.grad.get_or_insert_with(|| vec![0.0; self.data.len()]);
        for (a, &b) in acc.iter_mut().zip(g) {
            *a += b;
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }
}
