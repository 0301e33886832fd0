//! Encoder–decoder displacement predictor.
//!
//! Input: fixed and moving images stacked as two channels. Each encoder level is
//! conv → LeakyReLU → 2×2×2 max pool; each decoder level is conv → LeakyReLU →
//! nearest upsampling → concatenation with the matching encoder activation. The
//! head is two LeakyReLU convolutions followed by a linear 3-filter convolution
//! whose output is the displacement field in millimetres.

use crate::error::{Error, Result};
use crate::nn::params::{NetConfig, ParameterStore};
use crate::nn::tape::{NodeId, Tape};
use crate::nn::tensor::Tensor;
use crate::volume::{DisplacementField, Volume};

/// Parameter ids of one convolution layer.
#[derive(Clone, Copy, Debug)]
struct ConvIds {
    kernel: usize,
    bias: usize,
}

/// Binds a [`NetConfig`] to the parameter ids of a store.
#[derive(Clone, Debug)]
pub struct Network {
    pub cfg: NetConfig,
    enc: Vec<ConvIds>,
    dec: Vec<ConvIds>,
    head: [ConvIds; 3],
}

impl Network {
    pub fn bind(cfg: &NetConfig, store: &ParameterStore) -> Result<Self> {
        cfg.validate()?;
        let ids = |name: &str| -> Result<ConvIds> {
            let find = |suffix: &str| {
                let full = format!("{name}.{suffix}");
                store
                    .index_of(&full)
                    .ok_or_else(|| Error::Incompatible(format!("missing parameter {full}")))
            };
            Ok(ConvIds {
                kernel: find("weight")?,
                bias: find("bias")?,
            })
        };
        let enc = (0..cfg.depth).map(|l| ids(&format!("enc{l}"))).collect::<Result<_>>()?;
        let dec = (0..cfg.depth).map(|l| ids(&format!("dec{l}"))).collect::<Result<_>>()?;
        let head = [ids("head0")?, ids("head1")?, ids("out")?];
        Ok(Self {
            cfg: cfg.clone(),
            enc,
            dec,
            head,
        })
    }

    /// Records the forward pass on `tape`; returns the `[1, 3, x, y, z]` output node.
    pub fn forward(&self, tape: &mut Tape<'_>, input: Tensor) -> Result<NodeId> {
        self.cfg.check_input(input.spatial())?;
        if input.channels() != self.cfg.input_channels {
            return Err(Error::ShapeMismatch(format!(
                "network expects {} input channels, got {}",
                self.cfg.input_channels,
                input.channels()
            )));
        }
        let slope = self.cfg.leaky_slope;
        let mut h = tape.input(input)?;
        let mut skips = Vec::with_capacity(self.cfg.depth);
        for c in &self.enc {
            let a = tape.conv(h, c.kernel, c.bias)?;
            let a = tape.leaky_relu(a, slope)?;
            skips.push(a);
            h = tape.maxpool(a)?;
        }
        for l in (0..self.cfg.depth).rev() {
            let c = self.dec[l];
            let a = tape.conv(h, c.kernel, c.bias)?;
            let a = tape.leaky_relu(a, slope)?;
            let u = tape.upsample(a)?;
            h = tape.concat(u, skips[l])?;
        }
        for c in &self.head[..2] {
            let a = tape.conv(h, c.kernel, c.bias)?;
            h = tape.leaky_relu(a, slope)?;
        }
        tape.conv(h, self.head[2].kernel, self.head[2].bias)
    }
}

/// Stacks fixed and moving into a `[1, 2, x, y, z]` tensor.
pub fn pair_input(fixed: &Volume, moving: &Volume) -> Result<Tensor> {
    fixed.grid.ensure_matches(&moving.grid, "network input")?;
    let [nx, ny, nz] = fixed.grid.shape;
    let mut data = Vec::with_capacity(2 * fixed.data.len());
    data.extend_from_slice(&fixed.data);
    data.extend_from_slice(&moving.data);
    Tensor::new([1, 2, nx, ny, nz], data)
}

/// Interprets a `[1, 3, x, y, z]` output as a displacement field on `fixed`'s grid.
pub fn output_to_field(out: &Tensor, like: &Volume) -> Result<DisplacementField> {
    if out.shape[..2] != [1, 3] || out.spatial() != like.grid.shape {
        return Err(Error::ShapeMismatch(format!(
            "network output {:?} does not match grid {:?}",
            out.shape, like.grid.shape
        )));
    }
    DisplacementField::from_components(like.grid, out.channel(0, 0), out.channel(0, 1), out.channel(0, 2))
}

/// Field gradient in the network's output layout.
pub fn field_to_output_grad(g: &[[f64; 3]]) -> Vec<f64> {
    let n = g.len();
    let mut out = vec![0.0; 3 * n];
    for (i, v) in g.iter().enumerate() {
        out[i] = v[0];
        out[n + i] = v[1];
        out[2 * n + i] = v[2];
    }
    out
}

/// Inference: predicts the displacement field for a (fixed, moving) pair.
pub fn unet_forward(
    fixed: &Volume,
    moving: &Volume,
    params: &ParameterStore,
    cfg: &NetConfig,
) -> Result<DisplacementField> {
    let net = Network::bind(cfg, params)?;
    let mut tape = Tape::new(params);
    let out = net.forward(&mut tape, pair_input(fixed, moving)?)?;
    output_to_field(&tape.into_value(out), fixed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::params::init_parameters;
    use crate::volume::Grid;

    #[test]
    fn zero_parameters_give_zero_field() {
        let cfg = NetConfig::tiny(&[2, 4], 4);
        let mut store = init_parameters(&cfg, 3).unwrap();
        store
            .iter_mut()
            .for_each(|p| p.tensor.data.iter_mut().for_each(|v| *v = 0.0));
        let g = Grid::isotropic([8, 8, 8], 1.0).unwrap();
        let v = Volume::from_fn(g, |c| (c[0] + c[1] * c[2]) as f64 / 64.0);
        let f = unet_forward(&v, &v, &store, &cfg).unwrap();
        assert!(f.vectors.iter().flatten().all(|&x| x == 0.0));
    }

    #[test]
    fn output_shape_contract() {
        let cfg = NetConfig::tiny(&[2, 3], 4);
        let store = init_parameters(&cfg, 5).unwrap();
        let g = Grid::isotropic([8, 4, 12], 1.0).unwrap();
        let v = Volume::from_fn(g, |c| (c[0] * 7 % 5) as f64 / 5.0);
        let f = unet_forward(&v, &v, &store, &cfg).unwrap();
        assert_eq!(f.grid.shape, [8, 4, 12]);
        let bad = Volume::zeros(Grid::isotropic([6, 4, 4], 1.0).unwrap());
        assert!(matches!(unet_forward(&bad, &bad, &store, &cfg), Err(Error::Config(_))));
    }
}
