use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetConfig {
    pub depth: usize,
    pub filters: Vec<usize>,
    pub head_filters: usize,
    pub leaky_slope: f64,
    pub input_channels: usize,
    pub output_channels: usize,
}

impl Default for NetConfig {
    /// Full-size network: six levels, 32…1024 filters, 16-filter head.
    fn default() -> Self {
        Self {
            depth: 6,
            filters: vec![32, 64, 128, 256, 512, 1024],
            head_filters: 16,
            leaky_slope: 0.2,
            input_channels: 2,
            output_channels: 3,
        }
    }
}

impl NetConfig {
    pub fn desk() -> Self {
        Self {
            depth: 3,
            filters: vec![8, 16, 32],
            ..Self::default()
        }
    }

    pub fn tiny(filters: &[usize], head_filters: usize) -> Self {
        Self {
            depth: filters.len(),
            filters: filters.to_vec(),
            head_filters,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth != self.filters.len() {
            return Err(Error::Config(format!(
                "depth {} but {} filter counts",
                self.depth,
                self.filters.len()
            )));
        }
        if self.filters.contains(&0) || self.head_filters == 0 {
            return Err(Error::Config("filter counts must be positive".into()));
        }
        if !(self.leaky_slope > 0.0 && self.leaky_slope < 1.0) {
            return Err(Error::Config(format!(
                "leaky slope {} outside (0, 1)",
                self.leaky_slope
            )));
        }
        if self.input_channels != 2 || self.output_channels != 3 {
            return Err(Error::Config(
                "the network maps 2 input channels to 3 output channels".into(),
            ));
        }
        Ok(())
    }

    pub fn check_input(&self, spatial: [usize; 3]) -> Result<()> {
        let m = 1usize << self.depth;
        if spatial.iter().any(|&n| n == 0 || n % m != 0) {
            return Err(Error::Config(format!(
                "input shape {spatial:?} is not divisible by 2^{} = {m}",
                self.depth
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub tensor: Tensor,
    pub trainable: bool,
}

/// Named parameters in a fixed order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParameterStore {
    params: Vec<Parameter>,
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor, trainable: bool) -> Result<usize> {
        let name = name.into();
        if self.index_of(&name).is_some() {
            return Err(Error::Config(format!("duplicate parameter name {name}")));
        }
        self.params.push(Parameter {
            name,
            tensor,
            trainable,
        });
        Ok(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: usize) -> &Parameter {
        &self.params[id]
    }

    pub fn get_mut(&mut self, id: usize) -> &mut Parameter {
        &mut self.params[id]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.params.iter().position(|p| p.name == name)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    /// Sets the trainable flag of every parameter whose name starts with `prefix`.
    pub fn set_trainable_prefix(&mut self, prefix: &str, trainable: bool) -> usize {
        let mut n = 0;
        for p in self.params.iter_mut().filter(|p| p.name.starts_with(prefix)) {
            p.trainable = trainable;
            n += 1;
        }
        n
    }

    pub fn set_all_trainable(&mut self, trainable: bool) {
        self.params.iter_mut().for_each(|p| p.trainable = trainable);
    }

    pub fn zero_grads(&mut self) {
        self.params.iter_mut().for_each(|p| p.tensor.zero_grad());
    }

    /// Adds per-parameter gradients as returned by the tape.
    pub fn accumulate(&mut self, grads: &[Option<Vec<f64>>]) {
        for (p, g) in self.params.iter_mut().zip(grads) {
            if let Some(g) = g {
                p.tensor.accumulate_grad(g);
            }
        }
    }
}

/// Total number of scalar parameters.
pub fn count_parameters(params: &ParameterStore) -> usize {
    params.iter().map(|p| p.tensor.len()).sum()
}

/// Number of scalar parameters whose name starts with `prefix`.
pub fn count_with_prefix(params: &ParameterStore, prefix: &str) -> usize {
    params
        .iter()
        .filter(|p| p.name.starts_with(prefix))
        .map(|p| p.tensor.len())
        .sum()
}

pub const ENCODER_PREFIX: &str = "enc";

/// One 3×3×3 convolution layer of the network, in creation order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerSpec {
    pub name: String,
    pub in_channels: usize,
    pub out_channels: usize,
}

/// Layer list of the encoder–decoder: per level a conv on the way down, a conv
/// per level on the way up (input: previous decoder output concatenated with the
/// matching skip, or the bottleneck for the deepest level), then the head.
pub fn layer_specs(cfg: &NetConfig) -> Vec<LayerSpec> {
    let mut v = Vec::new();
    let mut ch = cfg.input_channels;
    for (l, &f) in cfg.filters.iter().enumerate() {
        v.push(LayerSpec {
            name: format!("enc{l}"),
            in_channels: ch,
            out_channels: f,
        });
        ch = f;
    }
    for l in (0..cfg.depth).rev() {
        v.push(LayerSpec {
            name: format!("dec{l}"),
            in_channels: ch,
            out_channels: cfg.filters[l],
        });
        // after upsampling the skip of level l is appended
        ch = 2 * cfg.filters[l];
    }
    v.push(LayerSpec {
        name: "head0".into(),
        in_channels: ch,
        out_channels: cfg.head_filters,
    });
    v.push(LayerSpec {
        name: "head1".into(),
        in_channels: cfg.head_filters,
        out_channels: cfg.head_filters,
    });
    v.push(LayerSpec {
        name: "out".into(),
        in_channels: cfg.head_filters,
        out_channels: cfg.output_channels,
    });
    v
}

/// Glorot-uniform kernels (bound sqrt(6/(fan_in+fan_out)) over 3×3×3 receptive
/// fields), zero biases, and an all-zero output layer so an untrained network
/// predicts the identity warp.
pub fn init_parameters(cfg: &NetConfig, seed: u64) -> Result<ParameterStore> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParameterStore::new();
    for spec in layer_specs(cfg) {
        let shape = [spec.out_channels, spec.in_channels, 3, 3, 3];
        let n: usize = shape.iter().product();
        let kernel = if spec.name == "out" {
            vec![0.0; n]
        } else {
            let bound = (6.0 / (27 * (spec.in_channels + spec.out_channels)) as f64).sqrt();
            (0..n).map(|_| rng.gen_range(-bound..bound)).collect()
        };
        store.push(format!("{}.weight", spec.name), Tensor::new(shape, kernel)?, true)?;
        store.push(
            format!("{}.bias", spec.name),
            Tensor::zeros([1, 1, 1, 1, spec.out_channels]),
            true,
        )?;
    }
    Ok(store)
}
