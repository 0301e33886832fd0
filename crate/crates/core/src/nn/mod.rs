//! Minimal reverse-mode differentiation and the registration network.

pub mod ops;
pub mod params;
pub mod tape;
pub mod tensor;
pub mod unet;

pub use params::{
    count_parameters, count_with_prefix, init_parameters, layer_specs, NetConfig, Parameter, ParameterStore,
    ENCODER_PREFIX,
};
pub use tape::Tape;
pub use tensor::Tensor;
pub use unet::{unet_forward, Network};
