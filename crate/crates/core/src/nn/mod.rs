//! Differentiable neural primitives: 3D convolutions, sequence convolution,
//! normalizations, activations, linear maps and resampling.

pub mod activation;
pub mod conv;
pub mod layers;
pub mod linear;
pub mod norm;
pub mod resample;
pub mod seq;

pub use activation::Activation;
pub use conv::Conv3dSpec;
pub use layers::{
    apply_bn_updates, BatchNorm, BnUpdate, Conv3d, ConvTranspose3d, Ctx, DwConv1d, Init, LayerNorm, Linear, Mode,
    Module, ParamDecl, ParamStore,
};
pub use norm::{NormKind, NormSpec};
pub use resample::{Downsample, Upsample};
