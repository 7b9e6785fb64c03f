//! The network's building blocks: HGCN (high-order gated convolution), the
//! residual Mamba block and the plain residual block.

pub mod hgcn;
pub mod hgconv;
pub mod mamba;
pub mod residual;

pub use hgcn::HgcnBlock;
pub use hgconv::{channel_partition, working_channels, Gating, HgConv};
pub use mamba::{MambaBlock, MambaConfig};
pub use residual::ResidualBlock;
