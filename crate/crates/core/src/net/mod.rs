pub mod network;
pub mod plan;

pub use network::{build, Block, Forward, ForwardOptions, Network};
pub use plan::{derive_plan, micro_plan, preset_plan, BlockKind, Fingerprint, NetworkPlan, Variant};
