//! Data generation, file formats, training, evaluation and the verification
//! drivers behind the command line.

pub mod bench;
pub mod checkpoint;
pub mod checks;
pub mod evaluate;
pub mod optim;
pub mod synth;
pub mod train;
pub mod volume_io;

pub use checkpoint::Checkpoint;
pub use evaluate::{evaluate, EvalReport};
pub use optim::{poly_lr, Adam, AdamConfig, AdamState};
pub use synth::{synth_generate, SynthSpec, VolumeSample};
pub use train::{train, TrainConfig, TrainOutcome};
pub use volume_io::{read_sample, write_sample};
