//! Compact encoder-decoder transformer: teacher-forced training, sequence
//! scoring and ancestral sampling.

pub mod checkpoint;
pub mod config;
pub mod ops;
pub mod optim;
pub mod scalar;
pub mod transformer;

pub use config::{ModelConfig, Positional};
pub use optim::{Adam, AdamConfig, Trainer};
pub use scalar::Scalar;
pub use transformer::{Example, Sample, Sampling, Seq2SeqModel};
