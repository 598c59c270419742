pub mod autodiff;
pub mod bench;
pub mod config;
pub mod distill;
pub mod error;
pub mod estimator;
pub mod flatcsr;
pub mod gradcheck;
pub mod mask;
pub mod nn;
pub mod oracle;
pub mod performer;
pub mod pgm;
pub mod sea;
pub mod serialize;
pub mod tensor;
pub mod verify;
pub mod work;

pub use autodiff::{Gradients, Tape, Var};
pub use config::SeaConfig;
pub use error::{Result, SeaError};
pub use estimator::{Estimate, EstimatorWeights};
pub use flatcsr::FlatCsr;
pub use mask::{CompressedMask, TopKMode};
pub use performer::FeatureMap;
pub use sea::{sea_forward, ForwardOptions, GateOverride, SeaOutput, SeaWeights};
pub use serialize::WeightStore;
pub use tensor::{Conv2dSpec, Tensor};
