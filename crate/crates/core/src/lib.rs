//! Miniature sequential autoencoders for spiking data, with the two
//! element-masking defenses against identity-transformation overfitting
//! (coordinated dropout and speckled sample validation), population-based
//! hyperparameter training, synthetic benchmark generators, and linear
//! decoding evaluation.

pub mod container;
pub mod datagen;
pub mod decode;
pub mod error;
pub mod lfads;
pub mod linear_ae;
pub mod masking;
pub mod math;
pub mod pbt;
pub mod rng;
pub mod tape;
pub mod tensor;
pub mod trainer;
pub mod worker;

pub use container::TensorContainer;
pub use datagen::{GroundTruthDataset, LinearDemoDataset, SynthRnnConfig};
pub use error::{CoreError, Result};
pub use lfads::{Architecture, HyperParams, LfadsModel, LossBreakdown, ModelOutput, RunMode};
pub use masking::{MaskPair, SpeckleHoldout};
pub use pbt::{HpSpace, PbtConfig, PopulationMember};
pub use tensor::{BoolTensor, SpikeTensor, Tensor};
pub use trainer::{Checkpoint, MetricRecord, TrainConfig, TrainData, TrainResult};
