pub mod analysis;
pub mod captioner;
pub mod checkpoint;
pub mod data;
pub mod decode;
pub mod error;
pub mod fusion;
pub mod mbp;
pub mod nn;
pub mod optim;
pub mod rng;
pub mod stem;
pub mod tape;
pub mod tensor;
pub mod train;
pub mod transformer;

pub use captioner::{CaptionerModel, ModelConfig, Modality};
pub use data::{CaptionBatch, Sample, TaskSpec, Vocab};
pub use error::{Error, Result};
pub use fusion::{FusionConfig, FusionKind};
pub use mbp::{LossTriple, MbpState, MmdGaps};
pub use tape::{Mask, Tape, Var};
pub use tensor::Tensor;
pub use train::{StepMetrics, TrainConfig, Trainer};
