//! A small convolutional network stack: tensors, a reverse-mode tape, the
//! coarse/refine cascade, losses, Adam and checkpointing.

pub mod adam;
pub mod checkpoint;
pub(crate) mod conv;
pub mod gradcheck;
pub mod loss;
pub mod model;
pub mod params;
pub mod scalar;
pub mod tape;
pub mod tensor;
pub mod train;

pub use adam::{AdamConfig, AdamState};
pub use checkpoint::{Checkpoint, CheckpointError, TrainingProgress};
pub use gradcheck::GradCheckReport;
pub use loss::{masked_l2, total_loss, LossBreakdown, LossError, LossWeights};
pub use model::{Cascade, CascadeConfig, CoarseNetConfig, Init, ModelError, RefineNetConfig};
pub use params::{Param, ParamId, ParamRole, ParamStore};
pub use scalar::Scalar;
pub use tape::{BnParams, Gradients, Mode, ShapeError, Tape, Var};
pub use tensor::Tensor;
pub use train::{LossRecord, TrainConfig, TrainError, Trainer, TrainingSample};
