//! Vector-quantized meta-causal world model.

mod checkpoint;
mod model;
mod predictor;

pub use checkpoint::{load, save, CheckpointError, CHECKPOINT_HEADER};
pub use model::{
    loss_mle, loss_quantization, loss_quantization_tape, loss_sparse, loss_sparse_tape,
    Assignment, Bound, DecodeMode, Decoded, EdgeProbabilityMatrix, EncodedBatch, FusionReport,
    ModelConfig, ModelError, NodePredictor, WorldModel,
};
pub use predictor::{DenseModel, OraclePredictor, Predictor, UniformPredictor};
