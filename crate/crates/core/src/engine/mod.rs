//! Post-training quantization engine.

pub mod calibrate;
pub mod fakequant;
pub mod optim;
pub mod qblock;
pub mod transform;

pub use calibrate::{
    calibrate_block, calibrate_model, output_loss, BlockBatch, BlockCalibrationResult, DistillMode, ModelCalibration,
    QuantizedModel, TrainConfig,
};
pub use qblock::{BakedWeight, BlockObjective, BlockTransforms, QuantScheme, QuantizedBlock};
pub use transform::LayerTransform;
