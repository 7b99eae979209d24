//! Structure-aware post-training quantization for hybrid CNN/transformer
//! models.
//!
//! The flow is: load a [`ModelPackage`], split its module tree into CNN and
//! transformer blocks with [`identify_blocks`], calibrate weight ranges and
//! post-softmax activation ranges, then quantize convolution weights with the
//! uniform affine scheme and annotate softmax sites with log2 parameters.
//! [`quantize_model`] runs the whole thing and returns a [`QuantReport`].

pub mod blocks;
pub mod calib;
pub mod error;
pub mod exec;
pub mod fixtures;
pub mod package;
pub mod pipeline;
pub mod quant;
pub mod tensor;

pub use blocks::{identify_blocks, visit_count, BlockPartition};
pub use calib::{calibrate_activations, calibrate_weights, CalibStats, Granularity};
pub use error::{Error, Result};
pub use exec::{compare, execute, record_traces, EvalSummary, ExecMode, ExecOutput, ExecPlan};
pub use package::{LayerKind, ModelPackage, ModuleNode, TensorRecord, TracePackage};
pub use pipeline::{
    derive_report, distribution_report, quantize_model, PipelineConfig, QuantReport,
};
pub use quant::{
    affine_params, dequantize_log2, dequantize_uniform, log2_params, quantize_log2,
    quantize_uniform, AffineParams, LogParams, QuantConfig, QuantParams,
};
pub use tensor::{error_metrics, min_max, ErrorMetrics, QuantTensor, Shape, Tensor};
