//! Selective int8 quantization tuning.
//!
//! A model is loaded into a small graph IR, its quantizable layers are ranked
//! by how much damage quantizing each one does, and a sweep excludes them one
//! at a time from quantization. The resulting variants are compared on
//! prediction mismatch and serialized size, and the non-dominated ones are
//! reported.

pub mod container;
pub mod dataset;
pub mod engine;
pub mod error;
pub mod graph;
pub mod onnx;
pub mod pareto;
pub mod plot;
pub mod quant;
pub mod report;
pub mod sensitivity;
mod serde_f32;
pub mod sweep;
pub mod tensor;

pub use container::{encode_model, load_model_container, serialize_model};
pub use dataset::{load_dataset, Dataset, Sample};
pub use engine::{execute, top_k, ActivationTrace, ExecutionOptions};
pub use error::{Error, Result};
pub use graph::{Graph, Node, OpKind};
pub use onnx::import_onnx;
pub use quant::{QuantMode, QuantParams, QuantRecipe};
pub use report::{read_report, write_report, SweepReport};
pub use sweep::{resume_sweep, run_sweep, SweepConfig};
pub use tensor::{DType, Tensor};
