//! Flow-conservation attention, hierarchy-aware encoders, a dual-branch
//! contrastive model over graph inputs, and scene-graph recall metrics, all
//! on a small 64-bit reverse-mode autodiff core.

pub mod autodiff;
pub mod bench;
pub mod checkpoint;
pub mod diagnostics;
pub mod encoder;
pub mod error;
pub mod experiment;
pub mod flow;
pub mod gradcheck;
pub mod graph;
pub mod hierarchy;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod params;
pub mod synth;
pub mod tensor;

pub use autodiff::{Gradients, Tape, Var};
pub use error::{Error, Result};
pub use flow::{flow_attention, FlowConfig, Phi};
pub use graph::GraphBatch;
pub use metrics::{Triplet, TripletSet, Tube};
pub use model::{FlowDirection, HattFlowModel, ModelConfig};
pub use synth::{SynthSpec, SynthWorld};
pub use tensor::Tensor;
