//! Reverse-mode differentiation, the shared MLP backbone and Adam.

mod adam;
mod backbone;
pub mod gradcheck;
pub(crate) mod graph;
mod tensor;

pub use adam::{AdamConfig, AdamState};
pub use backbone::{
    load_weights, save_weights, Backbone, ForwardOutput, Head, NamedArray, ParamStore, WeightFile,
    WEIGHT_FORMAT_VERSION,
};
pub use graph::{Gradients, Graph, Var};
pub use tensor::Tensor;
