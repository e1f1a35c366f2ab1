//! Graph-based multi-modal fusion encoder–decoder for machine translation.
//!
//! A sentence and its grounded image regions form one graph of textual and
//! visual nodes. Stacked fusion layers encode it with intra-modal attention
//! and gated inter-modal aggregation; a Transformer decoder translates from
//! the resulting node states.

pub mod error;
pub mod tensor;
pub mod tape;
pub mod params;
pub mod nn;
pub mod graph;
pub mod vocab;
pub mod dataset;
pub mod encoder;
pub mod decoder;
pub mod model;
pub mod training;
pub mod decode;
pub mod bleu;
pub mod config;
pub mod checkpoint;
pub mod gradcheck;
pub mod synthetic;

pub use error::{Error, Result};
pub use graph::{build_fully_connected_graph, build_graph, EdgeMode, Example, MultiModalGraph, PhraseGrounding};
pub use model::{Model, ModelConfig};
pub use tensor::{Mode, Tensor};
pub use vocab::Vocabulary;
