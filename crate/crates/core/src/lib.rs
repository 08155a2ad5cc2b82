//! Joint image-text node embeddings on a link graph.
//!
//! Each node pairs a set of image region features with a bag of vocabulary
//! words. A per-word soft attention over regions feeds word-local dense
//! layers whose sigmoid outputs both reconstruct the node's words and act
//! as its embedding. Embeddings of linked nodes are pulled together by a
//! hinge rank loss over (anchor, positive, negative) triplets sampled from
//! the graph.
//!
//! Module map:
//! - [`tensor`]: dense tensors and the reverse-mode tape everything runs on.
//! - [`graph`]: shared-label graph construction and triplet sampling.
//! - [`regions`], [`model`]: region providers and the attention pipeline.
//! - [`losses`], [`optim`], [`trainer`]: objectives and the training loop.
//! - [`eval`]: multi-label metrics, downstream classifier, cross-modal search.
//! - [`data`], [`synthetic`], [`config`], [`checkpoint`]: files and configuration.

// `!(x > 0.0)` guards in config validation are meant to catch NaN too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod graph;
pub mod losses;
pub mod model;
pub mod optim;
pub mod pipeline;
pub mod regions;
pub mod synthetic;
pub mod tensor;
pub mod trainer;

pub use error::{DmanError, Result};
pub use graph::{build_graph, MultimodalGraph, MultimodalNode, Triplet};
pub use model::{DmanModel, ModelConfig};
pub use regions::RegionFeatures;
pub use tensor::{Tape, Tensor, Var};
