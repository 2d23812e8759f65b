//! Copy-augmented hierarchical-attention Transformer for lexically cohesive
//! document-level translation, with the training, decoding and evaluation
//! code around it.

pub mod autodiff;
pub mod checkpoint;
pub mod context;
pub mod copy;
pub mod corpus;
pub mod decode;
pub mod diagnostics;
pub mod error;
pub mod experiment;
pub mod han;
pub mod metrics;
pub mod model;
pub mod params;
pub mod tensor;
pub mod train;
pub mod transformer;
pub mod vocab;

pub use autodiff::{Graph, Var};
pub use context::{CacheEntry, ContextState};
pub use error::{Error, Result};
pub use model::{DecoderStepTrace, EncodedSentence, GateOverride, Model, Variant};
pub use params::{GroupSet, ParamGroup, ParamStore, Session};
pub use tensor::Tensor;
pub use transformer::ModelConfig;
pub use vocab::{TokenId, Vocabulary};
