//! Word alignment from multilingual contextual embeddings, with adapter
//! fine-tuning of a frozen encoder.

pub mod aligner;
pub mod alignment;
pub mod container;
pub mod corpus;
pub mod encoder;
pub mod error;
pub mod metrics;
pub mod tensor;
pub mod trainer;

pub use aligner::{align_corpus, align_pair, ContextualEmbedder, DEFAULT_LAYER, DEFAULT_THRESHOLD};
pub use alignment::{AlignmentMatrix, AlignmentSet};
pub use container::TensorFile;
pub use corpus::{Corpus, EmbeddingStore, SentencePair, Side};
pub use encoder::{AdapterSet, EncoderConfig, EncoderModel};
pub use error::{Error, ErrorClass, Result};
pub use tensor::Tensor;
