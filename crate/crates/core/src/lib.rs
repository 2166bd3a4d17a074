//! Sequence tagging for imbalanced entity types: a Bi-LSTM-CRF tagger, a
//! sentence-level rare-type detector, and a pipeline that gates between a
//! Strong-type tagger alone and a merge with a Weak-type tagger.

pub mod autodiff;
pub mod checkpoint;
pub mod corpus;
pub mod crf;
pub mod detector;
pub mod embeddings;
pub mod encoder;
pub mod error;
pub mod metrics;
pub mod parallel;
pub mod pipeline;
pub mod synth;
pub mod tagger;

pub use corpus::{Corpus, Keep, Sentence, TagSet, Token};
pub use detector::{Detector, DetectorConfig};
pub use embeddings::EmbeddingMatrix;
pub use error::{Error, Result};
pub use pipeline::{Mode, Pipeline, Prediction};
pub use tagger::{Tagger, TrainConfig};
