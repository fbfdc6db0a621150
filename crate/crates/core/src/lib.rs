//! Emotion recognition in conversations with relational graph convolutions.
//!
//! The pipeline: a convolutional utterance encoder turns token sequences into
//! feature vectors, a bidirectional GRU adds sequential context, a windowed
//! conversation graph with speaker- and direction-typed edges mixes context
//! across speakers through a two-step relational graph convolution, and an
//! attention-pooling classifier labels every utterance. Everything trains
//! end-to-end on a small reverse-mode autodiff tape built for dense f64
//! matrices.

pub mod ablation;
pub mod classifier;
pub mod cnn;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod gru;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod rgcn;
pub mod parallel;
pub mod params;
pub mod synthetic;
pub mod tape;
pub mod trainer;

pub use error::{Error, Result};
pub use params::{GradMap, ParamStore, Value};
pub use tape::{Tape, TensorId};
