//! Contextual joint factor acoustic embeddings: features, windowing, the three
//! encoder/decoder objectives, training, probing and the experiment workbench.

pub mod encoders;
pub mod error;
pub mod frontend;
pub mod probe;
pub mod segmenter;
pub mod synthcorpus;
pub mod trainer;
pub mod workbench;

pub use error::{Error, Result};
