//! Speaker-adaptive transformer ASR toolkit.
//!
//! End-to-end pipeline: synthetic corpus generation, 83-dim acoustic
//! features (80 log-mel + 3 pitch) with CMVN, a toy speaker-embedding
//! extractor with statistics pooling, speaker-embedding injection at the
//! encoder input (add/concat of a learned 512->83 down-projection, with
//! joint SpecAugment over the 595-dim feature+embedding matrix and
//! axis-wise L2 normalization), hybrid CTC/attention transformer training,
//! beam-search decoding with CTC prefix scoring, and duration-bucketed
//! WER reports.

pub mod adapt;
pub mod audio;
pub mod corpus;
pub mod decode;
pub mod embed;
pub mod error;
pub mod experiment;
pub mod frontend;
pub mod model;
pub mod nn;
pub mod score;
pub mod specaug;
pub mod trainer;
pub mod util;

pub use error::{Error, Result};
