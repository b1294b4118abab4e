//! Long-video masked-autoencoder pre-training with adaptive decoder masking.

pub mod cost;
pub mod error;
pub(crate) mod io;
pub mod mae;
pub mod masking;
pub mod numerics;
pub mod pipeline;
pub mod tokenizer;
pub mod video;

pub use error::{Error, Result};
pub use io::{pack_bits, unpack_bits};
