//! Video tokenizer: a small strided 3-D CNN autoencoder with finite scalar
//! quantization and a learned token scorer whose top-k selection decides which
//! latent tokens reach the decoder.

mod dump;
mod fsq;
mod model;
mod select;

pub use dump::TokenDump;
pub use fsq::{fsq_from_index, fsq_index, fsq_quantize, fsq_quantize_with_grad, FsqSpec};
pub use model::{tokenizer_train_step, LatentGrid, LongTokens, Tokenizer, TokenizerConfig, TrainGraph, CHECKPOINT_PREFIX};
pub use select::{infer_keep_count, select_topk, ImportanceMap, SelectMode, Selection};
