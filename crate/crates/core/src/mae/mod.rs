//! Dual-masked video autoencoder: tubelet embedding, a ViT encoder over
//! encoder-visible tokens, a decoder over encoded tokens plus mask tokens at
//! decoder-selected positions, and classification fine-tuning.

mod config;
mod finetune;
mod model;
mod posenc;
mod pretrain;

pub use config::{MaeConfig, TargetKind};
pub use finetune::{
    argmax, crop_starts, finetune_step, multi_crop_eval, prepare_clips, Classifier, FinetuneConfig, Pooling,
    CLASSIFIER_PREFIX,
};
pub use model::{mae_loss, patchify, Block, Mae, CHECKPOINT_PREFIX};
pub use posenc::sincos_3d;
pub use pretrain::{draw_masks, prepare_sample, pretrain_loss, pretrain_step, PretrainSample, StepOutcome};
