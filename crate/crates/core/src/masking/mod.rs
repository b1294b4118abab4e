//! Encoder tube masks, decoder selection strategies, and budget arithmetic.
//!
//! Encoder visibility counts round half up; decoder counts take whole tokens
//! (floor), so every split of one decoder budget between salient and random
//! tokens yields the same total.

mod budget;
mod dump;
mod strategies;

pub use budget::{floor_count, round_half_up, BudgetSpec};
pub use dump::{load_mask_dump, mask_dump_from_bytes, mask_dump_to_bytes, save_mask_dump};
pub use strategies::{
    build_mask_set, decoder_adaptive, decoder_none, decoder_random, decoder_uniform, expected_decoded, flow_saliency, make_tube_mask,
    rank_masked, validate, MaskPlan, MaskSet, SaliencyMap, Strategy, ValidationReport, Violation,
};
