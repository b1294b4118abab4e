//! Video and flow volumes, their on-disk formats, patch geometry, and a
//! synthetic moving-sprite generator.

mod formats;
mod patch;
mod ppm;
mod sprites;
mod volume;

pub use formats::{
    load_rflo, load_rvid, rflo_from_bytes, rflo_to_bytes, rvid_from_bytes, rvid_to_bytes, save_rflo, save_rvid,
};
pub use patch::{patch_grid, PatchSpec};
pub use ppm::{export_ppm, frame_ppm, DIM_FACTOR};
pub use sprites::{gen_moving_sprites, render_scene, Background, Motion, SceneSpec, Sprite, SpriteScene};
pub use volume::{FlowField, VideoTensor};
