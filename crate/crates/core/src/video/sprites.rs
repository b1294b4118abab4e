//! Moving-sprite scenes with exact flow and per-token motion ground truth.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::patch::{patch_grid, PatchSpec};
use super::volume::{FlowField, VideoTensor};
use crate::error::{Error, Result};
use crate::numerics::RngStream;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Background {
    Noise,
    Gradient,
}

/// How sprite velocities are drawn.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Motion {
    /// Each component uniform in `[-speed_max, speed_max]`.
    Random,
    /// Purely horizontal, every sprite moving left (`false`) or right (`true`),
    /// placed so that no sprite reaches a wall within the clip when possible.
    Horizontal { rightward: bool },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneSpec {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub tubelet: [usize; 3],
    pub sprites: usize,
    pub size_min: usize,
    pub size_max: usize,
    /// Per-frame speed bounds in pixels; `speed_min` applies to the larger component.
    pub speed_min: usize,
    pub speed_max: usize,
    pub background: Background,
    pub motion: Motion,
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            frames: 16,
            height: 64,
            width: 64,
            tubelet: [2, 8, 8],
            sprites: 2,
            size_min: 8,
            size_max: 14,
            speed_min: 1,
            speed_max: 3,
            background: Background::Noise,
            motion: Motion::Random,
            seed: 0,
        }
    }
}

/// A square sprite; `(x, y)` is its top-left corner at frame 0.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Sprite {
    pub x: i64,
    pub y: i64,
    pub size: usize,
    pub vx: i64,
    pub vy: i64,
    pub color: [f64; 3],
}

impl Sprite {
    /// Top-left corners for frames `0..frames`. Velocity components reverse
    /// whenever the next step would leave the frame, and the position is
    /// clamped to the border.
    pub fn trajectory(&self, frames: usize, height: usize, width: usize) -> Vec<(i64, i64)> {
        let max_x = width as i64 - self.size as i64;
        let max_y = height as i64 - self.size as i64;
        let (mut x, mut y, mut vx, mut vy) = (self.x, self.y, self.vx, self.vy);
        let mut out = Vec::with_capacity(frames);
        for _ in 0..frames {
            out.push((x, y));
            let (nx, ny) = (x + vx, y + vy);
            if nx < 0 || nx > max_x {
                vx = -vx;
            }
            if ny < 0 || ny > max_y {
                vy = -vy;
            }
            x = nx.clamp(0, max_x);
            y = ny.clamp(0, max_y);
        }
        out
    }
}

#[derive(Clone, Debug)]
pub struct SpriteScene {
    pub video: VideoTensor,
    pub flow: FlowField,
    pub patch: PatchSpec,
    /// One flag per token: a sprite overlaps the token's patch in at least one
    /// of its frames.
    pub motion_mask: Vec<bool>,
    pub sprites: Vec<Sprite>,
}

fn byte_grid(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

fn check_spec(spec: &SceneSpec) -> Result<PatchSpec> {
    let patch = patch_grid(spec.frames, spec.height, spec.width, spec.tubelet)?;
    if spec.size_min == 0 || spec.size_min > spec.size_max {
        return Err(Error::invalid("sprite size range must satisfy 0 < size_min <= size_max"));
    }
    if spec.size_max >= spec.height.min(spec.width) {
        return Err(Error::invalid("sprites must be smaller than the frame"));
    }
    if spec.speed_min > spec.speed_max {
        return Err(Error::invalid("speed_min exceeds speed_max"));
    }
    Ok(patch)
}

fn sample_sprite<R: Rng>(spec: &SceneSpec, rng: &mut R) -> Sprite {
    let size = rng.random_range(spec.size_min..=spec.size_max);
    let max_x = (spec.width - size) as i64;
    let max_y = (spec.height - size) as i64;
    let color = loop {
        let c: [f64; 3] = std::array::from_fn(|_| byte_grid(rng.random_range(0.0..1.0)));
        // Keep sprites visibly distinct from mid-grey backgrounds.
        if c.iter().cloned().fold(0.0, f64::max) - c.iter().cloned().fold(1.0, f64::min) > 0.4 {
            break c;
        }
    };
    let smax = spec.speed_max as i64;
    match spec.motion {
        Motion::Random => {
            let (vx, vy) = loop {
                let vx = rng.random_range(-smax..=smax);
                let vy = rng.random_range(-smax..=smax);
                if vx.unsigned_abs().max(vy.unsigned_abs()) as usize >= spec.speed_min {
                    break (vx, vy);
                }
            };
            let x = rng.random_range(0..=max_x);
            let y = rng.random_range(0..=max_y);
            Sprite { x, y, size, vx, vy, color }
        }
        Motion::Horizontal { rightward } => {
            let speed = rng.random_range(spec.speed_min.max(1) as i64..=smax.max(1));
            let travel = speed * (spec.frames as i64 - 1);
            let slack = (max_x - travel).max(0);
            let offset = rng.random_range(0..=slack);
            let x = if rightward { offset } else { max_x - offset };
            let y = rng.random_range(0..=max_y);
            let vx = if rightward { speed } else { -speed };
            Sprite { x, y, size, vx, vy: 0, color }
        }
    }
}

fn paint_background<R: Rng>(spec: &SceneSpec, rng: &mut R) -> VideoTensor {
    let (f, h, w) = (spec.frames, spec.height, spec.width);
    let mut video = VideoTensor::zeros(f, h, w);
    let mut still = vec![0.0; 3 * h * w];
    match spec.background {
        Background::Noise => {
            for v in still.iter_mut() {
                *v = byte_grid(rng.random_range(0.3..0.6));
            }
        }
        Background::Gradient => {
            let a: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.2..0.5));
            let b: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.4..0.7));
            for c in 0..3 {
                for y in 0..h {
                    for x in 0..w {
                        let t = (x + y) as f64 / (h + w - 2).max(1) as f64;
                        still[(c * h + y) * w + x] = byte_grid(a[c] + (b[c] - a[c]) * t);
                    }
                }
            }
        }
    }
    for c in 0..3 {
        for fi in 0..f {
            for y in 0..h {
                for x in 0..w {
                    video.set(c, fi, y, x, still[(c * h + y) * w + x]);
                }
            }
        }
    }
    video
}

/// Renders `sprites` over a background. Later sprites draw over earlier ones,
/// and flow at a pixel is the displacement of the sprite visible there.
pub fn render_scene(spec: &SceneSpec, sprites: &[Sprite], rng: &mut impl Rng) -> Result<SpriteScene> {
    let patch = check_spec(spec)?;
    let (f, h, w) = (spec.frames, spec.height, spec.width);
    let mut video = paint_background(spec, rng);
    let mut flow = FlowField::zeros(f, h, w);
    let mut motion_mask = vec![false; patch.num_tokens()];
    let norm = h.max(w) as f64;
    for s in sprites {
        if s.size == 0 || s.size >= h.min(w) {
            return Err(Error::invalid("sprite must be smaller than the frame"));
        }
        let path = s.trajectory(f, h, w);
        for (fi, &(x0, y0)) in path.iter().enumerate() {
            let (dx, dy) = if fi == 0 {
                (0.0, 0.0)
            } else {
                let (px, py) = path[fi - 1];
                ((x0 - px) as f64 / norm, (y0 - py) as f64 / norm)
            };
            for y in y0 as usize..y0 as usize + s.size {
                for x in x0 as usize..x0 as usize + s.size {
                    for c in 0..3 {
                        video.set(c, fi, y, x, s.color[c]);
                    }
                    flow.set(0, fi, y, x, dx);
                    flow.set(1, fi, y, x, dy);
                    motion_mask[patch.token_of_pixel(fi, y, x)] = true;
                }
            }
        }
    }
    Ok(SpriteScene { video, flow, patch, motion_mask, sprites: sprites.to_vec() })
}

/// Samples and renders a scene; deterministic in `spec.seed`.
pub fn gen_moving_sprites(spec: &SceneSpec) -> Result<SpriteScene> {
    check_spec(spec)?;
    let mut rng = RngStream::new(spec.seed).split("scene").rng();
    let sprites: Vec<Sprite> = (0..spec.sprites).map(|_| sample_sprite(spec, &mut rng)).collect();
    render_scene(spec, &sprites, &mut rng)
}
