use serde::{Deserialize, Serialize};

use super::fsq::{fsq_quantize, fsq_quantize_with_grad, FsqSpec};
use super::select::{infer_keep_count, select_topk, ImportanceMap, SelectMode, Selection};
use crate::error::{Error, Result};
use crate::numerics::layers::Conv3d;
use crate::numerics::{Checkpoint, Optimizer, ParamStore, RngStream, Tape, Tensor, Var};
use crate::video::VideoTensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TokenizerConfig {
    pub levels: Vec<u32>,
    /// Widths of the two hidden encoder stages (mirrored by the decoder).
    pub channels: [usize; 2],
    /// Encoder strides, equal to the kernel extents; their product per axis
    /// is the latent downsampling and must equal the MAE tubelet.
    pub strides: [[usize; 3]; 3],
    pub scorer_channels: usize,
    pub scorer_strides: [[usize; 3]; 2],
    /// Training-mode top-k count.
    pub train_k: usize,
    /// When set, `train_k` counts the always-kept first latent frame too.
    pub k_includes_first_frame: bool,
    /// Fraction of tokens kept by inference-mode selection.
    pub infer_keep: f64,
    /// Frames per window for long videos; also the training clip length.
    pub window: usize,
}

impl Default for TokenizerConfig {
    fn default() -> Self {
        TokenizerConfig {
            levels: vec![8, 8, 4, 4, 4, 4, 4, 4],
            channels: [16, 32],
            strides: [[2, 2, 2], [1, 2, 2], [1, 2, 2]],
            scorer_channels: 32,
            scorer_strides: [[2, 4, 4], [1, 2, 2]],
            train_k: 192,
            k_includes_first_frame: false,
            infer_keep: 0.15,
            window: 16,
        }
    }
}

impl TokenizerConfig {
    /// Paper-scale model card: 16-frame 256² clips to an 8x16x16 latent grid.
    pub fn full() -> Self {
        TokenizerConfig {
            channels: [64, 128],
            strides: [[2, 4, 4], [1, 2, 2], [1, 2, 2]],
            scorer_strides: [[2, 4, 4], [1, 4, 4]],
            train_k: 768,
            ..TokenizerConfig::default()
        }
    }

    pub fn fsq(&self) -> Result<FsqSpec> {
        FsqSpec::new(self.levels.clone())
    }

    pub fn downsample(&self) -> [usize; 3] {
        std::array::from_fn(|a| self.strides.iter().map(|s| s[a]).product())
    }

    pub fn validate(&self) -> Result<()> {
        self.fsq()?;
        let scorer: [usize; 3] = std::array::from_fn(|a| self.scorer_strides.iter().map(|s| s[a]).product());
        if scorer != self.downsample() {
            return Err(Error::Geometry(format!(
                "scorer downsampling {scorer:?} differs from encoder downsampling {:?}",
                self.downsample()
            )));
        }
        if self.strides.iter().chain(&self.scorer_strides).flatten().any(|&s| s == 0) {
            return Err(Error::Geometry("strides must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.infer_keep) {
            return Err(Error::invalid("infer_keep must lie in [0, 1]"));
        }
        if self.window == 0 || self.window % self.downsample()[0] != 0 {
            return Err(Error::Geometry("window must be a positive multiple of the temporal downsampling".into()));
        }
        Ok(())
    }

    pub fn latent_grid(&self, frames: usize, height: usize, width: usize) -> Result<[usize; 3]> {
        let ds = self.downsample();
        let ext = [frames, height, width];
        let mut grid = [0; 3];
        for a in 0..3 {
            if ext[a] == 0 || ext[a] % ds[a] != 0 {
                return Err(Error::Geometry(format!("extent {} not divisible by downsampling {}", ext[a], ds[a])));
            }
            grid[a] = ext[a] / ds[a];
        }
        Ok(grid)
    }
}

/// Latent tokens of one video, rows of width `dim` in raster token order.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentGrid {
    pub grid: [usize; 3],
    pub dim: usize,
    /// Continuous encoder output.
    pub z: Vec<f64>,
    /// Quantized latents of every token.
    pub zq: Vec<f64>,
    /// Inference-mode selection.
    pub selected: Vec<bool>,
}

impl LatentGrid {
    pub fn num_tokens(&self) -> usize {
        self.grid.iter().product()
    }

    /// Quantized latents with unselected rows zeroed, as the decoder sees them.
    pub fn masked_zq(&self) -> Vec<f64> {
        let mut out = self.zq.clone();
        for (row, &keep) in out.chunks_mut(self.dim).zip(&self.selected) {
            if !keep {
                row.iter_mut().for_each(|v| *v = 0.0);
            }
        }
        out
    }
}

/// Output of sliding-window tokenization.
#[derive(Clone, Debug)]
pub struct LongTokens {
    pub latent: LatentGrid,
    pub importance: ImportanceMap,
    pub windows: usize,
    /// The clip was padded by repeating its last frame to fill a window.
    pub padded: bool,
}

/// Forward values of one training-graph evaluation.
pub struct TrainGraph {
    pub loss: Var,
    pub recon: Vec<Var>,
    pub scores: Vec<Var>,
    pub latents: Vec<Var>,
    pub selections: Vec<Selection>,
}

#[derive(Clone, Debug)]
pub struct Tokenizer {
    pub config: TokenizerConfig,
    pub params: ParamStore,
    fsq: FsqSpec,
    encoder: [Conv3d; 3],
    decoder: [Conv3d; 3],
    scorer: [Conv3d; 2],
}

pub const CHECKPOINT_PREFIX: &str = "tokenizer/";

impl Tokenizer {
    pub fn new(config: TokenizerConfig, init: &RngStream) -> Result<Self> {
        config.validate()?;
        let fsq = config.fsq()?;
        let mut rng = init.split("tokenizer-init").rng();
        let mut p = ParamStore::new();
        let d = fsq.dim();
        let [c1, c2] = config.channels;
        let s = config.strides;
        let encoder = [
            Conv3d::new(&mut p, "enc0", 3, c1, s[0], &mut rng)?,
            Conv3d::new(&mut p, "enc1", c1, c2, s[1], &mut rng)?,
            Conv3d::new(&mut p, "enc2", c2, d, s[2], &mut rng)?,
        ];
        let decoder = [
            Conv3d::new_transposed(&mut p, "dec0", d, c2, s[2], &mut rng)?,
            Conv3d::new_transposed(&mut p, "dec1", c2, c1, s[1], &mut rng)?,
            Conv3d::new_transposed(&mut p, "dec2", c1, 3, s[0], &mut rng)?,
        ];
        let sc = config.scorer_channels;
        let scorer = [
            Conv3d::new(&mut p, "score0", 3, sc, config.scorer_strides[0], &mut rng)?,
            Conv3d::new(&mut p, "score1", sc, sc, config.scorer_strides[1], &mut rng)?,
        ];
        // Conv kernels get fan-in scaling rather than the transformer default.
        for id in p.ids().collect::<Vec<_>>() {
            if p.name(id).ends_with(".kernel") {
                let fan_in: usize = p.get(id).shape()[1..].iter().product();
                let scale = (1.0 / fan_in as f64).sqrt() / 0.02;
                p.get_mut(id).data_mut().iter_mut().for_each(|v| *v *= scale);
            }
        }
        Ok(Tokenizer { config, params: p, fsq, encoder, decoder, scorer })
    }

    pub fn fsq(&self) -> &FsqSpec {
        &self.fsq
    }

    pub fn latent_dim(&self) -> usize {
        self.fsq.dim()
    }

    pub fn to_checkpoint(&self, ckpt: &mut Checkpoint) {
        ckpt.push_params(CHECKPOINT_PREFIX, &self.params);
    }

    pub fn from_checkpoint(config: TokenizerConfig, ckpt: &Checkpoint) -> Result<Self> {
        let mut tok = Tokenizer::new(config, &RngStream::new(0))?;
        let stored = ckpt.params(CHECKPOINT_PREFIX)?;
        let loaded = tok.params.load_from(&stored)?;
        if loaded != tok.params.len() {
            return Err(Error::format(format!("tokenizer checkpoint holds {loaded} of {} tensors", tok.params.len())));
        }
        Ok(tok)
    }

    fn check_clip(&self, video: &VideoTensor) -> Result<[usize; 3]> {
        self.config.latent_grid(video.frames(), video.height(), video.width())
    }

    /// Continuous latents as rows `N x D`.
    pub fn encode_rows(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let mut h = x;
        for (i, conv) in self.encoder.iter().enumerate() {
            h = conv.forward(tape, &self.params, h)?;
            if i + 1 < self.encoder.len() {
                h = tape.gelu(h);
            }
        }
        let s = tape.shape(h).to_vec();
        let flat = tape.reshape(h, &[s[0], s[1] * s[2] * s[3]])?;
        tape.transpose(flat)
    }

    /// Token importance, flat over the latent grid.
    pub fn score_var(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let h = self.scorer[0].forward(tape, &self.params, x)?;
        let h = tape.gelu(h);
        let feat = self.scorer[1].forward(tape, &self.params, h)?;
        let dist = tape.frame_distance(feat)?;
        let n = tape.value(dist).numel();
        tape.reshape(dist, &[n])
    }

    /// Decodes `N x D` latent rows on `grid` to a `3 x F x H x W` video in `[0, 1]`.
    pub fn decode_rows(&self, tape: &mut Tape, rows: Var, grid: [usize; 3]) -> Result<Var> {
        let d = self.latent_dim();
        let cols = tape.transpose(rows)?;
        let mut h = tape.reshape(cols, &[d, grid[0], grid[1], grid[2]])?;
        for (i, conv) in self.decoder.iter().enumerate() {
            h = conv.forward(tape, &self.params, h)?;
            if i + 1 < self.decoder.len() {
                h = tape.gelu(h);
            }
        }
        Ok(tape.sigmoid(h))
    }

    /// Additional (non-first-frame) tokens kept by training-mode selection.
    pub fn train_extra_k(&self, grid: [usize; 3]) -> Result<usize> {
        let first = grid[1] * grid[2];
        let k = if self.config.k_includes_first_frame {
            self.config.train_k.checked_sub(first).ok_or_else(|| {
                Error::invalid(format!("train_k {} is smaller than the {first} first-frame tokens", self.config.train_k))
            })?
        } else {
            self.config.train_k
        };
        Ok(k)
    }

    /// Encode, score, select, quantize, decode; loss is the batch mean of the
    /// per-clip pixel MSE.
    pub fn train_graph(&self, tape: &mut Tape, batch: &[VideoTensor]) -> Result<TrainGraph> {
        if batch.is_empty() {
            return Err(Error::invalid("empty tokenizer batch"));
        }
        let d = self.latent_dim();
        let mut total: Option<Var> = None;
        let (mut recons, mut scores, mut latents, mut selections) = (vec![], vec![], vec![], vec![]);
        for video in batch {
            let grid = self.check_clip(video)?;
            let x = tape.constant(video.to_tensor());
            let z = self.encode_rows(tape, x)?;
            let s = self.score_var(tape, x)?;
            let sel = select_topk(tape.data(s), grid, self.train_extra_k(grid)?, SelectMode::Train)?;
            let zm = tape.gate_rows(z, s, sel.gate(), sel.coef.clone())?;
            let (q, local) = fsq_quantize_with_grad(tape.data(zm), &self.fsq)?;
            let zq = tape.straight_through(zm, q, local)?;
            // Quantization moves 0 off zero for even level counts; re-zero.
            let keep: Vec<f64> = sel.mask.iter().flat_map(|&m| std::iter::repeat_n(if m { 1.0 } else { 0.0 }, d)).collect();
            let keep = tape.constant(Tensor::new(vec![sel.mask.len(), d], keep)?);
            let zq = tape.mul(zq, keep)?;
            let recon = self.decode_rows(tape, zq, grid)?;
            let l = tape.mse(recon, x)?;
            total = Some(match total {
                None => l,
                Some(t) => tape.add(t, l)?,
            });
            recons.push(recon);
            scores.push(s);
            latents.push(zq);
            selections.push(sel);
        }
        let loss = tape.scale(total.expect("nonempty batch"), 1.0 / batch.len() as f64);
        Ok(TrainGraph { loss, recon: recons, scores, latents, selections })
    }

    /// Inference-mode importance for one clip.
    pub fn score_tokens(&self, video: &VideoTensor) -> Result<ImportanceMap> {
        let grid = self.check_clip(video)?;
        let mut tape = Tape::frozen();
        let x = tape.constant(video.to_tensor());
        let s = self.score_var(&mut tape, x)?;
        ImportanceMap::new(grid, tape.data(s).to_vec())
    }

    /// Continuous and quantized latents of every token, plus the inference
    /// selection.
    pub fn encode(&self, video: &VideoTensor) -> Result<(LatentGrid, ImportanceMap)> {
        let grid = self.check_clip(video)?;
        let mut tape = Tape::frozen();
        let x = tape.constant(video.to_tensor());
        let z = self.encode_rows(&mut tape, x)?;
        let s = self.score_var(&mut tape, x)?;
        let z = tape.data(z).to_vec();
        let zq = fsq_quantize(&z, &self.fsq)?;
        let importance = ImportanceMap::new(grid, tape.data(s).to_vec())?;
        let selected = self.infer_selection(&importance)?;
        Ok((LatentGrid { grid, dim: self.latent_dim(), z, zq, selected }, importance))
    }

    fn infer_selection(&self, importance: &ImportanceMap) -> Result<Vec<bool>> {
        let n = importance.scores.len();
        let k = infer_keep_count(self.config.infer_keep, n);
        if k == 0 {
            return Ok(vec![false; n]);
        }
        Ok(select_topk(&importance.scores, importance.grid, k, SelectMode::Infer)?.mask)
    }

    /// Decodes quantized latent rows (unselected rows should already be zero).
    pub fn decode(&self, rows: &[f64], grid: [usize; 3]) -> Result<VideoTensor> {
        let n: usize = grid.iter().product();
        let mut tape = Tape::frozen();
        let r = tape.constant(Tensor::new(vec![n, self.latent_dim()], rows.to_vec())?);
        let v = self.decode_rows(&mut tape, r, grid)?;
        let ds = self.config.downsample();
        VideoTensor::new(grid[0] * ds[0], grid[1] * ds[1], grid[2] * ds[2], tape.data(v).to_vec())
    }

    /// Encodes consecutive `window`-frame clips and concatenates their tokens
    /// and importances along latent time.
    pub fn tokenize_long_video(&self, video: &VideoTensor) -> Result<LongTokens> {
        let w = self.config.window;
        let windows = video.frames().div_ceil(w);
        let padded = video.frames() % w != 0;
        let full = if padded { video.pad_frames(windows * w) } else { video.clone() };
        let mut z = Vec::new();
        let mut zq = Vec::new();
        let mut scores = Vec::new();
        let mut grid = [0; 3];
        for i in 0..windows {
            let clip = full.slice_frames(i * w, w)?;
            let (lat, imp) = self.encode(&clip)?;
            grid = [grid[0] + lat.grid[0], lat.grid[1], lat.grid[2]];
            z.extend(lat.z);
            zq.extend(lat.zq);
            scores.extend(imp.scores);
        }
        let importance = ImportanceMap::new(grid, scores)?;
        let selected = self.infer_selection(&importance)?;
        Ok(LongTokens {
            latent: LatentGrid { grid, dim: self.latent_dim(), z, zq, selected },
            importance,
            windows,
            padded,
        })
    }
}

/// One joint step on encoder, decoder, and scorer; returns the loss.
pub fn tokenizer_train_step(tok: &mut Tokenizer, opt: &mut Optimizer, batch: &[VideoTensor], lr: f64) -> Result<f64> {
    let mut tape = Tape::new();
    let graph = tok.train_graph(&mut tape, batch)?;
    let loss = tape.value(graph.loss).item().expect("scalar loss");
    if !loss.is_finite() {
        return Err(Error::NonFinite(format!("tokenizer loss {loss}")));
    }
    let grads = tape.backward(graph.loss)?;
    let grads = grads.for_store(&tok.params);
    opt.step(&mut tok.params, &grads, lr)?;
    Ok(loss)
}
