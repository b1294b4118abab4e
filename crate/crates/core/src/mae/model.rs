use rand::Rng;

use super::config::MaeConfig;
use super::posenc::sincos_3d;
use crate::error::{Error, Result};
use crate::masking::MaskSet;
use crate::numerics::init::{trunc_normal, xavier_uniform};
use crate::numerics::kernels::{im2col, ConvGeometry};
use crate::numerics::layers::{Conv3d, LayerNorm, Linear, INIT_STD};
use crate::numerics::{Checkpoint, ParamId, ParamStore, RngStream, Tape, Tensor, Var};
use crate::video::{patch_grid, VideoTensor};

/// Pre-norm transformer block with full self-attention.
#[derive(Clone, Debug)]
pub struct Block {
    ln1: LayerNorm,
    qkv: Linear,
    proj: Linear,
    ln2: LayerNorm,
    fc1: Linear,
    fc2: Linear,
    heads: usize,
}

impl Block {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, dim: usize, heads: usize, mlp: usize, rng: &mut R) -> Result<Self> {
        Ok(Block {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), dim)?,
            qkv: Linear::new(store, &format!("{name}.qkv"), dim, 3 * dim, rng)?,
            proj: Linear::new(store, &format!("{name}.proj"), dim, dim, rng)?,
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), dim)?,
            fc1: Linear::new(store, &format!("{name}.fc1"), dim, mlp, rng)?,
            fc2: Linear::new(store, &format!("{name}.fc2"), mlp, dim, rng)?,
            heads,
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let d = self.qkv.in_dim;
        let dh = d / self.heads;
        let h = self.ln1.forward(tape, store, x)?;
        let qkv = self.qkv.forward(tape, store, h)?;
        let mut heads = Vec::with_capacity(self.heads);
        for i in 0..self.heads {
            let q = tape.slice_cols(qkv, i * dh, dh)?;
            let k = tape.slice_cols(qkv, d + i * dh, dh)?;
            let v = tape.slice_cols(qkv, 2 * d + i * dh, dh)?;
            let kt = tape.transpose(k)?;
            let s = tape.matmul(q, kt)?;
            let s = tape.scale(s, 1.0 / (dh as f64).sqrt());
            let a = tape.softmax(s)?;
            heads.push(tape.matmul(a, v)?);
        }
        let att = if heads.len() == 1 { heads[0] } else { tape.concat_cols(&heads)? };
        let att = self.proj.forward(tape, store, att)?;
        let x = tape.add(x, att)?;
        let h = self.ln2.forward(tape, store, x)?;
        let h = self.fc1.forward(tape, store, h)?;
        let h = tape.gelu(h);
        let h = self.fc2.forward(tape, store, h)?;
        tape.add(x, h)
    }
}

/// Flattens a video into tubelet rows `N x (3 kt kh kw)`, raster token order,
/// each row ordered channel, then time, row, column within the tubelet.
pub fn patchify(video: &VideoTensor, tubelet: [usize; 3]) -> Result<Tensor> {
    let spec = patch_grid(video.frames(), video.height(), video.width(), tubelet)?;
    let geom = ConvGeometry::new(3, [video.frames(), video.height(), video.width()], tubelet, tubelet)?;
    let rows = im2col(video.data(), &geom);
    Tensor::new(vec![spec.num_tokens(), spec.patch_dim()], rows)
}

/// Dual-masked video autoencoder: ViT encoder on visible tokens, a narrower
/// decoder on encoder outputs plus mask tokens at decoder-selected positions.
#[derive(Clone, Debug)]
pub struct Mae {
    pub config: MaeConfig,
    pub params: ParamStore,
    patch: Conv3d,
    encoder: Vec<Block>,
    enc_norm: LayerNorm,
    dec_proj: Linear,
    mask_token: ParamId,
    decoder: Vec<Block>,
    dec_norm: LayerNorm,
    head: Linear,
}

pub const CHECKPOINT_PREFIX: &str = "mae/";

impl Mae {
    pub fn new(config: MaeConfig, init: &RngStream) -> Result<Self> {
        config.validate()?;
        let mut rng = init.split("mae-init").rng();
        let mut p = ParamStore::new();
        let c = &config;
        let patch = Conv3d::new(&mut p, "patch", 3, c.dim, c.tubelet, &mut rng)?;
        let encoder = (0..c.enc_layers)
            .map(|i| Block::new(&mut p, &format!("enc{i}"), c.dim, c.enc_heads, c.enc_mlp, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let enc_norm = LayerNorm::new(&mut p, "enc_norm", c.dim)?;
        let dec_proj = Linear::new(&mut p, "dec_proj", c.dim, c.dec_dim, &mut rng)?;
        let mask_token = p.add("mask_token", trunc_normal(&[1, c.dec_dim], INIT_STD, &mut rng))?;
        let decoder = (0..c.dec_layers)
            .map(|i| Block::new(&mut p, &format!("dec{i}"), c.dec_dim, c.dec_heads, c.dec_mlp, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let dec_norm = LayerNorm::new(&mut p, "dec_norm", c.dec_dim)?;
        let head = Linear::new(&mut p, "head", c.dec_dim, c.target_dim(), &mut rng)?;
        // Xavier for every projection, the patch kernel viewed as `dim x patch_dim`.
        let mut rng = init.split("mae-xavier").rng();
        let ids: Vec<ParamId> = p.ids().collect();
        for id in ids {
            let shape = p.get(id).shape().to_vec();
            let (fan_in, fan_out) = match p.name(id) {
                "patch.kernel" => (c.patch_dim(), c.dim),
                n if n.ends_with(".weight") && shape.len() == 2 => (shape[0], shape[1]),
                _ => continue,
            };
            *p.get_mut(id) = xavier_uniform(&shape, fan_in, fan_out, &mut rng);
        }
        Ok(Mae { config, params: p, patch, encoder, enc_norm, dec_proj, mask_token, decoder, dec_norm, head })
    }

    pub fn mask_token(&self) -> ParamId {
        self.mask_token
    }

    pub fn to_checkpoint(&self, ckpt: &mut Checkpoint) {
        ckpt.push_params(CHECKPOINT_PREFIX, &self.params);
    }

    pub fn from_checkpoint(config: MaeConfig, ckpt: &Checkpoint) -> Result<Self> {
        let mut mae = Mae::new(config, &RngStream::new(0))?;
        let loaded = mae.params.load_from(&ckpt.params(CHECKPOINT_PREFIX)?)?;
        if loaded != mae.params.len() {
            return Err(Error::format(format!("MAE checkpoint holds {loaded} of {} tensors", mae.params.len())));
        }
        Ok(mae)
    }

    /// Embeds the listed tokens from patch rows: `patches[idx] W^T + b + pe[idx]`.
    pub fn embed_tokens(&self, tape: &mut Tape, patches: Var, grid: [usize; 3], idx: &[usize]) -> Result<Var> {
        let d = self.config.dim;
        let pd = self.config.patch_dim();
        if tape.shape(patches) != [grid.iter().product::<usize>(), pd] {
            return Err(Error::shape(format!("patch rows {:?} do not match grid {grid:?}", tape.shape(patches))));
        }
        let rows = tape.gather_rows(patches, idx)?;
        let k = tape.param(&self.params, self.patch.kernel);
        let k = tape.reshape(k, &[d, pd])?;
        let w = tape.transpose(k)?;
        let b = tape.param(&self.params, self.patch.bias);
        let x = tape.matmul(rows, w)?;
        let x = tape.add_bias(x, b)?;
        let pe = positions(tape, grid, d, idx)?;
        tape.add(x, pe)
    }

    /// Embeds every token through the strided convolution path; equal to
    /// [`embed_tokens`](Self::embed_tokens) over all indices.
    pub fn patchify_embed(&self, tape: &mut Tape, video: Var) -> Result<Var> {
        let y = self.patch.forward(tape, &self.params, video)?;
        let s = tape.shape(y).to_vec();
        let grid = [s[1], s[2], s[3]];
        let flat = tape.reshape(y, &[s[0], grid.iter().product()])?;
        let x = tape.transpose(flat)?;
        let all: Vec<usize> = (0..grid.iter().product()).collect();
        let pe = positions(tape, grid, self.config.dim, &all)?;
        tape.add(x, pe)
    }

    /// Encoder blocks plus final norm over the given token embeddings.
    pub fn encode(&self, tape: &mut Tape, tokens: Var) -> Result<Var> {
        if tape.shape(tokens)[0] == 0 {
            return Err(Error::invalid("encoder needs at least one visible token"));
        }
        let mut x = tokens;
        for b in &self.encoder {
            x = b.forward(tape, &self.params, x)?;
        }
        self.enc_norm.forward(tape, &self.params, x)
    }

    /// Predictions `N^d x target_dim` at the decoder-selected positions, in
    /// ascending token order; `None` when nothing is selected.
    pub fn decode_selected(&self, tape: &mut Tape, z: Var, mask: &MaskSet) -> Result<Option<Var>> {
        let visible = mask.visible_indices();
        let selected = mask.selected_indices();
        if tape.shape(z)[0] != visible.len() {
            return Err(Error::shape(format!("{} encoded tokens for {} visible positions", tape.shape(z)[0], visible.len())));
        }
        if selected.iter().any(|&i| !mask.encoder_masked[i]) {
            return Err(Error::invalid("decoder selection includes encoder-visible tokens"));
        }
        if selected.is_empty() {
            return Ok(None);
        }
        let dd = self.config.dec_dim;
        let y = self.dec_proj.forward(tape, &self.params, z)?;
        let pe_vis = positions(tape, mask.grid, dd, &visible)?;
        let y = tape.add(y, pe_vis)?;
        let m = tape.param(&self.params, self.mask_token);
        let m = tape.repeat_rows(m, selected.len());
        let pe_sel = positions(tape, mask.grid, dd, &selected)?;
        let m = tape.add(m, pe_sel)?;
        let mut h = tape.concat_rows(&[y, m])?;
        for b in &self.decoder {
            h = b.forward(tape, &self.params, h)?;
        }
        let h = self.dec_norm.forward(tape, &self.params, h)?;
        let tail: Vec<usize> = (visible.len()..visible.len() + selected.len()).collect();
        let h = tape.gather_rows(h, &tail)?;
        Ok(Some(self.head.forward(tape, &self.params, h)?))
    }

    /// Embed visible tokens, encode, and decode the selected ones.
    pub fn forward(&self, tape: &mut Tape, patches: Var, mask: &MaskSet) -> Result<Option<Var>> {
        let x = self.embed_tokens(tape, patches, mask.grid, &mask.visible_indices())?;
        let z = self.encode(tape, x)?;
        self.decode_selected(tape, z, mask)
    }
}

fn positions(tape: &mut Tape, grid: [usize; 3], dim: usize, idx: &[usize]) -> Result<Var> {
    let table = sincos_3d(grid, dim);
    let mut rows = Vec::with_capacity(idx.len() * dim);
    for &i in idx {
        rows.extend_from_slice(&table[i * dim..(i + 1) * dim]);
    }
    Ok(tape.constant(Tensor::new(vec![idx.len(), dim], rows)?))
}

/// Mean squared error over decoder-selected tokens. `targets` covers every
/// token (`N x target_dim`); rows outside the selection never enter the graph.
pub fn mae_loss(tape: &mut Tape, pred: Var, targets: Var, mask: &MaskSet) -> Result<Var> {
    let selected = mask.selected_indices();
    if tape.shape(pred)[0] != selected.len() {
        return Err(Error::shape(format!("{} predictions for {} selected tokens", tape.shape(pred)[0], selected.len())));
    }
    if selected.iter().any(|&i| !mask.encoder_masked[i]) {
        return Err(Error::invalid("loss requested on encoder-visible tokens"));
    }
    let t = tape.gather_rows(targets, &selected)?;
    tape.mse(pred, t)
}
