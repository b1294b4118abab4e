use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// What the decoder regresses at each selected token.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetKind {
    /// Raw RGB patch values.
    Rgb,
    /// Frozen-tokenizer quantized latents.
    FsqLatent,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MaeConfig {
    pub dim: usize,
    pub enc_layers: usize,
    pub enc_heads: usize,
    pub enc_mlp: usize,
    pub dec_dim: usize,
    pub dec_layers: usize,
    pub dec_heads: usize,
    pub dec_mlp: usize,
    pub tubelet: [usize; 3],
    pub target: TargetKind,
    /// Width of tokenizer latents, used when `target` is `FsqLatent`.
    pub latent_dim: usize,
}

impl Default for MaeConfig {
    fn default() -> Self {
        MaeConfig {
            dim: 64,
            enc_layers: 4,
            enc_heads: 4,
            enc_mlp: 256,
            dec_dim: 64,
            dec_layers: 2,
            dec_heads: 4,
            dec_mlp: 256,
            tubelet: [2, 8, 8],
            target: TargetKind::FsqLatent,
            latent_dim: 8,
        }
    }
}

impl MaeConfig {
    /// ViT-B encoder with a 4-layer, 384-wide decoder on 2x16x16 tubelets.
    pub fn full() -> Self {
        MaeConfig {
            dim: 768,
            enc_layers: 12,
            enc_heads: 12,
            enc_mlp: 3072,
            dec_dim: 384,
            dec_layers: 4,
            dec_heads: 4,
            dec_mlp: 1536,
            tubelet: [2, 16, 16],
            target: TargetKind::FsqLatent,
            latent_dim: 8,
        }
    }

    pub fn patch_dim(&self) -> usize {
        3 * self.tubelet.iter().product::<usize>()
    }

    pub fn target_dim(&self) -> usize {
        match self.target {
            TargetKind::Rgb => self.patch_dim(),
            TargetKind::FsqLatent => self.latent_dim,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("dim", self.dim),
            ("enc_heads", self.enc_heads),
            ("enc_mlp", self.enc_mlp),
            ("dec_dim", self.dec_dim),
            ("dec_heads", self.dec_heads),
            ("dec_mlp", self.dec_mlp),
            ("latent_dim", self.latent_dim),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::invalid(format!("{name} must be positive")));
        }
        if self.dim % self.enc_heads != 0 || self.dec_dim % self.dec_heads != 0 {
            return Err(Error::invalid("head count must divide the model width"));
        }
        if self.dec_dim > self.dim {
            return Err(Error::invalid("decoder width may not exceed the encoder width"));
        }
        if self.tubelet.contains(&0) {
            return Err(Error::Geometry("tubelet extents must be positive".into()));
        }
        Ok(())
    }
}
