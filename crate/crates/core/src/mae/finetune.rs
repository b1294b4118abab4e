use serde::{Deserialize, Serialize};

use super::model::{patchify, Mae};
use crate::error::{Error, Result};
use crate::masking::make_tube_mask;
use crate::numerics::init::trunc_normal;
use crate::numerics::layers::{LayerNorm, Linear, INIT_STD};
use crate::numerics::{Checkpoint, Optimizer, ParamId, RngStream, Tape, Tensor, Var};
use crate::video::{patch_grid, VideoTensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    Mean,
    /// One attention layer with a learned query over the encoded tokens.
    ClassAttention,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FinetuneConfig {
    pub classes: usize,
    pub pooling: Pooling,
    /// Fraction of tokens dropped (tube pattern) during training.
    pub drop_ratio: f64,
    pub label_smoothing: f64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig { classes: 2, pooling: Pooling::Mean, drop_ratio: 0.0, label_smoothing: 0.2 }
    }
}

#[derive(Clone, Debug)]
struct ClassAttention {
    query: ParamId,
    key: Linear,
    value: Linear,
}

/// Pre-trained encoder plus a pooling layer and a linear classifier. The
/// classifier's parameters live in the same store as the encoder's.
#[derive(Clone, Debug)]
pub struct Classifier {
    pub mae: Mae,
    pub config: FinetuneConfig,
    norm: LayerNorm,
    head: Linear,
    attention: Option<ClassAttention>,
}

pub const CLASSIFIER_PREFIX: &str = "classifier/";

impl Classifier {
    pub fn new(mut mae: Mae, config: FinetuneConfig, init: &RngStream) -> Result<Self> {
        if config.classes < 2 {
            return Err(Error::invalid(format!("a classifier needs at least 2 classes, got {}", config.classes)));
        }
        if !(0.0..1.0).contains(&config.drop_ratio) {
            return Err(Error::invalid("drop_ratio must lie in [0, 1)"));
        }
        let mut rng = init.split("classifier-init").rng();
        let d = mae.config.dim;
        let p = &mut mae.params;
        let attention = match config.pooling {
            Pooling::Mean => None,
            Pooling::ClassAttention => Some(ClassAttention {
                query: p.add("cls.query", trunc_normal(&[1, d], INIT_STD, &mut rng))?,
                key: Linear::new(p, "cls.key", d, d, &mut rng)?,
                value: Linear::new(p, "cls.value", d, d, &mut rng)?,
            }),
        };
        let norm = LayerNorm::new(p, "cls.norm", d)?;
        let head = Linear::new(p, "cls.head", d, config.classes, &mut rng)?;
        Ok(Classifier { mae, config, norm, head, attention })
    }

    pub fn to_checkpoint(&self, ckpt: &mut Checkpoint) {
        ckpt.push_params(CLASSIFIER_PREFIX, &self.mae.params);
    }

    pub fn load_checkpoint(&mut self, ckpt: &Checkpoint) -> Result<()> {
        let loaded = self.mae.params.load_from(&ckpt.params(CLASSIFIER_PREFIX)?)?;
        if loaded != self.mae.params.len() {
            return Err(Error::format(format!("classifier checkpoint holds {loaded} of {} tensors", self.mae.params.len())));
        }
        Ok(())
    }

    /// Logits `1 x classes` from the encoder run on tokens `keep`.
    pub fn logits(&self, tape: &mut Tape, patches: Var, grid: [usize; 3], keep: &[usize]) -> Result<Var> {
        let x = self.mae.embed_tokens(tape, patches, grid, keep)?;
        let z = self.mae.encode(tape, x)?;
        let p = &self.mae.params;
        let pooled = match &self.attention {
            None => tape.mean_rows(z)?,
            Some(a) => {
                let q = tape.param(p, a.query);
                let k = a.key.forward(tape, p, z)?;
                let v = a.value.forward(tape, p, z)?;
                let kt = tape.transpose(k)?;
                let s = tape.matmul(q, kt)?;
                let s = tape.scale(s, 1.0 / (self.mae.config.dim as f64).sqrt());
                let w = tape.softmax(s)?;
                tape.matmul(w, v)?
            }
        };
        let pooled = self.norm.forward(tape, p, pooled)?;
        self.head.forward(tape, p, pooled)
    }

    /// Logits of a whole clip with every token kept.
    pub fn predict(&self, video: &VideoTensor) -> Result<Vec<f64>> {
        let spec = patch_grid(video.frames(), video.height(), video.width(), self.mae.config.tubelet)?;
        let mut tape = Tape::frozen();
        let patches = tape.constant(patchify(video, self.mae.config.tubelet)?);
        let all: Vec<usize> = (0..spec.num_tokens()).collect();
        let l = self.logits(&mut tape, patches, spec.grid, &all)?;
        Ok(tape.data(l).to_vec())
    }

    /// Batch-mean cross-entropy with tube token dropping from `stream`.
    pub fn loss(&self, tape: &mut Tape, batch: &[(Tensor, [usize; 3])], labels: &[usize], stream: &RngStream) -> Result<Var> {
        if batch.is_empty() || batch.len() != labels.len() {
            return Err(Error::invalid("fine-tuning batch and labels must be nonempty and equally long"));
        }
        let mut rows = Vec::with_capacity(batch.len());
        for (i, (patches, grid)) in batch.iter().enumerate() {
            let mut rng = stream.split("drop").index(i as u64).rng();
            let dropped = make_tube_mask(*grid, self.config.drop_ratio, &mut rng)?;
            let keep: Vec<usize> = (0..dropped.len()).filter(|&j| !dropped[j]).collect();
            let p = tape.constant(patches.clone());
            rows.push(self.logits(tape, p, *grid, &keep)?);
        }
        let logits = if rows.len() == 1 { rows[0] } else { tape.concat_rows(&rows)? };
        tape.cross_entropy(logits, labels, self.config.label_smoothing)
    }
}

/// Patch rows and token grid for each clip of a fine-tuning batch.
pub fn prepare_clips(videos: &[VideoTensor], tubelet: [usize; 3]) -> Result<Vec<(Tensor, [usize; 3])>> {
    videos
        .iter()
        .map(|v| {
            let spec = patch_grid(v.frames(), v.height(), v.width(), tubelet)?;
            Ok((patchify(v, tubelet)?, spec.grid))
        })
        .collect()
}

pub fn finetune_step(
    clf: &mut Classifier,
    opt: &mut Optimizer,
    batch: &[(Tensor, [usize; 3])],
    labels: &[usize],
    stream: &RngStream,
    lr: f64,
) -> Result<f64> {
    let mut tape = Tape::new();
    let loss = clf.loss(&mut tape, batch, labels, stream)?;
    let value = tape.value(loss).item().expect("scalar loss");
    if !value.is_finite() {
        return Err(Error::NonFinite(format!("fine-tuning loss {value}")));
    }
    let grads = tape.backward(loss)?.for_store(&clf.mae.params);
    opt.step(&mut clf.mae.params, &grads, lr)?;
    Ok(value)
}

/// First frames of `n_crops` evenly spaced windows of `crop_len` frames; a
/// single crop is centered.
pub fn crop_starts(frames: usize, crop_len: usize, n_crops: usize) -> Result<Vec<usize>> {
    if n_crops == 0 || crop_len == 0 || crop_len > frames {
        return Err(Error::invalid(format!("cannot take {n_crops} crops of {crop_len} frames from {frames}")));
    }
    let span = (frames - crop_len) as f64;
    if n_crops == 1 {
        return Ok(vec![(span / 2.0).round() as usize]);
    }
    Ok((0..n_crops).map(|i| (i as f64 * span / (n_crops - 1) as f64).round() as usize).collect())
}

/// Mean logits over evenly spaced temporal crops.
pub fn multi_crop_eval(clf: &Classifier, video: &VideoTensor, crop_len: usize, n_crops: usize) -> Result<Vec<f64>> {
    let starts = crop_starts(video.frames(), crop_len, n_crops)?;
    let mut acc = vec![0.0; clf.config.classes];
    for &s in &starts {
        let l = clf.predict(&video.slice_frames(s, crop_len)?)?;
        acc.iter_mut().zip(&l).for_each(|(a, v)| *a += v);
    }
    acc.iter_mut().for_each(|a| *a /= starts.len() as f64);
    Ok(acc)
}

/// Index of the largest logit (first on ties).
pub fn argmax(logits: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in logits.iter().enumerate() {
        if *v > logits[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn crop_placement() {
        assert_eq!(crop_starts(128, 32, 4).unwrap(), vec![0, 32, 64, 96]);
        assert_eq!(crop_starts(32, 32, 1).unwrap(), vec![0]);
        assert!(crop_starts(16, 32, 1).is_err());
    }
}
