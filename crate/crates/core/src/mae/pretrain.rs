use super::config::{MaeConfig, TargetKind};
use super::model::{mae_loss, patchify, Mae};
use crate::error::{Error, Result};
use crate::masking::{build_mask_set, flow_saliency, MaskPlan, MaskSet, SaliencyMap, Strategy};
use crate::numerics::{Adam, RngStream, Tape, Tensor, Var};
use crate::tokenizer::Tokenizer;
use crate::video::{patch_grid, FlowField, VideoTensor};

/// One clip ready for pre-training: patch rows, per-token targets, and the
/// saliency map the strategy needs (if any).
#[derive(Clone, Debug)]
pub struct PretrainSample {
    pub grid: [usize; 3],
    pub patches: Tensor,
    pub targets: Tensor,
    pub saliency: Option<SaliencyMap>,
}

/// Builds targets and saliency for `video`. Latent targets and adaptive
/// saliency come from the frozen tokenizer, flow saliency from `flow`.
pub fn prepare_sample(
    video: &VideoTensor,
    cfg: &MaeConfig,
    strategy: Strategy,
    tokenizer: Option<&Tokenizer>,
    flow: Option<&FlowField>,
) -> Result<PretrainSample> {
    let spec = patch_grid(video.frames(), video.height(), video.width(), cfg.tubelet)?;
    let grid = spec.grid;
    let patches = patchify(video, cfg.tubelet)?;
    let needs_tokens = cfg.target == TargetKind::FsqLatent || strategy == Strategy::Adaptive;
    let tokens = if needs_tokens {
        let tok = tokenizer.ok_or_else(|| Error::invalid("latent targets and adaptive saliency need a tokenizer"))?;
        let t = tok.tokenize_long_video(video)?;
        if t.latent.grid != grid {
            return Err(Error::Geometry(format!("tokenizer grid {:?} differs from token grid {grid:?}", t.latent.grid)));
        }
        Some(t)
    } else {
        None
    };
    let targets = match cfg.target {
        TargetKind::Rgb => patches.clone(),
        TargetKind::FsqLatent => {
            let t = tokens.as_ref().expect("tokens computed");
            if t.latent.dim != cfg.latent_dim {
                return Err(Error::shape(format!("tokenizer latent width {} != {}", t.latent.dim, cfg.latent_dim)));
            }
            Tensor::new(vec![spec.num_tokens(), t.latent.dim], t.latent.zq.clone())?
        }
    };
    let saliency = match strategy {
        Strategy::Adaptive => Some(SaliencyMap::from_scores(grid, &tokens.as_ref().expect("tokens computed").importance.scores)?),
        Strategy::Flow => {
            let f = flow.ok_or_else(|| Error::invalid("flow strategy needs a flow field"))?;
            Some(flow_saliency(f, &spec)?)
        }
        _ => None,
    };
    Ok(PretrainSample { grid, patches, targets, saliency })
}

/// Draws masks for every sample of a step. Encoder masks come from
/// `stream/encoder/i`, decoder choices from `stream/decoder/i`.
pub fn draw_masks(batch: &[PretrainSample], plan: &MaskPlan, stream: &RngStream) -> Result<Vec<MaskSet>> {
    batch
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let mut enc = stream.split("encoder").index(i as u64).rng();
            let mut dec = stream.split("decoder").index(i as u64).rng();
            build_mask_set(plan, s.grid, s.saliency.as_ref(), &mut enc, &mut dec)
        })
        .collect()
}

/// Batch-mean loss over samples with at least one selected token; `None`
/// when no sample selects anything.
pub fn pretrain_loss(mae: &Mae, tape: &mut Tape, batch: &[PretrainSample], masks: &[MaskSet]) -> Result<Option<Var>> {
    let mut losses = Vec::new();
    for (s, m) in batch.iter().zip(masks) {
        let patches = tape.constant(s.patches.clone());
        if let Some(pred) = mae.forward(tape, patches, m)? {
            let targets = tape.constant(s.targets.clone());
            losses.push(mae_loss(tape, pred, targets, m)?);
        }
    }
    let Some(&first) = losses.first() else { return Ok(None) };
    let mut total = first;
    for &l in &losses[1..] {
        total = tape.add(total, l)?;
    }
    Ok(Some(tape.scale(total, 1.0 / losses.len() as f64)))
}

#[derive(Clone, Debug)]
pub struct StepOutcome {
    pub loss: f64,
    pub masks: Vec<MaskSet>,
}

/// Masks, forward, backward, and one Adam update. A step whose masks select
/// nothing reports zero loss and leaves the parameters untouched.
pub fn pretrain_step(
    mae: &mut Mae,
    adam: &mut Adam,
    batch: &[PretrainSample],
    plan: &MaskPlan,
    stream: &RngStream,
    lr: f64,
) -> Result<StepOutcome> {
    if batch.is_empty() {
        return Err(Error::invalid("empty pre-training batch"));
    }
    let masks = draw_masks(batch, plan, stream)?;
    let mut tape = Tape::new();
    let Some(loss) = pretrain_loss(mae, &mut tape, batch, &masks)? else {
        return Ok(StepOutcome { loss: 0.0, masks });
    };
    let value = tape.value(loss).item().expect("scalar loss");
    if !value.is_finite() {
        return Err(Error::NonFinite(format!("pre-training loss {value}")));
    }
    let grads = tape.backward(loss)?.for_store(&mae.params);
    adam.step(&mut mae.params, &grads, lr)?;
    Ok(StepOutcome { loss: value, masks })
}
