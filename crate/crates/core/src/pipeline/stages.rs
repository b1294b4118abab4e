use std::fs::{self, File};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;

use super::config::{ExperimentConfig, Stage};
use super::data::{self, Clip, VAL_SEED_OFFSET};
use super::manifest::{RunManifest, RunRecorder};
use crate::cost::{estimate, sweep_csv, sweep_gnuplot, sweep_report, ArchDims, CostQuery};
use crate::error::{Error, Result};
use crate::mae::{
    argmax, finetune_step, multi_crop_eval, prepare_clips, prepare_sample, pretrain_step, Classifier, Mae, PretrainSample, TargetKind,
};
use crate::masking::{build_mask_set, flow_saliency, save_mask_dump, validate, MaskPlan, MaskSet, SaliencyMap, Strategy};
use crate::numerics::{Adam, Checkpoint, Optimizer, OptimizerConfig, RngStream};
use crate::tokenizer::{tokenizer_train_step, TokenDump, Tokenizer};
use crate::video::{export_ppm, patch_grid, VideoTensor};

pub const PRETRAIN_COLUMNS: &str = "step,loss,lr,wall_ms,strategy,frames,rho_d,rho_r";
pub const TRAIN_COLUMNS: &str = "step,loss,lr,wall_ms";
const STEP_KEY: &str = "meta/step";
const ADAM_PREFIX: &str = "adam/";

/// Validates `cfg`, runs its stage, and writes the run manifest.
pub fn run(cfg: &ExperimentConfig) -> Result<RunManifest> {
    cfg.validate()?;
    fs::create_dir_all(&cfg.paths.output_dir)?;
    let mut rec = RunRecorder::start();
    match cfg.stage {
        Stage::TrainTokenizer => train_tokenizer(cfg, &mut rec)?,
        Stage::Pretrain => pretrain(cfg, &mut rec)?,
        Stage::Finetune => finetune(cfg, &mut rec)?,
        Stage::Eval => eval(cfg, &mut rec)?,
        Stage::Masks => masks(cfg, &mut rec)?,
        Stage::Cost => cost(cfg, &mut rec)?,
        Stage::Viz => viz(cfg, &mut rec)?,
        Stage::GenData => gen_data(cfg, &mut rec)?,
    }
    Ok(rec.finish(cfg)?.0)
}

/// Line-at-a-time CSV so rows written before a failure survive it.
struct Metrics {
    file: File,
}

impl Metrics {
    fn create(path: &Path, header: &str, rec: &mut RunRecorder) -> Result<Self> {
        let mut file = File::create(path)?;
        writeln!(file, "{header}")?;
        rec.record(path);
        Ok(Metrics { file })
    }

    fn row(&mut self, fields: &[String]) -> Result<()> {
        writeln!(self.file, "{}", fields.join(","))?;
        Ok(())
    }
}

fn out(cfg: &ExperimentConfig, name: &str) -> PathBuf {
    cfg.paths.output_dir.join(name)
}

fn write_json<T: Serialize>(path: &Path, value: &T, rec: &mut RunRecorder) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value).expect("report serializes"))?;
    rec.record(path);
    Ok(())
}

fn require<'a>(path: &'a Option<PathBuf>, what: &str) -> Result<&'a Path> {
    let p = path.as_deref().ok_or_else(|| Error::config("missing_input", format!("{what} is required")))?;
    if !p.exists() {
        return Err(Error::config("missing_input", format!("{what} {} does not exist", p.display())));
    }
    Ok(p)
}

fn load_tokenizer(cfg: &ExperimentConfig) -> Result<Tokenizer> {
    let path = require(&cfg.paths.tokenizer, "paths.tokenizer (frozen tokenizer checkpoint)")?;
    Tokenizer::from_checkpoint(cfg.tokenizer.clone(), &Checkpoint::load(path)?)
}

fn needs_tokenizer(cfg: &ExperimentConfig, strategy: Strategy) -> bool {
    strategy == Strategy::Adaptive || cfg.mae.target == TargetKind::FsqLatent
}

fn stem(name: &str) -> &str {
    name.strip_suffix(".rvid").unwrap_or(name)
}

fn elapsed_ms(t0: Instant) -> String {
    t0.elapsed().as_millis().to_string()
}

/// Window-length crop for tokenizer training; clips shorter than the window
/// are padded by repeating their last frame.
fn tokenizer_crop(video: &VideoTensor, window: usize, stream: &RngStream) -> Result<VideoTensor> {
    use rand::Rng;
    if video.frames() <= window {
        return Ok(video.pad_frames(window));
    }
    let start = stream.rng().random_range(0..=video.frames() - window);
    video.slice_frames(start, window)
}

fn train_tokenizer(cfg: &ExperimentConfig, rec: &mut RunRecorder) -> Result<()> {
    let sched = &cfg.tokenizer_schedule;
    let clips = data::training_clips(cfg)?;
    let root = RngStream::new(cfg.seed);
    let mut tok = Tokenizer::new(cfg.tokenizer.clone(), &root)?;
    let mut opt = Optimizer::new(&tok.params, sched.optimizer);
    let crops = root.split("tokenizer-crop");
    let mut metrics = Metrics::create(&out(cfg, "metrics.csv"), TRAIN_COLUMNS, rec)?;
    let t0 = Instant::now();
    for step in 0..sched.steps {
        let batch = (0..sched.batch_size)
            .map(|j| {
                let k = step * sched.batch_size + j;
                tokenizer_crop(&clips[k % clips.len()].video, cfg.tokenizer.window, &crops.index(k as u64))
            })
            .collect::<Result<Vec<_>>>()?;
        let lr = sched.lr_at(step)?;
        let loss = tokenizer_train_step(&mut tok, &mut opt, &batch, lr)?;
        metrics.row(&[step.to_string(), loss.to_string(), lr.to_string(), elapsed_ms(t0)])?;
        if sched.checkpoint_every > 0 && (step + 1) % sched.checkpoint_every == 0 && step + 1 < sched.steps {
            save_tokenizer(&tok, &out(cfg, &format!("tokenizer_step{:06}.lvmt", step + 1)), rec)?;
        }
    }
    save_tokenizer(&tok, &out(cfg, "tokenizer.lvmt"), rec)
}

fn save_tokenizer(tok: &Tokenizer, path: &Path, rec: &mut RunRecorder) -> Result<()> {
    let mut ckpt = Checkpoint::new();
    tok.to_checkpoint(&mut ckpt);
    ckpt.save(path)?;
    rec.record(path);
    Ok(())
}

/// MAE weights, optimizer moments, and the number of completed steps.
pub fn pretrain_checkpoint(mae: &Mae, adam: &Adam, steps_done: usize) -> Checkpoint {
    let mut ckpt = Checkpoint::new();
    mae.to_checkpoint(&mut ckpt);
    ckpt.push_adam(ADAM_PREFIX, &mae.params, adam);
    ckpt.push(STEP_KEY, crate::numerics::Tensor::scalar(steps_done as f64));
    ckpt
}

fn pretrain_samples(cfg: &ExperimentConfig, clips: &[Clip], strategy: Strategy) -> Result<Vec<PretrainSample>> {
    let tok = if needs_tokenizer(cfg, strategy) { Some(load_tokenizer(cfg)?) } else { None };
    clips
        .iter()
        .map(|c| {
            if strategy == Strategy::Flow && c.flow.is_none() {
                return Err(Error::config("missing_input", format!("flow strategy needs {}", Path::new(&c.name).with_extension("rflo").display())));
            }
            prepare_sample(&c.video, &cfg.mae, strategy, tok.as_ref(), c.flow.as_ref())
        })
        .collect()
}

fn pretrain(cfg: &ExperimentConfig, rec: &mut RunRecorder) -> Result<()> {
    let sched = &cfg.pretrain_schedule;
    let OptimizerConfig::Adam(adam_cfg) = sched.optimizer else {
        return Err(Error::config("bad_schedule", "pre-training uses Adam"));
    };
    let strategy = cfg.strategy()?;
    let clips = data::training_clips(cfg)?;
    let frames = clips[0].video.frames();
    let samples = pretrain_samples(cfg, &clips, strategy)?;
    let root = RngStream::new(cfg.seed);
    let mut mae = Mae::new(cfg.mae.clone(), &root)?;
    let mut adam = Adam::new(&mae.params, adam_cfg);
    let mut start = 0;
    if let Some(path) = &cfg.paths.resume {
        let ckpt = Checkpoint::load(require(&Some(path.clone()), "paths.resume")?)?;
        mae = Mae::from_checkpoint(cfg.mae.clone(), &ckpt)?;
        ckpt.load_adam(ADAM_PREFIX, &mae.params, &mut adam)?;
        start = ckpt.scalar(STEP_KEY).ok_or_else(|| Error::format("resume checkpoint lacks its step count"))? as usize;
        if start > sched.steps {
            return Err(Error::config("bad_schedule", format!("resume step {start} beyond schedule of {}", sched.steps)));
        }
    }
    let plan = MaskPlan { strategy, budget: cfg.budget, uniform_step: cfg.uniform_step };
    let stream = root.split("pretrain");
    let mask_dir = out(cfg, "masks");
    if cfg.dump_masks {
        fs::create_dir_all(&mask_dir)?;
    }
    let mut metrics = Metrics::create(&out(cfg, "metrics.csv"), PRETRAIN_COLUMNS, rec)?;
    let t0 = Instant::now();
    for step in start..sched.steps {
        let batch: Vec<PretrainSample> =
            (0..sched.batch_size).map(|j| samples[(step * sched.batch_size + j) % samples.len()].clone()).collect();
        let lr = sched.lr_at(step)?;
        let outcome = match pretrain_step(&mut mae, &mut adam, &batch, &plan, &stream.index(step as u64), lr) {
            Ok(o) => o,
            Err(e) => {
                // The failed step never reached the optimizer, so these weights are the last good ones.
                let path = out(cfg, "last_good.lvmt");
                pretrain_checkpoint(&mae, &adam, step).save(&path)?;
                return Err(e);
            }
        };
        metrics.row(&[
            step.to_string(),
            outcome.loss.to_string(),
            lr.to_string(),
            elapsed_ms(t0),
            strategy.name().to_string(),
            frames.to_string(),
            cfg.budget.rho_d.to_string(),
            cfg.budget.rho_r.to_string(),
        ])?;
        if cfg.dump_masks {
            for (j, m) in outcome.masks.iter().enumerate() {
                let path = mask_dir.join(format!("step{step:06}_{j}.lvmk"));
                save_mask_dump(m, &cfg.budget, &path)?;
                rec.record(path);
            }
        }
        if sched.checkpoint_every > 0 && (step + 1) % sched.checkpoint_every == 0 && step + 1 < sched.steps {
            let path = out(cfg, &format!("checkpoint_step{:06}.lvmt", step + 1));
            pretrain_checkpoint(&mae, &adam, step + 1).save(&path)?;
            rec.record(path);
        }
    }
    let path = out(cfg, "mae.lvmt");
    pretrain_checkpoint(&mae, &adam, sched.steps).save(&path)?;
    rec.record(path);
    Ok(())
}

#[derive(Serialize)]
struct EvalSummary {
    top1: f64,
    n_crops: usize,
    frames: usize,
    videos: usize,
    checkpoint: Option<PathBuf>,
}

fn evaluate(clf: &Classifier, clips: &[Clip], labels: &[usize], cfg: &ExperimentConfig) -> Result<(f64, usize)> {
    let mut correct = 0;
    let mut crop = 0;
    for (c, &y) in clips.iter().zip(labels) {
        crop = if cfg.eval.crop_frames == 0 { c.video.frames() } else { cfg.eval.crop_frames };
        if argmax(&multi_crop_eval(clf, &c.video, crop, cfg.eval.n_crops)?) == y {
            correct += 1;
        }
    }
    Ok((correct as f64 / clips.len() as f64, crop))
}

fn finetune(cfg: &ExperimentConfig, rec: &mut RunRecorder) -> Result<()> {
    let sched = &cfg.finetune_schedule;
    let clips = data::training_clips(cfg)?;
    let labels = data::labels(&clips, cfg.finetune.classes)?;
    let val = data::validation_clips(cfg)?;
    let val_labels = data::labels(&val, cfg.finetune.classes)?;
    let root = RngStream::new(cfg.seed);
    let mae = match &cfg.paths.checkpoint {
        Some(_) => Mae::from_checkpoint(cfg.mae.clone(), &Checkpoint::load(require(&cfg.paths.checkpoint, "paths.checkpoint")?)?)?,
        None => Mae::new(cfg.mae.clone(), &root)?,
    };
    let mut clf = Classifier::new(mae, cfg.finetune.clone(), &root)?;
    let mut opt = Optimizer::new(&clf.mae.params, sched.optimizer);
    let stream = root.split("finetune");
    let mut metrics = Metrics::create(&out(cfg, "metrics.csv"), TRAIN_COLUMNS, rec)?;
    let t0 = Instant::now();
    let mut last = f64::NAN;
    for step in 0..sched.steps {
        let idx: Vec<usize> = (0..sched.batch_size).map(|j| (step * sched.batch_size + j) % clips.len()).collect();
        let videos: Vec<VideoTensor> = idx.iter().map(|&i| clips[i].video.clone()).collect();
        let batch = prepare_clips(&videos, cfg.mae.tubelet)?;
        let ys: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
        let lr = sched.lr_at(step)?;
        last = finetune_step(&mut clf, &mut opt, &batch, &ys, &stream.index(step as u64), lr)?;
        metrics.row(&[step.to_string(), last.to_string(), lr.to_string(), elapsed_ms(t0)])?;
    }
    let path = out(cfg, "classifier.lvmt");
    let mut ckpt = Checkpoint::new();
    clf.to_checkpoint(&mut ckpt);
    ckpt.save(&path)?;
    rec.record(path.clone());
    let (top1, frames) = evaluate(&clf, &val, &val_labels, cfg)?;
    let summary = EvalSummary { top1, n_crops: cfg.eval.n_crops, frames, videos: val.len(), checkpoint: Some(path) };
    write_json(&out(cfg, "finetune_summary.json"), &serde_json::json!({ "final_loss": last, "validation": summary }), rec)
}

fn eval(cfg: &ExperimentConfig, rec: &mut RunRecorder) -> Result<()> {
    let path = require(&cfg.paths.checkpoint, "paths.checkpoint (fine-tuned classifier)")?;
    let root = RngStream::new(cfg.seed);
    let mut clf = Classifier::new(Mae::new(cfg.mae.clone(), &root)?, cfg.finetune.clone(), &root)?;
    clf.load_checkpoint(&Checkpoint::load(path)?)?;
    let val = data::validation_clips(cfg)?;
    let labels = data::labels(&val, cfg.finetune.classes)?;
    let (top1, frames) = evaluate(&clf, &val, &labels, cfg)?;
    let summary = EvalSummary { top1, n_crops: cfg.eval.n_crops, frames, videos: val.len(), checkpoint: Some(path.to_path_buf()) };
    write_json(&out(cfg, "eval.json"), &summary, rec)
}

/// Saliency for `strategy` (flow from the clip, adaptive from the tokenizer).
fn saliency(clip: &Clip, strategy: Strategy, tok: Option<&Tokenizer>, tubelet: [usize; 3]) -> Result<Option<SaliencyMap>> {
    let v = &clip.video;
    let spec = patch_grid(v.frames(), v.height(), v.width(), tubelet)?;
    match strategy {
        Strategy::Adaptive => {
            let t = tok.expect("adaptive strategy loads a tokenizer").tokenize_long_video(v)?;
            Ok(Some(SaliencyMap::from_scores(spec.grid, &t.importance.scores)?))
        }
        Strategy::Flow => {
            let f = clip
                .flow
                .as_ref()
                .ok_or_else(|| Error::config("missing_input", format!("flow strategy needs a flow field for {}", clip.name)))?;
            Ok(Some(flow_saliency(f, &spec)?))
        }
        _ => Ok(None),
    }
}

/// Mask set of clip `i` under the stage stream `stream`, drawn like a
/// pre-training batch element `i`.
fn clip_masks(cfg: &ExperimentConfig, clip: &Clip, i: usize, tok: Option<&Tokenizer>, stream: &RngStream) -> Result<MaskSet> {
    let strategy = cfg.strategy()?;
    let v = &clip.video;
    let spec = patch_grid(v.frames(), v.height(), v.width(), cfg.mae.tubelet)?;
    let sal = saliency(clip, strategy, tok, cfg.mae.tubelet)?;
    let plan = MaskPlan { strategy, budget: cfg.budget, uniform_step: cfg.uniform_step };
    let mut enc = stream.split("encoder").index(i as u64).rng();
    let mut dec = stream.split("decoder").index(i as u64).rng();
    build_mask_set(&plan, spec.grid, sal.as_ref(), &mut enc, &mut dec)
}

fn masks(cfg: &ExperimentConfig, rec: &mut RunRecorder) -> Result<()> {
    let strategy = cfg.strategy()?;
    let clips = data::training_clips(cfg)?;
    let tok = if strategy == Strategy::Adaptive { Some(load_tokenizer(cfg)?) } else { None };
    let dir = out(cfg, "masks");
    fs::create_dir_all(&dir)?;
    let stream = RngStream::new(cfg.seed).split("masks");
    let mut table = Metrics::create(&out(cfg, "masks.csv"), "clip,n,visible,decoded,decoded_in_motion,violations", rec)?;
    for (i, c) in clips.iter().enumerate() {
        let m = clip_masks(cfg, c, i, tok.as_ref(), &stream)?;
        let report = validate(&m, &cfg.budget, strategy, cfg.uniform_step);
        let in_motion = match &c.motion {
            Some(motion) => m.selected_indices().iter().filter(|&&j| motion[j]).count().to_string(),
            None => String::new(),
        };
        table.row(&[
            c.name.clone(),
            m.n().to_string(),
            m.n_visible().to_string(),
            m.n_decoded().to_string(),
            in_motion,
            report.violations.len().to_string(),
        ])?;
        let path = dir.join(format!("{}.lvmk", stem(&c.name)));
        save_mask_dump(&m, &cfg.budget, &path)?;
        rec.record(path);
    }
    Ok(())
}

#[derive(Serialize)]
struct CostRow {
    frames: usize,
    rho_d: f64,
    n_e: usize,
    n_d: usize,
    flops_total: f64,
    flops_decoder_share: f64,
    activation_bytes: f64,
    mem_bytes: f64,
    fits_budget: Option<bool>,
}

fn cost(cfg: &ExperimentConfig, rec: &mut RunRecorder) -> Result<()> {
    let c = &cfg.cost;
    let base = CostQuery { frames: cfg.scene.frames, height: cfg.scene.height, width: cfg.scene.width, tubelet: cfg.mae.tubelet, budget: cfg.budget };
    let dims = ArchDims { bytes_per_value: c.bytes_per_value, batch: c.batch, ..ArchDims::from_mae(&cfg.mae) };
    let rows = sweep_report(&c.frames, &c.rho_d, &base, &dims).map_err(|e| Error::config("bad_cost", e.to_string()))?;
    let csv = out(cfg, "cost.csv");
    fs::write(&csv, sweep_csv(&rows))?;
    rec.record(csv);
    let dat = out(cfg, "cost.dat");
    fs::write(&dat, sweep_gnuplot(&rows))?;
    rec.record(dat);
    let detail = rows
        .iter()
        .map(|r| {
            let q = CostQuery { frames: r.frames, budget: crate::masking::BudgetSpec { rho_d: r.rho_d, ..cfg.budget }, ..base };
            let act = estimate(&q, &dims)?.activations.total();
            Ok(CostRow {
                frames: r.frames,
                rho_d: r.rho_d,
                n_e: r.n_e,
                n_d: r.n_d,
                flops_total: r.flops_total,
                flops_decoder_share: r.flops_decoder_share,
                activation_bytes: act,
                mem_bytes: r.mem_bytes,
                fits_budget: c.activation_budget.map(|b| act <= b),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    write_json(&out(cfg, "cost.json"), &detail, rec)
}

fn viz(cfg: &ExperimentConfig, rec: &mut RunRecorder) -> Result<()> {
    let strategy = cfg.strategy()?;
    let clips = data::training_clips(cfg)?;
    let tok = match (&cfg.paths.tokenizer, strategy) {
        (Some(_), _) | (None, Strategy::Adaptive) => Some(load_tokenizer(cfg)?),
        _ => None,
    };
    let stream = RngStream::new(cfg.seed).split("masks");
    for (i, c) in clips.iter().enumerate() {
        let m = clip_masks(cfg, c, i, tok.as_ref(), &stream)?;
        let v = &c.video;
        let spec = patch_grid(v.frames(), v.height(), v.width(), cfg.mae.tubelet)?;
        let dir = out(cfg, &format!("viz/{}", stem(&c.name)));
        for p in export_ppm(v, &dir, Some((&spec, &m.decoder_selected)))? {
            rec.record(p);
        }
        if let Some(t) = &tok {
            let lt = t.tokenize_long_video(v)?;
            let dump = TokenDump {
                grid: lt.latent.grid,
                dim: lt.latent.dim,
                latents: lt.latent.zq.clone(),
                scores: lt.importance.scores.clone(),
                selected: lt.latent.selected.clone(),
            };
            let path = out(cfg, &format!("viz/{}.lvtk", stem(&c.name)));
            dump.save(&path)?;
            rec.record(path);
        }
    }
    Ok(())
}

fn gen_data(cfg: &ExperimentConfig, rec: &mut RunRecorder) -> Result<()> {
    for p in data::write_dataset(&cfg.paths.output_dir, &data::generate(cfg, cfg.clips, 0)?)? {
        rec.record(p);
    }
    let val_dir = out(cfg, "val");
    for p in data::write_dataset(&val_dir, &data::generate(cfg, cfg.val_clips, VAL_SEED_OFFSET)?)? {
        rec.record(p);
    }
    Ok(())
}
