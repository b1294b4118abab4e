use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use super::config::{ExperimentConfig, Task};
use crate::error::{Error, Result};
use crate::video::{gen_moving_sprites, load_rflo, load_rvid, save_rflo, save_rvid, FlowField, Motion, SceneSpec, VideoTensor};

pub const LABELS_FILE: &str = "labels.csv";
pub const MOTION_FILE: &str = "motion.json";
/// Seed offset separating generated validation clips from training clips.
pub const VAL_SEED_OFFSET: u64 = 1_000_000;

#[derive(Clone, Debug)]
pub struct Clip {
    /// File name of the `.rvid`, also the key in `labels.csv`.
    pub name: String,
    pub video: VideoTensor,
    pub flow: Option<FlowField>,
    pub label: Option<usize>,
    /// Per-token ground-truth motion, known only for generated clips.
    pub motion: Option<Vec<bool>>,
}

/// Scene spec of generated clip `index` (seeds count up from `scene.seed + offset`).
pub fn clip_spec(cfg: &ExperimentConfig, index: usize, offset: u64) -> SceneSpec {
    let seed = cfg.scene.seed + offset + index as u64;
    match cfg.task {
        Task::Scenes => SceneSpec { seed, ..cfg.scene.clone() },
        Task::Direction => SceneSpec { seed, motion: Motion::Horizontal { rightward: index % 2 == 1 }, ..cfg.scene.clone() },
    }
}

pub fn generate(cfg: &ExperimentConfig, count: usize, offset: u64) -> Result<Vec<Clip>> {
    (0..count)
        .map(|i| {
            let spec = clip_spec(cfg, i, offset);
            let scene = gen_moving_sprites(&spec)?;
            let label = match spec.motion {
                Motion::Horizontal { rightward } => usize::from(rightward),
                Motion::Random => 0,
            };
            Ok(Clip {
                name: format!("clip_{i:04}.rvid"),
                video: scene.video,
                flow: Some(scene.flow),
                label: Some(label),
                motion: Some(scene.motion_mask),
            })
        })
        .collect()
}

/// Writes clips, flows, `labels.csv` and `motion.json`; returns the paths written.
pub fn write_dataset(dir: &Path, clips: &[Clip]) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    let mut labels = String::from("filename,label\n");
    let mut motion = BTreeMap::new();
    for c in clips {
        let path = dir.join(&c.name);
        save_rvid(&c.video, &path)?;
        written.push(path.clone());
        if let Some(flow) = &c.flow {
            let fpath = path.with_extension("rflo");
            save_rflo(flow, &fpath)?;
            written.push(fpath);
        }
        labels.push_str(&format!("{},{}\n", c.name, c.label.unwrap_or(0)));
        if let Some(m) = &c.motion {
            motion.insert(c.name.clone(), m.clone());
        }
    }
    let lpath = dir.join(LABELS_FILE);
    fs::write(&lpath, labels)?;
    written.push(lpath);
    let mpath = dir.join(MOTION_FILE);
    fs::write(&mpath, serde_json::to_string(&motion).expect("motion masks serialize"))?;
    written.push(mpath);
    Ok(written)
}

fn read_labels(path: &Path) -> Result<BTreeMap<String, usize>> {
    let text = fs::read_to_string(path)?;
    let mut out = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || (i == 0 && line.starts_with("filename")) {
            continue;
        }
        let (name, label) = line
            .split_once(',')
            .ok_or_else(|| Error::format(format!("{}:{}: expected filename,label", path.display(), i + 1)))?;
        let label = label
            .trim()
            .parse()
            .map_err(|_| Error::format(format!("{}:{}: label {label:?} is not an integer", path.display(), i + 1)))?;
        out.insert(name.trim().to_string(), label);
    }
    Ok(out)
}

/// Every `.rvid` in `dir` (sorted by name) with its `.rflo`, label, and motion mask when present.
pub fn load_dir(dir: &Path) -> Result<Vec<Clip>> {
    let entries = fs::read_dir(dir)
        .map_err(|e| Error::config("missing_input", format!("cannot read data directory {}: {e}", dir.display())))?;
    let mut names: Vec<String> = entries
        .filter_map(|e| e.ok())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|n| n.ends_with(".rvid"))
        .collect();
    names.sort();
    if names.is_empty() {
        return Err(Error::config("missing_input", format!("no .rvid files in {}", dir.display())));
    }
    let labels_path = dir.join(LABELS_FILE);
    let labels = if labels_path.exists() { read_labels(&labels_path)? } else { BTreeMap::new() };
    let motion_path = dir.join(MOTION_FILE);
    let motion: BTreeMap<String, Vec<bool>> = if motion_path.exists() {
        serde_json::from_str(&fs::read_to_string(&motion_path)?).map_err(|e| Error::format(format!("{MOTION_FILE}: {e}")))?
    } else {
        BTreeMap::new()
    };
    names
        .into_iter()
        .map(|name| {
            let path = dir.join(&name);
            let flow_path = path.with_extension("rflo");
            Ok(Clip {
                video: load_rvid(&path)?,
                flow: if flow_path.exists() { Some(load_rflo(&flow_path)?) } else { None },
                label: labels.get(&name).copied(),
                motion: motion.get(&name).cloned(),
                name,
            })
        })
        .collect()
}

pub fn training_clips(cfg: &ExperimentConfig) -> Result<Vec<Clip>> {
    match &cfg.paths.data_dir {
        Some(dir) => load_dir(dir),
        None => generate(cfg, cfg.clips, 0),
    }
}

pub fn validation_clips(cfg: &ExperimentConfig) -> Result<Vec<Clip>> {
    match &cfg.paths.val_dir {
        Some(dir) => load_dir(dir),
        None => generate(cfg, cfg.val_clips, VAL_SEED_OFFSET),
    }
}

/// Labels of every clip, each below `classes`.
pub fn labels(clips: &[Clip], classes: usize) -> Result<Vec<usize>> {
    clips
        .iter()
        .map(|c| {
            let l = c.label.ok_or_else(|| Error::config("missing_labels", format!("no label for {}", c.name)))?;
            if l >= classes {
                return Err(Error::config("bad_label", format!("label {l} of {} is not below {classes}", c.name)));
            }
            Ok(l)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dataset_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = ExperimentConfig::desk();
        cfg.task = Task::Direction;
        cfg.scene.frames = 4;
        cfg.scene.height = 16;
        cfg.scene.width = 16;
        cfg.scene.tubelet = [2, 8, 8];
        cfg.scene.sprites = 1;
        cfg.scene.size_min = 3;
        cfg.scene.size_max = 4;
        let clips = generate(&cfg, 3, 0).unwrap();
        assert_eq!(clips.iter().map(|c| c.label.unwrap()).collect::<Vec<_>>(), vec![0, 1, 0]);
        write_dataset(dir.path(), &clips).unwrap();
        let back = load_dir(dir.path()).unwrap();
        assert_eq!(back.len(), 3);
        for (a, b) in clips.iter().zip(&back) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.video, b.video);
            assert_eq!(a.label, b.label);
            assert_eq!(a.motion, b.motion);
            assert!(b.flow.is_some());
        }
        assert_eq!(labels(&back, 2).unwrap(), vec![0, 1, 0]);
        assert_eq!(labels(&back, 1).unwrap_err().code(), "bad_label");
    }
}
