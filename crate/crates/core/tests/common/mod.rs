//! Finite-difference oracle shared by the integration tests.
#![allow(dead_code)]

pub mod graphs;

use lvmae::numerics::{ParamId, ParamStore};

pub const FD_STEP: f64 = 1e-5;

/// Central difference of `f` with respect to every element of `x`.
pub fn numeric_grad(x: &[f64], mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + FD_STEP;
            let up = f(&probe);
            probe[i] = orig - FD_STEP;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * FD_STEP)
        })
        .collect()
}

/// `|a - n| / max(|a|, |n|)` over whole vectors; 0 when both vanish.
pub fn rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    let diff: f64 = analytic.iter().zip(numeric).map(|(a, n)| (a - n) * (a - n)).sum::<f64>().sqrt();
    let scale = norm(analytic).max(norm(numeric));
    if scale < 1e-12 {
        0.0
    } else {
        diff / scale
    }
}

pub fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Central differences for parameter `id`, probing at most `max_probe`
/// evenly spaced elements; returns `(indices, numeric values)`.
pub fn param_fd(
    store: &ParamStore,
    id: ParamId,
    max_probe: usize,
    mut loss: impl FnMut(&ParamStore) -> f64,
) -> (Vec<usize>, Vec<f64>) {
    let n = store.get(id).numel();
    let stride = n.div_ceil(max_probe.max(1)).max(1);
    let idx: Vec<usize> = (0..n).step_by(stride).collect();
    let mut probe = store.clone();
    let vals = idx
        .iter()
        .map(|&i| {
            let orig = probe.get(id).data()[i];
            probe.get_mut(id).data_mut()[i] = orig + FD_STEP;
            let up = loss(&probe);
            probe.get_mut(id).data_mut()[i] = orig - FD_STEP;
            let down = loss(&probe);
            probe.get_mut(id).data_mut()[i] = orig;
            (up - down) / (2.0 * FD_STEP)
        })
        .collect();
    (idx, vals)
}

/// Checks every parameter group of `store` against central differences and
/// returns the worst relative error with its parameter name.
pub fn check_params(
    store: &ParamStore,
    analytic: &[Vec<f64>],
    max_probe: usize,
    skip: impl Fn(&str) -> bool,
    mut loss: impl FnMut(&ParamStore) -> f64,
) -> (f64, String) {
    let mut worst = (0.0, String::new());
    for (id, name, _) in store.iter() {
        if skip(name) {
            continue;
        }
        let (idx, num) = param_fd(store, id, max_probe, &mut loss);
        let ana: Vec<f64> = idx.iter().map(|&i| analytic[id.index()][i]).collect();
        let e = rel_err(&ana, &num);
        if e > worst.0 || worst.1.is_empty() {
            worst = (e, name.to_string());
        }
    }
    worst
}

/// A pipeline configuration small enough to pre-train in well under a
/// second per step: 4-frame 16x16 clips, one-block encoder and decoder,
/// pixel targets, random decoder masking.
pub fn tiny_experiment(out: &std::path::Path) -> lvmae::pipeline::ExperimentConfig {
    use lvmae::mae::{MaeConfig, TargetKind};
    let mut cfg = lvmae::pipeline::ExperimentConfig::desk();
    cfg.scene.frames = 4;
    cfg.scene.height = 16;
    cfg.scene.width = 16;
    cfg.scene.tubelet = [2, 4, 4];
    cfg.scene.sprites = 1;
    cfg.scene.size_min = 3;
    cfg.scene.size_max = 4;
    cfg.clips = 4;
    cfg.val_clips = 4;
    cfg.strategy = "random".into();
    cfg.mae = MaeConfig {
        dim: 16,
        enc_layers: 1,
        enc_heads: 2,
        enc_mlp: 16,
        dec_dim: 16,
        dec_layers: 1,
        dec_heads: 2,
        dec_mlp: 16,
        tubelet: [2, 4, 4],
        target: TargetKind::Rgb,
        latent_dim: 8,
    };
    cfg.pretrain_schedule.steps = 10;
    cfg.pretrain_schedule.batch_size = 2;
    cfg.pretrain_schedule.warmup_steps = 2;
    cfg.paths.output_dir = out.to_path_buf();
    cfg
}

/// Metrics rows with the wall-clock column removed.
pub fn metrics_without_wall_clock(path: &std::path::Path) -> Vec<String> {
    let text = std::fs::read_to_string(path).unwrap();
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    let wall = header.iter().position(|h| *h == "wall_ms").unwrap();
    lines
        .map(|l| l.split(',').enumerate().filter(|(i, _)| *i != wall).map(|(_, f)| f).collect::<Vec<_>>().join(","))
        .collect()
}

/// One randomized trial of the mask laws for `strategy`: a random grid,
/// feasible budget, and saliency drawn from `seed`. Returns every law the
/// drawn masks break (empty on success).
pub fn mask_law_trial(strategy: lvmae::masking::Strategy, seed: u64) -> Vec<String> {
    use lvmae::masking::{build_mask_set, rank_masked, validate, BudgetSpec, MaskPlan, SaliencyMap, Strategy};
    use lvmae::numerics::RngStream;
    use rand::Rng;

    let root = RngStream::new(seed).split(strategy.name());
    let mut rng = root.split("setup").rng();
    let (grid, budget) = loop {
        let grid = [rng.random_range(1..=8), rng.random_range(2..=8), rng.random_range(2..=8)];
        let budget = BudgetSpec {
            rho_e: rng.random_range(0.3..0.95),
            rho_d: rng.random_range(0.5..1.0),
            rho_r: rng.random_range(0.0..0.2),
        };
        if budget.validate(grid).is_ok() {
            break (grid, budget);
        }
    };
    let n: usize = grid.iter().product();
    let raw: Vec<f64> = (0..n).map(|_| if rng.random_bool(0.2) { 0.0 } else { rng.random_range(0.0..1.0) }).collect();
    let saliency = SaliencyMap::from_scores(grid, &raw).unwrap();
    let plan = MaskPlan { strategy, budget, uniform_step: rng.random_range(1..=4) };
    let draw = |s: &SaliencyMap| {
        let mut e = root.split("encoder").rng();
        let mut d = root.split("decoder").rng();
        build_mask_set(&plan, grid, Some(s), &mut e, &mut d).unwrap()
    };
    let mask = draw(&saliency);
    let mut broken: Vec<String> = validate(&mask, &budget, strategy, plan.uniform_step)
        .violations
        .into_iter()
        .map(|v| format!("{}: {}", v.code, v.detail))
        .collect();
    if (0..n).any(|i| mask.decoder_selected[i] && !mask.encoder_masked[i]) {
        broken.push("subset".into());
    }
    let spatial = grid[1] * grid[2];
    if (0..n).any(|i| mask.encoder_masked[i] != mask.encoder_masked[i % spatial]) {
        broken.push("tube".into());
    }
    if draw(&saliency) != mask {
        broken.push("determinism".into());
    }
    if matches!(strategy, Strategy::Adaptive | Strategy::Flow) {
        let c = rng.random_range(0.01..100.0);
        let scaled: Vec<f64> = raw.iter().map(|v| v * c).collect();
        if draw(&SaliencyMap::from_scores(grid, &scaled).unwrap()) != mask {
            broken.push("scale-invariance".into());
        }
        let top = &rank_masked(saliency.values(), &mask.encoder_masked)[..budget.adaptive_count(n)];
        if top.iter().any(|&i| !mask.decoder_selected[i]) {
            broken.push("top-k".into());
        }
    }
    broken
}
