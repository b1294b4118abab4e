//! Gradient oracles: per-op and end-to-end comparisons of analytic
//! gradients with central finite differences.

use lvmae::mae::{pretrain_loss, Classifier, FinetuneConfig, Mae, MaeConfig, Pooling, PretrainSample, TargetKind};
use lvmae::masking::{build_mask_set, BudgetSpec, MaskPlan, SaliencyMap, Strategy};
use lvmae::numerics::{ParamStore, RngStream, Tape, Tensor, Var};
use lvmae::tokenizer::{fsq_quantize, select_topk, SelectMode, Tokenizer, TokenizerConfig};
use lvmae::video::VideoTensor;
use rand::Rng;

use super::{check_params, numeric_grad, rel_err};

pub const TOL: f64 = 1e-4;


pub fn random(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = RngStream::new(seed).split("grad-data").rng();
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Checks `f` against finite differences in every input through the scalar
/// `sum(w * f(inputs))` with fixed random weights `w`; returns the worst error.
pub fn check_op(inputs: &[Tensor], f: impl Fn(&mut Tape, &[Var]) -> Var) -> f64 {
    let eval = |tape: &mut Tape, vals: &[Tensor]| -> (Vec<Var>, Var) {
        let vars: Vec<Var> = vals.iter().map(|t| tape.variable(t.clone())).collect();
        let y = f(tape, &vars);
        let w = tape.constant(random(tape.shape(y), 99));
        let wy = tape.mul(y, w).unwrap();
        (vars, tape.sum(wy))
    };
    let mut tape = Tape::new();
    let (vars, loss) = eval(&mut tape, inputs);
    let grads = tape.backward(loss).unwrap();
    let mut worst: f64 = 0.0;
    for (i, v) in vars.iter().enumerate() {
        let analytic = grads.wrt(*v);
        let numeric = numeric_grad(inputs[i].data(), |x| {
            let mut vals = inputs.to_vec();
            vals[i] = Tensor::new(inputs[i].shape().to_vec(), x.to_vec()).unwrap();
            let mut t = Tape::new();
            let (_, l) = eval(&mut t, &vals);
            t.value(l).item().unwrap()
        });
        worst = worst.max(rel_err(&analytic, &numeric));
    }
    worst
}

type OpFn = Box<dyn Fn(&mut Tape, &[Var]) -> Var>;

/// Every differentiable tape op on small random inputs: `(name, worst error)`.
pub fn op_suite() -> Vec<(&'static str, f64)> {
    let ops: Vec<(&'static str, Vec<Vec<usize>>, OpFn)> = vec![
        ("add", vec![vec![3, 4], vec![3, 4]], Box::new(|t: &mut Tape, v: &[Var]| t.add(v[0], v[1]).unwrap())),
        ("sub", vec![vec![3, 4], vec![3, 4]], Box::new(|t: &mut Tape, v: &[Var]| t.sub(v[0], v[1]).unwrap())),
        ("mul", vec![vec![3, 4], vec![3, 4]], Box::new(|t: &mut Tape, v: &[Var]| t.mul(v[0], v[1]).unwrap())),
        ("scale", vec![vec![3, 4]], Box::new(|t: &mut Tape, v: &[Var]| t.scale(v[0], -1.7))),
        ("add_bias", vec![vec![3, 4], vec![4]], Box::new(|t: &mut Tape, v: &[Var]| t.add_bias(v[0], v[1]).unwrap())),
        ("add_channel_bias", vec![vec![2, 3, 2, 2], vec![2]], Box::new(|t: &mut Tape, v: &[Var]| t.add_channel_bias(v[0], v[1]).unwrap())),
        ("matmul", vec![vec![3, 4], vec![4, 5]], Box::new(|t: &mut Tape, v: &[Var]| t.matmul(v[0], v[1]).unwrap())),
        ("transpose", vec![vec![3, 4]], Box::new(|t: &mut Tape, v: &[Var]| t.transpose(v[0]).unwrap())),
        ("reshape", vec![vec![3, 4]], Box::new(|t: &mut Tape, v: &[Var]| t.reshape(v[0], &[2, 6]).unwrap())),
        ("gelu", vec![vec![3, 4]], Box::new(|t: &mut Tape, v: &[Var]| {
    let x = t.scale(v[0], 3.0);
    t.gelu(x)
})),
        ("sigmoid", vec![vec![3, 4]], Box::new(|t: &mut Tape, v: &[Var]| {
    let x = t.scale(v[0], 3.0);
    t.sigmoid(x)
})),
        ("tanh", vec![vec![3, 4]], Box::new(|t: &mut Tape, v: &[Var]| {
    let x = t.scale(v[0], 2.0);
    t.tanh(x)
})),
        ("softmax", vec![vec![3, 5]], Box::new(|t: &mut Tape, v: &[Var]| t.softmax(v[0]).unwrap())),
        ("layer_norm", vec![vec![3, 5], vec![5], vec![5]], Box::new(|t: &mut Tape, v: &[Var]| t.layer_norm(v[0], v[1], v[2], 1e-5).unwrap())),
        ("conv3d_strided", vec![vec![2, 4, 4, 4], vec![3, 2, 2, 2, 2]], Box::new(|t: &mut Tape, v: &[Var]| t.conv3d(v[0], v[1], [2, 2, 2]).unwrap())),
        ("conv3d_overlapping", vec![vec![2, 3, 4, 4], vec![2, 2, 2, 3, 2]], Box::new(|t: &mut Tape, v: &[Var]| t.conv3d(v[0], v[1], [1, 1, 2]).unwrap())),
        ("conv_transpose3d", vec![vec![2, 2, 2, 2], vec![2, 3, 2, 2, 2]], Box::new(|t: &mut Tape, v: &[Var]| t.conv_transpose3d(v[0], v[1], [2, 2, 2]).unwrap())),
        ("gather_rows", vec![vec![4, 3]], Box::new(|t: &mut Tape, v: &[Var]| t.gather_rows(v[0], &[2, 0, 2]).unwrap())),
        ("concat_rows", vec![vec![2, 3], vec![1, 3]], Box::new(|t: &mut Tape, v: &[Var]| t.concat_rows(&[v[0], v[1]]).unwrap())),
        ("concat_cols", vec![vec![3, 2], vec![3, 1]], Box::new(|t: &mut Tape, v: &[Var]| t.concat_cols(&[v[0], v[1]]).unwrap())),
        ("slice_cols", vec![vec![3, 5]], Box::new(|t: &mut Tape, v: &[Var]| t.slice_cols(v[0], 1, 3).unwrap())),
        ("repeat_rows", vec![vec![1, 3]], Box::new(|t: &mut Tape, v: &[Var]| t.repeat_rows(v[0], 4))),
        ("sum", vec![vec![3, 4]], Box::new(|t: &mut Tape, v: &[Var]| t.sum(v[0]))),
        ("mean", vec![vec![3, 4]], Box::new(|t: &mut Tape, v: &[Var]| t.mean(v[0]))),
        ("mean_rows", vec![vec![4, 3]], Box::new(|t: &mut Tape, v: &[Var]| t.mean_rows(v[0]).unwrap())),
        ("mse", vec![vec![3, 4], vec![3, 4]], Box::new(|t: &mut Tape, v: &[Var]| t.mse(v[0], v[1]).unwrap())),
        ("frame_distance", vec![vec![2, 3, 2, 2]], Box::new(|t: &mut Tape, v: &[Var]| t.frame_distance(v[0]).unwrap())),
        ("cross_entropy_smoothed", vec![vec![4, 3]], Box::new(|t: &mut Tape, v: &[Var]| t.cross_entropy(v[0], &[0, 2, 1, 1], 0.2).unwrap())),
        ("straight_through_of_smooth_map", vec![vec![3, 4]], Box::new(|t: &mut Tape, v: &[Var]| {
    // With the exact derivative as local gradient the op is differentiable.
    let x = t.data(v[0]).to_vec();
    let values = x.iter().map(|a| a * a * a).collect();
    let local = x.iter().map(|a| 3.0 * a * a).collect();
    t.straight_through(v[0], values, local).unwrap()
})),
    ];
    ops.into_iter()
        .enumerate()
        .map(|(k, (name, shapes, f))| {
            // Offsets keep paired inputs apart (e.g. `mse` away from zero residual).
            let inputs: Vec<Tensor> = shapes
                .iter()
                .enumerate()
                .map(|(i, s)| {
                    let t = random(s, 1000 + 10 * k as u64 + i as u64);
                    Tensor::new(s.clone(), t.data().iter().map(|x| x + 0.01 * i as f64).collect()).unwrap()
                })
                .collect();
            (name, check_op(&inputs, f))
        })
        .collect()
}

/// Logistic function on the tape's scalar convention.
fn logistic(u: f64) -> f64 {
    1.0 / (1.0 + (-u).exp())
}

/// Top-k threshold and temperature exactly as the selection defines them.
fn relaxation(scores: &[f64], first: usize, k: usize) -> (f64, f64) {
    let pool = &scores[first..];
    let mean = pool.iter().sum::<f64>() / pool.len() as f64;
    let std = (pool.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / pool.len() as f64).sqrt();
    let mut sorted = pool.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    (sorted[k - 1], 0.1 * std)
}

/// `m + c * (logistic((s - s_k) / tau) - logistic((s0 - s_k) / tau))` per row,
/// broadcast over `d` columns. Equals the hard gate at `s = s0`, and its
/// derivative there is the relaxation slope.
fn relaxed_gate(tape: &mut Tape, s: Var, s0: &[f64], mask: &[bool], first: usize, k: usize, d: usize) -> Var {
    let n = s0.len();
    let (sk, tau) = relaxation(s0, first, k);
    let c: Vec<f64> = (0..n).map(|i| if i >= first && tau > 0.0 { 1.0 } else { 0.0 }).collect();
    let tau = if tau > 0.0 { tau } else { 1.0 };
    let shift = tape.constant(Tensor::full(&[n], sk));
    let u = tape.sub(s, shift).unwrap();
    let u = tape.scale(u, 1.0 / tau);
    let sig = tape.sigmoid(u);
    let sig0 = tape.constant(Tensor::new(vec![n], s0.iter().map(|v| logistic((v - sk) / tau)).collect()).unwrap());
    let delta = tape.sub(sig, sig0).unwrap();
    let c = tape.constant(Tensor::new(vec![n], c).unwrap());
    let delta = tape.mul(delta, c).unwrap();
    let m = tape.constant(Tensor::new(vec![n], mask.iter().map(|&b| f64::from(u8::from(b))).collect()).unwrap());
    let g = tape.add(delta, m).unwrap();
    let g = tape.reshape(g, &[n, 1]).unwrap();
    let ones = tape.constant(Tensor::ones(&[1, d]));
    tape.matmul(g, ones).unwrap()
}

/// Worst error of `gate_rows` against the sigmoid relaxation of top-k.
pub fn gate_rows_error() -> f64 {
    let grid = [2, 2, 2];
    let first = 4;
    let k = 2;
    let x0 = random(&[8, 3], 7);
    let s0: Vec<f64> = random(&[8], 8).data().iter().map(|v| v.abs()).collect();
    let sel = select_topk(&s0, grid, k, SelectMode::Train).unwrap();
    let weights = random(&[8, 3], 9);

    let mut tape = Tape::new();
    let x = tape.variable(x0.clone());
    let s = tape.variable(Tensor::new(vec![8], s0.clone()).unwrap());
    let y = tape.gate_rows(x, s, sel.gate(), sel.coef.clone()).unwrap();
    let w = tape.constant(weights.clone());
    let wy = tape.mul(y, w).unwrap();
    let loss = tape.sum(wy);
    let grads = tape.backward(loss).unwrap();

    let surrogate = |xv: &[f64], sv: &[f64]| {
        let mut t = Tape::new();
        let x = t.constant(Tensor::new(vec![8, 3], xv.to_vec()).unwrap());
        let s = t.constant(Tensor::new(vec![8], sv.to_vec()).unwrap());
        let g = relaxed_gate(&mut t, s, &s0, &sel.mask, first, k, 3);
        let y = t.mul(x, g).unwrap();
        let w = t.constant(weights.clone());
        let wy = t.mul(y, w).unwrap();
        let l = t.sum(wy);
        t.value(l).item().unwrap()
    };
    let nx = numeric_grad(x0.data(), |xv| surrogate(xv, &s0));
    let ns = numeric_grad(&s0, |sv| surrogate(x0.data(), sv));
    let ex = rel_err(&grads.wrt(x), &nx);
    let es = rel_err(&grads.wrt(s), &ns);
    assert!(ns.iter().any(|v| v.abs() > 1e-6), "relaxation slope vanished everywhere");
    ex.max(es)
}

pub fn tiny_mae_config() -> MaeConfig {
    MaeConfig {
        dim: 16,
        enc_layers: 2,
        enc_heads: 2,
        enc_mlp: 24,
        dec_dim: 12,
        dec_layers: 1,
        dec_heads: 2,
        dec_mlp: 16,
        tubelet: [2, 4, 4],
        target: TargetKind::FsqLatent,
        latent_dim: 4,
    }
}

pub fn random_video(frames: usize, height: usize, width: usize, seed: u64) -> VideoTensor {
    let mut rng = RngStream::new(seed).split("grad-video").rng();
    let data = (0..3 * frames * height * width).map(|_| rng.random_range(0.0..1.0)).collect();
    VideoTensor::new(frames, height, width, data).unwrap()
}

/// Worst parameter-group error of the pretrain graph, with its name.
pub fn pretrain_graph_error() -> (f64, String) {
    let cfg = tiny_mae_config();
    let mae = Mae::new(cfg.clone(), &RngStream::new(3)).unwrap();
    // 8 x 16 x 16 clips on 2x4x4 tubelets: a 4x4x4 token grid.
    let grid = [4, 4, 4];
    let batch: Vec<PretrainSample> = (0..2)
        .map(|i| {
            let video = random_video(8, 16, 16, 10 + i);
            let scores: Vec<f64> = random(&[64], 20 + i).data().iter().map(|v| v.abs() + 0.01).collect();
            PretrainSample {
                grid,
                patches: lvmae::mae::patchify(&video, cfg.tubelet).unwrap(),
                targets: random(&[64, cfg.latent_dim], 30 + i),
                saliency: Some(SaliencyMap::from_scores(grid, &scores).unwrap()),
            }
        })
        .collect();
    let plan = MaskPlan { strategy: Strategy::Adaptive, budget: BudgetSpec::new(0.75, 0.85, 0.1).unwrap(), uniform_step: 7 };
    let stream = RngStream::new(4);
    let masks: Vec<_> = batch
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let mut e = stream.split("encoder").index(i as u64).rng();
            let mut d = stream.split("decoder").index(i as u64).rng();
            build_mask_set(&plan, s.grid, s.saliency.as_ref(), &mut e, &mut d).unwrap()
        })
        .collect();
    assert!(masks.iter().all(|m| m.n_decoded() > 0));

    let mut tape = Tape::new();
    let loss = pretrain_loss(&mae, &mut tape, &batch, &masks).unwrap().unwrap();
    let analytic = tape.backward(loss).unwrap().for_store(&mae.params);
    let (err, name) = check_params(&mae.params, &analytic, 6, |_| false, |p: &ParamStore| {
        let mut probe = mae.clone();
        probe.params = p.clone();
        let mut t = Tape::new();
        let l = pretrain_loss(&probe, &mut t, &batch, &masks).unwrap().unwrap();
        t.value(l).item().unwrap()
    });
    (err, name)
}

pub fn tiny_tokenizer() -> Tokenizer {
    let cfg = TokenizerConfig {
        levels: vec![5, 4, 8],
        channels: [3, 4],
        strides: [[2, 2, 2], [1, 2, 2], [1, 1, 1]],
        scorer_channels: 3,
        scorer_strides: [[2, 2, 2], [1, 2, 2]],
        train_k: 2,
        k_includes_first_frame: false,
        infer_keep: 0.5,
        window: 4,
    };
    Tokenizer::new(cfg, &RngStream::new(5)).unwrap()
}

/// Fixed pieces of the tokenizer graph at the base parameters: hard masks,
/// scores, and the quantization residual for each clip.
struct TokenizerBase {
    scores: Vec<Vec<f64>>,
    masks: Vec<Vec<bool>>,
    residual: Vec<Vec<f64>>,
}

/// Per-channel `tanh(s z) / tanh(s)` slopes of the quantizer squash.
fn squash_slopes(levels: &[u32]) -> Vec<f64> {
    levels.iter().map(|&l| (2.0 / ((l as f64 - 1.0) / 2.0)).sqrt().min(1.0)).collect()
}

/// The tokenizer's training loss with the hard top-k replaced by its
/// sigmoid relaxation and rounding replaced by a constant offset on the
/// squash, both pinned so value and slope agree with the production graph
/// at the base parameters.
fn tokenizer_surrogate(tok: &Tokenizer, batch: &[VideoTensor], base: &TokenizerBase) -> f64 {
    let d = tok.latent_dim();
    let slopes = squash_slopes(tok.fsq().levels());
    let mut tape = Tape::new();
    let mut total = 0.0;
    for (i, video) in batch.iter().enumerate() {
        let grid = tok.config.latent_grid(video.frames(), video.height(), video.width()).unwrap();
        let n: usize = grid.iter().product();
        let first = grid[1] * grid[2];
        let x = tape.constant(video.to_tensor());
        let z = tok.encode_rows(&mut tape, x).unwrap();
        let s = tok.score_var(&mut tape, x).unwrap();
        let g = relaxed_gate(&mut tape, s, &base.scores[i], &base.masks[i], first, tok.config.train_k, d);
        let zm = tape.mul(z, g).unwrap();
        let sl = tape.constant(Tensor::new(vec![n, d], (0..n * d).map(|j| slopes[j % d]).collect()).unwrap());
        let a = tape.mul(zm, sl).unwrap();
        let th = tape.tanh(a);
        let norm = tape.constant(Tensor::new(vec![n, d], (0..n * d).map(|j| 1.0 / slopes[j % d].tanh()).collect()).unwrap());
        let sq = tape.mul(th, norm).unwrap();
        let off = tape.constant(Tensor::new(vec![n, d], base.residual[i].clone()).unwrap());
        let zq = tape.add(sq, off).unwrap();
        let keep: Vec<f64> = base.masks[i].iter().flat_map(|&m| std::iter::repeat_n(f64::from(u8::from(m)), d)).collect();
        let keep = tape.constant(Tensor::new(vec![n, d], keep).unwrap());
        let zq = tape.mul(zq, keep).unwrap();
        let recon = tok.decode_rows(&mut tape, zq, grid).unwrap();
        let l = tape.mse(recon, x).unwrap();
        total += tape.value(l).item().unwrap();
    }
    total / batch.len() as f64
}

/// Worst parameter-group error of the tokenizer graph, with its name.
pub fn tokenizer_graph_error() -> (f64, String) {
    let tok = tiny_tokenizer();
    let batch = vec![random_video(4, 8, 8, 40), random_video(4, 8, 8, 41)];
    let d = tok.latent_dim();
    let slopes = squash_slopes(tok.fsq().levels());

    let mut tape = Tape::new();
    let graph = tok.train_graph(&mut tape, &batch).unwrap();
    let base_loss = tape.value(graph.loss).item().unwrap();
    let mut base = TokenizerBase { scores: vec![], masks: vec![], residual: vec![] };
    for (i, sel) in graph.selections.iter().enumerate() {
        let scores = tape.data(graph.scores[i]).to_vec();
        // The surrogate's slope must be the one the selection reports.
        let (sk, tau) = relaxation(&scores, 4, tok.config.train_k);
        assert!(tau > 0.0);
        for (j, &c) in sel.coef.iter().enumerate().skip(4) {
            let p = logistic((scores[j] - sk) / tau);
            assert!((c - p * (1.0 - p) / tau).abs() < 1e-12);
        }
        // Gated latents at the base point, from the encoder output directly.
        let mut t = Tape::frozen();
        let x = t.constant(batch[i].to_tensor());
        let z = tok.encode_rows(&mut t, x).unwrap();
        let zm: Vec<f64> = t.data(z).chunks(d).zip(&sel.mask).flat_map(|(r, &m)| r.iter().map(move |v| if m { *v } else { 0.0 })).collect();
        let q = fsq_quantize(&zm, tok.fsq()).unwrap();
        let residual = zm.iter().zip(&q).enumerate().map(|(j, (v, qv))| qv - (slopes[j % d] * v).tanh() / slopes[j % d].tanh()).collect();
        base.scores.push(scores);
        base.masks.push(sel.mask.clone());
        base.residual.push(residual);
    }
    assert!((tokenizer_surrogate(&tok, &batch, &base) - base_loss).abs() < 1e-12, "surrogate must agree with the graph");

    let analytic = tape.backward(graph.loss).unwrap().for_store(&tok.params);
    let (err, name) = check_params(&tok.params, &analytic, 8, |_| false, |p: &ParamStore| {
        let mut probe = tok.clone();
        probe.params = p.clone();
        tokenizer_surrogate(&probe, &batch, &base)
    });
    (err, name)
}

/// Worst parameter-group error of the fine-tune graph, with its name.
pub fn finetune_graph_error() -> (f64, String) {
    let cfg = MaeConfig { target: TargetKind::Rgb, ..tiny_mae_config() };
    let mae = Mae::new(cfg.clone(), &RngStream::new(6)).unwrap();
    let ft = FinetuneConfig { classes: 3, pooling: Pooling::ClassAttention, drop_ratio: 0.25, label_smoothing: 0.2 };
    let clf = Classifier::new(mae, ft, &RngStream::new(7)).unwrap();
    let videos: Vec<VideoTensor> = (0..3).map(|i| random_video(4, 8, 8, 50 + i)).collect();
    let batch = lvmae::mae::prepare_clips(&videos, cfg.tubelet).unwrap();
    let labels = [0, 2, 1];
    let stream = RngStream::new(8);

    let mut tape = Tape::new();
    let loss = clf.loss(&mut tape, &batch, &labels, &stream).unwrap();
    let analytic = tape.backward(loss).unwrap().for_store(&clf.mae.params);
    // The reconstruction decoder is not part of the classifier graph.
    let unused = |n: &str| n.starts_with("dec") || n == "mask_token" || n.starts_with("head.");
    for (id, name, _) in clf.mae.params.iter() {
        if unused(name) {
            assert!(analytic[id.index()].iter().all(|g| *g == 0.0), "{name} should be outside the graph");
        }
    }
    let (err, name) = check_params(&clf.mae.params, &analytic, 6, unused, |p: &ParamStore| {
        let mut probe = clf.clone();
        probe.mae.params = p.clone();
        let mut t = Tape::new();
        let l = probe.loss(&mut t, &batch, &labels, &stream).unwrap();
        t.value(l).item().unwrap()
    });
    (err, name)
}
