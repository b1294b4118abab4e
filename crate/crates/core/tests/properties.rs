mod common;

use common::mask_law_trial;
use lvmae::cost::{estimate, ArchDims, CostQuery};
use lvmae::mae::{mae_loss, MaeConfig};
use lvmae::masking::{make_tube_mask, BudgetSpec, MaskSet, Strategy};
use lvmae::numerics::{RngStream, Tape, Tensor};
use lvmae::tokenizer::{fsq_from_index, fsq_index, fsq_quantize, FsqSpec};
use lvmae::video::{patch_grid, rvid_from_bytes, rvid_to_bytes, VideoTensor};
use proptest::prelude::*;

const STRATEGIES: [Strategy; 5] = [Strategy::None, Strategy::Random, Strategy::Uniform, Strategy::Flow, Strategy::Adaptive];

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn mask_laws_hold(seed in any::<u64>(), s in 0usize..5) {
        let broken = mask_law_trial(STRATEGIES[s], seed);
        prop_assert!(broken.is_empty(), "{:?}", broken);
    }

    #[test]
    fn tube_mask_visible_count(gt in 1usize..6, gh in 1usize..10, gw in 1usize..10, rho in 0.0f64..1.0, seed in any::<u64>()) {
        let grid = [gt, gh, gw];
        let b = BudgetSpec { rho_e: rho, rho_d: 1.0, rho_r: 0.0 };
        match make_tube_mask(grid, rho, &mut RngStream::new(seed).rng()) {
            Ok(m) => prop_assert_eq!(m.iter().filter(|v| !**v).count(), b.encoder_visible(grid)),
            // Only a ratio that rounds every position away may be refused.
            Err(_) => prop_assert_eq!(b.encoder_visible(grid), 0),
        }
    }

    #[test]
    fn fsq_quantize_is_idempotent(levels in prop::collection::vec(2u32..12, 1..5), z in prop::collection::vec(-4.0f64..4.0, 8)) {
        let spec = FsqSpec::new(levels).unwrap();
        let d = spec.dim();
        let rows = &z[..z.len() / d * d];
        let q = fsq_quantize(rows, &spec).unwrap();
        prop_assert_eq!(&fsq_quantize(&q, &spec).unwrap(), &q);
        for row in q.chunks(d) {
            let code = fsq_index(row, &spec).unwrap();
            prop_assert_eq!(fsq_from_index(code, &spec).unwrap(), row.to_vec());
        }
    }

    #[test]
    fn fsq_index_is_a_bijection(levels in prop::collection::vec(2u32..9, 1..5)) {
        let spec = FsqSpec::new(levels).unwrap();
        prop_assume!(spec.codebook_size() <= 4096);
        for code in 0..spec.codebook_size() {
            let q = fsq_from_index(code, &spec).unwrap();
            prop_assert_eq!(fsq_index(&q, &spec).unwrap(), code);
            prop_assert_eq!(fsq_quantize(&q, &spec).unwrap(), q);
        }
    }

    #[test]
    fn budget_splits_agree(n in 1usize..20_000, total in 1u32..40, share in 0u32..=100) {
        // Same total budget split between salient and random tokens.
        let frac = total as f64 / 100.0;
        let random = frac * share as f64 / 100.0;
        let a = BudgetSpec { rho_e: 0.9, rho_d: 1.0 - frac, rho_r: 0.0 };
        let b = BudgetSpec { rho_e: 0.9, rho_d: 1.0 - (frac - random), rho_r: random };
        let diff = a.decoder_count(n) as i64 - b.decoder_count(n) as i64;
        prop_assert!(diff.abs() <= 1, "{} vs {}", a.decoder_count(n), b.decoder_count(n));
    }

    #[test]
    fn patch_grid_covers_every_pixel(gt in 1usize..5, gh in 1usize..5, gw in 1usize..5, kt in 1usize..4, kh in 1usize..6, kw in 1usize..6) {
        let p = patch_grid(gt * kt, gh * kh, gw * kw, [kt, kh, kw]).unwrap();
        prop_assert_eq!(p.num_tokens() * p.patch_dim(), 3 * gt * kt * gh * kh * gw * kw);
        prop_assert!(patch_grid(gt * kt + 1, gh * kh, gw * kw, [kt + 1, kh, kw]).is_err() || (gt * kt + 1) % (kt + 1) == 0);
    }

    #[test]
    fn rvid_round_trips(f in 1usize..4, h in 1usize..6, w in 1usize..6, seed in any::<u64>()) {
        use rand::Rng;
        let mut rng = RngStream::new(seed).rng();
        let data = (0..3 * f * h * w).map(|_| rng.random_range(0u8..=255) as f64 / 255.0).collect();
        let v = VideoTensor::new(f, h, w, data).unwrap();
        let bytes = rvid_to_bytes(&v);
        let back = rvid_from_bytes(&bytes).unwrap();
        prop_assert_eq!(rvid_to_bytes(&back), bytes);
    }

    #[test]
    fn loss_ignores_unselected_targets(seed in any::<u64>()) {
        use rand::Rng;
        let mut rng = RngStream::new(seed).rng();
        let grid = [2, 3, 3];
        let enc = make_tube_mask(grid, 0.6, &mut rng).unwrap();
        let dec: Vec<bool> = enc.iter().map(|&m| m && rng.random_bool(0.6)).collect();
        prop_assume!(dec.iter().any(|d| *d));
        let mask = MaskSet { grid, encoder_masked: enc, decoder_selected: dec.clone() };
        let k = mask.n_decoded();
        let mut tape = Tape::new();
        let pred = tape.variable(Tensor::new(vec![k, 2], (0..2 * k).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap());
        let targets = tape.variable(Tensor::new(vec![18, 2], (0..36).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap());
        let loss = mae_loss(&mut tape, pred, targets, &mask).unwrap();
        let g = tape.backward(loss).unwrap().wrt(targets);
        for (i, row) in g.chunks(2).enumerate() {
            if !dec[i] {
                prop_assert!(row.iter().all(|v| *v == 0.0));
            }
        }
    }

    #[test]
    fn cost_falls_as_decoder_masking_rises(frames in 1usize..9, a in 0u32..85, b in 0u32..85) {
        prop_assume!(a < b);
        let dims = ArchDims::from_mae(&MaeConfig::full());
        let at = |rho_d: f64| {
            let q = CostQuery { frames: frames * 16, height: 224, width: 224, tubelet: [2, 16, 16], budget: BudgetSpec { rho_e: 0.9, rho_d, rho_r: 0.0 } };
            estimate(&q, &dims).unwrap()
        };
        let (lo, hi) = (at(a as f64 / 100.0), at(b as f64 / 100.0));
        prop_assert!(hi.flops_total() <= lo.flops_total());
        prop_assert!(hi.memory_total() <= lo.memory_total());
    }
}
