use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::masking::round_half_up;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectMode {
    /// Keep every first-latent-frame token, then the top `k` of the rest.
    Train,
    /// Plain top-`k` over all tokens.
    Infer,
}

/// Per-token importance on a latent grid. Latent frame 0 has no predecessor
/// and scores 0; training-mode selection keeps it unconditionally instead.
#[derive(Clone, Debug, PartialEq)]
pub struct ImportanceMap {
    pub grid: [usize; 3],
    pub scores: Vec<f64>,
}

impl ImportanceMap {
    pub fn new(grid: [usize; 3], scores: Vec<f64>) -> Result<Self> {
        if scores.len() != grid.iter().product::<usize>() {
            return Err(Error::shape("importance scores do not cover the latent grid"));
        }
        if let Some(s) = scores.iter().find(|s| !s.is_finite() || **s < 0.0) {
            return Err(Error::invalid(format!("importance score {s} is not finite and nonnegative")));
        }
        Ok(ImportanceMap { grid, scores })
    }

    /// Scores with frame 0 replaced by `+inf`, the keep-all sentinel.
    pub fn with_keep_all_sentinel(&self) -> Vec<f64> {
        let spatial = self.grid[1] * self.grid[2];
        let mut s = self.scores.clone();
        s[..spatial].iter_mut().for_each(|v| *v = f64::INFINITY);
        s
    }
}

/// Hard selection plus the slope of its sigmoid relaxation around the
/// threshold, used as the score gradient coefficient.
#[derive(Clone, Debug, PartialEq)]
pub struct Selection {
    pub mask: Vec<bool>,
    pub coef: Vec<f64>,
}

impl Selection {
    pub fn count(&self) -> usize {
        self.mask.iter().filter(|m| **m).count()
    }

    pub fn gate(&self) -> Vec<f64> {
        self.mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect()
    }
}

/// Indices ordered by score, highest first; ties by ascending index.
fn ranked(scores: &[f64], candidates: impl Iterator<Item = usize>) -> Vec<usize> {
    let mut order: Vec<usize> = candidates.collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order
}

fn sigmoid_slope(u: f64) -> f64 {
    let s = 1.0 / (1.0 + (-u).exp());
    s * (1.0 - s)
}

/// Top-`k` selection over scores on `grid`. Training mode also returns the
/// relaxation slope `σ'((s - s_k) / τ) / τ` with `τ = 0.1 · std` of the
/// competing scores (zero when they are all equal).
pub fn select_topk(scores: &[f64], grid: [usize; 3], k: usize, mode: SelectMode) -> Result<Selection> {
    let n: usize = grid.iter().product();
    if scores.len() != n {
        return Err(Error::shape(format!("{} scores for a {n}-token latent grid", scores.len())));
    }
    if let Some(s) = scores.iter().find(|s| s.is_nan()) {
        return Err(Error::NonFinite(format!("token score {s}")));
    }
    let first = match mode {
        SelectMode::Train => grid[1] * grid[2],
        SelectMode::Infer => 0,
    };
    let eligible = n - first;
    if k == 0 || k > eligible {
        return Err(Error::invalid(format!("top-k count {k} outside 1..={eligible}")));
    }
    let order = ranked(scores, first..n);
    let mut mask = vec![false; n];
    mask[..first].iter_mut().for_each(|m| *m = true);
    for &i in &order[..k] {
        mask[i] = true;
    }
    let mut coef = vec![0.0; n];
    if mode == SelectMode::Train {
        let pool = &scores[first..];
        let mean = pool.iter().sum::<f64>() / eligible as f64;
        let std = (pool.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / eligible as f64).sqrt();
        let tau = 0.1 * std;
        if tau > 0.0 && tau.is_finite() {
            let threshold = scores[order[k - 1]];
            for i in first..n {
                coef[i] = sigmoid_slope((scores[i] - threshold) / tau) / tau;
            }
        }
    }
    Ok(Selection { mask, coef })
}

/// Inference keep count: `round_half_up(fraction · n)`.
pub fn infer_keep_count(fraction: f64, n: usize) -> usize {
    round_half_up(fraction * n as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn train_mode_is_additive() {
        let grid = [8, 16, 16];
        let scores: Vec<f64> = (0..2048).map(|i| (i % 97) as f64).collect();
        let sel = select_topk(&scores, grid, 768, SelectMode::Train).unwrap();
        assert_eq!(sel.count(), 1024);
        assert!(sel.mask[..256].iter().all(|m| *m));
    }

    #[test]
    fn infer_keep_full() {
        let k = infer_keep_count(0.15, 1568);
        assert_eq!(k, 235);
        let sel = select_topk(&vec![1.0; 1568], [8, 14, 14], k, SelectMode::Infer).unwrap();
        assert_eq!(sel.count(), 235);
        // Equal scores: lowest indices win.
        assert!(sel.mask[..235].iter().all(|m| *m));
    }

    #[test]
    fn out_of_range_k() {
        assert!(select_topk(&[0.0; 8], [2, 2, 2], 5, SelectMode::Train).is_err());
        assert!(select_topk(&[0.0; 8], [2, 2, 2], 0, SelectMode::Infer).is_err());
    }

    #[test]
    fn relaxation_slope_peaks_at_threshold() {
        let scores = [0.0, 0.0, 0.0, 0.0, 1.0, 2.0, 3.0, 4.0];
        let sel = select_topk(&scores, [2, 2, 2], 2, SelectMode::Train).unwrap();
        assert_eq!(sel.mask, vec![true, true, true, true, false, false, true, true]);
        assert!(sel.coef[..4].iter().all(|c| *c == 0.0));
        assert!(sel.coef[6] > sel.coef[7] && sel.coef[6] > sel.coef[4]);
    }
}
