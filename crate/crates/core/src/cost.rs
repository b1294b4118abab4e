//! Closed-form FLOPs and activation-memory model of the dual-masked MAE.
//!
//! FLOPs are multiply-adds times two. The estimator counts the matrix
//! products (patch embedding, projections, attention, MLP, decoder input
//! projection, prediction head) and ignores norms, softmax, biases and
//! elementwise ops. Memory is a model, not a measurement: per block it charges
//! `C1` copies of the `n x d` activations plus `C2` copies of each head's
//! `n x n` attention matrix, and adds weights, gradients and Adam moments.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mae::MaeConfig;
use crate::masking::BudgetSpec;
use crate::video::patch_grid;

/// Stored values per token and channel in one transformer block (norm inputs,
/// q/k/v, attention output, MLP hidden pre/post activation, dropout masks);
/// the usual mixed-precision count of 34 bytes at 2 bytes per value.
pub const C1: f64 = 17.0;
/// Stored values per attention-matrix entry and head (softmax output,
/// dropout mask, dropped probabilities); 5 bytes at 2 bytes per value.
pub const C2: f64 = 2.5;
/// Parameter-sized buffers kept by training: weights, gradients, two Adam moments.
pub const STATE_COPIES: f64 = 4.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StackDims {
    pub layers: usize,
    pub dim: usize,
    pub heads: usize,
    /// MLP hidden width.
    pub mlp: usize,
}

impl StackDims {
    fn validate(&self, what: &str) -> Result<()> {
        if self.layers == 0 || self.dim == 0 || self.heads == 0 || self.mlp == 0 {
            return Err(Error::invalid(format!("{what} dimensions must be positive: {self:?}")));
        }
        if self.dim % self.heads != 0 {
            return Err(Error::invalid(format!("{what} heads {} do not divide width {}", self.heads, self.dim)));
        }
        Ok(())
    }

    /// Multiply-adds of one block on `n` tokens.
    fn block_macs(&self, n: f64) -> f64 {
        let d = self.dim as f64;
        4.0 * n * d * d + 2.0 * n * n * d + 2.0 * n * d * self.mlp as f64
    }

    fn block_params(&self) -> f64 {
        let d = self.dim as f64;
        let m = self.mlp as f64;
        4.0 * d * d + 4.0 * d + 2.0 * d * m + m + d + 4.0 * d
    }

    fn block_activation_elems(&self, n: f64) -> f64 {
        n * self.dim as f64 * C1 + self.heads as f64 * n * n * C2
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchDims {
    pub encoder: StackDims,
    pub decoder: StackDims,
    /// Width of each prediction target row.
    pub target_dim: usize,
    pub bytes_per_value: usize,
    pub batch: usize,
}

impl ArchDims {
    /// Dimensions of `cfg` at 4-byte floats and batch size 1.
    pub fn from_mae(cfg: &MaeConfig) -> Self {
        ArchDims {
            encoder: StackDims { layers: cfg.enc_layers, dim: cfg.dim, heads: cfg.enc_heads, mlp: cfg.enc_mlp },
            decoder: StackDims { layers: cfg.dec_layers, dim: cfg.dec_dim, heads: cfg.dec_heads, mlp: cfg.dec_mlp },
            target_dim: cfg.target_dim(),
            bytes_per_value: 4,
            batch: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate("encoder")?;
        self.decoder.validate("decoder")?;
        if self.target_dim == 0 || self.bytes_per_value == 0 || self.batch == 0 {
            return Err(Error::invalid("target width, bytes per value and batch must be positive"));
        }
        Ok(())
    }

    /// Trainable parameter count for patches of `patch_dim` values.
    pub fn param_count(&self, patch_dim: usize) -> f64 {
        let (e, d) = (&self.encoder, &self.decoder);
        let (de, dd, t) = (e.dim as f64, d.dim as f64, self.target_dim as f64);
        patch_dim as f64 * de + de
            + e.layers as f64 * e.block_params()
            + 2.0 * de
            + de * dd + dd
            + dd
            + d.layers as f64 * d.block_params()
            + 2.0 * dd
            + dd * t + t
    }
}

/// Clip geometry and masking ratios to evaluate.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostQuery {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub tubelet: [usize; 3],
    pub budget: BudgetSpec,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TokenCounts {
    pub n: usize,
    pub encoder: usize,
    pub decoder_selected: usize,
}

impl TokenCounts {
    /// Decoder sequence length: encoded tokens plus mask tokens.
    pub fn decoder_len(&self) -> usize {
        self.encoder + self.decoder_selected
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StageCosts {
    pub patch_embed: f64,
    pub encoder: f64,
    pub decoder: f64,
    pub heads: f64,
}

impl StageCosts {
    pub fn total(&self) -> f64 {
        self.patch_embed + self.encoder + self.decoder + self.heads
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub tokens: TokenCounts,
    pub flops: StageCosts,
    /// Activation bytes per stage.
    pub activations: StageCosts,
    /// Weights, gradients and optimizer moments in bytes.
    pub state_bytes: f64,
}

impl CostReport {
    pub fn flops_total(&self) -> f64 {
        self.flops.total()
    }

    pub fn memory_total(&self) -> f64 {
        self.activations.total() + self.state_bytes
    }

    pub fn decoder_flops_share(&self) -> f64 {
        let t = self.flops_total();
        if t == 0.0 {
            0.0
        } else {
            self.flops.decoder / t
        }
    }

    pub fn encoder_flops_share(&self) -> f64 {
        let t = self.flops_total();
        if t == 0.0 {
            0.0
        } else {
            self.flops.encoder / t
        }
    }
}

/// Token counts for `query`. The decoder never reconstructs more than the
/// encoder hides, so a budget above `N - N^e` (e.g. no decoder masking)
/// saturates at every masked token.
pub fn token_counts(query: &CostQuery) -> Result<TokenCounts> {
    query.budget.check_ranges()?;
    let spec = patch_grid(query.frames, query.height, query.width, query.tubelet)?;
    let n = spec.num_tokens();
    let encoder = query.budget.encoder_visible(spec.grid);
    let decoder_selected = query.budget.decoder_count(n).min(n - encoder);
    Ok(TokenCounts { n, encoder, decoder_selected })
}

/// FLOPs and memory of one training forward pass at `query` for `dims`.
pub fn estimate(query: &CostQuery, dims: &ArchDims) -> Result<CostReport> {
    dims.validate()?;
    let tokens = token_counts(query)?;
    let patch_dim = 3 * query.tubelet.iter().product::<usize>();
    let batch = dims.batch as f64;
    let bytes = dims.bytes_per_value as f64 * batch;
    let (e, d) = (&dims.encoder, &dims.decoder);
    let ne = tokens.encoder as f64;
    let nd = tokens.decoder_selected as f64;
    let dec_len = tokens.decoder_len() as f64;

    let mut flops = StageCosts {
        patch_embed: 2.0 * batch * ne * patch_dim as f64 * e.dim as f64,
        encoder: 2.0 * batch * e.layers as f64 * e.block_macs(ne),
        ..StageCosts::default()
    };
    let mut activations = StageCosts {
        patch_embed: bytes * ne * (patch_dim + e.dim) as f64,
        encoder: bytes * e.layers as f64 * e.block_activation_elems(ne),
        ..StageCosts::default()
    };
    // Nothing selected means the decoder is skipped entirely.
    if tokens.decoder_selected > 0 {
        flops.decoder = 2.0 * batch * (ne * e.dim as f64 * d.dim as f64 + d.layers as f64 * d.block_macs(dec_len));
        flops.heads = 2.0 * batch * nd * d.dim as f64 * dims.target_dim as f64;
        activations.decoder = bytes * (dec_len * d.dim as f64 + d.layers as f64 * d.block_activation_elems(dec_len));
        activations.heads = bytes * nd * dims.target_dim as f64;
    }
    let state_bytes = STATE_COPIES * dims.bytes_per_value as f64 * dims.param_count(patch_dim);
    Ok(CostReport { tokens, flops, activations, state_bytes })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub frames: usize,
    pub rho_d: f64,
    pub n_e: usize,
    pub n_d: usize,
    pub flops_total: f64,
    pub flops_decoder_share: f64,
    pub mem_bytes: f64,
}

pub const SWEEP_HEADER: &str = "frames,rho_d,Ne,Nd,flops_total,flops_decoder_share,mem_bytes";

/// Every `(frames, rho_d)` pair evaluated on `base`, sorted ascending.
pub fn sweep_report(frames: &[usize], rho_d: &[f64], base: &CostQuery, dims: &ArchDims) -> Result<Vec<SweepRow>> {
    if frames.is_empty() || rho_d.is_empty() {
        return Err(Error::invalid("sweep needs at least one frame count and one rho_d"));
    }
    let mut rows = Vec::with_capacity(frames.len() * rho_d.len());
    for &f in frames {
        for &r in rho_d {
            let q = CostQuery { frames: f, budget: BudgetSpec { rho_d: r, ..base.budget }, ..*base };
            let rep = estimate(&q, dims)?;
            rows.push(SweepRow {
                frames: f,
                rho_d: r,
                n_e: rep.tokens.encoder,
                n_d: rep.tokens.decoder_selected,
                flops_total: rep.flops_total(),
                flops_decoder_share: rep.decoder_flops_share(),
                mem_bytes: rep.memory_total(),
            });
        }
    }
    rows.sort_by(|a, b| a.frames.cmp(&b.frames).then(a.rho_d.total_cmp(&b.rho_d)));
    Ok(rows)
}

/// CSV with [`SWEEP_HEADER`]; FLOPs are multiply-adds times two.
pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from(SWEEP_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{:.0},{:.6},{:.0}",
            r.frames, r.rho_d, r.n_e, r.n_d, r.flops_total, r.flops_decoder_share, r.mem_bytes
        );
    }
    out
}

/// Whitespace-separated columns with a `#` header, one blank line between
/// frame counts so gnuplot treats each as its own data block.
pub fn sweep_gnuplot(rows: &[SweepRow]) -> String {
    let mut out = format!("# {}\n", SWEEP_HEADER.replace(',', " "));
    let mut last = None;
    for r in rows {
        if last.is_some_and(|f| f != r.frames) {
            out.push('\n');
        }
        last = Some(r.frames);
        let _ = writeln!(
            out,
            "{} {} {} {} {:.0} {:.6} {:.0}",
            r.frames, r.rho_d, r.n_e, r.n_d, r.flops_total, r.flops_decoder_share, r.mem_bytes
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn full_query(frames: usize, rho_d: f64, rho_r: f64) -> CostQuery {
        CostQuery { frames, height: 224, width: 224, tubelet: [2, 16, 16], budget: BudgetSpec { rho_e: 0.9, rho_d, rho_r } }
    }

    fn full_dims() -> ArchDims {
        ArchDims::from_mae(&MaeConfig::full())
    }

    #[test]
    fn full_token_counts() {
        let t = token_counts(&full_query(128, 0.9, 0.05)).unwrap();
        assert_eq!((t.n, t.encoder, t.decoder_selected), (12544, 1280, 1881));
        let none = token_counts(&full_query(128, 0.0, 0.0)).unwrap();
        assert_eq!(none.decoder_len(), 12544);
    }

    #[test]
    fn attention_term_is_quadratic() {
        let s = StackDims { layers: 1, dim: 8, heads: 2, mlp: 32 };
        let attn = |n: f64| s.block_macs(n) - 4.0 * n * 64.0 - 2.0 * n * 8.0 * 32.0;
        assert_eq!(attn(20.0), 4.0 * attn(10.0));
    }

    #[test]
    fn decoder_masking_cuts_decoder_flops_tenfold() {
        let none = estimate(&full_query(128, 0.0, 0.0), &full_dims()).unwrap();
        let budget = estimate(&full_query(128, 0.9, 0.05), &full_dims()).unwrap();
        assert!(none.flops.decoder > 10.0 * budget.flops.decoder);
        assert_eq!(none.flops.encoder, budget.flops.encoder);
        assert_eq!(none.activations.encoder, budget.activations.encoder);
    }

    #[test]
    fn activation_ratio_at_no_masking() {
        let none = estimate(&full_query(128, 0.0, 0.0), &full_dims()).unwrap();
        let masked = estimate(&full_query(128, 0.85, 0.0), &full_dims()).unwrap();
        assert!(none.activations.total() > 5.0 * masked.activations.total());
        assert!(none.memory_total() > 4.0 * masked.memory_total());
    }

    #[test]
    fn totals_are_stage_sums() {
        let r = estimate(&full_query(16, 0.9, 0.05), &full_dims()).unwrap();
        let f = r.flops;
        assert_eq!(r.flops_total(), f.patch_embed + f.encoder + f.decoder + f.heads);
        assert!(r.memory_total() > r.activations.total());
    }

    #[test]
    fn sweep_is_sorted_and_renders() {
        let base = full_query(16, 0.9, 0.0);
        let rows = sweep_report(&[64, 16], &[0.5, 0.0], &base, &full_dims()).unwrap();
        let keys: Vec<_> = rows.iter().map(|r| (r.frames, r.rho_d)).collect();
        assert_eq!(keys, vec![(16, 0.0), (16, 0.5), (64, 0.0), (64, 0.5)]);
        let csv = sweep_csv(&rows);
        assert_eq!(csv.lines().count(), 5);
        assert!(csv.starts_with(SWEEP_HEADER));
        assert_eq!(sweep_gnuplot(&rows).lines().filter(|l| l.is_empty()).count(), 1);
        assert_eq!(sweep_report(&[16], &[0.9], &base, &full_dims()).unwrap().len(), 1);
        assert!(sweep_report(&[], &[0.9], &base, &full_dims()).is_err());
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(estimate(&full_query(16, 1.5, 0.0), &full_dims()).is_err());
        let mut dims = full_dims();
        dims.encoder.heads = 5;
        assert!(estimate(&full_query(16, 0.9, 0.0), &dims).is_err());
    }
}
