use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::budget::{floor_count, round_half_up, BudgetSpec};
use crate::error::{Error, Result};
use crate::video::{FlowField, PatchSpec};

/// Decoder mask strategy.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    None,
    Random,
    Uniform,
    Flow,
    Adaptive,
}

impl Strategy {
    pub const ALL: [Strategy; 5] = [Strategy::None, Strategy::Random, Strategy::Uniform, Strategy::Flow, Strategy::Adaptive];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::None => "none",
            Strategy::Random => "random",
            Strategy::Uniform => "uniform",
            Strategy::Flow => "flow",
            Strategy::Adaptive => "adaptive",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::config("bad_strategy", format!("unknown strategy {s:?}; expected one of none, random, uniform, flow, adaptive")))
    }
}

impl std::fmt::Display for Strategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// A probability distribution over the tokens of a grid.
#[derive(Clone, Debug, PartialEq)]
pub struct SaliencyMap {
    pub grid: [usize; 3],
    values: Vec<f64>,
    /// The input carried no signal and `values` is the uniform distribution.
    pub uniform_fallback: bool,
}

impl SaliencyMap {
    /// Normalizes nonnegative scores; all-zero scores fall back to uniform.
    pub fn from_scores(grid: [usize; 3], scores: &[f64]) -> Result<Self> {
        let n: usize = grid.iter().product();
        if scores.len() != n {
            return Err(Error::shape(format!("{} scores for a {n}-token grid", scores.len())));
        }
        if let Some(s) = scores.iter().find(|s| !s.is_finite() || **s < 0.0) {
            return Err(Error::invalid(format!("saliency score {s} is not a finite nonnegative value")));
        }
        let total: f64 = scores.iter().sum();
        if total <= 0.0 {
            return Ok(SaliencyMap { grid, values: vec![1.0 / n as f64; n], uniform_fallback: true });
        }
        Ok(SaliencyMap { grid, values: scores.iter().map(|s| s / total).collect(), uniform_fallback: false })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn is_normalized(&self) -> bool {
        let total: f64 = self.values.iter().sum();
        self.values.iter().all(|v| *v >= 0.0) && (total - 1.0).abs() < 1e-9
    }
}

/// Encoder visibility and decoder selection over one token grid.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskSet {
    pub grid: [usize; 3],
    /// `true` = hidden from the encoder.
    pub encoder_masked: Vec<bool>,
    /// `true` = reconstructed by the decoder.
    pub decoder_selected: Vec<bool>,
}

impl MaskSet {
    pub fn n(&self) -> usize {
        self.encoder_masked.len()
    }

    pub fn n_visible(&self) -> usize {
        self.encoder_masked.iter().filter(|m| !**m).count()
    }

    pub fn n_decoded(&self) -> usize {
        self.decoder_selected.iter().filter(|m| **m).count()
    }

    pub fn visible_indices(&self) -> Vec<usize> {
        (0..self.n()).filter(|&i| !self.encoder_masked[i]).collect()
    }

    pub fn selected_indices(&self) -> Vec<usize> {
        (0..self.n()).filter(|&i| self.decoder_selected[i]).collect()
    }
}

fn grid_len(grid: [usize; 3]) -> usize {
    grid.iter().product()
}

fn check_encoder(grid: [usize; 3], encoder_masked: &[bool]) -> Result<()> {
    if encoder_masked.len() != grid_len(grid) {
        return Err(Error::shape(format!("encoder mask has {} flags for {} tokens", encoder_masked.len(), grid_len(grid))));
    }
    Ok(())
}

fn masked_pool(encoder_masked: &[bool]) -> Vec<usize> {
    (0..encoder_masked.len()).filter(|&i| encoder_masked[i]).collect()
}

/// Random spatial pattern shared by every temporal slot; returns
/// `encoder_masked`.
pub fn make_tube_mask<R: Rng>(grid: [usize; 3], rho_e: f64, rng: &mut R) -> Result<Vec<bool>> {
    if !(0.0..1.0).contains(&rho_e) {
        return Err(Error::Budget(format!("encoder mask ratio {rho_e} outside [0, 1)")));
    }
    let spatial = grid[1] * grid[2];
    let visible = round_half_up((1.0 - rho_e) * spatial as f64).min(spatial);
    if visible == 0 {
        return Err(Error::Budget(format!("encoder mask ratio {rho_e} leaves no visible position")));
    }
    let mut pattern = vec![true; spatial];
    for i in sample(rng, spatial, visible) {
        pattern[i] = false;
    }
    Ok((0..grid[0]).flat_map(|_| pattern.iter().copied()).collect())
}

pub fn decoder_none(grid: [usize; 3], encoder_masked: &[bool]) -> Result<MaskSet> {
    check_encoder(grid, encoder_masked)?;
    Ok(MaskSet { grid, encoder_masked: encoder_masked.to_vec(), decoder_selected: encoder_masked.to_vec() })
}

fn draw<R: Rng>(pool: &[usize], count: usize, selected: &mut [bool], rng: &mut R) {
    for i in sample(rng, pool.len(), count) {
        selected[pool[i]] = true;
    }
}

/// `floor(budget_fraction * N)` tokens sampled uniformly from the hidden pool.
pub fn decoder_random<R: Rng>(grid: [usize; 3], encoder_masked: &[bool], budget_fraction: f64, rng: &mut R) -> Result<MaskSet> {
    check_encoder(grid, encoder_masked)?;
    if !(0.0..=1.0).contains(&budget_fraction) {
        return Err(Error::Budget(format!("budget fraction {budget_fraction} outside [0, 1]")));
    }
    let count = floor_count(budget_fraction, grid_len(grid));
    let pool = masked_pool(encoder_masked);
    if count > pool.len() {
        return Err(Error::Budget(format!("budget {count} exceeds the {} encoder-masked tokens", pool.len())));
    }
    let mut selected = vec![false; encoder_masked.len()];
    draw(&pool, count, &mut selected, rng);
    Ok(MaskSet { grid, encoder_masked: encoder_masked.to_vec(), decoder_selected: selected })
}

/// Every hidden token in temporal slots `0, step, 2*step, …`.
pub fn decoder_uniform(grid: [usize; 3], encoder_masked: &[bool], step: usize) -> Result<MaskSet> {
    check_encoder(grid, encoder_masked)?;
    if step == 0 {
        return Err(Error::invalid("uniform step must be at least 1"));
    }
    let spatial = grid[1] * grid[2];
    let selected = (0..encoder_masked.len()).map(|i| encoder_masked[i] && (i / spatial) % step == 0).collect();
    Ok(MaskSet { grid, encoder_masked: encoder_masked.to_vec(), decoder_selected: selected })
}

/// Mean absolute flow per token over both channels and every covered pixel,
/// normalized to sum to one.
pub fn flow_saliency(flow: &FlowField, patch: &PatchSpec) -> Result<SaliencyMap> {
    if flow.frames() != patch.frames() || flow.height() != patch.height() || flow.width() != patch.width() {
        return Err(Error::Geometry(format!(
            "flow {}x{}x{} does not match the {:?} token grid",
            flow.frames(),
            flow.height(),
            flow.width(),
            patch.grid
        )));
    }
    let mut sums = vec![0.0; patch.num_tokens()];
    for c in 0..2 {
        for f in 0..flow.frames() {
            for y in 0..flow.height() {
                for x in 0..flow.width() {
                    sums[patch.token_of_pixel(f, y, x)] += flow.get(c, f, y, x).abs();
                }
            }
        }
    }
    let per_token = (2 * patch.tubelet.iter().product::<usize>()) as f64;
    let means: Vec<f64> = sums.iter().map(|s| s / per_token).collect();
    SaliencyMap::from_scores(patch.grid, &means)
}

/// Hidden tokens ordered by saliency, highest first; ties by ascending index.
pub fn rank_masked(saliency: &[f64], encoder_masked: &[bool]) -> Vec<usize> {
    let mut order = masked_pool(encoder_masked);
    order.sort_by(|&a, &b| saliency[b].total_cmp(&saliency[a]).then(a.cmp(&b)));
    order
}

/// Top `floor((1 - rho_d) N)` hidden tokens by saliency, plus
/// `floor(rho_r N)` further hidden tokens drawn uniformly.
pub fn decoder_adaptive<R: Rng>(
    grid: [usize; 3],
    encoder_masked: &[bool],
    saliency: &SaliencyMap,
    rho_d: f64,
    rho_r: f64,
    rng: &mut R,
) -> Result<MaskSet> {
    check_encoder(grid, encoder_masked)?;
    if saliency.grid != grid {
        return Err(Error::Geometry(format!("saliency grid {:?} differs from token grid {grid:?}", saliency.grid)));
    }
    if !saliency.is_normalized() {
        return Err(Error::invalid("saliency map is not a probability distribution"));
    }
    let budget = BudgetSpec { rho_e: 0.0, rho_d, rho_r };
    budget.check_ranges()?;
    let n = grid_len(grid);
    let (k, extra) = (budget.adaptive_count(n), budget.random_count(n));
    let ranked = rank_masked(saliency.values(), encoder_masked);
    if k + extra > ranked.len() {
        return Err(Error::Budget(format!("budget {} exceeds the {} encoder-masked tokens", k + extra, ranked.len())));
    }
    let mut selected = vec![false; n];
    for &i in &ranked[..k] {
        selected[i] = true;
    }
    let mut rest = ranked[k..].to_vec();
    rest.sort_unstable();
    draw(&rest, extra, &mut selected, rng);
    Ok(MaskSet { grid, encoder_masked: encoder_masked.to_vec(), decoder_selected: selected })
}

/// Everything needed to draw one step's masks.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskPlan {
    pub strategy: Strategy,
    pub budget: BudgetSpec,
    /// Temporal slot step of the uniform strategy.
    pub uniform_step: usize,
}

/// Tube encoder mask from `enc_rng`, then the decoder selection of
/// `plan.strategy` from `dec_rng`. Keeping the streams separate makes the
/// encoder mask independent of the decoder strategy.
pub fn build_mask_set<R: Rng>(
    plan: &MaskPlan,
    grid: [usize; 3],
    saliency: Option<&SaliencyMap>,
    enc_rng: &mut R,
    dec_rng: &mut R,
) -> Result<MaskSet> {
    let enc = make_tube_mask(grid, plan.budget.rho_e, enc_rng)?;
    let b = &plan.budget;
    match plan.strategy {
        Strategy::None => decoder_none(grid, &enc),
        Strategy::Random => decoder_random(grid, &enc, b.decoder_fraction(), dec_rng),
        Strategy::Uniform => decoder_uniform(grid, &enc, plan.uniform_step),
        Strategy::Flow | Strategy::Adaptive => {
            let s = saliency.ok_or_else(|| Error::invalid(format!("strategy {} needs a saliency map", plan.strategy)))?;
            decoder_adaptive(grid, &enc, s, b.rho_d, b.rho_r, dec_rng)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct Violation {
    pub code: &'static str,
    pub detail: String,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_ok(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn has(&self, code: &str) -> bool {
        self.violations.iter().any(|v| v.code == code)
    }

    fn push(&mut self, code: &'static str, detail: String) {
        self.violations.push(Violation { code, detail });
    }
}

/// Expected decoder count for `strategy`, given the mask's own encoder side.
pub fn expected_decoded(strategy: Strategy, budget: &BudgetSpec, mask: &MaskSet, uniform_step: usize) -> usize {
    let n = mask.n();
    match strategy {
        Strategy::None => mask.encoder_masked.iter().filter(|m| **m).count(),
        Strategy::Random => floor_count(budget.decoder_fraction(), n),
        Strategy::Uniform => {
            let spatial = mask.grid[1] * mask.grid[2];
            (0..n).filter(|&i| mask.encoder_masked[i] && (i / spatial) % uniform_step.max(1) == 0).count()
        }
        Strategy::Flow | Strategy::Adaptive => budget.decoder_count(n),
    }
}

/// Checks every structural invariant of `mask` and the exact counts implied by
/// `budget` under `strategy`.
pub fn validate(mask: &MaskSet, budget: &BudgetSpec, strategy: Strategy, uniform_step: usize) -> ValidationReport {
    let mut report = ValidationReport::default();
    let n = grid_len(mask.grid);
    if mask.encoder_masked.len() != n || mask.decoder_selected.len() != n {
        report.push("length", format!("mask lengths differ from the {n}-token grid"));
        return report;
    }
    let leaked = (0..n).filter(|&i| mask.decoder_selected[i] && !mask.encoder_masked[i]).count();
    if leaked > 0 {
        report.push("loss-on-visible", format!("{leaked} decoder-selected tokens are encoder-visible"));
    }
    let spatial = mask.grid[1] * mask.grid[2];
    if (spatial..n).any(|i| mask.encoder_masked[i] != mask.encoder_masked[i % spatial]) {
        report.push("tube", "encoder visibility varies along time".into());
    }
    let visible = mask.n_visible();
    let want_visible = budget.encoder_visible(mask.grid);
    if visible != want_visible {
        report.push("encoder-count", format!("{visible} visible tokens, expected {want_visible}"));
    }
    let decoded = mask.n_decoded();
    let want = expected_decoded(strategy, budget, mask, uniform_step);
    if decoded != want {
        report.push("budget-count", format!("{decoded} decoder tokens, expected {want}"));
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::RngStream;

    fn rng(i: u64) -> rand_chacha::ChaCha8Rng {
        RngStream::new(7).index(i).rng()
    }

    #[test]
    fn tube_full_scale() {
        let m = make_tube_mask([64, 14, 14], 0.9, &mut rng(0)).unwrap();
        assert_eq!(m.iter().filter(|v| !**v).count(), 1280);
        let all = make_tube_mask([2, 2, 2], 1e-9, &mut rng(0)).unwrap();
        assert!(all.iter().all(|v| !*v));
    }

    #[test]
    fn none_complement() {
        let grid = [16, 14, 14];
        let enc: Vec<bool> = (0..3136).map(|i| i >= 314).collect();
        assert_eq!(decoder_none(grid, &enc).unwrap().n_decoded(), 2822);
    }

    #[test]
    fn uniform_slots() {
        let grid = [64, 14, 14];
        let enc = make_tube_mask(grid, 0.9, &mut rng(1)).unwrap();
        let m = decoder_uniform(grid, &enc, 7).unwrap();
        let slots: std::collections::BTreeSet<usize> = m.selected_indices().iter().map(|i| i / 196).collect();
        assert_eq!(slots.len(), 10);
        assert!(slots.iter().all(|s| s % 7 == 0));
        assert_eq!(decoder_uniform(grid, &enc, 1).unwrap(), decoder_none(grid, &enc).unwrap());
    }

    #[test]
    fn adaptive_full_counts() {
        let grid = [64, 14, 14];
        let enc = make_tube_mask(grid, 0.9, &mut rng(2)).unwrap();
        let scores: Vec<f64> = (0..12544).map(|i| ((i * 37) % 101) as f64).collect();
        let s = SaliencyMap::from_scores(grid, &scores).unwrap();
        let m = decoder_adaptive(grid, &enc, &s, 0.9, 0.05, &mut rng(3)).unwrap();
        assert_eq!(m.n_decoded(), 1881);
        assert!(validate(&m, &BudgetSpec::default(), Strategy::Adaptive, 1).is_ok());
    }

    #[test]
    fn validate_flags() {
        let grid = [1, 2, 2];
        let m = MaskSet { grid, encoder_masked: vec![false, true, true, true], decoder_selected: vec![true, false, false, false] };
        let b = BudgetSpec { rho_e: 0.75, rho_d: 1.0, rho_r: 0.25 };
        let r = validate(&m, &b, Strategy::Random, 1);
        assert!(r.has("loss-on-visible"));
        assert!(!r.has("budget-count"));
        let m2 = MaskSet { decoder_selected: vec![false, true, true, false], ..m };
        assert!(validate(&m2, &b, Strategy::Random, 1).has("budget-count"));
    }

    #[test]
    fn flow_saliency_single_patch() {
        let patch = crate::video::patch_grid(2, 4, 4, [2, 2, 2]).unwrap();
        let mut f = FlowField::zeros(2, 4, 4);
        f.set(0, 1, 3, 3, 0.5);
        let s = flow_saliency(&f, &patch).unwrap();
        assert_eq!(s.values()[patch.token_of_pixel(1, 3, 3)], 1.0);
        assert_eq!(s.values().iter().filter(|v| **v == 0.0).count(), 3);
        let z = flow_saliency(&FlowField::zeros(2, 4, 4), &patch).unwrap();
        assert!(z.uniform_fallback);
    }

    #[test]
    fn parse_strategy() {
        assert_eq!(Strategy::parse("adaptive").unwrap(), Strategy::Adaptive);
        assert_eq!(Strategy::parse("bogus").unwrap_err().code(), "bad_strategy");
    }
}
