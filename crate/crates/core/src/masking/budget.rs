use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Mask ratios for one MAE step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BudgetSpec {
    /// Fraction of tokens hidden from the encoder.
    pub rho_e: f64,
    /// Fraction of tokens excluded from the salient decoder set.
    pub rho_d: f64,
    /// Extra fraction of tokens drawn uniformly for the decoder.
    pub rho_r: f64,
}

impl Default for BudgetSpec {
    fn default() -> Self {
        BudgetSpec { rho_e: 0.9, rho_d: 0.9, rho_r: 0.05 }
    }
}

/// `floor(x + 0.5)`.
pub fn round_half_up(x: f64) -> usize {
    (x + 0.5).floor().max(0.0) as usize
}

/// Whole tokens in `frac * n`. The small guard keeps values such as
/// `(1 - 0.9) * 10` (which is `0.9999…` in binary) from losing a token.
pub fn floor_count(frac: f64, n: usize) -> usize {
    (frac * n as f64 + 1e-9).floor().max(0.0) as usize
}

impl BudgetSpec {
    pub fn new(rho_e: f64, rho_d: f64, rho_r: f64) -> Result<Self> {
        let b = BudgetSpec { rho_e, rho_d, rho_r };
        b.check_ranges()?;
        Ok(b)
    }

    pub fn check_ranges(&self) -> Result<()> {
        for (name, v) in [("rho_e", self.rho_e), ("rho_d", self.rho_d), ("rho_r", self.rho_r)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Budget(format!("{name}={v} outside [0, 1]")));
            }
        }
        Ok(())
    }

    /// Total decoder fraction `(1 - rho_d) + rho_r`.
    pub fn decoder_fraction(&self) -> f64 {
        (1.0 - self.rho_d) + self.rho_r
    }

    /// Visible positions per temporal slot of a tube mask.
    pub fn visible_spatial(&self, spatial: usize) -> usize {
        round_half_up((1.0 - self.rho_e) * spatial as f64)
    }

    /// Encoder-visible tokens of a tube mask over `grid`.
    pub fn encoder_visible(&self, grid: [usize; 3]) -> usize {
        self.visible_spatial(grid[1] * grid[2]) * grid[0]
    }

    /// Salient (top-k) decoder tokens.
    pub fn adaptive_count(&self, n: usize) -> usize {
        floor_count(1.0 - self.rho_d, n)
    }

    /// Uniformly drawn extra decoder tokens.
    pub fn random_count(&self, n: usize) -> usize {
        floor_count(self.rho_r, n)
    }

    pub fn decoder_count(&self, n: usize) -> usize {
        self.adaptive_count(n) + self.random_count(n)
    }

    /// Ranges plus feasibility of the decoder budget against the pool that a
    /// tube mask over `grid` leaves hidden.
    pub fn validate(&self, grid: [usize; 3]) -> Result<()> {
        self.check_ranges()?;
        let n: usize = grid.iter().product();
        let visible = self.encoder_visible(grid);
        if visible == 0 {
            return Err(Error::Budget(format!("rho_e={} leaves no visible tokens", self.rho_e)));
        }
        let pool = n - visible;
        // Random masking floors the combined fraction, which can exceed the
        // sum of the separately floored counts by one.
        let need = self.decoder_count(n).max(floor_count(self.decoder_fraction(), n));
        if need > pool {
            return Err(Error::Budget(format!("decoder budget {need} exceeds the {pool} encoder-masked tokens")));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_budget_counts() {
        let b = BudgetSpec::default();
        let grid = [64, 14, 14];
        assert_eq!(b.encoder_visible(grid), 1280);
        assert_eq!(b.adaptive_count(12544), 1254);
        assert_eq!(b.random_count(12544), 627);
        assert_eq!(b.decoder_count(12544), 1881);
        b.validate(grid).unwrap();
    }

    #[test]
    fn splits_agree() {
        for (a, r) in [(0.15, 0.0), (0.10, 0.05), (0.0, 0.15)] {
            let b = BudgetSpec { rho_e: 0.9, rho_d: 1.0 - a, rho_r: r };
            assert_eq!(b.decoder_count(12544), 1881, "split {a}+{r}");
        }
    }

    #[test]
    fn infeasible_budget() {
        let b = BudgetSpec { rho_e: 0.5, rho_d: 0.2, rho_r: 0.0 };
        assert!(b.validate([2, 4, 4]).is_err());
        assert!(BudgetSpec::new(1.2, 0.5, 0.0).is_err());
    }
}
