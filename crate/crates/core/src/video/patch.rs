use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tubelet extents and the token grid they induce on a video.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PatchSpec {
    /// `(kt, kh, kw)`: frames x rows x columns per token.
    pub tubelet: [usize; 3],
    /// `(Gt, Gh, Gw)`.
    pub grid: [usize; 3],
}

/// Token grid for an `F x H x W` video; every extent must divide exactly.
pub fn patch_grid(frames: usize, height: usize, width: usize, tubelet: [usize; 3]) -> Result<PatchSpec> {
    let extents = [frames, height, width];
    let mut grid = [0; 3];
    for axis in 0..3 {
        let (n, k) = (extents[axis], tubelet[axis]);
        if k == 0 || n == 0 || n % k != 0 {
            return Err(Error::Geometry(format!(
                "extent {n} is not divisible by tubelet extent {k} (axis {axis})"
            )));
        }
        grid[axis] = n / k;
    }
    Ok(PatchSpec { tubelet, grid })
}

impl PatchSpec {
    pub fn from_grid(grid: [usize; 3], tubelet: [usize; 3]) -> Self {
        PatchSpec { tubelet, grid }
    }

    pub fn num_tokens(&self) -> usize {
        self.grid.iter().product()
    }

    /// Tokens per temporal slot.
    pub fn spatial_tokens(&self) -> usize {
        self.grid[1] * self.grid[2]
    }

    pub fn frames(&self) -> usize {
        self.grid[0] * self.tubelet[0]
    }

    pub fn height(&self) -> usize {
        self.grid[1] * self.tubelet[1]
    }

    pub fn width(&self) -> usize {
        self.grid[2] * self.tubelet[2]
    }

    /// Raster index of token `(t, h, w)`.
    pub fn index(&self, t: usize, h: usize, w: usize) -> usize {
        (t * self.grid[1] + h) * self.grid[2] + w
    }

    pub fn coords(&self, i: usize) -> (usize, usize, usize) {
        let w = i % self.grid[2];
        let h = (i / self.grid[2]) % self.grid[1];
        let t = i / (self.grid[1] * self.grid[2]);
        (t, h, w)
    }

    /// Values per RGB patch: `3 * kt * kh * kw`.
    pub fn patch_dim(&self) -> usize {
        3 * self.tubelet.iter().product::<usize>()
    }

    /// Token containing pixel `(f, y, x)`.
    pub fn token_of_pixel(&self, f: usize, y: usize, x: usize) -> usize {
        self.index(f / self.tubelet[0], y / self.tubelet[1], x / self.tubelet[2])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_scale_grids() {
        let p = patch_grid(128, 224, 224, [2, 16, 16]).unwrap();
        assert_eq!(p.grid, [64, 14, 14]);
        assert_eq!(p.num_tokens(), 12544);
        let p = patch_grid(32, 224, 224, [2, 16, 16]).unwrap();
        assert_eq!(p.grid, [16, 14, 14]);
        assert_eq!(p.num_tokens(), 3136);
    }

    #[test]
    fn desk_grid() {
        let p = patch_grid(16, 64, 64, [2, 8, 8]).unwrap();
        assert_eq!(p.grid, [8, 8, 8]);
        assert_eq!(p.num_tokens(), 512);
        assert_eq!(p.num_tokens() * p.patch_dim(), 3 * 16 * 64 * 64);
    }

    #[test]
    fn indivisible_rejected() {
        assert!(patch_grid(15, 64, 64, [2, 8, 8]).is_err());
        assert!(patch_grid(16, 60, 64, [2, 8, 8]).is_err());
    }

    #[test]
    fn index_and_coords_agree() {
        let p = patch_grid(8, 24, 16, [2, 8, 8]).unwrap();
        for i in 0..p.num_tokens() {
            let (t, h, w) = p.coords(i);
            assert_eq!(p.index(t, h, w), i);
        }
    }
}
