//! `LVTK` token dumps: grid, latent width, latents, importances, selection.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::io::{pack_bits, put_f64s, put_u32, unpack_bits, Reader};

const MAGIC: &[u8; 4] = b"LVTK";

#[derive(Clone, Debug, PartialEq)]
pub struct TokenDump {
    pub grid: [usize; 3],
    pub dim: usize,
    pub latents: Vec<f64>,
    pub scores: Vec<f64>,
    pub selected: Vec<bool>,
}

impl TokenDump {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let n: usize = self.grid.iter().product();
        if self.latents.len() != n * self.dim || self.scores.len() != n || self.selected.len() != n {
            return Err(Error::shape("token dump fields do not match its grid"));
        }
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        for g in self.grid {
            put_u32(&mut out, g as u32);
        }
        put_u32(&mut out, self.dim as u32);
        put_f64s(&mut out, &self.latents);
        put_f64s(&mut out, &self.scores);
        out.extend(pack_bits(&self.selected));
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        r.expect_magic(MAGIC)?;
        let grid = [r.u32()? as usize, r.u32()? as usize, r.u32()? as usize];
        let dim = r.u32()? as usize;
        let n: usize = grid.iter().product();
        let latents = r.f64s(n * dim)?;
        let scores = r.f64s(n)?;
        let selected = unpack_bits(r.bytes(n.div_ceil(8))?, n);
        r.finish()?;
        Ok(TokenDump { grid, dim, latents, scores, selected })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        TokenDump::from_bytes(&fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let d = TokenDump {
            grid: [1, 1, 3],
            dim: 2,
            latents: vec![0.5, -1.0, 1.0 / 3.0, 0.0, 1.0, -0.2],
            scores: vec![0.0, 2.5, 1e-3],
            selected: vec![false, true, true],
        };
        let bytes = d.to_bytes().unwrap();
        assert_eq!(TokenDump::from_bytes(&bytes).unwrap(), d);
        assert!(TokenDump::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    }
}
