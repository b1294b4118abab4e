//! `LVMK` mask dumps: grid, both bitmasks, then the budget ratios.

use std::fs;
use std::path::Path;

use super::budget::BudgetSpec;
use super::strategies::MaskSet;
use crate::error::{Error, Result};
use crate::io::{pack_bits, put_f64s, put_u32, unpack_bits, Reader};

const MAGIC: &[u8; 4] = b"LVMK";

pub fn mask_dump_to_bytes(mask: &MaskSet, budget: &BudgetSpec) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    for g in mask.grid {
        put_u32(&mut out, g as u32);
    }
    out.extend(pack_bits(&mask.encoder_masked));
    out.extend(pack_bits(&mask.decoder_selected));
    put_f64s(&mut out, &[budget.rho_e, budget.rho_d, budget.rho_r]);
    out
}

pub fn mask_dump_from_bytes(bytes: &[u8]) -> Result<(MaskSet, BudgetSpec)> {
    let mut r = Reader::new(bytes);
    r.expect_magic(MAGIC)?;
    let grid = [r.u32()? as usize, r.u32()? as usize, r.u32()? as usize];
    let n: usize = grid.iter().product();
    if n == 0 {
        return Err(Error::Geometry("mask dump has an empty grid".into()));
    }
    let nb = n.div_ceil(8);
    let encoder_masked = unpack_bits(r.bytes(nb)?, n);
    let decoder_selected = unpack_bits(r.bytes(nb)?, n);
    let b = r.f64s(3)?;
    r.finish()?;
    Ok((MaskSet { grid, encoder_masked, decoder_selected }, BudgetSpec { rho_e: b[0], rho_d: b[1], rho_r: b[2] }))
}

pub fn save_mask_dump(mask: &MaskSet, budget: &BudgetSpec, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, mask_dump_to_bytes(mask, budget))?;
    Ok(())
}

pub fn load_mask_dump(path: impl AsRef<Path>) -> Result<(MaskSet, BudgetSpec)> {
    mask_dump_from_bytes(&fs::read(path)?)
}
