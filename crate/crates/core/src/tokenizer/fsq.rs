//! Finite scalar quantization.
//!
//! Channel `i` with `L` levels lives on the symmetric lattice
//! `{-h, …, +h} / h`, `h = (L - 1) / 2` (half-integer steps when `L` is even).
//! A scaled tanh squashes `z` so that `z = ±1` lands on the lattice extremes
//! and every lattice value maps back onto itself, which makes quantization
//! exactly idempotent.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FsqSpec {
    levels: Vec<u32>,
}

impl FsqSpec {
    pub fn new(levels: Vec<u32>) -> Result<Self> {
        if levels.is_empty() {
            return Err(Error::invalid("FSQ needs at least one channel"));
        }
        if let Some(l) = levels.iter().find(|l| **l < 2) {
            return Err(Error::invalid(format!("FSQ level count {l} is below 2")));
        }
        if levels.iter().try_fold(1u64, |acc, &l| acc.checked_mul(l as u64)).is_none() {
            return Err(Error::invalid("FSQ codebook size overflows u64"));
        }
        Ok(FsqSpec { levels })
    }

    pub fn levels(&self) -> &[u32] {
        &self.levels
    }

    pub fn dim(&self) -> usize {
        self.levels.len()
    }

    pub fn codebook_size(&self) -> u64 {
        self.levels.iter().map(|&l| l as u64).product()
    }
}

#[derive(Clone, Copy)]
struct Channel {
    half: f64,
    slope: f64,
    norm: f64,
    even: bool,
}

impl Channel {
    fn new(levels: u32) -> Self {
        let half = (levels as f64 - 1.0) / 2.0;
        let slope = (2.0 / half).sqrt().min(1.0);
        Channel { half, slope, norm: slope.tanh(), even: levels % 2 == 0 }
    }

    /// Squashed value on the unnormalized lattice scale, and its derivative.
    fn squash(&self, z: f64) -> (f64, f64) {
        let t = (self.slope * z).tanh();
        (self.half * t / self.norm, self.half * self.slope * (1.0 - t * t) / self.norm)
    }

    fn round(&self, g: f64) -> f64 {
        let r = if self.even { g.floor() + 0.5 } else { (g + 0.5).floor() };
        r.clamp(-self.half, self.half)
    }

    fn quantize(&self, z: f64) -> (f64, f64) {
        let (g, dg) = self.squash(z);
        (self.round(g) / self.half, dg / self.half)
    }
}

fn channels(spec: &FsqSpec) -> Vec<Channel> {
    spec.levels.iter().map(|&l| Channel::new(l)).collect()
}

/// Quantizes rows of width `spec.dim()`; returns the lattice values and the
/// straight-through local derivative `d (squash / h) / dz` per element.
pub fn fsq_quantize_with_grad(z: &[f64], spec: &FsqSpec) -> Result<(Vec<f64>, Vec<f64>)> {
    let d = spec.dim();
    if z.len() % d != 0 {
        return Err(Error::shape(format!("{} values are not rows of width {d}", z.len())));
    }
    if let Some(v) = z.iter().find(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("FSQ input ({v})")));
    }
    let ch = channels(spec);
    let mut q = Vec::with_capacity(z.len());
    let mut g = Vec::with_capacity(z.len());
    for (i, &v) in z.iter().enumerate() {
        let (a, b) = ch[i % d].quantize(v);
        q.push(a);
        g.push(b);
    }
    Ok((q, g))
}

pub fn fsq_quantize(z: &[f64], spec: &FsqSpec) -> Result<Vec<f64>> {
    Ok(fsq_quantize_with_grad(z, spec)?.0)
}

fn digit(v: f64, levels: u32) -> Option<u64> {
    let h = (levels as f64 - 1.0) / 2.0;
    let j = v * h + h;
    let r = j.round();
    ((j - r).abs() < 1e-9 && r >= 0.0 && r <= levels as f64 - 1.0).then_some(r as u64)
}

/// Mixed-radix code of one lattice vector; channel 0 is the least significant
/// digit and digit `j` of a channel stands for the value `(j - h) / h`.
pub fn fsq_index(q: &[f64], spec: &FsqSpec) -> Result<u64> {
    if q.len() != spec.dim() {
        return Err(Error::shape(format!("lattice vector of width {} for a {}-channel spec", q.len(), spec.dim())));
    }
    let mut code = 0u64;
    let mut radix = 1u64;
    for (&v, &l) in q.iter().zip(&spec.levels) {
        let j = digit(v, l).ok_or_else(|| Error::invalid(format!("{v} is not on the {l}-level lattice")))?;
        code += j * radix;
        radix *= l as u64;
    }
    Ok(code)
}

pub fn fsq_from_index(code: u64, spec: &FsqSpec) -> Result<Vec<f64>> {
    if code >= spec.codebook_size() {
        return Err(Error::invalid(format!("code {code} outside codebook of {}", spec.codebook_size())));
    }
    let mut rest = code;
    Ok(spec
        .levels
        .iter()
        .map(|&l| {
            let h = (l as f64 - 1.0) / 2.0;
            let j = rest % l as u64;
            rest /= l as u64;
            (j as f64 - h) / h
        })
        .collect())
}
