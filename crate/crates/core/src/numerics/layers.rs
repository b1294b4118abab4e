use rand::Rng;

use super::init::trunc_normal;
use super::params::{ParamId, ParamStore};
use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::Result;

pub const INIT_STD: f64 = 0.02;

/// `y = x W + b` with `W` stored `in x out`.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize, rng: &mut R) -> Result<Self> {
        let weight = store.add(format!("{name}.weight"), trunc_normal(&[in_dim, out_dim], INIT_STD, rng))?;
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[out_dim]))?;
        Ok(Linear { weight, bias, in_dim, out_dim })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        let y = tape.matmul(x, w)?;
        tape.add_bias(y, b)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Result<Self> {
        let gamma = store.add(format!("{name}.gamma"), Tensor::ones(&[dim]))?;
        let beta = store.add(format!("{name}.beta"), Tensor::zeros(&[dim]))?;
        Ok(LayerNorm { gamma, beta, eps: 1e-6 })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let g = tape.param(store, self.gamma);
        let b = tape.param(store, self.beta);
        tape.layer_norm(x, g, b, self.eps)
    }
}

/// A 3-D convolution (or transposed convolution) with per-channel bias and
/// kernel equal to stride.
#[derive(Clone, Copy, Debug)]
pub struct Conv3d {
    pub kernel: ParamId,
    pub bias: ParamId,
    pub stride: [usize; 3],
    pub transposed: bool,
}

impl Conv3d {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        stride: [usize; 3],
        rng: &mut R,
    ) -> Result<Self> {
        let shape = [out_ch, in_ch, stride[0], stride[1], stride[2]];
        let kernel = store.add(format!("{name}.kernel"), trunc_normal(&shape, INIT_STD, rng))?;
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[out_ch]))?;
        Ok(Conv3d { kernel, bias, stride, transposed: false })
    }

    pub fn new_transposed<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        stride: [usize; 3],
        rng: &mut R,
    ) -> Result<Self> {
        let shape = [in_ch, out_ch, stride[0], stride[1], stride[2]];
        let kernel = store.add(format!("{name}.kernel"), trunc_normal(&shape, INIT_STD, rng))?;
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[out_ch]))?;
        Ok(Conv3d { kernel, bias, stride, transposed: true })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let k = tape.param(store, self.kernel);
        let b = tape.param(store, self.bias);
        let y = if self.transposed {
            tape.conv_transpose3d(x, k, self.stride)?
        } else {
            tape.conv3d(x, k, self.stride)?
        };
        tape.add_channel_bias(y, b)
    }
}
