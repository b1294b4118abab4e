//! Raw dense kernels shared by the tape ops: GEMM and 3-D im2col/col2im.

use crate::error::{Error, Result};

/// `c (+)= op(a) * op(b)` where `op(a)` is `m x k` and `op(b)` is `k x n`.
///
/// `a_t` / `b_t` mean the operand is stored transposed (`k x m`, `n x k`).
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    assert_eq!(a.len(), m * k, "gemm: lhs length");
    assert_eq!(b.len(), k * n, "gemm: rhs length");
    assert_eq!(c.len(), m * n, "gemm: out length");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c.fill(0.0);
        }
        return;
    }
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the asserts above guarantee every strided access lies inside
    // the three slices, and `c` does not alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Geometry of a valid (unpadded) strided 3-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub channels: usize,
    pub input: [usize; 3],
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub output: [usize; 3],
}

impl ConvGeometry {
    pub fn new(channels: usize, input: [usize; 3], kernel: [usize; 3], stride: [usize; 3]) -> Result<Self> {
        let mut output = [0; 3];
        for axis in 0..3 {
            let (size, k, s) = (input[axis], kernel[axis], stride[axis]);
            if k == 0 || s == 0 {
                return Err(Error::Geometry("kernel and stride extents must be positive".into()));
            }
            if size < k || (size - k) % s != 0 {
                return Err(Error::Geometry(format!(
                    "extent {size} is not covered exactly by kernel {k} with stride {s} (axis {axis})"
                )));
            }
            output[axis] = (size - k) / s + 1;
        }
        Ok(ConvGeometry { channels, input, kernel, stride, output })
    }

    /// Geometry of the convolution whose input-gradient is a transposed
    /// convolution producing `output` extents from `input` positions.
    pub fn transposed(channels: usize, input: [usize; 3], kernel: [usize; 3], stride: [usize; 3]) -> Result<Self> {
        let mut full = [0; 3];
        for axis in 0..3 {
            if input[axis] == 0 || kernel[axis] == 0 || stride[axis] == 0 {
                return Err(Error::Geometry("transposed convolution extents must be positive".into()));
            }
            full[axis] = (input[axis] - 1) * stride[axis] + kernel[axis];
        }
        ConvGeometry::new(channels, full, kernel, stride)
    }

    pub fn positions(&self) -> usize {
        self.output.iter().product()
    }

    pub fn patch_len(&self) -> usize {
        self.channels * self.kernel.iter().product::<usize>()
    }

    pub fn input_len(&self) -> usize {
        self.channels * self.input.iter().product::<usize>()
    }
}

/// Unfolds `input` (`C x T x H x W`) into a `positions x (C*kt*kh*kw)` matrix.
pub fn im2col(input: &[f64], g: &ConvGeometry) -> Vec<f64> {
    let [_, ih, iw] = g.input;
    let [kt, kh, kw] = g.kernel;
    let [st, sh, sw] = g.stride;
    let [ot, oh, ow] = g.output;
    let plane = ih * iw;
    let volume = g.input[0] * plane;
    let patch = g.patch_len();
    let mut cols = vec![0.0; g.positions() * patch];
    let mut row = 0;
    for t in 0..ot {
        for h in 0..oh {
            for w in 0..ow {
                let dst = &mut cols[row * patch..(row + 1) * patch];
                let mut o = 0;
                for c in 0..g.channels {
                    for dt in 0..kt {
                        for dh in 0..kh {
                            let base = c * volume + (t * st + dt) * plane + (h * sh + dh) * iw + w * sw;
                            dst[o..o + kw].copy_from_slice(&input[base..base + kw]);
                            o += kw;
                        }
                    }
                }
                row += 1;
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters-and-adds `cols` back into `out`.
pub fn col2im(cols: &[f64], g: &ConvGeometry, out: &mut [f64]) {
    let [_, ih, iw] = g.input;
    let [kt, kh, kw] = g.kernel;
    let [st, sh, sw] = g.stride;
    let [ot, oh, ow] = g.output;
    let plane = ih * iw;
    let volume = g.input[0] * plane;
    let patch = g.patch_len();
    debug_assert_eq!(out.len(), g.input_len());
    let mut row = 0;
    for t in 0..ot {
        for h in 0..oh {
            for w in 0..ow {
                let src = &cols[row * patch..(row + 1) * patch];
                let mut o = 0;
                for c in 0..g.channels {
                    for dt in 0..kt {
                        for dh in 0..kh {
                            let base = c * volume + (t * st + dt) * plane + (h * sh + dh) * iw + w * sw;
                            for (d, s) in out[base..base + kw].iter_mut().zip(&src[o..o + kw]) {
                                *d += s;
                            }
                            o += kw;
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(m: usize, k: usize, n: usize, a: &[f64], b: &[f64]) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    c[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        c
    }

    fn transpose(rows: usize, cols: usize, x: &[f64]) -> Vec<f64> {
        let mut t = vec![0.0; x.len()];
        for i in 0..rows {
            for j in 0..cols {
                t[j * rows + i] = x[i * cols + j];
            }
        }
        t
    }

    #[test]
    fn gemm_matches_naive_in_all_layouts() {
        let (m, k, n) = (3, 5, 4);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.11).cos()).collect();
        let want = naive(m, k, n, &a, &b);
        let at = transpose(m, k, &a);
        let bt = transpose(k, n, &b);
        for (lhs, a_t) in [(&a, false), (&at, true)] {
            for (rhs, b_t) in [(&b, false), (&bt, true)] {
                let mut c = vec![0.0; m * n];
                gemm(m, k, n, lhs, a_t, rhs, b_t, &mut c, false);
                for (x, y) in c.iter().zip(&want) {
                    assert!((x - y).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn gemm_accumulates() {
        let mut c = vec![1.0; 1];
        gemm(1, 1, 1, &[2.0], false, &[3.0], false, &mut c, true);
        assert_eq!(c, vec![7.0]);
    }

    #[test]
    fn geometry_rejects_uncovered_extent() {
        assert!(ConvGeometry::new(1, [5, 4, 4], [2, 2, 2], [2, 2, 2]).is_err());
        let g = ConvGeometry::new(1, [5, 4, 4], [1, 2, 2], [2, 2, 2]).unwrap();
        assert_eq!(g.output, [3, 2, 2]);
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        // <im2col(x), y> == <x, col2im(y)> for overlapping windows.
        let g = ConvGeometry::new(2, [4, 5, 5], [2, 3, 3], [1, 2, 1]).unwrap();
        let x: Vec<f64> = (0..g.input_len()).map(|i| (i as f64 * 0.7).sin()).collect();
        let y: Vec<f64> = (0..g.positions() * g.patch_len()).map(|i| (i as f64 * 0.3).cos()).collect();
        let lhs: f64 = im2col(&x, &g).iter().zip(&y).map(|(a, b)| a * b).sum();
        let mut back = vec![0.0; g.input_len()];
        col2im(&y, &g, &mut back);
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }
}
