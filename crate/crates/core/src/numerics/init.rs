use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

use super::tensor::Tensor;

/// Normal(0, std) truncated to two standard deviations by resampling.
pub fn trunc_normal<R: Rng>(shape: &[usize], std: f64, rng: &mut R) -> Tensor {
    let n: usize = shape.iter().product();
    let normal = Normal::new(0.0, std).expect("std must be finite and positive");
    let data = (0..n)
        .map(|_| loop {
            let v: f64 = normal.sample(rng);
            if v.abs() <= 2.0 * std {
                break v;
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches")
}

/// Glorot/Xavier uniform: `U(-a, a)` with `a = sqrt(6 / (fan_in + fan_out))`.
pub fn xavier_uniform<R: Rng>(shape: &[usize], fan_in: usize, fan_out: usize, rng: &mut R) -> Tensor {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let dist = Uniform::new_inclusive(-a, a).expect("bound must be finite");
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| dist.sample(rng)).collect()).expect("shape matches")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::RngStream;

    #[test]
    fn values_are_truncated() {
        let t = trunc_normal(&[1000], 0.02, &mut RngStream::new(1).rng());
        assert!(t.data().iter().all(|v| v.abs() <= 0.04));
        let mean = t.data().iter().sum::<f64>() / 1000.0;
        assert!(mean.abs() < 0.005);
    }

    #[test]
    fn xavier_bound() {
        let t = xavier_uniform(&[20, 30], 20, 30, &mut RngStream::new(2).rng());
        let a = (6.0f64 / 50.0).sqrt();
        assert!(t.data().iter().all(|v| v.abs() <= a));
        assert!(t.data().iter().any(|v| v.abs() > 0.9 * a));
    }
}
