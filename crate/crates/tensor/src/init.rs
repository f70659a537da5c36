use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::element::Element;
use crate::tensor::Tensor;

/// Values drawn from `U(-bound, bound)`.
pub fn uniform<T: Element>(shape: &[usize], bound: f64, rng: &mut impl Rng) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let data = if bound == 0.0 {
        vec![T::zero(); n]
    } else {
        let dist = Uniform::new(-bound, bound).expect("finite positive bound");
        (0..n).map(|_| T::from_f64_lossy(dist.sample(rng))).collect()
    };
    Tensor::from_vec(shape, data).unwrap()
}

pub fn normal<T: Element>(shape: &[usize], std: f64, rng: &mut impl Rng) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let dist = Normal::new(0.0, std).expect("non-negative std");
    let data = (0..n).map(|_| T::from_f64_lossy(dist.sample(rng))).collect();
    Tensor::from_vec(shape, data).unwrap()
}
