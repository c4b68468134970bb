//! Elementwise activations: ReLU, sigmoid, and per-pixel softmax over the
//! channel (last) dimension.

use crate::tensor::{Real, Tensor3};

pub fn relu<T: Real>(x: &Tensor3<T>) -> Tensor3<T> {
    let mut out = x.clone();
    relu_inplace(&mut out.data);
    out
}

pub(crate) fn relu_slice<T: Real>(data: &mut [T]) {
    for v in data {
        if *v < T::zero() {
            *v = T::zero();
        }
    }
}

pub fn relu_inplace<T: Real>(data: &mut [T]) {
    relu_slice(data);
}

/// Gradient routing: passes `grad_out` where the forward input was > 0.
/// The derivative at exactly 0 is defined as 0.
pub fn relu_backward<T: Real>(x: &Tensor3<T>, grad_out: &Tensor3<T>) -> Tensor3<T> {
    let mut out = grad_out.clone();
    relu_backward_inplace(&x.data, &mut out.data);
    out
}

pub fn relu_backward_inplace<T: Real>(x: &[T], grad: &mut [T]) {
    for (g, &v) in grad.iter_mut().zip(x) {
        if v <= T::zero() {
            *g = T::zero();
        }
    }
}

/// Numerically stable logistic function: never exponentiates a positive
/// argument, so large |x| cannot overflow.
#[inline(always)]
pub fn sigmoid_scalar<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub fn sigmoid<T: Real>(x: &Tensor3<T>) -> Tensor3<T> {
    let mut out = x.clone();
    sigmoid_inplace(&mut out.data);
    out
}

pub fn sigmoid_inplace<T: Real>(data: &mut [T]) {
    for v in data {
        *v = sigmoid_scalar(*v);
    }
}

/// Per-pixel softmax over the channel dimension, computed with
/// max-subtraction so large scores cannot overflow.
pub fn softmax_lastdim<T: Real>(x: &Tensor3<T>) -> Tensor3<T> {
    let mut out = x.clone();
    softmax_lastdim_inplace(&mut out.data, x.c);
    out
}

pub fn softmax_lastdim_inplace<T: Real>(data: &mut [T], c: usize) {
    for px in data.chunks_exact_mut(c) {
        let mut m = px[0];
        for &v in px.iter().skip(1) {
            if v > m {
                m = v;
            }
        }
        let mut sum = T::zero();
        for v in px.iter_mut() {
            *v = (*v - m).exp();
            sum += *v;
        }
        for v in px.iter_mut() {
            *v /= sum;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor3;

    #[test]
    fn relu_clamps_negatives() {
        let x = Tensor3::from_vec(1, 3, 1, vec![-1.0f32, 0.0, 2.0]).unwrap();
        assert_eq!(relu(&x).data, vec![0.0, 0.0, 2.0]);
    }

    #[test]
    fn relu_identity_on_positive() {
        let x = Tensor3::from_vec(1, 3, 1, vec![0.5f32, 1.0, 2.0]).unwrap();
        assert_eq!(relu(&x).data, x.data);
    }

    #[test]
    fn relu_backward_routes_where_positive() {
        let x = Tensor3::from_vec(1, 2, 1, vec![-1.0f32, 2.0]).unwrap();
        let g = Tensor3::from_vec(1, 2, 1, vec![5.0f32, 7.0]).unwrap();
        assert_eq!(relu_backward(&x, &g).data, vec![0.0, 7.0]);
    }

    #[test]
    fn relu_derivative_at_zero_is_zero() {
        let x = Tensor3::from_vec(1, 1, 1, vec![0.0f32]).unwrap();
        let g = Tensor3::from_vec(1, 1, 1, vec![9.0f32]).unwrap();
        assert_eq!(relu_backward(&x, &g).data, vec![0.0]);
    }

    #[test]
    fn sigmoid_at_zero_is_half() {
        assert_eq!(sigmoid_scalar(0.0f64), 0.5);
    }

    #[test]
    fn sigmoid_symmetry() {
        for &x in &[-5.0f64, -0.3, 0.0, 0.7, 4.2] {
            let s = sigmoid_scalar(x);
            let t = 1.0 - sigmoid_scalar(-x);
            assert!((s - t).abs() < 1e-12, "sigmoid({x}) = {s} vs 1-sigmoid({}) = {t}", -x);
        }
    }

    #[test]
    fn sigmoid_extreme_inputs_are_finite() {
        let lo = sigmoid_scalar(-1000.0f32);
        let hi = sigmoid_scalar(1000.0f32);
        assert_eq!(lo, 0.0);
        assert_eq!(hi, 1.0);
        assert!(lo.is_finite() && hi.is_finite());
    }

    #[test]
    fn softmax_uniform_on_equal_scores() {
        let x = Tensor3::from_vec(1, 1, 3, vec![0.0f64; 3]).unwrap();
        let y = softmax_lastdim(&x);
        for v in y.data {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_shift_invariant() {
        let x = Tensor3::from_vec(1, 1, 3, vec![0.3f64, -1.2, 2.0]).unwrap();
        let shifted = Tensor3::from_vec(1, 1, 3, vec![100.3, 98.8, 102.0]).unwrap();
        let a = softmax_lastdim(&x);
        let b = softmax_lastdim(&shifted);
        for (u, v) in a.data.iter().zip(&b.data) {
            assert!((u - v).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_huge_score_is_stable() {
        let x = Tensor3::from_vec(1, 1, 3, vec![1000.0f32, 0.0, 0.0]).unwrap();
        let y = softmax_lastdim(&x);
        assert!(y.data.iter().all(|v| v.is_finite()));
        assert!((y.data[0] - 1.0).abs() < 1e-6);
        assert!(y.data[1] < 1e-6 && y.data[2] < 1e-6);
    }

    #[test]
    fn softmax_sums_to_one() {
        let x = Tensor3::from_vec(2, 2, 3, (0..12).map(|v| (v as f32) * 0.37 - 2.0).collect()).unwrap();
        let y = softmax_lastdim(&x);
        for px in y.data.chunks_exact(3) {
            let s: f32 = px.iter().sum();
            assert!((s - 1.0).abs() < 1e-6);
            assert!(px.iter().all(|&v| v > 0.0 && v < 1.0));
        }
    }
}
