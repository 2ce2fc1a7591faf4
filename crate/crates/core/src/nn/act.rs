//! Pointwise activations.
//!
//! Each backward variant recovers the needed mask or derivative from the
//! forward *output*, so no extra cache tensors are required.

use ndarray::{Array1, Array4};

use super::Elem;

pub fn relu<E: Elem>(x: &mut Array4<E>) {
    x.mapv_inplace(|v| if v > E::zero() { v } else { E::zero() });
}

/// In-place `dy *= (y > 0)` where `y` is the ReLU output.
pub fn relu_backward<E: Elem>(dy: &mut Array4<E>, y: &Array4<E>) {
    for (d, &o) in dy.iter_mut().zip(y.iter()) {
        if o <= E::zero() {
            *d = E::zero();
        }
    }
}

pub fn leaky_relu<E: Elem>(x: &mut Array4<E>, slope: f64) {
    let s = E::from_f64(slope);
    x.mapv_inplace(|v| if v > E::zero() { v } else { v * s });
}

/// In-place leaky-ReLU backward; the sign of the output matches the sign of
/// the input for any positive slope, so `y` suffices.
pub fn leaky_relu_backward<E: Elem>(dy: &mut Array4<E>, y: &Array4<E>, slope: f64) {
    let s = E::from_f64(slope);
    for (d, &o) in dy.iter_mut().zip(y.iter()) {
        if o <= E::zero() {
            *d = *d * s;
        }
    }
}

pub fn tanh_forward<E: Elem>(mut x: Array4<E>) -> Array4<E> {
    x.mapv_inplace(|v| v.tanh());
    x
}

/// In-place `dy *= 1 - y^2` where `y` is the tanh output.
pub fn tanh_backward<E: Elem>(dy: &mut Array4<E>, y: &Array4<E>) {
    for (d, &o) in dy.iter_mut().zip(y.iter()) {
        *d = *d * (E::one() - o * o);
    }
}

pub fn sigmoid<E: Elem>(mut x: Array1<E>) -> Array1<E> {
    x.mapv_inplace(|v| E::one() / (E::one() + (-v).exp()));
    x
}

/// `dy * y * (1 - y)` where `y` is the sigmoid output.
pub fn sigmoid_backward<E: Elem>(dy: &Array1<E>, y: &Array1<E>) -> Array1<E> {
    let mut out = dy.clone();
    for (d, &o) in out.iter_mut().zip(y.iter()) {
        *d = *d * o * (E::one() - o);
    }
    out
}
