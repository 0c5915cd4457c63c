//! Softmax across the channel axis, independently at every (n, i, j).

use crate::tensor::{Real, Shape};

pub fn softmax_sources_forward<T: Real>(shape: Shape, x: &[T], out: &mut [T]) {
    let plane = shape.plane();
    let s = shape.c;
    let mut buf = vec![T::zero(); s];
    for n in 0..shape.n {
        let base = n * s * plane;
        for p in 0..plane {
            let mut max = T::neg_infinity();
            for k in 0..s {
                max = max.max(x[base + k * plane + p]);
            }
            let mut total = T::zero();
            for (k, b) in buf.iter_mut().enumerate() {
                *b = (x[base + k * plane + p] - max).exp();
                total = total + *b;
            }
            for (k, b) in buf.iter().enumerate() {
                out[base + k * plane + p] = *b / total;
            }
        }
    }
}

/// `dx_k = y_k * (dy_k - sum_t y_t dy_t)`
pub fn softmax_sources_backward<T: Real>(shape: Shape, y: &[T], d_out: &[T], d_x: &mut [T]) {
    let plane = shape.plane();
    let s = shape.c;
    for n in 0..shape.n {
        let base = n * s * plane;
        for p in 0..plane {
            let mut inner = T::zero();
            for k in 0..s {
                let i = base + k * plane + p;
                inner = inner + y[i] * d_out[i];
            }
            for k in 0..s {
                let i = base + k * plane + p;
                d_x[i] = d_x[i] + y[i] * (d_out[i] - inner);
            }
        }
    }
}
