use crate::tensor::{Real, Shape};

/// `out[n,c,p] = sum_s w[n,s,p] * x_s[n,c,p]`, summed in source order.
pub fn weighted_sum_forward<T: Real>(shape: Shape, sources: &[&[T]], weights: &[T], out: &mut [T]) {
    let plane = shape.plane();
    let s = sources.len();
    for n in 0..shape.n {
        for c in 0..shape.c {
            let off = shape.index(n, c, 0, 0);
            let dst = &mut out[off..off + plane];
            for (k, src) in sources.iter().enumerate() {
                let w = &weights[(n * s + k) * plane..][..plane];
                let x = &src[off..off + plane];
                if k == 0 {
                    for ((d, wv), xv) in dst.iter_mut().zip(w).zip(x) {
                        *d = *wv * *xv;
                    }
                } else {
                    for ((d, wv), xv) in dst.iter_mut().zip(w).zip(x) {
                        *d = *d + *wv * *xv;
                    }
                }
            }
        }
    }
}

/// Gradient of [`weighted_sum_forward`] with respect to one source.
pub fn weighted_sum_backward_source<T: Real>(shape: Shape, k: usize, s: usize, weights: &[T], d_out: &[T], d_src: &mut [T]) {
    let plane = shape.plane();
    for n in 0..shape.n {
        let w = &weights[(n * s + k) * plane..][..plane];
        for c in 0..shape.c {
            let off = shape.index(n, c, 0, 0);
            for ((d, wv), g) in d_src[off..off + plane].iter_mut().zip(w).zip(&d_out[off..off + plane]) {
                *d = *d + *wv * *g;
            }
        }
    }
}

/// Gradient with respect to the weight map: `dw[n,k,p] = sum_c x_k[n,c,p] * dy[n,c,p]`.
pub fn weighted_sum_backward_weights<T: Real>(shape: Shape, sources: &[&[T]], d_out: &[T], d_w: &mut [T]) {
    let plane = shape.plane();
    let s = sources.len();
    for n in 0..shape.n {
        for (k, src) in sources.iter().enumerate() {
            let dw = &mut d_w[(n * s + k) * plane..][..plane];
            for c in 0..shape.c {
                let off = shape.index(n, c, 0, 0);
                for ((d, x), g) in dw.iter_mut().zip(&src[off..off + plane]).zip(&d_out[off..off + plane]) {
                    *d = *d + *x * *g;
                }
            }
        }
    }
}

/// Concatenates along the channel axis. All parts share N, H, W.
pub fn concat_channels_forward<T: Real>(parts: &[(Shape, &[T])], out: &mut [T]) {
    let n_batch = parts[0].0.n;
    let plane = parts[0].0.plane();
    let total_c: usize = parts.iter().map(|(s, _)| s.c).sum();
    for n in 0..n_batch {
        let mut c0 = 0;
        for (shape, data) in parts {
            let len = shape.c * plane;
            out[(n * total_c + c0) * plane..][..len].copy_from_slice(&data[n * len..][..len]);
            c0 += shape.c;
        }
    }
}

/// Adds the slice of `d_out` belonging to part `index` into `d_part`.
pub fn concat_channels_backward<T: Real>(part_shapes: &[Shape], index: usize, d_out: &[T], d_part: &mut [T]) {
    let plane = part_shapes[0].plane();
    let total_c: usize = part_shapes.iter().map(|s| s.c).sum();
    let c0: usize = part_shapes[..index].iter().map(|s| s.c).sum();
    let len = part_shapes[index].c * plane;
    for n in 0..part_shapes[index].n {
        let src = &d_out[(n * total_c + c0) * plane..][..len];
        for (d, g) in d_part[n * len..][..len].iter_mut().zip(src) {
            *d = *d + *g;
        }
    }
}

pub fn leaky_relu<T: Real>(x: T, slope: T) -> T {
    if x > T::zero() {
        x
    } else {
        x * slope
    }
}

pub fn leaky_relu_grad<T: Real>(x: T, slope: T) -> T {
    if x > T::zero() {
        T::one()
    } else {
        slope
    }
}
