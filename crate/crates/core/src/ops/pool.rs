//! 2×2 max pooling with stride 2.

use crate::tensor::{Real, Shape};

pub fn maxpool2_shape(input: Shape) -> Shape {
    Shape::new(input.n, input.c, input.h / 2, input.w / 2)
}

/// Writes pooled values and, per output element, the flat input index that won.
/// Ties go to the lowest flat index.
pub fn maxpool2_forward<T: Real>(input: Shape, x: &[T], out: &mut [T], argmax: &mut [usize]) {
    let os = maxpool2_shape(input);
    for nc in 0..input.n * input.c {
        let base_in = nc * input.plane();
        let base_out = nc * os.plane();
        for oy in 0..os.h {
            for ox in 0..os.w {
                let mut best = base_in + (2 * oy) * input.w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let i = base_in + (2 * oy + dy) * input.w + 2 * ox + dx;
                    if x[i] > x[best] {
                        best = i;
                    }
                }
                out[base_out + oy * os.w + ox] = x[best];
                argmax[base_out + oy * os.w + ox] = best;
            }
        }
    }
}

pub fn maxpool2_backward<T: Real>(argmax: &[usize], d_out: &[T], d_x: &mut [T]) {
    for (&i, &g) in argmax.iter().zip(d_out) {
        d_x[i] = d_x[i] + g;
    }
}
