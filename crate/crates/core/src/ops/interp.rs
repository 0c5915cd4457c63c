//! Bilinear upsampling by an integer factor.
//!
//! Source coordinate for output index `d` is `(d + 0.5) / scale - 0.5`, clamped
//! to the border. Values are blended as two nested lerps so that constant
//! inputs are reproduced exactly.

use crate::tensor::{Real, Shape};

#[derive(Clone, Copy, Debug)]
struct Tap<T> {
    lo: usize,
    hi: usize,
    frac: T,
}

fn taps<T: Real>(src: usize, scale: usize) -> Vec<Tap<T>> {
    let s = T::lit(scale as f64);
    let half = T::lit(0.5);
    (0..src * scale)
        .map(|d| {
            let pos = ((T::lit(d as f64) + half) / s - half).max(T::zero());
            let lo = pos.floor().to_usize().unwrap().min(src - 1);
            let hi = (lo + 1).min(src - 1);
            let frac = if lo == hi { T::zero() } else { pos - T::lit(lo as f64) };
            Tap { lo, hi, frac }
        })
        .collect()
}

pub fn upsample_shape(input: Shape, scale: usize) -> Shape {
    Shape::new(input.n, input.c, input.h * scale, input.w * scale)
}

pub fn bilinear_forward<T: Real>(input: Shape, scale: usize, x: &[T], out: &mut [T]) {
    let ty = taps::<T>(input.h, scale);
    let tx = taps::<T>(input.w, scale);
    let ow = input.w * scale;
    for (plane_in, plane_out) in x.chunks_exact(input.plane()).zip(out.chunks_exact_mut(input.plane() * scale * scale)) {
        for (oy, a) in ty.iter().enumerate() {
            let r0 = &plane_in[a.lo * input.w..][..input.w];
            let r1 = &plane_in[a.hi * input.w..][..input.w];
            for (ox, b) in tx.iter().enumerate() {
                let top = r0[b.lo] + b.frac * (r0[b.hi] - r0[b.lo]);
                let bot = r1[b.lo] + b.frac * (r1[b.hi] - r1[b.lo]);
                plane_out[oy * ow + ox] = top + a.frac * (bot - top);
            }
        }
    }
}

pub fn bilinear_backward<T: Real>(input: Shape, scale: usize, d_out: &[T], d_x: &mut [T]) {
    let ty = taps::<T>(input.h, scale);
    let tx = taps::<T>(input.w, scale);
    let ow = input.w * scale;
    let one = T::one();
    for (plane_dx, plane_dy) in d_x.chunks_exact_mut(input.plane()).zip(d_out.chunks_exact(input.plane() * scale * scale)) {
        for (oy, a) in ty.iter().enumerate() {
            for (ox, b) in tx.iter().enumerate() {
                let g = plane_dy[oy * ow + ox];
                let (wy0, wy1) = (one - a.frac, a.frac);
                let (wx0, wx1) = (one - b.frac, b.frac);
                plane_dx[a.lo * input.w + b.lo] = plane_dx[a.lo * input.w + b.lo] + g * wy0 * wx0;
                plane_dx[a.lo * input.w + b.hi] = plane_dx[a.lo * input.w + b.hi] + g * wy0 * wx1;
                plane_dx[a.hi * input.w + b.lo] = plane_dx[a.hi * input.w + b.lo] + g * wy1 * wx0;
                plane_dx[a.hi * input.w + b.hi] = plane_dx[a.hi * input.w + b.hi] + g * wy1 * wx1;
            }
        }
    }
}

/// Nearest-neighbour variant, kept as a configuration alternative.
pub fn nearest_forward<T: Real>(input: Shape, scale: usize, x: &[T], out: &mut [T]) {
    let ow = input.w * scale;
    for (plane_in, plane_out) in x.chunks_exact(input.plane()).zip(out.chunks_exact_mut(input.plane() * scale * scale)) {
        for oy in 0..input.h * scale {
            for ox in 0..ow {
                plane_out[oy * ow + ox] = plane_in[(oy / scale) * input.w + ox / scale];
            }
        }
    }
}

pub fn nearest_backward<T: Real>(input: Shape, scale: usize, d_out: &[T], d_x: &mut [T]) {
    let ow = input.w * scale;
    for (plane_dx, plane_dy) in d_x.chunks_exact_mut(input.plane()).zip(d_out.chunks_exact(input.plane() * scale * scale)) {
        for oy in 0..input.h * scale {
            for ox in 0..ow {
                let i = (oy / scale) * input.w + ox / scale;
                plane_dx[i] = plane_dx[i] + plane_dy[oy * ow + ox];
            }
        }
    }
}
