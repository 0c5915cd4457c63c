//! 2-D convolution via per-sample im2col.
//!
//! Column layout: row `r = (ci * k + ky) * k + kx`, column `p = oy * ow + ox`.

use crate::error::{Axis, Error, Result};
use crate::tensor::{Real, Shape};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub input: Shape,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

pub fn conv_out_dim(size: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (size + 2 * pad - kernel) / stride + 1
}

impl ConvGeometry {
    pub fn new(input: Shape, weight: Shape, stride: usize, pad: usize) -> Result<Self> {
        if weight.h != weight.w {
            return Err(Error::Dimension {
                op: "conv2d",
                axis: Axis::W,
                expected: weight.h,
                actual: weight.w,
            });
        }
        let kernel = weight.h;
        if kernel != 1 && kernel != 3 {
            return Err(Error::invalid(format!("conv2d: kernel size {kernel} not in {{1, 3}}")));
        }
        if stride != 1 && stride != 2 {
            return Err(Error::invalid(format!("conv2d: stride {stride} not in {{1, 2}}")));
        }
        // weight is (Cout, Cin, k, k); its C axis must match the input channels
        weight.expect_axis(Axis::C, input.c, "conv2d")?;
        if input.h + 2 * pad < kernel {
            return Err(Error::Dimension { op: "conv2d", axis: Axis::H, expected: kernel, actual: input.h + 2 * pad });
        }
        if input.w + 2 * pad < kernel {
            return Err(Error::Dimension { op: "conv2d", axis: Axis::W, expected: kernel, actual: input.w + 2 * pad });
        }
        Ok(ConvGeometry { input, out_channels: weight.n, kernel, stride, pad })
    }

    pub fn output(&self) -> Shape {
        Shape::new(
            self.input.n,
            self.out_channels,
            conv_out_dim(self.input.h, self.kernel, self.stride, self.pad),
            conv_out_dim(self.input.w, self.kernel, self.stride, self.pad),
        )
    }

    fn rows(&self) -> usize {
        self.input.c * self.kernel * self.kernel
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.pad == 0
    }
}

fn im2col<T: Real>(g: &ConvGeometry, sample: &[T], col: &mut [T]) {
    let out = g.output();
    let (k, s, pad) = (g.kernel, g.stride, g.pad as isize);
    let (h, w) = (g.input.h as isize, g.input.w as isize);
    let p = out.plane();
    for ci in 0..g.input.c {
        let plane = &sample[ci * g.input.plane()..(ci + 1) * g.input.plane()];
        for ky in 0..k {
            for kx in 0..k {
                let row = &mut col[((ci * k + ky) * k + kx) * p..][..p];
                for oy in 0..out.h {
                    let iy = (oy * s + ky) as isize - pad;
                    let dst = &mut row[oy * out.w..(oy + 1) * out.w];
                    if iy < 0 || iy >= h {
                        dst.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.input.w..];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * s + kx) as isize - pad;
                        *d = if ix < 0 || ix >= w { T::zero() } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

fn col2im_add<T: Real>(g: &ConvGeometry, col: &[T], sample: &mut [T]) {
    let out = g.output();
    let (k, s, pad) = (g.kernel, g.stride, g.pad as isize);
    let (h, w) = (g.input.h as isize, g.input.w as isize);
    let p = out.plane();
    for ci in 0..g.input.c {
        let plane = &mut sample[ci * g.input.plane()..(ci + 1) * g.input.plane()];
        for ky in 0..k {
            for kx in 0..k {
                let row = &col[((ci * k + ky) * k + kx) * p..][..p];
                for oy in 0..out.h {
                    let iy = (oy * s + ky) as isize - pad;
                    if iy < 0 || iy >= h {
                        continue;
                    }
                    let base = iy as usize * g.input.w;
                    for ox in 0..out.w {
                        let ix = (ox * s + kx) as isize - pad;
                        if ix >= 0 && ix < w {
                            plane[base + ix as usize] = plane[base + ix as usize] + row[oy * out.w + ox];
                        }
                    }
                }
            }
        }
    }
}

#[inline]
fn axpy<T: Real>(y: &mut [T], a: T, x: &[T]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi = *yi + a * *xi;
    }
}

#[inline]
fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (x, y)| acc + *x * *y)
}

pub fn conv2d_forward<T: Real>(g: &ConvGeometry, input: &[T], weight: &[T], bias: Option<&[T]>, out: &mut [T]) {
    let os = g.output();
    let p = os.plane();
    let rows = g.rows();
    let mut col = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); rows * p] };
    for n in 0..g.input.n {
        let sample = &input[n * g.input.c * g.input.plane()..][..g.input.c * g.input.plane()];
        let col: &[T] = if g.is_pointwise() {
            sample
        } else {
            im2col(g, sample, &mut col);
            &col
        };
        for co in 0..g.out_channels {
            let dst = &mut out[os.index(n, co, 0, 0)..][..p];
            dst.fill(bias.map_or(T::zero(), |b| b[co]));
            let wrow = &weight[co * rows..(co + 1) * rows];
            for (r, &wv) in wrow.iter().enumerate() {
                axpy(dst, wv, &col[r * p..(r + 1) * p]);
            }
        }
    }
}

/// Accumulates gradients into whichever of `d_input`, `d_weight`, `d_bias` are given.
pub fn conv2d_backward<T: Real>(
    g: &ConvGeometry,
    input: &[T],
    weight: &[T],
    d_out: &[T],
    mut d_input: Option<&mut [T]>,
    mut d_weight: Option<&mut [T]>,
    mut d_bias: Option<&mut [T]>,
) {
    let os = g.output();
    let p = os.plane();
    let rows = g.rows();
    let sample_len = g.input.c * g.input.plane();
    let mut col = vec![T::zero(); if g.is_pointwise() { 0 } else { rows * p }];
    let mut d_col = vec![T::zero(); rows * p];
    for n in 0..g.input.n {
        let sample = &input[n * sample_len..][..sample_len];
        let col: &[T] = if g.is_pointwise() {
            sample
        } else {
            im2col(g, sample, &mut col);
            &col
        };
        d_col.fill(T::zero());
        for co in 0..g.out_channels {
            let dy = &d_out[os.index(n, co, 0, 0)..][..p];
            if let Some(db) = d_bias.as_deref_mut() {
                db[co] = db[co] + dy.iter().copied().sum::<T>();
            }
            let wrow = &weight[co * rows..(co + 1) * rows];
            if let Some(dw) = d_weight.as_deref_mut() {
                let dwrow = &mut dw[co * rows..(co + 1) * rows];
                for (r, dwv) in dwrow.iter_mut().enumerate() {
                    *dwv = *dwv + dot(dy, &col[r * p..(r + 1) * p]);
                }
            }
            if d_input.is_some() {
                for (r, &wv) in wrow.iter().enumerate() {
                    axpy(&mut d_col[r * p..(r + 1) * p], wv, dy);
                }
            }
        }
        if let Some(dx) = d_input.as_deref_mut() {
            let dst = &mut dx[n * sample_len..][..sample_len];
            if g.is_pointwise() {
                for (d, v) in dst.iter_mut().zip(&d_col) {
                    *d = *d + *v;
                }
            } else {
                col2im_add(g, &d_col, dst);
            }
        }
    }
}
