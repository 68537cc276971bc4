//! Dense convolution kernels (im2col + gemm), parallel over the batch.

use rayon::prelude::*;

use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub in_ch: usize,
    pub height: usize,
    pub width: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeom {
    pub fn out_hw(&self) -> (usize, usize) {
        (
            conv_out_size(self.height, self.kernel, self.stride, self.padding),
            conv_out_size(self.width, self.kernel, self.stride, self.padding),
        )
    }

    fn patch(&self) -> usize {
        self.in_ch * self.kernel * self.kernel
    }
}

/// floor((in + 2*pad - k) / stride) + 1, or 0 when the kernel does not fit.
pub fn conv_out_size(input: usize, kernel: usize, stride: usize, padding: usize) -> usize {
    let padded = input + 2 * padding;
    if padded < kernel {
        0
    } else {
        (padded - kernel) / stride + 1
    }
}

fn im2col<T: Scalar>(x: &[T], g: &ConvGeom, cols: &mut [T]) {
    let (ho, wo) = g.out_hw();
    let k = g.kernel;
    let positions = ho * wo;
    for c in 0..g.in_ch {
        let plane = &x[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst = &mut cols[row * positions..(row + 1) * positions];
                for oy in 0..ho {
                    let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                    let line = &mut dst[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= g.height as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                        *v = if ix < 0 || ix >= g.width as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im<T: Scalar>(cols: &[T], g: &ConvGeom, dx: &mut [T]) {
    let (ho, wo) = g.out_hw();
    let k = g.kernel;
    let positions = ho * wo;
    for c in 0..g.in_ch {
        let plane = &mut dx[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src = &cols[row * positions..(row + 1) * positions];
                for oy in 0..ho {
                    let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let line = &mut plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for ox in 0..wo {
                        let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                        if ix >= 0 && ix < g.width as isize {
                            line[ix as usize] += src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

fn is_pointwise(g: &ConvGeom) -> bool {
    g.kernel == 1 && g.stride == 1 && g.padding == 0
}

/// Forward convolution. `weight` is (out_ch, in_ch, k, k); output is (N, out_ch, ho, wo).
pub fn conv2d_forward<T: Scalar>(x: &[T], weight: &[T], bias: Option<&[T]>, g: &ConvGeom) -> Vec<T> {
    let (ho, wo) = g.out_hw();
    let positions = ho * wo;
    let patch = g.patch();
    let in_per = g.in_ch * g.height * g.width;
    let out_per = g.out_ch * positions;
    let mut out = vec![T::zero(); g.batch * out_per];
    out.par_chunks_mut(out_per)
        .zip(x.par_chunks(in_per))
        .for_each(|(o, xs)| {
            let owned;
            let cols: &[T] = if is_pointwise(g) {
                xs
            } else {
                let mut buf = vec![T::zero(); patch * positions];
                im2col(xs, g, &mut buf);
                owned = buf;
                &owned
            };
            T::gemm(
                g.out_ch,
                patch,
                positions,
                T::one(),
                weight,
                (patch as isize, 1),
                cols,
                (positions as isize, 1),
                T::zero(),
                o,
                (positions as isize, 1),
            );
            if let Some(b) = bias {
                for (co, chunk) in o.chunks_mut(positions).enumerate() {
                    chunk.iter_mut().for_each(|v| *v += b[co]);
                }
            }
        });
    out
}

pub struct ConvGrads<T> {
    pub input: Option<Vec<T>>,
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

/// Backward convolution given the output gradient.
pub fn conv2d_backward<T: Scalar>(
    x: &[T],
    weight: &[T],
    grad_out: &[T],
    g: &ConvGeom,
    need_input: bool,
) -> ConvGrads<T> {
    let (ho, wo) = g.out_hw();
    let positions = ho * wo;
    let patch = g.patch();
    let in_per = g.in_ch * g.height * g.width;
    let out_per = g.out_ch * positions;

    let per_sample: Vec<(Vec<T>, Option<Vec<T>>)> = x
        .par_chunks(in_per)
        .zip(grad_out.par_chunks(out_per))
        .map(|(xs, go)| {
            let owned;
            let cols: &[T] = if is_pointwise(g) {
                xs
            } else {
                let mut buf = vec![T::zero(); patch * positions];
                im2col(xs, g, &mut buf);
                owned = buf;
                &owned
            };
            // dW_n = gout (co x P) @ cols^T (P x patch)
            let mut dw = vec![T::zero(); g.out_ch * patch];
            T::gemm(
                g.out_ch,
                positions,
                patch,
                T::one(),
                go,
                (positions as isize, 1),
                cols,
                (1, positions as isize),
                T::zero(),
                &mut dw,
                (patch as isize, 1),
            );
            let dx = need_input.then(|| {
                // dcols = W^T (patch x co) @ gout (co x P)
                let mut dcols = vec![T::zero(); patch * positions];
                T::gemm(
                    patch,
                    g.out_ch,
                    positions,
                    T::one(),
                    weight,
                    (1, patch as isize),
                    go,
                    (positions as isize, 1),
                    T::zero(),
                    &mut dcols,
                    (positions as isize, 1),
                );
                if is_pointwise(g) {
                    dcols
                } else {
                    let mut dx = vec![T::zero(); in_per];
                    col2im(&dcols, g, &mut dx);
                    dx
                }
            });
            (dw, dx)
        })
        .collect();

    // Sequential reduction keeps the summation order fixed.
    let mut weight_grad = vec![T::zero(); g.out_ch * patch];
    let mut input_grad = need_input.then(|| Vec::with_capacity(x.len()));
    for (dw, dx) in per_sample {
        weight_grad.iter_mut().zip(&dw).for_each(|(a, &b)| *a += b);
        if let (Some(acc), Some(dx)) = (input_grad.as_mut(), dx) {
            acc.extend_from_slice(&dx);
        }
    }
    let mut bias_grad = vec![T::zero(); g.out_ch];
    for go in grad_out.chunks(out_per) {
        for (co, chunk) in go.chunks(positions).enumerate() {
            bias_grad[co] += chunk.iter().copied().sum::<T>();
        }
    }
    ConvGrads {
        input: input_grad,
        weight: weight_grad,
        bias: bias_grad,
    }
}
