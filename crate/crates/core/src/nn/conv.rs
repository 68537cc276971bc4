use crate::autograd::{conv_out_size, Graph, ParamId, ParamStore, Var};
use crate::error::{shape_err, Result};
use crate::nn::Initializer;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Square-kernel 2-D convolution with zero padding.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
        init: &mut Initializer,
    ) -> Self {
        let weight = store.add_param(format!("{name}.weight"), init.normal(&[out_ch, in_ch, kernel, kernel], 0.0));
        let bias = bias.then(|| store.add_param(format!("{name}.bias"), Tensor::zeros(vec![out_ch])));
        Self {
            weight,
            bias,
            in_ch,
            out_ch,
            kernel,
            stride,
            padding,
        }
    }

    pub fn out_size(&self, input: usize) -> usize {
        conv_out_size(input, self.kernel, self.stride, self.padding)
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let b = self.bias.map(|b| g.param(store, b));
        g.conv2d(x, w, b, self.stride, self.padding)
    }
}

/// Convolution that only aggregates features inside a validity mask.
///
/// For an output location `p` whose window covers `s(p)` valid input
/// pixels: if `s(p) > 0` the output is `W . (X * M)(p) * k^2 / s(p) + b`
/// and the updated mask is 1; otherwise the output is exactly 0 (bias
/// included) and the updated mask is 0. Padding counts as invalid.
#[derive(Clone, Debug)]
pub struct PartialConv2d {
    pub conv: Conv2d,
    pub denominator_eps: f64,
}

impl PartialConv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        init: &mut Initializer,
    ) -> Self {
        Self {
            conv: Conv2d::new(store, name, in_ch, out_ch, kernel, stride, padding, true, init),
            denominator_eps: 1e-8,
        }
    }

    /// Window sums of the mask, the renormalization factors and the updated mask,
    /// each (N, 1, ho, wo).
    pub fn mask_update<T: Scalar>(&self, mask: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        let (n, c, h, w) = mask.dims4()?;
        if c != 1 {
            return Err(shape_err("partial_conv", format!("mask must have one channel, got {c}")));
        }
        let (k, stride, pad) = (self.conv.kernel, self.conv.stride, self.conv.padding);
        let (ho, wo) = (self.conv.out_size(h), self.conv.out_size(w));
        if ho == 0 || wo == 0 {
            return Err(shape_err("partial_conv", format!("kernel {k} does not fit {h}x{w}")));
        }
        let window = T::of((k * k) as f64);
        let eps = T::of(self.denominator_eps);
        let m = mask.data();
        let mut ratio = Vec::with_capacity(n * ho * wo);
        let mut updated = Vec::with_capacity(n * ho * wo);
        for b in 0..n {
            let plane = &m[b * h * w..(b + 1) * h * w];
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut s = T::zero();
                    for ky in 0..k {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix >= 0 && ix < w as isize {
                                s += plane[iy as usize * w + ix as usize];
                            }
                        }
                    }
                    if s > T::zero() {
                        ratio.push(window / (s + eps));
                        updated.push(T::one());
                    } else {
                        ratio.push(T::zero());
                        updated.push(T::zero());
                    }
                }
            }
        }
        Ok((
            Tensor::new(vec![n, 1, ho, wo], ratio)?,
            Tensor::new(vec![n, 1, ho, wo], updated)?,
        ))
    }

    /// `x`: (N,C,H,W) features; `mask`: (N,1,H,W) of 0/1.
    /// Returns the output features and the updated mask.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: Var,
        mask: &Tensor<T>,
    ) -> Result<(Var, Tensor<T>)> {
        let (n, _, h, w) = crate::error::require_nchw("partial_conv", g.shape(x))?;
        if mask.shape() != [n, 1, h, w] {
            return Err(shape_err(
                "partial_conv",
                format!("mask {:?} does not match features {:?}", mask.shape(), g.shape(x)),
            ));
        }
        let (ratio, updated) = self.mask_update(mask)?;
        let masked = g.spatial_scale(x, mask)?;
        let wv = g.param(store, self.conv.weight);
        let raw = g.conv2d(masked, wv, None, self.conv.stride, self.conv.padding)?;
        let scaled = g.spatial_scale(raw, &ratio)?;
        let out = match self.conv.bias {
            Some(b) => {
                let bv = g.param(store, b);
                g.channel_bias(scaled, bv, Some(&updated))?
            }
            None => scaled,
        };
        Ok((out, updated))
    }
}
