//! Conditioned U-Net generator with attention-gated skip connections.

use crate::autograd::{Graph, ParamStore, Var};
use crate::error::{shape_err, Error, Result};
use crate::nn::{BatchNorm2d, Conv2d, Initializer, Mode};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorConfig {
    pub code_dim: usize,
    /// Number of stride-2 encoder stages.
    pub depth: usize,
    pub base_width: usize,
    pub max_width: usize,
    pub batchnorm: bool,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            code_dim: 16,
            depth: 4,
            base_width: 16,
            max_width: 128,
            batchnorm: true,
        }
    }
}

impl GeneratorConfig {
    pub fn in_channels(&self) -> usize {
        self.code_dim + 4
    }

    pub fn widths(&self) -> Vec<usize> {
        (0..self.depth)
            .map(|i| (self.base_width << i).min(self.max_width))
            .collect()
    }
}

/// Gate over concatenated skip and decoder features:
/// `cat * sigmoid(conv1x1(cat))`.
#[derive(Clone, Debug)]
pub struct AttentionBlock {
    pub gate: Conv2d,
}

impl AttentionBlock {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, channels: usize, init: &mut Initializer) -> Self {
        Self {
            gate: Conv2d::new(store, name, channels, channels, 1, 1, 0, true, init),
        }
    }

    /// Returns the gated features and the gate itself.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        skip: Var,
        decoder: Var,
    ) -> Result<(Var, Var)> {
        let cat = g.concat(&[skip, decoder])?;
        let logits = self.gate.forward(g, store, cat)?;
        let gate = g.sigmoid(logits);
        Ok((g.mul(cat, gate)?, gate))
    }
}

#[derive(Clone, Debug)]
struct Stage {
    conv: Conv2d,
    norm: Option<BatchNorm2d>,
}

impl Stage {
    fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var, mode: Mode) -> Result<Var> {
        let mut y = self.conv.forward(g, store, x)?;
        if let Some(bn) = &self.norm {
            y = bn.forward(g, store, y, mode)?;
        }
        Ok(g.elu(y, T::one()))
    }
}

/// Clamp applied to the composite before taking its logit in the output head.
const LOGIT_CLAMP: f64 = 1e-3;

/// U-Net: stride-2 conv encoder, nearest-upsample + conv decoder, attention
/// gates on every skip (the last one gates the raw input against the top
/// decoder features), and a sigmoid head whose pre-activation is offset by
/// the logit of the input composite (a zero head reproduces the input).
#[derive(Clone, Debug)]
pub struct GeneratorNet {
    cfg: GeneratorConfig,
    encoder: Vec<Stage>,
    decoder: Vec<Stage>,
    attention: Vec<AttentionBlock>,
    top: Stage,
    head: Conv2d,
}

impl GeneratorNet {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, cfg: &GeneratorConfig, init: &mut Initializer) -> Result<Self> {
        if cfg.depth == 0 || cfg.base_width == 0 || cfg.max_width == 0 || cfg.code_dim == 0 {
            return Err(Error::Config(format!("invalid generator config {cfg:?}")));
        }
        let widths = cfg.widths();
        let mut encoder = Vec::new();
        let mut in_ch = cfg.in_channels();
        for (i, &w) in widths.iter().enumerate() {
            let name = format!("generator.enc{i}");
            encoder.push(Stage {
                conv: Conv2d::new(store, &name, in_ch, w, 3, 2, 1, true, init),
                norm: cfg.batchnorm.then(|| BatchNorm2d::new(store, &format!("{name}.bn"), w, init)),
            });
            in_ch = w;
        }
        // Decoder stage i upsamples to the resolution of encoder stage i.
        let mut decoder = Vec::new();
        let mut attention = Vec::new();
        let mut dec_ch = widths[cfg.depth - 1];
        for i in (0..cfg.depth - 1).rev() {
            let name = format!("generator.dec{i}");
            decoder.push(Stage {
                conv: Conv2d::new(store, &name, dec_ch, widths[i], 3, 1, 1, true, init),
                norm: cfg
                    .batchnorm
                    .then(|| BatchNorm2d::new(store, &format!("{name}.bn"), widths[i], init)),
            });
            attention.push(AttentionBlock::new(store, &format!("generator.att{i}"), 2 * widths[i], init));
            dec_ch = 2 * widths[i];
        }
        let top = Stage {
            conv: Conv2d::new(store, "generator.top", dec_ch, widths[0], 3, 1, 1, true, init),
            norm: cfg.batchnorm.then(|| BatchNorm2d::new(store, "generator.top.bn", widths[0], init)),
        };
        attention.push(AttentionBlock::new(store, "generator.att_in", widths[0] + cfg.in_channels(), init));
        let head = Conv2d::new(store, "generator.head", widths[0] + cfg.in_channels(), 3, 3, 1, 1, true, init);
        Ok(Self {
            cfg: cfg.clone(),
            encoder,
            decoder,
            attention,
            top,
            head,
        })
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.cfg
    }

    pub fn attention_blocks(&self) -> &[AttentionBlock] {
        &self.attention
    }

    /// Side lengths must be multiples of this.
    pub fn size_multiple(&self) -> usize {
        1 << self.cfg.depth
    }

    /// `input`: (N, L+4, H, W) assembled input whose first three channels
    /// are the composite. Returns (N, 3, H, W) in [0, 1].
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, input: Var, mode: Mode) -> Result<Var> {
        let (_, c, h, w) = crate::error::require_nchw("generator", g.shape(input))?;
        if c != self.cfg.in_channels() {
            return Err(shape_err(
                "generator",
                format!("expected {} input channels, got {c}", self.cfg.in_channels()),
            ));
        }
        let m = self.size_multiple();
        if h % m != 0 || w % m != 0 {
            return Err(Error::Resolution {
                height: h,
                width: w,
                reason: format!("generator needs sides divisible by {m}"),
            });
        }
        let mut skips = Vec::with_capacity(self.cfg.depth);
        let mut x = input;
        for stage in &self.encoder {
            x = stage.forward(g, store, x, mode)?;
            skips.push(x);
        }
        let mut d = x;
        for (j, (stage, att)) in self.decoder.iter().zip(&self.attention).enumerate() {
            let level = self.cfg.depth - 2 - j;
            let up = g.upsample_nearest(d, 2)?;
            let y = stage.forward(g, store, up, mode)?;
            d = att.forward(g, store, skips[level], y)?.0;
        }
        let up = g.upsample_nearest(d, 2)?;
        let top = self.top.forward(g, store, up, mode)?;
        let gated = self.attention[self.cfg.depth - 1].forward(g, store, input, top)?.0;
        let head = self.head.forward(g, store, gated)?;

        let composite = g.slice_channels(input, 0, 3)?;
        let offset = g.logit(composite, T::of(LOGIT_CLAMP));
        let pre = g.add(head, offset)?;
        Ok(g.sigmoid(pre))
    }
}

/// Concatenates `[image(3), mask(1), code map(L)]` along channels for a
/// single (3,H,W) image.
pub fn assemble_input<T: Scalar>(
    composite: &Tensor<T>,
    mask: &crate::nn::RegionMask,
    code: &crate::extractor::DomainCode<T>,
) -> Result<Tensor<T>> {
    let (c, h, w) = composite.dims3()?;
    if c != 3 {
        return Err(shape_err("assemble_input", format!("expected 3 image channels, got {c}")));
    }
    if (mask.height(), mask.width()) != (h, w) {
        return Err(shape_err(
            "assemble_input",
            format!("mask {}x{} for image {h}x{w}", mask.height(), mask.width()),
        ));
    }
    let map = crate::extractor::replicate_code_map(code, h, w)?;
    let mut data = Vec::with_capacity((4 + code.dim()) * h * w);
    data.extend_from_slice(composite.data());
    data.extend_from_slice(mask.to_tensor::<T>().data());
    data.extend_from_slice(map.data());
    Tensor::new(vec![4 + code.dim(), h, w], data)
}
