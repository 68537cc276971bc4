//! Domain code extractor: stacked partial convolutions, masked pooling and a
//! 1x1 projection. The code for a region depends only on pixels inside it.

use crate::autograd::{Graph, ParamStore, Var};
use crate::error::{shape_err, Error, Result};
use crate::nn::{BatchNorm2d, Conv2d, Initializer, Mode, PartialConv2d, RegionMask};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// L-dimensional domain code of one image region.
#[derive(Clone, Debug, PartialEq)]
pub struct DomainCode<T> {
    values: Vec<T>,
}

impl<T: Scalar> DomainCode<T> {
    pub fn new(values: Vec<T>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Invalid("domain code must have at least one entry".into()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Invalid("domain code has non-finite entries".into()));
        }
        Ok(Self { values })
    }

    pub fn zeros(dim: usize) -> Self {
        Self {
            values: vec![T::zero(); dim.max(1)],
        }
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn distance(&self, other: &Self) -> Result<T> {
        code_distance(self, other)
    }
}

/// Euclidean distance between two codes.
pub fn code_distance<T: Scalar>(a: &DomainCode<T>, b: &DomainCode<T>) -> Result<T> {
    if a.dim() != b.dim() {
        return Err(shape_err(
            "code_distance",
            format!("dimension {} vs {}", a.dim(), b.dim()),
        ));
    }
    let s: T = a
        .values
        .iter()
        .zip(&b.values)
        .map(|(&x, &y)| (x - y) * (x - y))
        .sum();
    Ok(s.sqrt())
}

/// Tiles a code over an H x W grid, giving an (L, H, W) map.
pub fn replicate_code_map<T: Scalar>(code: &DomainCode<T>, height: usize, width: usize) -> Result<Tensor<T>> {
    if height == 0 || width == 0 {
        return Err(shape_err("replicate_code_map", "spatial size must be positive"));
    }
    let hw = height * width;
    let mut data = Vec::with_capacity(code.dim() * hw);
    for &v in code.values() {
        data.extend(std::iter::repeat(v).take(hw));
    }
    Tensor::new(vec![code.dim(), height, width], data)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExtractorConfig {
    pub code_dim: usize,
    /// Output channels of the five partial convolutions.
    pub widths: Vec<usize>,
}

impl Default for ExtractorConfig {
    fn default() -> Self {
        Self {
            code_dim: 16,
            widths: vec![32, 64, 128, 256, 256],
        }
    }
}

/// Partial-conv encoder (k=3, stride 2) producing one code per (image, mask) pair.
#[derive(Clone, Debug)]
pub struct ExtractorNet {
    layers: Vec<PartialConv2d>,
    norms: Vec<BatchNorm2d>,
    projection: Conv2d,
    code_dim: usize,
}

impl ExtractorNet {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, cfg: &ExtractorConfig, init: &mut Initializer) -> Result<Self> {
        if cfg.code_dim == 0 || cfg.widths.is_empty() || cfg.widths.contains(&0) {
            return Err(Error::Config(format!("invalid extractor config {cfg:?}")));
        }
        let mut layers = Vec::new();
        let mut norms = Vec::new();
        let mut in_ch = 3;
        let last = cfg.widths.len() - 1;
        for (i, &w) in cfg.widths.iter().enumerate() {
            layers.push(PartialConv2d::new(store, &format!("extractor.pconv{i}"), in_ch, w, 3, 2, 1, init));
            if i < last {
                norms.push(BatchNorm2d::new(store, &format!("extractor.bn{i}"), w, init));
            }
            in_ch = w;
        }
        let projection = Conv2d::new(store, "extractor.project", in_ch, cfg.code_dim, 1, 1, 0, true, init);
        Ok(Self {
            layers,
            norms,
            projection,
            code_dim: cfg.code_dim,
        })
    }

    pub fn code_dim(&self) -> usize {
        self.code_dim
    }

    /// Smallest side length that leaves at least one location after all
    /// stride-2 layers.
    pub fn min_resolution(&self) -> usize {
        1 << self.layers.len()
    }

    /// Spatial size after each partial convolution for an input side length.
    pub fn feature_sizes(&self, side: usize) -> Vec<usize> {
        let mut s = side;
        self.layers
            .iter()
            .map(|l| {
                s = l.conv.out_size(s);
                s
            })
            .collect()
    }

    /// `images`: (N,3,H,W); `masks`: (N,1,H,W) of 0/1. Returns (N, L) codes.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        images: Var,
        masks: &Tensor<T>,
        mode: Mode,
    ) -> Result<Var> {
        let (n, c, h, w) = crate::error::require_nchw("extractor", g.shape(images))?;
        if c != 3 {
            return Err(shape_err("extractor", format!("expected 3 image channels, got {c}")));
        }
        let min = self.min_resolution();
        if h < min || w < min {
            return Err(Error::Resolution {
                height: h,
                width: w,
                reason: format!("extractor needs at least {min}x{min}"),
            });
        }
        if masks.shape() != [n, 1, h, w] {
            return Err(shape_err(
                "extractor",
                format!("mask {:?} for images {:?}", masks.shape(), g.shape(images)),
            ));
        }
        let hw = h * w;
        for b in 0..n {
            if masks.data()[b * hw..(b + 1) * hw].iter().all(|&v| v == T::zero()) {
                return Err(Error::EmptyRegion(format!("extractor region for batch item {b} is empty")));
            }
        }
        let mut x = images;
        let mut mask = masks.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            let (y, m) = layer.forward(g, store, x, &mask)?;
            mask = m;
            x = match self.norms.get(i) {
                Some(bn) => {
                    let r = g.relu(y);
                    bn.forward(g, store, r, mode)?
                }
                None => y,
            };
        }
        let pooled = g.masked_avg_pool(x, &mask)?;
        let projected = self.projection.forward(g, store, pooled)?;
        g.reshape(projected, &[n, self.code_dim])
    }
}

/// Code of one region of one image (eval mode).
pub fn extract_domain_code<T: Scalar>(
    image: &Tensor<T>,
    region: &RegionMask,
    net: &ExtractorNet,
    store: &ParamStore<T>,
) -> Result<DomainCode<T>> {
    let (c, h, w) = image.dims3()?;
    if (region.height(), region.width()) != (h, w) {
        return Err(shape_err(
            "extract_domain_code",
            format!("mask {}x{} for image {h}x{w}", region.height(), region.width()),
        ));
    }
    if region.is_empty() {
        return Err(Error::EmptyRegion("extraction region has no pixels".into()));
    }
    let mut g = Graph::new();
    let img = g.constant(image.clone().reshape(vec![1, c, h, w])?);
    let mask = RegionMask::stack::<T>(&[region])?;
    let z = net.forward(&mut g, store, img, &mask, Mode::Eval)?;
    DomainCode::new(g.data(z).to_vec())
}
