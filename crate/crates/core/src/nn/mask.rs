use crate::error::{shape_err, Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Binary H x W region mask (1 = inside the region).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RegionMask {
    height: usize,
    width: usize,
    bits: Vec<bool>,
}

impl RegionMask {
    pub fn new(height: usize, width: usize, bits: Vec<bool>) -> Result<Self> {
        if height == 0 || width == 0 || bits.len() != height * width {
            return Err(shape_err(
                "region_mask",
                format!("{height}x{width} mask with {} entries", bits.len()),
            ));
        }
        Ok(Self { height, width, bits })
    }

    /// Binarizes real values at 0.5.
    pub fn from_values<T: Scalar>(height: usize, width: usize, values: &[T]) -> Result<Self> {
        let half = T::of(0.5);
        Self::new(height, width, values.iter().map(|&v| v >= half).collect())
    }

    pub fn full(height: usize, width: usize) -> Self {
        Self::new(height, width, vec![true; height * width]).expect("positive size")
    }

    pub fn empty(height: usize, width: usize) -> Self {
        Self::new(height, width, vec![false; height * width]).expect("positive size")
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let bits = (0..height * width).map(|i| f(i / width, i % width)).collect();
        Self::new(height, width, bits).expect("positive size")
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.bits[y * self.width + x]
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        self.count() == 0
    }

    /// Fraction of pixels inside the region.
    pub fn ratio(&self) -> f64 {
        self.count() as f64 / self.bits.len() as f64
    }

    /// 1 - M.
    pub fn complement(&self) -> Self {
        Self {
            height: self.height,
            width: self.width,
            bits: self.bits.iter().map(|b| !b).collect(),
        }
    }

    /// (1, H, W) tensor of 0/1.
    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        Tensor::new(
            vec![1, self.height, self.width],
            self.bits.iter().map(|&b| if b { T::one() } else { T::zero() }).collect(),
        )
        .expect("mask shape")
    }

    /// (N, 1, H, W) tensor of 0/1.
    pub fn stack<T: Scalar>(masks: &[&RegionMask]) -> Result<Tensor<T>> {
        let first = masks
            .first()
            .ok_or_else(|| Error::Invalid("no masks to stack".into()))?;
        let mut data = Vec::with_capacity(masks.len() * first.bits.len());
        for m in masks {
            if (m.height, m.width) != (first.height, first.width) {
                return Err(shape_err(
                    "stack_masks",
                    format!("{}x{} vs {}x{}", m.height, m.width, first.height, first.width),
                ));
            }
            data.extend(m.bits.iter().map(|&b| if b { T::one() } else { T::zero() }));
        }
        Tensor::new(vec![masks.len(), 1, first.height, first.width], data)
    }
}
