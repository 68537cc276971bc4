use crate::error::{shape_err, Error, Result};
use crate::nn::RegionMask;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// PSNR reported for (near-)identical images, in dB.
pub const PSNR_CAP: f64 = 100.0;
const PEAK: f64 = 255.0;

/// Per-image evaluation record. Errors are on the 0..255 scale.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricRecord {
    pub id: String,
    pub mse: f64,
    pub fmse: f64,
    pub psnr: f64,
    pub fg_ratio: f64,
}

/// Sum with a fixed pairwise reduction tree, independent of thread count.
pub fn pairwise_sum(values: &[f64]) -> f64 {
    const BLOCK: usize = 64;
    if values.len() <= BLOCK {
        return values.iter().sum();
    }
    let mid = values.len() / 2;
    pairwise_sum(&values[..mid]) + pairwise_sum(&values[mid..])
}

pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse < PEAK * PEAK * 1e-10 {
        PSNR_CAP
    } else {
        10.0 * (PEAK * PEAK / mse).log10()
    }
}

/// MSE, foreground MSE and PSNR between a prediction and its target.
pub fn compute_metrics<T: Scalar>(
    id: &str,
    pred: &Tensor<T>,
    target: &Tensor<T>,
    fg_mask: &RegionMask,
) -> Result<MetricRecord> {
    if pred.shape() != target.shape() {
        return Err(shape_err("compute_metrics", format!("pred {:?} vs target {:?}", pred.shape(), target.shape())));
    }
    let (c, h, w) = pred.dims3()?;
    if (fg_mask.height(), fg_mask.width()) != (h, w) {
        return Err(shape_err("compute_metrics", format!("mask {}x{} for image {h}x{w}", fg_mask.height(), fg_mask.width())));
    }
    if fg_mask.is_empty() {
        return Err(Error::EmptyRegion(format!("{id}: fMSE is undefined for an empty foreground")));
    }
    let plane = h * w;
    let squared: Vec<f64> = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(&p, &t)| {
            let d = PEAK * p.as_f64() - PEAK * t.as_f64();
            d * d
        })
        .collect();
    let fg: Vec<f64> = squared
        .iter()
        .enumerate()
        .filter(|(i, _)| fg_mask.bits()[i % plane])
        .map(|(_, &v)| v)
        .collect();
    let mse = pairwise_sum(&squared) / squared.len() as f64;
    let fmse = pairwise_sum(&fg) / (fg_mask.count() * c) as f64;
    Ok(MetricRecord { id: id.to_string(), mse, fmse, psnr: psnr_from_mse(mse), fg_ratio: fg_mask.ratio() })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_images_hit_cap() {
        let a = Tensor::<f32>::full(vec![3, 4, 4], 0.3);
        let m = RegionMask::from_fn(4, 4, |y, _| y == 0);
        let r = compute_metrics("a", &a, &a, &m).unwrap();
        assert_eq!((r.mse, r.fmse, r.psnr), (0.0, 0.0, 100.0));
        assert_eq!(r.fg_ratio, 0.25);
    }

    #[test]
    fn constant_offset() {
        let a = Tensor::<f64>::full(vec![3, 4, 4], 0.2);
        let b = a.map(|v| v + 10.0 / 255.0);
        let r = compute_metrics("a", &b, &a, &RegionMask::full(4, 4)).unwrap();
        assert!((r.mse - 100.0).abs() < 1e-9);
        assert!((r.psnr - 28.1308).abs() < 1e-4);
    }

    #[test]
    fn empty_foreground_is_error() {
        let a = Tensor::<f32>::zeros(vec![3, 2, 2]);
        assert!(compute_metrics("a", &a, &a, &RegionMask::empty(2, 2)).is_err());
    }

    #[test]
    fn pairwise_sum_matches_serial_on_integers() {
        let v: Vec<f64> = (0..1000).map(|i| i as f64).collect();
        assert_eq!(pairwise_sum(&v), 499500.0);
    }
}
