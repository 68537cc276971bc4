use crate::error::{shape_err, Result};
use crate::nn::RegionMask;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Sample positions and weights for one axis (half-pixel centers, edge clamped).
fn taps(input: usize, output: usize) -> Vec<(usize, usize, f64)> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (input - 1) as f64);
            let lo = src.floor() as usize;
            let hi = (lo + 1).min(input - 1);
            (lo, hi, src - lo as f64)
        })
        .collect()
}

/// Bilinear resize of a (C, H, W) tensor.
pub fn resize_bilinear<T: Scalar>(image: &Tensor<T>, height: usize, width: usize) -> Result<Tensor<T>> {
    let (c, h, w) = image.dims3()?;
    if height == 0 || width == 0 {
        return Err(shape_err("resize_bilinear", "target size must be positive"));
    }
    if (h, w) == (height, width) {
        return Ok(image.clone());
    }
    let ty = taps(h, height);
    let tx = taps(w, width);
    let src = image.data();
    let mut out = Vec::with_capacity(c * height * width);
    for ch in 0..c {
        let plane = &src[ch * h * w..(ch + 1) * h * w];
        for &(y0, y1, fy) in &ty {
            for &(x0, x1, fx) in &tx {
                let v00 = plane[y0 * w + x0].as_f64();
                let v01 = plane[y0 * w + x1].as_f64();
                let v10 = plane[y1 * w + x0].as_f64();
                let v11 = plane[y1 * w + x1].as_f64();
                let top = v00 + (v01 - v00) * fx;
                let bottom = v10 + (v11 - v10) * fx;
                out.push(T::of(top + (bottom - top) * fy));
            }
        }
    }
    Tensor::new(vec![c, height, width], out)
}

/// Resizes a mask bilinearly and re-binarizes at 0.5.
pub fn resize_mask(mask: &RegionMask, height: usize, width: usize) -> Result<RegionMask> {
    if (mask.height(), mask.width()) == (height, width) {
        return Ok(mask.clone());
    }
    let resized = resize_bilinear(&mask.to_tensor::<f64>(), height, width)?;
    RegionMask::from_values(height, width, resized.data())
}
