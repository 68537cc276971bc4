use std::path::Path;

use image::{GrayImage, ImageBuffer, Luma, Rgb, RgbImage};

use crate::error::{Error, Result};
use crate::nn::RegionMask;
use crate::tensor::Tensor;

/// [0, 1] -> nearest 8-bit level.
pub fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Decodes an image file into a (3, H, W) tensor in [0, 1].
pub fn load_rgb(path: &Path) -> Result<Tensor<f32>> {
    let img = image::open(path)?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0.0f32; 3 * h * w];
    for (x, y, px) in img.enumerate_pixels() {
        for c in 0..3 {
            data[(c * h + y as usize) * w + x as usize] = px[c] as f32 / 255.0;
        }
    }
    Tensor::new(vec![3, h, w], data)
}

/// Decodes a grayscale mask, binarized at 0.5 of full scale.
pub fn load_mask(path: &Path) -> Result<RegionMask> {
    let img = image::open(path)?.to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let values: Vec<f32> = img.pixels().map(|p| p[0] as f32 / 255.0).collect();
    RegionMask::from_values(h, w, &values)
}

pub fn save_rgb(path: &Path, image: &Tensor<f32>) -> Result<()> {
    let (c, h, w) = image.dims3()?;
    if c != 3 {
        return Err(Error::Invalid(format!("save_rgb expects 3 channels, got {c}")));
    }
    let d = image.data();
    let buf: RgbImage = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        let i = y as usize * w + x as usize;
        Rgb([quantize(d[i]), quantize(d[h * w + i]), quantize(d[2 * h * w + i])])
    });
    buf.save(path)?;
    Ok(())
}

pub fn save_mask(path: &Path, mask: &RegionMask) -> Result<()> {
    let buf: GrayImage = ImageBuffer::from_fn(mask.width() as u32, mask.height() as u32, |x, y| {
        Luma([if mask.get(y as usize, x as usize) { 255 } else { 0 }])
    });
    buf.save(path)?;
    Ok(())
}
