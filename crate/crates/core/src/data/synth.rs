//! Synthetic composites built from smooth scenes with a per-image color domain.
//!
//! Each real image is a low-frequency luminance field rendered through a
//! per-channel affine "capture" transform. A composite re-renders the
//! foreground through an extra per-channel gain/bias/gamma shift, so the
//! background is untouched and the foreground appearance disagrees with it.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::dataset::{save_triplet, write_split_file, ImageTriplet, Split};
use crate::error::{Error, Result};
use crate::nn::RegionMask;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShapeFamily {
    Rectangles,
    Ellipses,
    Both,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub seed: u64,
    pub resolution: usize,
    pub gain: (f64, f64),
    pub bias: (f64, f64),
    pub gamma: (f64, f64),
    pub ratio: (f64, f64),
    pub shapes: ShapeFamily,
}

impl SynthSpec {
    pub fn new(seed: u64, resolution: usize) -> Self {
        Self {
            seed,
            resolution,
            gain: (0.5, 1.5),
            bias: (-0.2, 0.2),
            gamma: (0.7, 1.4),
            ratio: (0.05, 0.4),
            shapes: ShapeFamily::Both,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ordered = |name: &str, (lo, hi): (f64, f64)| {
            if lo.is_finite() && hi.is_finite() && lo <= hi {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} range [{lo}, {hi}] is not ordered")))
            }
        };
        ordered("gain", self.gain)?;
        ordered("bias", self.bias)?;
        ordered("gamma", self.gamma)?;
        ordered("ratio", self.ratio)?;
        if self.gamma.0 <= 0.0 {
            return Err(Error::Config("gamma must be positive".into()));
        }
        if self.ratio.0 <= 0.0 || self.ratio.1 >= 1.0 {
            return Err(Error::Config("foreground ratio range must lie inside (0, 1)".into()));
        }
        if self.resolution < 8 {
            return Err(Error::Config(format!("resolution {} is too small", self.resolution)));
        }
        Ok(())
    }

    /// Independent generator for item `index`, so items do not depend on order.
    pub fn item_rng(&self, index: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(index);
        rng
    }
}

/// Per-channel foreground appearance transform `clamp(gain * v^gamma + bias)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ColorShift {
    pub gain: [f64; 3],
    pub bias: [f64; 3],
    pub gamma: [f64; 3],
}

impl ColorShift {
    pub fn identity() -> Self {
        Self { gain: [1.0; 3], bias: [0.0; 3], gamma: [1.0; 3] }
    }

    pub fn sample(spec: &SynthSpec, rng: &mut impl Rng) -> Self {
        let mut s = Self::identity();
        for c in 0..3 {
            s.gain[c] = uniform(rng, spec.gain);
            s.bias[c] = uniform(rng, spec.bias);
            s.gamma[c] = uniform(rng, spec.gamma);
        }
        s
    }

    pub fn apply(&self, v: f64, channel: usize) -> f64 {
        (self.gain[channel] * v.max(0.0).powf(self.gamma[channel]) + self.bias[channel]).clamp(0.0, 1.0)
    }
}

fn uniform(rng: &mut impl Rng, (lo, hi): (f64, f64)) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.gen_range(lo..hi)
    }
}

struct Wave {
    fx: f64,
    fy: f64,
    phase: f64,
    amp: f64,
}

fn smooth_field(rng: &mut impl Rng, waves: usize) -> Vec<Wave> {
    (0..waves)
        .map(|_| Wave {
            fx: rng.gen_range(-3.0..3.0),
            fy: rng.gen_range(-3.0..3.0),
            phase: rng.gen_range(0.0..2.0 * PI),
            amp: rng.gen_range(0.3..1.0),
        })
        .collect()
}

fn eval_field(waves: &[Wave], u: f64, v: f64) -> f64 {
    let norm: f64 = waves.iter().map(|w| w.amp).sum();
    waves.iter().map(|w| w.amp * (2.0 * PI * (w.fx * u + w.fy * v) + w.phase).cos()).sum::<f64>() / norm
}

/// Renders one real image of size (3, res, res) in [0, 1].
pub fn synth_real_image(resolution: usize, rng: &mut impl Rng) -> Tensor<f32> {
    let luminance = smooth_field(rng, 6);
    let tints: Vec<Vec<Wave>> = (0..3).map(|_| smooth_field(rng, 2)).collect();
    let mut lo = [0.0; 3];
    let mut hi = [0.0; 3];
    for c in 0..3 {
        lo[c] = rng.gen_range(0.0..0.3);
        hi[c] = rng.gen_range(0.65..1.0);
    }
    let plane = resolution * resolution;
    let mut data = vec![0.0f32; 3 * plane];
    for y in 0..resolution {
        for x in 0..resolution {
            let u = (x as f64 + 0.5) / resolution as f64;
            let v = (y as f64 + 0.5) / resolution as f64;
            let l = 0.5 + 0.45 * eval_field(&luminance, u, v);
            for c in 0..3 {
                let t = 0.5 + 0.45 * eval_field(&tints[c], u, v);
                let mixed = 0.8 * l + 0.2 * t;
                data[c * plane + y * resolution + x] = (lo[c] + (hi[c] - lo[c]) * mixed).clamp(0.0, 1.0) as f32;
            }
        }
    }
    Tensor::new(vec![3, resolution, resolution], data).expect("shape matches data")
}

fn shape_mask(resolution: usize, ratio: f64, ellipse: bool, rng: &mut impl Rng) -> RegionMask {
    let r = resolution as f64;
    let area = ratio * r * r;
    let aspect = (rng.gen_range((0.5f64).ln()..(2.0f64).ln())).exp();
    if ellipse {
        let ry = (area * aspect / PI).sqrt().min(r / 2.0);
        let rx = (area / (PI * ry)).min(r / 2.0);
        let cy = rng.gen_range(ry..=(r - ry));
        let cx = rng.gen_range(rx..=(r - rx));
        RegionMask::from_fn(resolution, resolution, |y, x| {
            let dy = (y as f64 + 0.5 - cy) / ry;
            let dx = (x as f64 + 0.5 - cx) / rx;
            dy * dy + dx * dx <= 1.0
        })
    } else {
        let h = ((area * aspect).sqrt().round() as usize).clamp(1, resolution);
        let w = ((area / h as f64).round() as usize).clamp(1, resolution);
        let y0 = rng.gen_range(0..=resolution - h);
        let x0 = rng.gen_range(0..=resolution - w);
        RegionMask::from_fn(resolution, resolution, |y, x| y >= y0 && y < y0 + h && x >= x0 && x < x0 + w)
    }
}

/// Samples a foreground mask whose pixel ratio lies in `spec.ratio`.
pub fn sample_mask(spec: &SynthSpec, rng: &mut impl Rng) -> RegionMask {
    let (lo, hi) = spec.ratio;
    let mut last = None;
    for _ in 0..200 {
        let ratio = uniform(rng, (lo.ln(), hi.ln())).exp();
        let ellipse = match spec.shapes {
            ShapeFamily::Rectangles => false,
            ShapeFamily::Ellipses => true,
            ShapeFamily::Both => rng.gen_bool(0.5),
        };
        let mask = shape_mask(spec.resolution, ratio, ellipse, rng);
        let got = mask.ratio();
        if got >= lo && got <= hi {
            return mask;
        }
        last = Some(mask);
    }
    last.expect("at least one attempt")
}

/// Applies `shift` inside `mask`; pixels outside the mask are copied bit-exactly.
pub fn apply_shift(real: &Tensor<f32>, mask: &RegionMask, shift: &ColorShift) -> Result<Tensor<f32>> {
    let (c, h, w) = real.dims3()?;
    if c != 3 || (h, w) != (mask.height(), mask.width()) {
        return Err(crate::error::shape_err("apply_shift", format!("image {:?} vs mask {}x{}", real.shape(), mask.height(), mask.width())));
    }
    let mut out = real.clone();
    let plane = h * w;
    for (ch, chunk) in out.data_mut().chunks_mut(plane).enumerate() {
        for (i, v) in chunk.iter_mut().enumerate() {
            if mask.bits()[i] {
                *v = shift.apply(*v as f64, ch) as f32;
            }
        }
    }
    Ok(out)
}

/// Builds one composite/real/mask triplet from a real image.
pub fn synthesize_composite(real: Tensor<f32>, spec: &SynthSpec, rng: &mut impl Rng, id: &str) -> Result<ImageTriplet> {
    spec.validate()?;
    let (_, h, w) = real.dims3()?;
    if (h, w) != (spec.resolution, spec.resolution) {
        return Err(crate::error::shape_err("synthesize_composite", format!("real image is {h}x{w}, spec wants {}", spec.resolution)));
    }
    let mask = sample_mask(spec, rng);
    let shift = ColorShift::sample(spec, rng);
    let composite = apply_shift(&real, &mask, &shift)?;
    Ok(ImageTriplet { id: id.to_string(), composite, real, mask })
}

fn generate_item(spec: &SynthSpec, index: u64) -> Result<ImageTriplet> {
    let mut rng = spec.item_rng(index);
    let real = synth_real_image(spec.resolution, &mut rng);
    synthesize_composite(real, spec, &mut rng, &format!("s{index:05}"))
}

/// Writes a full synthetic dataset and its split files under `root`.
pub fn write_synthetic_dataset(root: &Path, spec: &SynthSpec, n_train: usize, n_test: usize) -> Result<Vec<ImageTriplet>> {
    spec.validate()?;
    fs::create_dir_all(root)?;
    let mut items = Vec::with_capacity(n_train + n_test);
    for index in 0..(n_train + n_test) as u64 {
        let item = generate_item(spec, index)?;
        save_triplet(root, &item)?;
        items.push(item);
    }
    let ids: Vec<String> = items.iter().map(|t| t.id.clone()).collect();
    write_split_file(root, Split::Train, &ids[..n_train])?;
    write_split_file(root, Split::Test, &ids[n_train..])?;
    Ok(items)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_shift_keeps_composite_equal_to_real() {
        let spec = SynthSpec::new(3, 32);
        let mut rng = spec.item_rng(0);
        let real = synth_real_image(32, &mut rng);
        let mask = sample_mask(&spec, &mut rng);
        let comp = apply_shift(&real, &mask, &ColorShift::identity()).unwrap();
        assert_eq!(comp, real);
    }

    #[test]
    fn background_is_bit_exact() {
        let spec = SynthSpec::new(11, 32);
        let mut rng = spec.item_rng(4);
        let real = synth_real_image(32, &mut rng);
        let t = synthesize_composite(real, &spec, &mut rng, "x").unwrap();
        let plane = 32 * 32;
        for c in 0..3 {
            for i in 0..plane {
                if !t.mask.bits()[i] {
                    assert_eq!(t.composite.data()[c * plane + i].to_bits(), t.real.data()[c * plane + i].to_bits());
                }
            }
        }
    }

    #[test]
    fn mask_ratio_within_range() {
        let spec = SynthSpec::new(5, 64);
        for i in 0..50 {
            let mut rng = spec.item_rng(i);
            let r = sample_mask(&spec, &mut rng).ratio();
            assert!((0.05..=0.4).contains(&r), "ratio {r}");
        }
    }

    #[test]
    fn items_are_deterministic() {
        let spec = SynthSpec::new(9, 32);
        let a = generate_item(&spec, 2).unwrap();
        let b = generate_item(&spec, 2).unwrap();
        assert_eq!(a.composite, b.composite);
        assert_eq!(a.mask, b.mask);
    }

    #[test]
    fn bad_ranges_rejected() {
        let mut spec = SynthSpec::new(0, 32);
        spec.gain = (2.0, 1.0);
        assert!(spec.validate().is_err());
    }
}
