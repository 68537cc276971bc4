use harmonize_core::nn::RegionMask;
use harmonize_core::Tensor32;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn random_pair(r: &mut ChaCha8Rng, h: usize, w: usize) -> (Tensor32, Tensor32) {
    let a = Tensor32::from_fn(vec![3, h, w], |_| r.gen_range(0.0..1.0));
    let b = Tensor32::from_fn(vec![3, h, w], |_| r.gen_range(0.0..1.0));
    (a, b)
}

/// (mse, fmse, psnr) on the 0..255 scale, one pixel at a time.
pub fn loop_oracle(pred: &Tensor32, target: &Tensor32, mask: &RegionMask) -> (f64, f64, f64) {
    let (h, w) = (mask.height(), mask.width());
    let (mut all, mut fg, mut nfg) = (0.0, 0.0, 0usize);
    for c in 0..3 {
        for y in 0..h {
            for x in 0..w {
                let i = (c * h + y) * w + x;
                let d = 255.0 * pred.data()[i] as f64 - 255.0 * target.data()[i] as f64;
                all += d * d;
                if mask.get(y, x) {
                    fg += d * d;
                    nfg += 1;
                }
            }
        }
    }
    let mse = all / (3 * h * w) as f64;
    (mse, fg / nfg as f64, 10.0 * (255.0f64 * 255.0 / mse).log10())
}

