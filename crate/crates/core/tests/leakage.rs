//! Codes depend only on pixels inside the extraction region.

use harmonize_core::autograd::ParamStore;
use harmonize_core::extractor::{extract_domain_code, ExtractorConfig, ExtractorNet};
use harmonize_core::nn::{Initializer, RegionMask};
use harmonize_core::Tensor32;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_region(r: &mut ChaCha8Rng, side: usize) -> RegionMask {
    let (y0, x0) = (r.gen_range(0..side / 2), r.gen_range(0..side / 2));
    let (h, w) = (r.gen_range(4..side / 2), r.gen_range(4..side / 2));
    let rect = RegionMask::from_fn(side, side, |y, x| y >= y0 && y < y0 + h && x >= x0 && x < x0 + w);
    if r.gen_bool(0.5) {
        rect
    } else {
        rect.complement()
    }
}

#[test]
fn out_of_region_perturbations_leave_code_bit_identical() {
    let mut store = ParamStore::<f32>::new();
    let cfg = ExtractorConfig { code_dim: 8, widths: vec![8, 8, 16, 16, 16] };
    let net = ExtractorNet::new(&mut store, &cfg, &mut Initializer::new(3, 0.2)).unwrap();
    let mut r = ChaCha8Rng::seed_from_u64(11);
    let side = 32;
    for _ in 0..5 {
        let image = Tensor32::from_fn(vec![3, side, side], |_| r.gen_range(0.0..1.0));
        let region = random_region(&mut r, side);
        let base = extract_domain_code(&image, &region, &net, &store).unwrap();
        for _ in 0..10 {
            let mut other = image.clone();
            for (i, v) in other.data_mut().iter_mut().enumerate() {
                if !region.bits()[i % (side * side)] {
                    *v = r.gen_range(-5.0..5.0);
                }
            }
            let code = extract_domain_code(&other, &region, &net, &store).unwrap();
            let same = base.values().iter().zip(code.values()).all(|(a, b)| a.to_bits() == b.to_bits());
            assert!(same, "code changed under out-of-region perturbation");
        }
    }
}

#[test]
fn in_region_change_moves_the_code() {
    let mut store = ParamStore::<f32>::new();
    let net = ExtractorNet::new(&mut store, &ExtractorConfig::default(), &mut Initializer::new(5, 0.02)).unwrap();
    let side = 32;
    let image = Tensor32::from_fn(vec![3, side, side], |i| ((i * 7) % 13) as f32 / 13.0);
    let top = RegionMask::from_fn(side, side, |y, _| y < side / 2);
    let mut shifted = image.clone();
    for (i, v) in shifted.data_mut().iter_mut().enumerate() {
        if top.bits()[i % (side * side)] {
            *v = (*v * 0.5 + 0.4).min(1.0);
        }
    }
    let a = extract_domain_code(&image, &top, &net, &store).unwrap();
    let b = extract_domain_code(&shifted, &top, &net, &store).unwrap();
    assert!(a.distance(&b).unwrap() > 0.0);
    assert_eq!(a.distance(&a).unwrap(), 0.0);
}

#[test]
fn downsampling_plan() {
    let mut store = ParamStore::<f32>::new();
    let net = ExtractorNet::new(&mut store, &ExtractorConfig::default(), &mut Initializer::new(0, 0.02)).unwrap();
    assert_eq!(net.feature_sizes(256).last(), Some(&8));
    assert_eq!(net.feature_sizes(64).last(), Some(&2));
    let tiny = Tensor32::zeros(vec![3, 16, 16]);
    assert!(extract_domain_code(&tiny, &RegionMask::full(16, 16), &net, &store).is_err());
}
