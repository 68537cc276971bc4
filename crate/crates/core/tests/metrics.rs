//! Metrics, binning and requirement ratios against straightforward loop oracles.

mod common;

use common::oracles::{loop_oracle, random_pair};

use harmonize_core::extractor::DomainCode;
use harmonize_core::losses::CodeQuadruple;
use harmonize_core::metrics::{
    bin_by_fg_ratio, compute_metrics, psnr_from_mse, requirement_ratios, MetricRecord, RATIO_BINS,
};
use harmonize_core::nn::RegionMask;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn full_mask_fmse_equals_mse_exactly() {
    let mut r = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..100 {
        let (h, w) = (r.gen_range(1..20), r.gen_range(1..20));
        let (a, b) = random_pair(&mut r, h, w);
        let rec = compute_metrics("x", &a, &b, &RegionMask::full(h, w)).unwrap();
        assert_eq!(rec.fmse.to_bits(), rec.mse.to_bits());
    }
}

#[test]
fn metrics_match_loop_oracle() {
    let mut r = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..100 {
        let (h, w) = (r.gen_range(2..24), r.gen_range(2..24));
        let (a, b) = random_pair(&mut r, h, w);
        let bits: Vec<bool> = (0..h * w).map(|_| r.gen_bool(0.3)).collect();
        let mut mask = RegionMask::new(h, w, bits).unwrap();
        if mask.is_empty() {
            mask = RegionMask::full(h, w);
        }
        let rec = compute_metrics("x", &a, &b, &mask).unwrap();
        let (mse, fmse, psnr) = loop_oracle(&a, &b, &mask);
        assert!((rec.mse - mse).abs() <= 1e-6 * mse.max(1.0));
        assert!((rec.fmse - fmse).abs() <= 1e-6 * fmse.max(1.0));
        assert!((rec.psnr - psnr).abs() <= 1e-6);
        assert_eq!(rec.fg_ratio, mask.count() as f64 / (h * w) as f64);
    }
}

#[test]
fn bin_means_match_loop_oracle() {
    let records: Vec<MetricRecord> = [(0.02, 10.0, 40.0), (0.10, 20.0, 60.0), (0.30, 30.0, 90.0)]
        .iter()
        .map(|&(fg_ratio, mse, fmse)| MetricRecord { id: String::new(), mse, fmse, psnr: psnr_from_mse(mse), fg_ratio })
        .collect();
    let bins = bin_by_fg_ratio(&records).unwrap();
    let labels: Vec<&str> = bins.iter().map(|b| b.bin.label).collect();
    assert_eq!(labels, ["0-5%", "5-15%", "15-100%", "0-100%"]);
    for b in &bins {
        let members: Vec<&MetricRecord> = records.iter().filter(|r| b.bin.contains(r.fg_ratio)).collect();
        let mse = members.iter().map(|r| r.mse).sum::<f64>() / members.len() as f64;
        let fmse = members.iter().map(|r| r.fmse).sum::<f64>() / members.len() as f64;
        assert_eq!(b.mse, Some(mse));
        assert_eq!(b.fmse, Some(fmse));
    }
    assert_eq!(bins[3].count, 3);
    assert_eq!(bins[3].mse, Some(20.0));
}

#[test]
fn bin_edges_follow_left_open_right_closed_rule() {
    let membership = |ratio: f64| RATIO_BINS.iter().map(|b| b.contains(ratio)).collect::<Vec<_>>();
    assert_eq!(membership(0.0), [true, false, false, true]);
    assert_eq!(membership(0.05), [true, false, false, true]);
    assert_eq!(membership(0.050001), [false, true, false, true]);
    assert_eq!(membership(0.15), [false, true, false, true]);
    assert_eq!(membership(1.0), [false, false, true, true]);
}

#[test]
fn psnr_strictly_decreases_with_mse() {
    let mut r = ChaCha8Rng::seed_from_u64(3);
    let mut values: Vec<f64> = (0..500).map(|_| 10f64.powf(r.gen_range(-4.0..4.5))).collect();
    values.sort_by(f64::total_cmp);
    for pair in values.windows(2) {
        if pair[0] < pair[1] {
            assert!(psnr_from_mse(pair[0]) > psnr_from_mse(pair[1]));
        }
    }
    assert_eq!(psnr_from_mse(0.0), 100.0);
}

fn random_code(r: &mut ChaCha8Rng, dim: usize) -> DomainCode<f64> {
    DomainCode::new((0..dim).map(|_| r.gen_range(-1.0..1.0)).collect()).unwrap()
}

#[test]
fn requirement_ratios_match_loop_oracle() {
    let mut r = ChaCha8Rng::seed_from_u64(4);
    let quads: Vec<CodeQuadruple<f64>> = (0..100)
        .map(|_| {
            CodeQuadruple::new(random_code(&mut r, 4), random_code(&mut r, 4), random_code(&mut r, 4), random_code(&mut r, 4))
                .unwrap()
        })
        .collect();
    let d = |a: &DomainCode<f64>, b: &DomainCode<f64>| {
        a.values().iter().zip(b.values()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
    };
    let mut hits = [0usize; 6];
    let mut all = 0;
    for q in &quads {
        let (b, f, fh, fc) = (&q.background, &q.real_fg, &q.harmonized_fg, &q.composite_fg);
        let checks = [
            d(b, f) < d(b, fc),
            d(b, fh) < d(b, fc),
            d(f, fh) < d(f, fc),
            d(fh, f) < d(fh, fc),
            d(fh, b) < d(fh, fc),
            d(f, b) < d(f, fc),
        ];
        for k in 0..6 {
            hits[k] += checks[k] as usize;
        }
        all += checks.iter().all(|&c| c) as usize;
    }
    let report = requirement_ratios(&quads).unwrap();
    for k in 0..6 {
        assert_eq!(report.ratios[k], hits[k] as f64 / 100.0);
    }
    assert_eq!(report.all_six, all as f64 / 100.0);
}

proptest! {
    #[test]
    fn fmse_ignores_background(seed in 0u64..1000, h in 2usize..12, w in 2usize..12) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let (a, b) = random_pair(&mut r, h, w);
        let mask = RegionMask::from_fn(h, w, |y, x| (y + x) % 3 == 0);
        let mut a2 = a.clone();
        let mut b2 = b.clone();
        for i in 0..a.numel() {
            if !mask.bits()[i % (h * w)] {
                a2.data_mut()[i] = r.gen_range(0.0..1.0);
                b2.data_mut()[i] = r.gen_range(0.0..1.0);
            }
        }
        let x = compute_metrics("x", &a, &b, &mask).unwrap();
        let y = compute_metrics("x", &a2, &b2, &mask).unwrap();
        prop_assert_eq!(x.fmse.to_bits(), y.fmse.to_bits());
    }

    #[test]
    fn all_six_never_exceeds_any_ratio(seed in 0u64..1000, n in 1usize..30, dim in 1usize..5) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let quads: Vec<_> = (0..n)
            .map(|_| CodeQuadruple::new(random_code(&mut r, dim), random_code(&mut r, dim), random_code(&mut r, dim), random_code(&mut r, dim)).unwrap())
            .collect();
        let rep = requirement_ratios(&quads).unwrap();
        for k in 0..6 {
            prop_assert!(rep.all_six <= rep.ratios[k]);
            prop_assert!((0.0..=1.0).contains(&rep.ratios[k]));
        }
    }

    #[test]
    fn code_distance_is_a_metric(seed in 0u64..1000, dim in 1usize..8) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let (a, b, c) = (random_code(&mut r, dim), random_code(&mut r, dim), random_code(&mut r, dim));
        let ab = a.distance(&b).unwrap();
        prop_assert!(ab >= 0.0);
        prop_assert_eq!(ab, b.distance(&a).unwrap());
        prop_assert!(a.distance(&c).unwrap() <= ab + b.distance(&c).unwrap() + 1e-12);
    }
}
