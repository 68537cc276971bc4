//! Partial convolution checked against plain convolution and hand-computed renormalization.

use harmonize_core::autograd::{Graph, ParamStore};
use harmonize_core::nn::{Initializer, PartialConv2d};
use harmonize_core::tensor::Tensor;
use harmonize_core::Tensor64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Layer {
    store: ParamStore<f64>,
    layer: PartialConv2d,
    x: Tensor64,
    n: usize,
    h: usize,
    w: usize,
}

fn random_layer(seed: u64) -> Layer {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let kernel = [1, 3, 5][r.gen_range(0..3)];
    let stride = r.gen_range(1..=2);
    let padding = r.gen_range(0..=kernel / 2);
    let (n, cin, cout) = (r.gen_range(1..=2), r.gen_range(1..=3), r.gen_range(1..=4));
    let h = r.gen_range(kernel..kernel + 6);
    let w = r.gen_range(kernel..kernel + 6);
    let mut store = ParamStore::new();
    let mut init = Initializer::new(seed, 0.3);
    let layer = PartialConv2d::new(&mut store, "p", cin, cout, kernel, stride, padding, &mut init);
    let bias = layer.conv.bias.expect("partial conv has a bias");
    store.get_mut(bias).data_mut().iter_mut().for_each(|b| *b = r.gen_range(-1.0..1.0));
    let x = Tensor64::from_fn(vec![n, cin, h, w], |_| r.gen_range(-1.0..1.0));
    Layer { store, layer, x, n, h, w }
}

/// Number of in-image pixels under the window of output (oy, ox).
fn valid_taps(k: usize, stride: usize, pad: usize, h: usize, w: usize, oy: usize, ox: usize) -> usize {
    let count = |o: usize, len: usize| {
        (0..k).filter(|&t| (o * stride + t).checked_sub(pad).is_some_and(|p| p < len)).count()
    };
    count(oy, h) * count(ox, w)
}

/// All-ones mask: interior windows equal the biased plain convolution, border windows
/// equal the plain convolution rescaled by k² / valid taps.
pub fn check_all_ones(seed: u64) -> Result<(), String> {
    {
        let Layer { store, layer, x, n, h, w } = random_layer(seed);
        let conv = &layer.conv;
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let (partial, updated) = layer.forward(&mut g, &store, xv, &Tensor64::full(vec![n, 1, h, w], 1.0)).unwrap();
        let wv = g.param(&store, conv.weight);
        let plain_nobias = g.conv2d(xv, wv, None, conv.stride, conv.padding).unwrap();
        let (_, cout, ho, wo) = Tensor::dims4(g.value(plain_nobias)).unwrap();
        let bias = store.get(conv.bias.unwrap()).data().to_vec();
        let k = conv.kernel;
        for b in 0..n {
            for c in 0..cout {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let i = ((b * cout + c) * ho + oy) * wo + ox;
                        let taps = valid_taps(k, conv.stride, conv.padding, h, w, oy, ox);
                        let scale = (k * k) as f64 / (taps as f64 + 1e-8);
                        let expected = g.data(plain_nobias)[i] * scale + bias[c];
                        let got = g.data(partial)[i];
                        if (got - expected).abs() > 1e-6 {
                            return Err(format!("seed {seed} at {i}: {got} vs {expected}"));
                        }
                        if taps == k * k && (got - (g.data(plain_nobias)[i] + bias[c])).abs() > 1e-6 {
                            return Err(format!("seed {seed} at {i}: interior window differs from plain conv"));
                        }
                    }
                }
            }
        }
        if !updated.data().iter().all(|&m| m == 1.0) {
            return Err(format!("seed {seed}: updated mask not all ones"));
        }
    }
    Ok(())
}

/// Sparse random mask: windows without a valid pixel give exactly zero and a zero mask bit.
pub fn check_empty_windows(seed: u64) -> Result<(), String> {
    {
        let Layer { store, layer, x, n, h, w } = random_layer(seed);
        let mut r = ChaCha8Rng::seed_from_u64(seed + 1000);
        let mask = Tensor64::from_fn(vec![n, 1, h, w], |_| if r.gen_bool(0.15) { 1.0 } else { 0.0 });
        let mut g = Graph::new();
        let xv = g.constant(x);
        let (out, updated) = layer.forward(&mut g, &store, xv, &mask).unwrap();
        let (_, cout, ho, wo) = Tensor::dims4(g.value(out)).unwrap();
        let conv = &layer.conv;
        for b in 0..n {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut any = false;
                    for ky in 0..conv.kernel {
                        for kx in 0..conv.kernel {
                            let (y, x) = ((oy * conv.stride + ky) as isize - conv.padding as isize, (ox * conv.stride + kx) as isize - conv.padding as isize);
                            if y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w {
                                any |= mask.data()[(b * h + y as usize) * w + x as usize] == 1.0;
                            }
                        }
                    }
                    let m = updated.data()[(b * ho + oy) * wo + ox];
                    if m != if any { 1.0 } else { 0.0 } {
                        return Err(format!("seed {seed}: updated mask bit {m} with any={any}"));
                    }
                    if !any {
                        for c in 0..cout {
                            let v = g.data(out)[((b * cout + c) * ho + oy) * wo + ox];
                            if v.to_bits() != 0.0f64.to_bits() {
                                return Err(format!("seed {seed}: empty window gave {v}"));
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(())
}
