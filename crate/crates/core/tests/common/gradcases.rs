//! Finite-difference gradient checks for every differentiable op, layer and loss.

use harmonize_core::autograd::{grad_check, CheckReport, Graph, ParamStore, Var};
use harmonize_core::extractor::{ExtractorConfig, ExtractorNet};
use harmonize_core::generator::{AttentionBlock, GeneratorConfig, GeneratorNet};
use harmonize_core::losses::{reconstruction_loss, total_loss, triplet_loss, CodeVars, LossConfig};
use harmonize_core::nn::{BatchNorm2d, Conv2d, Initializer, Mode, PartialConv2d};
use harmonize_core::{Result, Tensor64};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const EPS: f64 = 1e-4;
pub const TOL: f64 = 1e-4;
pub const INSTANCES: u64 = 5;

pub type Case = (&'static str, fn(u64) -> Result<CheckReport>);

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(0x9e37 + seed)
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor64 {
    Tensor64::from_fn(shape.to_vec(), |_| rng.gen_range(lo..hi))
}

fn random_mask(rng: &mut ChaCha8Rng, n: usize, h: usize, w: usize, p: f64) -> Tensor64 {
    let mut m = Tensor64::from_fn(vec![n, 1, h, w], |_| if rng.gen_bool(p) { 1.0 } else { 0.0 });
    for b in 0..n {
        m.data_mut()[b * h * w] = 1.0;
    }
    m
}

/// Reduces an output to a scalar with fixed random weights so that every
/// output element contributes a distinct amount.
fn project(g: &mut Graph<f64>, out: Var, seed: u64) -> Result<Var> {
    let mut r = ChaCha8Rng::seed_from_u64(seed ^ 0x5151);
    let w = Tensor64::from_fn(g.shape(out).to_vec(), |_| r.gen_range(-1.0..1.0));
    let w = g.constant(w);
    let p = g.mul(out, w)?;
    Ok(g.sum(p))
}

fn check(inputs: Vec<Tensor64>, f: impl Fn(&mut Graph<f64>, &[Var]) -> Result<Var>) -> Result<CheckReport> {
    grad_check(f, &inputs, EPS, TOL)
}

/// Checks gradients with respect to the extra inputs and every trainable
/// parameter of `store`, which are fed through `bind_param`.
fn check_module(
    store: ParamStore<f64>,
    extra: Vec<Tensor64>,
    seed: u64,
    forward: impl Fn(&mut Graph<f64>, &ParamStore<f64>, &[Var]) -> Result<Var>,
) -> Result<CheckReport> {
    let ids: Vec<_> = store.trainable().collect();
    let mut inputs = extra;
    let n_extra = inputs.len();
    inputs.extend(ids.iter().map(|&id| store.get(id).clone()));
    grad_check(
        |g, vars| {
            for (k, &id) in ids.iter().enumerate() {
                g.bind_param(&store, id, vars[n_extra + k])?;
            }
            let out = forward(g, &store, &vars[..n_extra])?;
            project(g, out, seed)
        },
        &inputs,
        EPS,
        TOL,
    )
}

fn unary(seed: u64, lo: f64, hi: f64, op: fn(&mut Graph<f64>, Var) -> Var) -> Result<CheckReport> {
    let mut r = rng(seed);
    let x = uniform(&mut r, &[2, 3, 4], lo, hi);
    check(vec![x], |g, v| {
        let y = op(g, v[0]);
        project(g, y, seed)
    })
}

fn away_from_zero(r: &mut ChaCha8Rng, shape: &[usize]) -> Tensor64 {
    Tensor64::from_fn(shape.to_vec(), |_| {
        let m = r.gen_range(0.1..2.0);
        if r.gen_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

fn case_add_sub_mul(seed: u64) -> Result<CheckReport> {
    let mut r = rng(seed);
    let shape = [3, 5];
    check(vec![uniform(&mut r, &shape, -2.0, 2.0), uniform(&mut r, &shape, -2.0, 2.0)], |g, v| {
        let s = g.add(v[0], v[1])?;
        let d = g.sub(v[0], v[1])?;
        let m = g.mul(s, d)?;
        let y = g.scale(m, 0.7);
        project(g, y, seed)
    })
}

fn case_relu(seed: u64) -> Result<CheckReport> {
    let mut r = rng(seed);
    let x = away_from_zero(&mut r, &[2, 3, 4]);
    check(vec![x], |g, v| {
        let y = g.relu(v[0]);
        project(g, y, seed)
    })
}

fn case_elu(seed: u64) -> Result<CheckReport> {
    let mut r = rng(seed);
    let x = away_from_zero(&mut r, &[2, 3, 4]);
    check(vec![x], |g, v| {
        let y = g.elu(v[0], 1.0);
        project(g, y, seed)
    })
}

fn case_sigmoid(seed: u64) -> Result<CheckReport> {
    unary(seed, -4.0, 4.0, |g, x| g.sigmoid(x))
}

fn case_tanh(seed: u64) -> Result<CheckReport> {
    unary(seed, -3.0, 3.0, |g, x| g.tanh(x))
}

fn case_abs(seed: u64) -> Result<CheckReport> {
    let mut r = rng(seed);
    let x = away_from_zero(&mut r, &[2, 3, 4]);
    check(vec![x], |g, v| {
        let y = g.abs(v[0]);
        project(g, y, seed)
    })
}

fn case_logit(seed: u64) -> Result<CheckReport> {
    unary(seed, 0.02, 0.98, |g, x| g.logit(x, 1e-3))
}

fn case_sqrt(seed: u64) -> Result<CheckReport> {
    unary(seed, 0.2, 3.0, |g, x| g.sqrt(x))
}

fn case_square(seed: u64) -> Result<CheckReport> {
    unary(seed, -2.0, 2.0, |g, x| g.square(x))
}

fn case_reductions(seed: u64) -> Result<CheckReport> {
    let mut r = rng(seed);
    check(vec![uniform(&mut r, &[3, 4], -1.0, 1.0)], |g, v| {
        let rows = g.sum_last(v[0])?;
        let sq = g.square(rows);
        let a = g.sum(sq);
        let b = g.mean(v[0]);
        let c = g.square(b);
        g.add(a, c)
    })
}

fn case_matmul(seed: u64) -> Result<CheckReport> {
    let mut r = rng(seed);
    check(vec![uniform(&mut r, &[3, 4], -1.0, 1.0), uniform(&mut r, &[4, 2], -1.0, 1.0)], |g, v| {
        let y = g.matmul(v[0], v[1])?;
        project(g, y, seed)
    })
}

fn case_conv2d(seed: u64) -> Result<CheckReport> {
    let mut r = rng(seed);
    let stride = 1 + (seed as usize % 2);
    let pad = seed as usize % 2;
    let inputs = vec![
        uniform(&mut r, &[2, 3, 6, 5], -1.0, 1.0),
        uniform(&mut r, &[4, 3, 3, 3], -0.5, 0.5),
        uniform(&mut r, &[4], -0.5, 0.5),
    ];
    check(inputs, |g, v| {
        let y = g.conv2d(v[0], v[1], Some(v[2]), stride, pad)?;
        project(g, y, seed)
    })
}

fn case_conv_layer(seed: u64) -> Result<CheckReport> {
    let mut r = rng(seed);
    let mut store = ParamStore::new();
    let mut init = Initializer::new(seed, 0.5);
    let conv = Conv2d::new(&mut store, "c", 3, 2, 1, 1, 0, true, &mut init);
    check_module(store, vec![uniform(&mut r, &[2, 3, 4, 4], -1.0, 1.0)], seed, move |g, s, v| conv.forward(g, s, v[0]))
}

fn case_partial_conv(seed: u64) -> Result<CheckReport> {
    let mut r = rng(seed);
    let mut store = ParamStore::new();
    let mut init = Initializer::new(seed, 0.5);
    let layer = PartialConv2d::new(&mut store, "p", 2, 3, 3, 2, 1, &mut init);
    let mask = random_mask(&mut r, 2, 6, 6, 0.5);
    check_module(store, vec![uniform(&mut r, &[2, 2, 6, 6], -1.0, 1.0)], seed, move |g, s, v| {
        Ok(layer.forward(g, s, v[0], &mask)?.0)
    })
}

fn case_batchnorm_train(seed: u64) -> Result<CheckReport> {
    let mut r = rng(seed);
    let mut store = ParamStore::new();
    let mut init = Initializer::new(seed, 0.5);
    let bn = BatchNorm2d::new(&mut store, "bn", 3, &mut init);
    check_module(store, vec![uniform(&mut r, &[2, 3, 3, 2], -1.0, 2.0)], seed, move |g, s, v| {
        bn.forward(g, s, v[0], Mode::Train)
    })
}

fn case_batchnorm_eval(seed: u64) -> Result<CheckReport> {
    let mut r = rng(seed);
    let mut store = ParamStore::new();
    let mut init = Initializer::new(seed, 0.5);
    let bn = BatchNorm2d::new(&mut store, "bn", 3, &mut init);
    let mean = uniform(&mut r, &[3], -0.5, 0.5);
    let var = uniform(&mut r, &[3], 0.5, 2.0);
    store.get_mut(bn.running_mean).data_mut().copy_from_slice(mean.data());
    store.get_mut(bn.running_var).data_mut().copy_from_slice(var.data());
    check_module(store, vec![uniform(&mut r, &[2, 3, 3, 2], -1.0, 2.0)], seed, move |g, s, v| {
        bn.forward(g, s, v[0], Mode::Eval)
    })
}

fn case_concat_slice(seed: u64) -> Result<CheckReport> {
    let mut r = rng(seed);
    check(vec![uniform(&mut r, &[2, 2, 3, 3], -1.0, 1.0), uniform(&mut r, &[2, 3, 3, 3], -1.0, 1.0)], |g, v| {
        let c = g.concat(&[v[0], v[1]])?;
        let s = g.slice_channels(c, 1, 3)?;
        let sq = g.square(s);
        project(g, sq, seed)
    })
}

fn case_upsample(seed: u64) -> Result<CheckReport> {
    let mut r = rng(seed);
    check(vec![uniform(&mut r, &[2, 2, 3, 2], -1.0, 1.0)], |g, v| {
        let u = g.upsample_nearest(v[0], 2)?;
        let sq = g.square(u);
        project(g, sq, seed)
    })
}

fn case_pooling(seed: u64) -> Result<CheckReport> {
    let mut r = rng(seed);
    let mask = random_mask(&mut r, 2, 4, 4, 0.4);
    check(vec![uniform(&mut r, &[2, 3, 4, 4], -1.0, 1.0)], move |g, v| {
        let a = g.global_avg_pool(v[0])?;
        let b = g.masked_avg_pool(v[0], &mask)?;
        let a = g.reshape(a, &[2, 3])?;
        let b = g.reshape(b, &[2, 3])?;
        let prod = g.mul(a, b)?;
        let rep = g.replicate(prod, 2, 3)?;
        project(g, rep, seed)
    })
}

fn case_spatial_scale_bias(seed: u64) -> Result<CheckReport> {
    let mut r = rng(seed);
    let scale = Tensor64::from_fn(vec![2, 3, 3], |i| if i % 4 == 0 { 0.0 } else { 1.0 + (i % 3) as f64 });
    let gate = Tensor64::from_fn(vec![2, 3, 3], |i| (i % 2) as f64);
    check(vec![uniform(&mut r, &[2, 2, 3, 3], -1.0, 1.0), uniform(&mut r, &[2], -1.0, 1.0)], move |g, v| {
        let s = g.spatial_scale(v[0], &scale)?;
        let b = g.channel_bias(s, v[1], Some(&gate))?;
        let sq = g.square(b);
        project(g, sq, seed)
    })
}

fn case_attention(seed: u64) -> Result<CheckReport> {
    let mut r = rng(seed);
    let mut store = ParamStore::new();
    let mut init = Initializer::new(seed, 0.5);
    let block = AttentionBlock::new(&mut store, "att", 4, &mut init);
    let inputs = vec![uniform(&mut r, &[2, 2, 3, 3], -1.0, 1.0), uniform(&mut r, &[2, 2, 3, 3], -1.0, 1.0)];
    check_module(store, inputs, seed, move |g, s, v| Ok(block.forward(g, s, v[0], v[1])?.0))
}

fn case_extractor(seed: u64) -> Result<CheckReport> {
    let mut r = rng(seed);
    let mut store = ParamStore::new();
    let mut init = Initializer::new(seed, 0.5);
    let cfg = ExtractorConfig { code_dim: 3, widths: vec![2, 2, 2] };
    let net = ExtractorNet::new(&mut store, &cfg, &mut init)?;
    let mask = random_mask(&mut r, 2, 8, 8, 0.5);
    check_module(store, vec![uniform(&mut r, &[2, 3, 8, 8], 0.0, 1.0)], seed, move |g, s, v| {
        net.forward(g, s, v[0], &mask, Mode::Train)
    })
}

fn case_generator(seed: u64) -> Result<CheckReport> {
    let mut r = rng(seed);
    let mut store = ParamStore::new();
    let mut init = Initializer::new(seed, 0.3);
    let cfg = GeneratorConfig { code_dim: 2, depth: 2, base_width: 2, max_width: 3, batchnorm: true };
    let net = GeneratorNet::new(&mut store, &cfg, &mut init)?;
    let mut input = uniform(&mut r, &[2, 6, 8, 8], 0.05, 0.95);
    for b in 0..2 {
        for i in 0..64 {
            input.data_mut()[(b * 6 + 3) * 64 + i] = (i % 3 == 0) as u8 as f64;
        }
    }
    check_module(store, vec![input], seed, move |g, s, v| net.forward(g, s, v[0], Mode::Train))
}

fn case_reconstruction(seed: u64) -> Result<CheckReport> {
    let mut r = rng(seed);
    let a = uniform(&mut r, &[2, 3, 2, 2], 0.0, 1.0);
    let b = Tensor64::from_fn(a.shape().to_vec(), |i| a.data()[i] + if i % 2 == 0 { 0.3 } else { -0.3 });
    check(vec![a, b], |g, v| reconstruction_loss(g, v[0], v[1]))
}

fn case_triplet(seed: u64) -> Result<CheckReport> {
    let mut r = rng(seed);
    let inputs = vec![
        uniform(&mut r, &[3, 4], -1.0, 1.0),
        uniform(&mut r, &[3, 4], -1.0, 1.0),
        uniform(&mut r, &[3, 4], -1.0, 1.0),
    ];
    check(inputs, |g, v| triplet_loss(g, v[0], v[1], v[2], 1.5))
}

fn case_total_loss(seed: u64) -> Result<CheckReport> {
    let mut r = rng(seed);
    let out = uniform(&mut r, &[2, 3, 2, 2], 0.0, 1.0);
    let real = Tensor64::from_fn(out.shape().to_vec(), |i| out.data()[i] + if i % 3 == 0 { 0.2 } else { -0.2 });
    let mut inputs = vec![out, real];
    for _ in 0..4 {
        inputs.push(uniform(&mut r, &[2, 3], -1.0, 1.0));
    }
    check(inputs, |g, v| {
        let codes = CodeVars { composite_fg: v[2], background: v[3], real_fg: v[4], harmonized_fg: v[5] };
        let cfg = LossConfig { margin: 2.0, lambda: 0.5 };
        Ok(total_loss(g, v[0], v[1], &codes, &cfg)?.total)
    })
}

pub fn cases() -> Vec<Case> {
    vec![
        ("add/sub/mul/scale", case_add_sub_mul),
        ("relu", case_relu),
        ("elu", case_elu),
        ("sigmoid", case_sigmoid),
        ("tanh", case_tanh),
        ("abs", case_abs),
        ("sqrt", case_sqrt),
        ("logit", case_logit),
        ("square", case_square),
        ("sum/mean/sum_last", case_reductions),
        ("matmul", case_matmul),
        ("conv2d", case_conv2d),
        ("Conv2d layer", case_conv_layer),
        ("PartialConv2d", case_partial_conv),
        ("BatchNorm2d train", case_batchnorm_train),
        ("BatchNorm2d eval", case_batchnorm_eval),
        ("concat/slice", case_concat_slice),
        ("upsample", case_upsample),
        ("pooling/replicate", case_pooling),
        ("spatial_scale/channel_bias", case_spatial_scale_bias),
        ("AttentionBlock", case_attention),
        ("ExtractorNet", case_extractor),
        ("GeneratorNet", case_generator),
        ("reconstruction loss", case_reconstruction),
        ("triplet loss", case_triplet),
        ("total loss", case_total_loss),
    ]
}
