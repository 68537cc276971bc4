//! Tape-based reverse-mode differentiation.
//!
//! Every forward op appends a node holding its output value. Nodes are
//! stored in creation order, which is a topological order, so `backward`
//! is a single reverse sweep. Parameters are copied into the tape through
//! [`Graph::param`]; a parameter bound twice maps to the same node, so
//! gradients from every use accumulate in one place.

use std::collections::HashMap;
use std::fmt;

use crate::autograd::kernels::{conv2d_backward, conv2d_forward, ConvGeom};
use crate::autograd::params::{ParamId, ParamStore};
use crate::error::{shape_err, Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Backward rule for [`Graph::custom`]: receives the input values, the
/// output value and the output gradient; returns one gradient per input.
pub type CustomBackward<T> = Box<dyn Fn(&[&[T]], &[T], &[T]) -> Vec<Vec<T>> + Send + Sync>;

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Relu(Var),
    Elu(Var, T),
    Sigmoid(Var),
    Tanh(Var),
    Abs(Var),
    Sqrt(Var),
    Logit(Var, T),
    Square(Var),
    Sum(Var),
    Mean(Var),
    SumLast(Var, usize),
    MatMul(Var, Var, [usize; 3]),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    SpatialScale {
        x: Var,
        scale: Vec<T>,
    },
    ChannelBias {
        x: Var,
        b: Var,
        gate: Option<Vec<T>>,
    },
    BatchNormTrain {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    ChannelAffine {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<T>,
        inv_std: Vec<T>,
    },
    Concat(Vec<Var>),
    SliceChannels {
        x: Var,
        start: usize,
    },
    Upsample(Var, usize),
    GlobalAvgPool(Var),
    MaskedAvgPool {
        x: Var,
        mask: Vec<T>,
        counts: Vec<T>,
    },
    Replicate(Var),
    Reshape(Var),
    Custom(Vec<Var>, CustomBackward<T>),
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Relu(_) => "relu",
            Op::Elu(..) => "elu",
            Op::Sigmoid(_) => "sigmoid",
            Op::Tanh(_) => "tanh",
            Op::Abs(_) => "abs",
            Op::Sqrt(_) => "sqrt",
            Op::Logit(..) => "logit",
            Op::Square(_) => "square",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::SumLast(..) => "sum_last",
            Op::MatMul(..) => "matmul",
            Op::Conv2d { .. } => "conv2d",
            Op::SpatialScale { .. } => "spatial_scale",
            Op::ChannelBias { .. } => "channel_bias",
            Op::BatchNormTrain { .. } => "batchnorm",
            Op::ChannelAffine { .. } => "channel_affine",
            Op::Concat(_) => "concat",
            Op::SliceChannels { .. } => "slice_channels",
            Op::Upsample(..) => "upsample",
            Op::GlobalAvgPool(_) => "global_avg_pool",
            Op::MaskedAvgPool { .. } => "masked_avg_pool",
            Op::Replicate(_) => "replicate",
            Op::Reshape(_) => "reshape",
            Op::Custom(..) => "custom",
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    grad: Option<Vec<T>>,
}

pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    bindings: HashMap<ParamId, Var>,
    buffer_updates: Vec<(ParamId, Vec<T>)>,
}

impl<T> fmt::Debug for Graph<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Graph")
            .field("nodes", &self.nodes.len())
            .field("bindings", &self.bindings.len())
            .finish()
    }
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn same_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<()> {
    if a != b {
        return Err(shape_err(op, format!("{a:?} vs {b:?}")));
    }
    Ok(())
}

fn nchw(op: &'static str, shape: &[usize]) -> Result<(usize, usize, usize, usize)> {
    match *shape {
        [n, c, h, w] => Ok((n, c, h, w)),
        _ => Err(shape_err(op, format!("expected NCHW input, got {shape:?}"))),
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            bindings: HashMap::new(),
            buffer_updates: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn data(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].value.requires_grad()
    }

    /// Accumulated gradient of a node after `backward`.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.0].op.name()
    }

    pub(crate) fn bindings(&self) -> impl Iterator<Item = (ParamId, Var)> + '_ {
        self.bindings.iter().map(|(&id, &v)| (id, v))
    }

    pub(crate) fn push_buffer_update(&mut self, id: ParamId, values: Vec<T>) {
        self.buffer_updates.push((id, values));
    }

    pub(crate) fn take_buffer_updates(&mut self) -> Vec<(ParamId, Vec<T>)> {
        std::mem::take(&mut self.buffer_updates)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let track = inputs.iter().any(|&v| self.requires_grad(v));
        let op = if track { op } else { Op::Leaf };
        self.nodes.push(Node {
            value: value.with_requires_grad(track),
            op,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_raw(&mut self, shape: Vec<usize>, data: Vec<T>, op: Op<T>, inputs: &[Var]) -> Result<Var> {
        let value = Tensor::new(shape, data)?;
        Ok(self.push(value, op, inputs))
    }

    /// Adds an input tensor. Gradients are tracked iff `tensor.requires_grad()`.
    pub fn leaf(&mut self, tensor: Tensor<T>) -> Var {
        let flag = tensor.requires_grad();
        let mut t = tensor;
        t.zero_grad();
        self.nodes.push(Node {
            value: t.with_requires_grad(flag),
            op: Op::Leaf,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Constant input (never receives a gradient).
    pub fn constant(&mut self, tensor: Tensor<T>) -> Var {
        self.leaf(tensor.with_requires_grad(false))
    }

    /// Binds a stored parameter or buffer, reusing the node if already bound.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.bindings.get(&id) {
            return v;
        }
        let v = self.leaf(store.get(id).clone());
        self.bindings.insert(id, v);
        v
    }

    /// Uses the existing node `var` wherever parameter `id` is bound later.
    /// Lets gradient checks drive layer parameters as ordinary inputs.
    pub fn bind_param(&mut self, store: &ParamStore<T>, id: ParamId, var: Var) -> Result<()> {
        same_shape("bind_param", store.get(id).shape(), self.shape(var))?;
        if self.bindings.contains_key(&id) {
            return Err(Error::Invalid(format!("parameter `{}` is already bound", store.name(id))));
        }
        self.bindings.insert(id, var);
        Ok(())
    }

    /// Copy of `v` that blocks gradient flow.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.value(v).clone();
        self.constant(t)
    }

    fn binary(
        &mut self,
        op_name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
        op: Op<T>,
    ) -> Result<Var> {
        same_shape(op_name, self.shape(a), self.shape(b))?;
        let data = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.shape(a).to_vec();
        self.push_raw(shape, data, op, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    fn unary(&mut self, a: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let value = self.value(a).map(f);
        self.push(value, op, &[a])
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        self.unary(a, |x| x * c, Op::Scale(a, c))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| if x > T::zero() { x } else { T::zero() }, Op::Relu(a))
    }

    pub fn elu(&mut self, a: Var, alpha: T) -> Var {
        self.unary(
            a,
            |x| if x > T::zero() { x } else { alpha * x.exp_m1() },
            Op::Elu(a, alpha),
        )
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, |x| T::one() / (T::one() + (-x).exp()), Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.tanh(), Op::Tanh(a))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.abs(), Op::Abs(a))
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.sqrt(), Op::Sqrt(a))
    }

    /// `ln(p / (1 - p))` with `p = clamp(x, eps, 1 - eps)`; zero gradient where clamped.
    pub fn logit(&mut self, a: Var, eps: T) -> Var {
        let hi = T::one() - eps;
        self.unary(
            a,
            |x| {
                let p = x.max(eps).min(hi);
                (p / (T::one() - p)).ln()
            },
            Op::Logit(a, eps),
        )
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, |x| x * x, Op::Square(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.data(a).iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = T::of(self.data(a).len() as f64);
        let s: T = self.data(a).iter().copied().sum();
        self.push(Tensor::scalar(s / n), Op::Mean(a), &[a])
    }

    /// Sums over the last axis.
    pub fn sum_last(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let last = *shape.last().expect("tensors have rank >= 1");
        let data: Vec<T> = self
            .data(a)
            .chunks(last)
            .map(|c| c.iter().copied().sum())
            .collect();
        let mut out_shape = shape[..shape.len() - 1].to_vec();
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        self.push_raw(out_shape, data, Op::SumLast(a, last), &[a])
    }

    /// (m x k) @ (k x n).
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = match *self.shape(a) {
            [m, k] => (m, k),
            ref s => return Err(shape_err("matmul", format!("lhs must be 2-D, got {s:?}"))),
        };
        let n = match *self.shape(b) {
            [k2, n] if k2 == k => n,
            ref s => {
                return Err(shape_err(
                    "matmul",
                    format!("rhs {s:?} incompatible with lhs [{m}, {k}]"),
                ))
            }
        };
        let mut out = vec![T::zero(); m * n];
        T::gemm(
            m,
            k,
            n,
            T::one(),
            self.data(a),
            (k as isize, 1),
            self.data(b),
            (n as isize, 1),
            T::zero(),
            &mut out,
            (n as isize, 1),
        );
        self.push_raw(vec![m, n], out, Op::MatMul(a, b, [m, k, n]), &[a, b])
    }

    /// 2-D convolution. `x`: (N,C,H,W); `w`: (O,C,k,k); `b`: (O).
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, padding: usize) -> Result<Var> {
        let (n, c, h, wd) = nchw("conv2d", self.shape(x))?;
        let (o, k) = match *self.shape(w) {
            [o, ci, k, k2] if ci == c && k == k2 => (o, k),
            ref s => {
                return Err(shape_err(
                    "conv2d",
                    format!("weight {s:?} incompatible with input channels {c}"),
                ))
            }
        };
        if stride == 0 {
            return Err(shape_err("conv2d", "stride must be positive"));
        }
        if let Some(b) = b {
            if self.shape(b) != [o] {
                return Err(shape_err(
                    "conv2d",
                    format!("bias {:?} for {o} output channels", self.shape(b)),
                ));
            }
        }
        let geom = ConvGeom {
            batch: n,
            in_ch: c,
            height: h,
            width: wd,
            out_ch: o,
            kernel: k,
            stride,
            padding,
        };
        let (ho, wo) = geom.out_hw();
        if ho == 0 || wo == 0 {
            return Err(shape_err(
                "conv2d",
                format!("kernel {k} does not fit {h}x{wd} input with padding {padding}"),
            ));
        }
        let out = conv2d_forward(self.data(x), self.data(w), b.map(|b| self.data(b)), &geom);
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.push_raw(vec![n, o, ho, wo], out, Op::Conv2d { x, w, b, geom }, &inputs)
    }

    /// Multiplies each spatial location of an NCHW tensor by `scale[n, y, x]`
    /// (shared over channels). Where the scale is exactly zero the output is
    /// exactly zero, whatever the input value.
    pub fn spatial_scale(&mut self, x: Var, scale: &Tensor<T>) -> Result<Var> {
        let (n, c, h, w) = nchw("spatial_scale", self.shape(x))?;
        if scale.numel() != n * h * w {
            return Err(shape_err(
                "spatial_scale",
                format!("scale {:?} for input {:?}", scale.shape(), self.shape(x)),
            ));
        }
        let hw = h * w;
        let s = scale.data();
        let data = self
            .data(x)
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let f = s[(i / (c * hw)) * hw + i % hw];
                if f == T::zero() {
                    T::zero()
                } else {
                    v * f
                }
            })
            .collect();
        let shape = self.shape(x).to_vec();
        self.push_raw(
            shape,
            data,
            Op::SpatialScale {
                x,
                scale: s.to_vec(),
            },
            &[x],
        )
    }

    /// Adds a per-channel bias; with a gate, only where `gate[n, y, x] != 0`.
    pub fn channel_bias(&mut self, x: Var, b: Var, gate: Option<&Tensor<T>>) -> Result<Var> {
        let (n, c, h, w) = nchw("channel_bias", self.shape(x))?;
        if self.shape(b) != [c] {
            return Err(shape_err(
                "channel_bias",
                format!("bias {:?} for {c} channels", self.shape(b)),
            ));
        }
        let hw = h * w;
        if let Some(gt) = gate {
            if gt.numel() != n * hw {
                return Err(shape_err(
                    "channel_bias",
                    format!("gate {:?} for input {:?}", gt.shape(), self.shape(x)),
                ));
            }
        }
        let bias = self.data(b);
        let data = self
            .data(x)
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let open = gate.map_or(true, |gt| gt.data()[(i / (c * hw)) * hw + i % hw] != T::zero());
                if open {
                    v + bias[(i / hw) % c]
                } else {
                    v
                }
            })
            .collect();
        let shape = self.shape(x).to_vec();
        self.push_raw(
            shape,
            data,
            Op::ChannelBias {
                x,
                b,
                gate: gate.map(|g| g.data().to_vec()),
            },
            &[x, b],
        )
    }

    /// Batch normalization with batch statistics. Returns the output and
    /// the per-channel (mean, biased variance).
    pub fn batchnorm_train(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<(Var, Vec<T>, Vec<T>)> {
        let (n, c, h, w) = nchw("batchnorm", self.shape(x))?;
        if n * h * w < 2 {
            return Err(shape_err("batchnorm", "training mode needs at least 2 values per channel"));
        }
        for p in [gamma, beta] {
            if self.shape(p) != [c] {
                return Err(shape_err(
                    "batchnorm",
                    format!("affine parameter {:?} for {c} channels", self.shape(p)),
                ));
            }
        }
        let hw = h * w;
        let count = T::of((n * hw) as f64);
        let xs = self.data(x);
        let mut mean = vec![T::zero(); c];
        let mut var = vec![T::zero(); c];
        for (ch, m) in mean.iter_mut().enumerate() {
            let mut s = T::zero();
            for b in 0..n {
                s += xs[(b * c + ch) * hw..(b * c + ch + 1) * hw].iter().copied().sum::<T>();
            }
            *m = s / count;
        }
        for (ch, v) in var.iter_mut().enumerate() {
            let mut s = T::zero();
            for b in 0..n {
                for &x in &xs[(b * c + ch) * hw..(b * c + ch + 1) * hw] {
                    let d = x - mean[ch];
                    s += d * d;
                }
            }
            *v = s / count;
        }
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let g = self.data(gamma);
        let be = self.data(beta);
        let mut xhat = Vec::with_capacity(xs.len());
        let mut out = Vec::with_capacity(xs.len());
        for (i, &v) in xs.iter().enumerate() {
            let ch = (i / hw) % c;
            let xh = (v - mean[ch]) * inv_std[ch];
            xhat.push(xh);
            out.push(g[ch] * xh + be[ch]);
        }
        let shape = self.shape(x).to_vec();
        let y = self.push_raw(
            shape,
            out,
            Op::BatchNormTrain {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            &[x, gamma, beta],
        )?;
        Ok((y, mean, var))
    }

    /// Batch normalization with fixed statistics: `gamma * (x - mean) / sqrt(var + eps) + beta`.
    pub fn batchnorm_eval(&mut self, x: Var, gamma: Var, beta: Var, mean: &[T], var: &[T], eps: T) -> Result<Var> {
        let (_, c, h, w) = nchw("batchnorm", self.shape(x))?;
        if mean.len() != c || var.len() != c || self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(shape_err("batchnorm", format!("statistics do not match {c} channels")));
        }
        let hw = h * w;
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let g = self.data(gamma);
        let be = self.data(beta);
        let data = self
            .data(x)
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let ch = (i / hw) % c;
                g[ch] * (v - mean[ch]) * inv_std[ch] + be[ch]
            })
            .collect();
        let shape = self.shape(x).to_vec();
        self.push_raw(
            shape,
            data,
            Op::ChannelAffine {
                x,
                gamma,
                beta,
                mean: mean.to_vec(),
                inv_std,
            },
            &[x, gamma, beta],
        )
    }

    /// Concatenates along axis 1; all other dims must agree.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| shape_err("concat", "no inputs"))?;
        let base = self.shape(first).to_vec();
        if base.len() < 2 {
            return Err(shape_err("concat", format!("need rank >= 2, got {base:?}")));
        }
        let mut channels = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != base.len() || s[0] != base[0] || s[2..] != base[2..] {
                return Err(shape_err("concat", format!("{s:?} vs {base:?} along axis 1")));
            }
            channels += s[1];
        }
        let outer = base[0];
        let inner: usize = base[2..].iter().product();
        let mut data = Vec::with_capacity(outer * channels * inner);
        for o in 0..outer {
            for &p in parts {
                let cp = self.shape(p)[1];
                data.extend_from_slice(&self.data(p)[o * cp * inner..(o + 1) * cp * inner]);
            }
        }
        let mut shape = base;
        shape[1] = channels;
        self.push_raw(shape, data, Op::Concat(parts.to_vec()), parts)
    }

    /// Channels `start..start + len` along axis 1.
    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() < 2 || len == 0 || start + len > s[1] {
            return Err(shape_err(
                "slice_channels",
                format!("range {start}..{} of {s:?}", start + len),
            ));
        }
        let inner: usize = s[2..].iter().product();
        let mut data = Vec::with_capacity(s[0] * len * inner);
        for o in 0..s[0] {
            let base = (o * s[1] + start) * inner;
            data.extend_from_slice(&self.data(x)[base..base + len * inner]);
        }
        let mut shape = s;
        shape[1] = len;
        self.push_raw(shape, data, Op::SliceChannels { x, start }, &[x])
    }

    /// Nearest-neighbour upsampling by an integer factor.
    pub fn upsample_nearest(&mut self, x: Var, factor: usize) -> Result<Var> {
        let (n, c, h, w) = nchw("upsample", self.shape(x))?;
        if factor == 0 {
            return Err(shape_err("upsample", "factor must be positive"));
        }
        let (ho, wo) = (h * factor, w * factor);
        let xs = self.data(x);
        let mut data = Vec::with_capacity(n * c * ho * wo);
        for plane in xs.chunks(h * w) {
            for oy in 0..ho {
                let row = &plane[(oy / factor) * w..(oy / factor + 1) * w];
                for ox in 0..wo {
                    data.push(row[ox / factor]);
                }
            }
        }
        self.push_raw(vec![n, c, ho, wo], data, Op::Upsample(x, factor), &[x])
    }

    /// Per-channel spatial mean: (N,C,H,W) -> (N,C,1,1).
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = nchw("global_avg_pool", self.shape(x))?;
        let count = T::of((h * w) as f64);
        let data = self
            .data(x)
            .chunks(h * w)
            .map(|p| p.iter().copied().sum::<T>() / count)
            .collect();
        self.push_raw(vec![n, c, 1, 1], data, Op::GlobalAvgPool(x), &[x])
    }

    /// Per-channel mean over locations where `mask[n, y, x] != 0`.
    pub fn masked_avg_pool(&mut self, x: Var, mask: &Tensor<T>) -> Result<Var> {
        let (n, c, h, w) = nchw("masked_avg_pool", self.shape(x))?;
        let hw = h * w;
        if mask.numel() != n * hw {
            return Err(shape_err(
                "masked_avg_pool",
                format!("mask {:?} for input {:?}", mask.shape(), self.shape(x)),
            ));
        }
        let m = mask.data();
        let mut counts = Vec::with_capacity(n);
        for b in 0..n {
            let k = m[b * hw..(b + 1) * hw].iter().filter(|&&v| v != T::zero()).count();
            if k == 0 {
                return Err(Error::EmptyRegion(format!(
                    "pooling mask for batch item {b} has no active locations"
                )));
            }
            counts.push(T::of(k as f64));
        }
        let xs = self.data(x);
        let mut data = Vec::with_capacity(n * c);
        for b in 0..n {
            let mb = &m[b * hw..(b + 1) * hw];
            for ch in 0..c {
                let plane = &xs[(b * c + ch) * hw..(b * c + ch + 1) * hw];
                let s: T = plane
                    .iter()
                    .zip(mb)
                    .filter(|(_, &mv)| mv != T::zero())
                    .map(|(&v, _)| v)
                    .sum();
                data.push(s / counts[b]);
            }
        }
        self.push_raw(
            vec![n, c, 1, 1],
            data,
            Op::MaskedAvgPool {
                x,
                mask: m.to_vec(),
                counts,
            },
            &[x],
        )
    }

    /// Tiles an (N,L) code over space: (N,L,H,W).
    pub fn replicate(&mut self, x: Var, height: usize, width: usize) -> Result<Var> {
        let (n, l) = match *self.shape(x) {
            [n, l] => (n, l),
            ref s => return Err(shape_err("replicate", format!("expected (N, L), got {s:?}"))),
        };
        if height == 0 || width == 0 {
            return Err(shape_err("replicate", "spatial size must be positive"));
        }
        let hw = height * width;
        let mut data = Vec::with_capacity(n * l * hw);
        for &v in self.data(x) {
            data.extend(std::iter::repeat(v).take(hw));
        }
        self.push_raw(vec![n, l, height, width], data, Op::Replicate(x), &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape.to_vec())?;
        Ok(self.push(t, Op::Reshape(x), &[x]))
    }

    /// Op with a caller-supplied value and backward rule. Used by tests and
    /// for experimental layers.
    pub fn custom(&mut self, inputs: &[Var], value: Tensor<T>, backward: CustomBackward<T>) -> Var {
        self.push(value, Op::Custom(inputs.to_vec(), backward), inputs)
    }

    /// Reverse sweep from a scalar loss. Gradients accumulate across calls.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::NonScalarLoss {
                shape: self.shape(loss).to_vec(),
            });
        }
        if !self.requires_grad(loss) {
            return Ok(());
        }
        let mut local: Vec<Option<Vec<T>>> = (0..=loss.0).map(|_| None).collect();
        local[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(gout) = local[i].take() else { continue };
            let contributions = self.node_backward(i, &gout);
            for (v, g) in contributions {
                if !self.requires_grad(v) {
                    continue;
                }
                match &mut local[v.0] {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &b)| *a += b),
                    slot @ None => *slot = Some(g),
                }
            }
            let node = &mut self.nodes[i];
            match &mut node.grad {
                Some(acc) => acc.iter_mut().zip(&gout).for_each(|(a, &b)| *a += b),
                None => node.grad = Some(gout),
            }
        }
        Ok(())
    }

    /// Clears accumulated node gradients.
    pub fn zero_grad(&mut self) {
        self.nodes.iter_mut().for_each(|n| n.grad = None);
    }

    fn node_backward(&self, i: usize, gout: &[T]) -> Vec<(Var, Vec<T>)> {
        let node = &self.nodes[i];
        let out = node.value.data();
        let zero = T::zero();
        let one = T::one();
        let elementwise = |a: Var, f: &dyn Fn(T, T, T) -> T| -> Vec<(Var, Vec<T>)> {
            let xs = self.data(a);
            vec![(
                a,
                xs.iter()
                    .zip(out)
                    .zip(gout)
                    .map(|((&x, &y), &g)| f(x, y, g))
                    .collect(),
            )]
        };
        match &node.op {
            Op::Leaf => vec![],
            Op::Add(a, b) => vec![(*a, gout.to_vec()), (*b, gout.to_vec())],
            Op::Sub(a, b) => vec![(*a, gout.to_vec()), (*b, gout.iter().map(|&g| -g).collect())],
            Op::Mul(a, b) => {
                let (xa, xb) = (self.data(*a), self.data(*b));
                vec![
                    (*a, gout.iter().zip(xb).map(|(&g, &y)| g * y).collect()),
                    (*b, gout.iter().zip(xa).map(|(&g, &x)| g * x).collect()),
                ]
            }
            Op::Scale(a, c) => vec![(*a, gout.iter().map(|&g| g * *c).collect())],
            // Sub-gradient 0 at the kink.
            Op::Relu(a) => elementwise(*a, &|x, _, g| if x > zero { g } else { zero }),
            Op::Elu(a, alpha) => {
                let alpha = *alpha;
                elementwise(*a, &|x, y, g| if x > zero { g } else { g * (y + alpha) })
            }
            Op::Sigmoid(a) => elementwise(*a, &|_, y, g| g * y * (one - y)),
            Op::Tanh(a) => elementwise(*a, &|_, y, g| g * (one - y * y)),
            // sign(0) = 0: an exact match contributes no gradient.
            Op::Abs(a) => elementwise(*a, &|x, _, g| {
                if x > zero {
                    g
                } else if x < zero {
                    -g
                } else {
                    zero
                }
            }),
            // Zero at sqrt(0) keeps distance gradients finite for coincident codes.
            Op::Logit(a, eps) => {
                let (lo, hi) = (*eps, T::one() - *eps);
                elementwise(*a, &|x, _, g| {
                    if x > lo && x < hi {
                        g / (x * (T::one() - x))
                    } else {
                        zero
                    }
                })
            }
            Op::Sqrt(a) => elementwise(*a, &|_, y, g| {
                if y > zero {
                    g / (y + y)
                } else {
                    zero
                }
            }),
            Op::Square(a) => elementwise(*a, &|x, _, g| g * (x + x)),
            Op::Sum(a) => vec![(*a, vec![gout[0]; self.value(*a).numel()])],
            Op::Mean(a) => {
                let n = self.value(*a).numel();
                vec![(*a, vec![gout[0] / T::of(n as f64); n])]
            }
            Op::SumLast(a, last) => {
                let mut g = Vec::with_capacity(self.value(*a).numel());
                for &go in gout {
                    g.extend(std::iter::repeat(go).take(*last));
                }
                vec![(*a, g)]
            }
            Op::MatMul(a, b, [m, k, n]) => {
                let (m, k, n) = (*m, *k, *n);
                let mut ga = vec![zero; m * k];
                let mut gb = vec![zero; k * n];
                // dA = G @ B^T
                T::gemm(m, n, k, one, gout, (n as isize, 1), self.data(*b), (1, n as isize), zero, &mut ga, (k as isize, 1));
                // dB = A^T @ G
                T::gemm(k, m, n, one, self.data(*a), (1, k as isize), gout, (n as isize, 1), zero, &mut gb, (n as isize, 1));
                vec![(*a, ga), (*b, gb)]
            }
            Op::Conv2d { x, w, b, geom } => {
                let grads = conv2d_backward(self.data(*x), self.data(*w), gout, geom, self.requires_grad(*x));
                let mut res = vec![(*w, grads.weight)];
                if let Some(dx) = grads.input {
                    res.push((*x, dx));
                }
                if let Some(b) = b {
                    res.push((*b, grads.bias));
                }
                res
            }
            Op::SpatialScale { x, scale } => {
                let s = self.shape(*x);
                let (c, hw) = (s[1], s[2] * s[3]);
                let g = gout
                    .iter()
                    .enumerate()
                    .map(|(i, &g)| g * scale[(i / (c * hw)) * hw + i % hw])
                    .collect();
                vec![(*x, g)]
            }
            Op::ChannelBias { x, b, gate } => {
                let s = self.shape(*x);
                let (c, hw) = (s[1], s[2] * s[3]);
                let mut gb = vec![zero; c];
                for (i, &g) in gout.iter().enumerate() {
                    let open = gate
                        .as_ref()
                        .map_or(true, |gt| gt[(i / (c * hw)) * hw + i % hw] != zero);
                    if open {
                        gb[(i / hw) % c] += g;
                    }
                }
                vec![(*x, gout.to_vec()), (*b, gb)]
            }
            Op::BatchNormTrain {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let s = self.shape(*x);
                let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
                let count = T::of((n * hw) as f64);
                let gm = self.data(*gamma);
                let mut sum_g = vec![zero; c];
                let mut sum_gx = vec![zero; c];
                for (i, &g) in gout.iter().enumerate() {
                    let ch = (i / hw) % c;
                    sum_g[ch] += g;
                    sum_gx[ch] += g * xhat[i];
                }
                let dx = gout
                    .iter()
                    .enumerate()
                    .map(|(i, &g)| {
                        let ch = (i / hw) % c;
                        gm[ch] * inv_std[ch] / count * (count * g - sum_g[ch] - xhat[i] * sum_gx[ch])
                    })
                    .collect();
                vec![(*x, dx), (*gamma, sum_gx), (*beta, sum_g)]
            }
            Op::ChannelAffine {
                x,
                gamma,
                beta,
                mean,
                inv_std,
            } => {
                let s = self.shape(*x);
                let (c, hw) = (s[1], s[2] * s[3]);
                let gm = self.data(*gamma);
                let xs = self.data(*x);
                let mut dgamma = vec![zero; c];
                let mut dbeta = vec![zero; c];
                let mut dx = Vec::with_capacity(gout.len());
                for (i, &g) in gout.iter().enumerate() {
                    let ch = (i / hw) % c;
                    dgamma[ch] += g * (xs[i] - mean[ch]) * inv_std[ch];
                    dbeta[ch] += g;
                    dx.push(g * gm[ch] * inv_std[ch]);
                }
                vec![(*x, dx), (*gamma, dgamma), (*beta, dbeta)]
            }
            Op::Concat(parts) => {
                let s = node.value.shape();
                let (outer, total) = (s[0], s[1]);
                let inner: usize = s[2..].iter().product();
                let mut offset = 0;
                let mut res = Vec::with_capacity(parts.len());
                for &p in parts {
                    let cp = self.shape(p)[1];
                    let mut g = Vec::with_capacity(outer * cp * inner);
                    for o in 0..outer {
                        let base = (o * total + offset) * inner;
                        g.extend_from_slice(&gout[base..base + cp * inner]);
                    }
                    offset += cp;
                    res.push((p, g));
                }
                res
            }
            Op::SliceChannels { x, start } => {
                let s = self.shape(*x);
                let inner: usize = s[2..].iter().product();
                let len = node.value.shape()[1];
                let mut g = vec![zero; self.value(*x).numel()];
                for o in 0..s[0] {
                    let dst = (o * s[1] + start) * inner;
                    let src = o * len * inner;
                    g[dst..dst + len * inner].copy_from_slice(&gout[src..src + len * inner]);
                }
                vec![(*x, g)]
            }
            Op::Upsample(x, factor) => {
                let s = self.shape(*x);
                let (h, w) = (s[2], s[3]);
                let (ho, wo) = (h * factor, w * factor);
                let mut g = vec![zero; self.value(*x).numel()];
                for (plane, gp) in g.chunks_mut(h * w).zip(gout.chunks(ho * wo)) {
                    for oy in 0..ho {
                        for ox in 0..wo {
                            plane[(oy / factor) * w + ox / factor] += gp[oy * wo + ox];
                        }
                    }
                }
                vec![(*x, g)]
            }
            Op::GlobalAvgPool(x) => {
                let s = self.shape(*x);
                let hw = s[2] * s[3];
                let denom = T::of(hw as f64);
                let mut g = Vec::with_capacity(self.value(*x).numel());
                for &go in gout {
                    g.extend(std::iter::repeat(go / denom).take(hw));
                }
                vec![(*x, g)]
            }
            Op::MaskedAvgPool { x, mask, counts } => {
                let s = self.shape(*x);
                let (c, hw) = (s[1], s[2] * s[3]);
                let mut g = vec![zero; self.value(*x).numel()];
                for (i, v) in g.iter_mut().enumerate() {
                    let b = i / (c * hw);
                    if mask[b * hw + i % hw] != zero {
                        *v = gout[i / hw] / counts[b];
                    }
                }
                vec![(*x, g)]
            }
            Op::Replicate(x) => {
                let s = node.value.shape();
                let hw = s[2] * s[3];
                vec![(*x, gout.chunks(hw).map(|c| c.iter().copied().sum()).collect())]
            }
            Op::Reshape(x) => vec![(*x, gout.to_vec())],
            Op::Custom(inputs, rule) => {
                let vals: Vec<&[T]> = inputs.iter().map(|&v| self.data(v)).collect();
                inputs.iter().copied().zip(rule(&vals, out, gout)).collect()
            }
        }
    }
}
