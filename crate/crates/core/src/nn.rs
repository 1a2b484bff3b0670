//! Parameter registry and the handful of differentiable building blocks the
//! model is assembled from.
//!
//! All layers are written against candle primitives whose backward passes
//! are implemented (matmul, conv2d, exp, log, index_select, ...), so every
//! path through the model can be checked against finite differences in
//! double precision.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var, D};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Parameter initializers.
#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Const(f64),
    Uniform(f64),
    /// Uniform in `±sqrt(6 / (fan_in + fan_out))`.
    Xavier { fan_in: usize, fan_out: usize },
}

/// Flat registry of named trainable tensors.
///
/// Names are hierarchical (`neck.layers.0.deform.offsets.weight`) and the
/// map is ordered, so iteration order (and therefore optimizer updates,
/// checkpoint layout and random initialization) is deterministic.
#[derive(Debug, Clone)]
pub struct ParamStore {
    vars: BTreeMap<String, Var>,
    dtype: DType,
    device: Device,
}

impl ParamStore {
    pub fn new(dtype: DType) -> Self {
        Self {
            vars: BTreeMap::new(),
            dtype,
            device: Device::Cpu,
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    fn create(&mut self, name: String, shape: &[usize], init: Init, rng: &mut ChaCha8Rng) -> Result<Tensor> {
        if let Some(v) = self.vars.get(&name) {
            if v.dims() != shape {
                return Err(Error::Shape(format!(
                    "parameter {name} registered twice with shapes {:?} and {shape:?}",
                    v.dims()
                )));
            }
            return Ok(v.as_tensor().clone());
        }
        let n: usize = shape.iter().product();
        let data: Vec<f64> = match init {
            Init::Zeros => vec![0.0; n],
            Init::Const(c) => vec![c; n],
            Init::Uniform(b) => (0..n).map(|_| rng.random_range(-b..=b)).collect(),
            Init::Xavier { fan_in, fan_out } => {
                let b = (6.0 / (fan_in + fan_out) as f64).sqrt();
                (0..n).map(|_| rng.random_range(-b..=b)).collect()
            }
        };
        let t = Tensor::from_vec(data, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        let out = var.as_tensor().clone();
        self.vars.insert(name, var);
        Ok(out)
    }

    /// Root builder. Initialization draws from `rng` in registration order.
    pub fn builder<'a>(&'a mut self, rng: &'a mut ChaCha8Rng) -> ParamBuilder<'a> {
        ParamBuilder {
            store: self,
            rng,
            prefix: String::new(),
        }
    }

    /// Overwrites a parameter's value in place, keeping its identity.
    pub fn assign(&self, name: &str, value: &Tensor) -> Result<()> {
        let var = self
            .vars
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("unknown parameter {name}")))?;
        if var.dims() != value.dims() {
            return Err(Error::Checkpoint(format!(
                "parameter {name}: expected shape {:?}, found {:?}",
                var.dims(),
                value.dims()
            )));
        }
        var.set(&value.to_dtype(self.dtype)?)?;
        Ok(())
    }
}

/// Scoped view into a [`ParamStore`] used while constructing modules.
pub struct ParamBuilder<'a> {
    store: &'a mut ParamStore,
    rng: &'a mut ChaCha8Rng,
    prefix: String,
}

impl ParamBuilder<'_> {
    pub fn pp(&mut self, name: impl std::fmt::Display) -> ParamBuilder<'_> {
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        };
        ParamBuilder {
            store: self.store,
            rng: self.rng,
            prefix,
        }
    }

    pub fn param(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        let full = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        };
        self.store.create(full, shape, init, self.rng)
    }

    /// Registers a parameter with explicit initial values.
    pub fn param_from(&mut self, name: &str, shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        let t = self.param(name, shape, Init::Zeros)?;
        let full = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        };
        self.store.assign(&full, &constant(data, shape, self.store.dtype)?)?;
        Ok(t)
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype
    }
}

pub fn scalar_like(x: &Tensor, v: f64) -> Result<Tensor> {
    Ok(Tensor::new(v, x.device())?.to_dtype(x.dtype())?)
}

/// Builds a constant tensor of the given dtype from f64 data.
pub fn constant(data: Vec<f64>, shape: &[usize], dtype: DType) -> Result<Tensor> {
    Ok(Tensor::from_vec(data, shape, &Device::Cpu)?.to_dtype(dtype)?)
}

pub fn index_tensor(idx: Vec<u32>) -> Result<Tensor> {
    let n = idx.len();
    Ok(Tensor::from_vec(idx, n, &Device::Cpu)?)
}

/// Numerically stable softmax along the last axis. The row maximum is
/// detached; softmax is shift invariant so the gradient is unaffected.
pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    let m = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&m)?.exp()?;
    let s = e.sum_keepdim(D::Minus1)?;
    Ok(e.broadcast_div(&s)?)
}

/// Log-softmax along the last axis.
pub fn log_softmax_last(x: &Tensor) -> Result<Tensor> {
    let m = x.max_keepdim(D::Minus1)?.detach();
    let shifted = x.broadcast_sub(&m)?;
    let lse = shifted.exp()?.sum_keepdim(D::Minus1)?.log()?;
    Ok(shifted.broadcast_sub(&lse)?)
}

/// Logistic function in tanh form, which keeps gradients finite for
/// saturated inputs.
pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    let half = scalar_like(x, 0.5)?;
    Ok(x.broadcast_mul(&half)?.tanh()?.broadcast_add(&half.ones_like()?)?.broadcast_mul(&half)?)
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}

impl Linear {
    pub fn new(pb: &mut ParamBuilder, in_dim: usize, out_dim: usize, bias: bool) -> Result<Self> {
        let weight = pb.param(
            "weight",
            &[out_dim, in_dim],
            Init::Xavier {
                fan_in: in_dim,
                fan_out: out_dim,
            },
        )?;
        let bias = if bias {
            Some(pb.param("bias", &[out_dim], Init::Zeros)?)
        } else {
            None
        };
        Ok(Self { weight, bias })
    }

    pub fn with_init(
        pb: &mut ParamBuilder,
        in_dim: usize,
        out_dim: usize,
        weight_init: Init,
        bias_init: Init,
    ) -> Result<Self> {
        let weight = pb.param("weight", &[out_dim, in_dim], weight_init)?;
        let bias = Some(pb.param("bias", &[out_dim], bias_init)?);
        Ok(Self { weight, bias })
    }

    pub fn out_dim(&self) -> usize {
        self.weight.dims()[0]
    }

    /// Applies the layer to the last axis of `x`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let dims = x.dims().to_vec();
        let in_dim = *dims.last().expect("linear input must have an axis");
        let rows: usize = dims[..dims.len() - 1].iter().product();
        let flat = x.reshape((rows, in_dim))?;
        let mut y = flat.matmul(&self.weight.t()?)?;
        if let Some(b) = &self.bias {
            y = y.broadcast_add(b)?;
        }
        let mut out_dims = dims;
        *out_dims.last_mut().unwrap() = self.out_dim();
        Ok(y.reshape(out_dims)?)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
    eps: f64,
}

impl LayerNorm {
    pub fn new(pb: &mut ParamBuilder, dim: usize) -> Result<Self> {
        Ok(Self {
            gamma: pb.param("gamma", &[dim], Init::Const(1.0))?,
            beta: pb.param("beta", &[dim], Init::Zeros)?,
            eps: 1e-5,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let xc = x.broadcast_sub(&mean)?;
        let var = xc.sqr()?.mean_keepdim(D::Minus1)?;
        let denom = var.broadcast_add(&scalar_like(&var, self.eps)?)?.sqrt()?;
        let xn = xc.broadcast_div(&denom)?;
        Ok(xn.broadcast_mul(&self.gamma)?.broadcast_add(&self.beta)?)
    }
}

/// Group normalization over an `(N, C, H, W)` tensor.
#[derive(Debug, Clone)]
pub struct GroupNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
    groups: usize,
    eps: f64,
}

impl GroupNorm {
    pub fn new(pb: &mut ParamBuilder, channels: usize, groups: usize) -> Result<Self> {
        if groups == 0 || channels % groups != 0 {
            return Err(Error::Config(format!(
                "group norm: {channels} channels not divisible into {groups} groups"
            )));
        }
        Ok(Self {
            gamma: pb.param("gamma", &[channels], Init::Const(1.0))?,
            beta: pb.param("beta", &[channels], Init::Zeros)?,
            groups,
            eps: 1e-5,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (n, c, h, w) = x.dims4()?;
        let g = x.reshape((n, self.groups, (c / self.groups) * h * w))?;
        let mean = g.mean_keepdim(D::Minus1)?;
        let gc = g.broadcast_sub(&mean)?;
        let var = gc.sqr()?.mean_keepdim(D::Minus1)?;
        let denom = var.broadcast_add(&scalar_like(&var, self.eps)?)?.sqrt()?;
        let xn = gc.broadcast_div(&denom)?.reshape((n, c, h, w))?;
        let gamma = self.gamma.reshape((1, c, 1, 1))?;
        let beta = self.beta.reshape((1, c, 1, 1))?;
        Ok(xn.broadcast_mul(&gamma)?.broadcast_add(&beta)?)
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
    stride: usize,
    padding: usize,
}

impl Conv2d {
    pub fn new(
        pb: &mut ParamBuilder,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        bias: bool,
    ) -> Result<Self> {
        let fan_in = in_ch * kernel * kernel;
        let weight = pb.param(
            "weight",
            &[out_ch, in_ch, kernel, kernel],
            Init::Uniform((3.0 / fan_in as f64).sqrt()),
        )?;
        let bias = if bias {
            Some(pb.param("bias", &[out_ch], Init::Zeros)?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            stride,
            padding: kernel / 2,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.conv2d(&self.weight, self.padding, self.stride, 1, 1)?;
        match &self.bias {
            Some(b) => {
                let c = b.dims()[0];
                Ok(y.broadcast_add(&b.reshape((1, c, 1, 1))?)?)
            }
            None => Ok(y),
        }
    }
}

/// Stack of linear layers with ReLU between them.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    pub fn new(pb: &mut ParamBuilder, dims: &[usize]) -> Result<Self> {
        let mut layers = Vec::with_capacity(dims.len().saturating_sub(1));
        for (i, w) in dims.windows(2).enumerate() {
            layers.push(Linear::new(&mut pb.pp(i), w[0], w[1], true)?);
        }
        Ok(Self { layers })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = x.clone();
        for (i, l) in self.layers.iter().enumerate() {
            h = l.forward(&h)?;
            if i + 1 < self.layers.len() {
                h = h.relu()?;
            }
        }
        Ok(h)
    }
}

/// Position-wise feed-forward block with a residual connection and post-norm.
#[derive(Debug, Clone)]
pub struct FeedForward {
    fc1: Linear,
    fc2: Linear,
    norm: LayerNorm,
}

impl FeedForward {
    pub fn new(pb: &mut ParamBuilder, dim: usize, hidden: usize) -> Result<Self> {
        Ok(Self {
            fc1: Linear::new(&mut pb.pp("fc1"), dim, hidden, true)?,
            fc2: Linear::new(&mut pb.pp("fc2"), hidden, dim, true)?,
            norm: LayerNorm::new(&mut pb.pp("norm"), dim)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = self.fc2.forward(&self.fc1.forward(x)?.relu()?)?;
        self.norm.forward(&(x + h)?)
    }
}

/// Multi-head scaled dot-product attention with separate q/k/v/out maps.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    heads: usize,
}

impl MultiHeadAttention {
    pub fn new(pb: &mut ParamBuilder, dim: usize, heads: usize) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::Config(format!(
                "attention: width {dim} not divisible by {heads} heads"
            )));
        }
        Ok(Self {
            q: Linear::new(&mut pb.pp("q"), dim, dim, true)?,
            k: Linear::new(&mut pb.pp("k"), dim, dim, true)?,
            v: Linear::new(&mut pb.pp("v"), dim, dim, true)?,
            out: Linear::new(&mut pb.pp("out"), dim, dim, true)?,
            heads,
        })
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    /// `query`: `(B, Nq, D)`, `key`/`value`: `(B, Nk, D)`. `bias` is an
    /// additive logit bias broadcastable to `(B, heads, Nq, Nk)`. Returns the
    /// attended output `(B, Nq, D)` and the attention weights
    /// `(B, heads, Nq, Nk)`.
    pub fn forward_with_weights(
        &self,
        query: &Tensor,
        key: &Tensor,
        value: &Tensor,
        bias: Option<&Tensor>,
    ) -> Result<(Tensor, Tensor)> {
        let (b, nq, d) = query.dims3()?;
        let nk = key.dims()[1];
        let h = self.heads;
        let dh = d / h;
        let split = |x: &Tensor, n: usize| -> Result<Tensor> {
            Ok(x.reshape((b, n, h, dh))?.transpose(1, 2)?.contiguous()?)
        };
        let q = split(&self.q.forward(query)?, nq)?;
        let k = split(&self.k.forward(key)?, nk)?;
        let v = split(&self.v.forward(value)?, nk)?;
        let scale = scalar_like(&q, 1.0 / (dh as f64).sqrt())?;
        let mut logits = q.matmul(&k.t()?)?.broadcast_mul(&scale)?;
        if let Some(bias) = bias {
            logits = logits.broadcast_add(bias)?;
        }
        let weights = softmax_last(&logits)?;
        let ctx = weights.matmul(&v)?.transpose(1, 2)?.reshape((b, nq, d))?;
        Ok((self.out.forward(&ctx)?, weights))
    }

    pub fn forward(&self, query: &Tensor, key: &Tensor, value: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
        Ok(self.forward_with_weights(query, key, value, bias)?.0)
    }
}

/// Row-major `(out_len × in_len)` linear-interpolation matrix following the
/// half-pixel convention (`align_corners = false`).
pub fn interp_matrix(in_len: usize, out_len: usize) -> Vec<f64> {
    let mut m = vec![0.0; out_len * in_len];
    let scale = in_len as f64 / out_len as f64;
    for o in 0..out_len {
        let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
        let i0 = (src.floor() as usize).min(in_len - 1);
        let i1 = (i0 + 1).min(in_len - 1);
        let frac = src - i0 as f64;
        m[o * in_len + i0] += 1.0 - frac;
        m[o * in_len + i1] += frac;
    }
    m
}

/// Dense `(out_h*out_w × in_h*in_w)` bilinear resize operator.
pub fn bilinear_matrix(in_h: usize, in_w: usize, out_h: usize, out_w: usize) -> Vec<f64> {
    let rh = interp_matrix(in_h, out_h);
    let rw = interp_matrix(in_w, out_w);
    let mut m = vec![0.0; out_h * out_w * in_h * in_w];
    let cols = in_h * in_w;
    for oy in 0..out_h {
        for iy in 0..in_h {
            let a = rh[oy * in_h + iy];
            if a == 0.0 {
                continue;
            }
            for ox in 0..out_w {
                for ix in 0..in_w {
                    let b = rw[ox * in_w + ix];
                    if b != 0.0 {
                        m[(oy * out_w + ox) * cols + iy * in_w + ix] += a * b;
                    }
                }
            }
        }
    }
    m
}

/// Separable bilinear resize of a single row-major plane.
pub fn resize_plane(src: &[f64], in_h: usize, in_w: usize, out_h: usize, out_w: usize) -> Vec<f64> {
    let rh = interp_matrix(in_h, out_h);
    let rw = interp_matrix(in_w, out_w);
    let mut tmp = vec![0.0; in_h * out_w];
    for y in 0..in_h {
        for ox in 0..out_w {
            let mut acc = 0.0;
            for ix in 0..in_w {
                let w = rw[ox * in_w + ix];
                if w != 0.0 {
                    acc += w * src[y * in_w + ix];
                }
            }
            tmp[y * out_w + ox] = acc;
        }
    }
    let mut out = vec![0.0; out_h * out_w];
    for oy in 0..out_h {
        for iy in 0..in_h {
            let w = rh[oy * in_h + iy];
            if w == 0.0 {
                continue;
            }
            for ox in 0..out_w {
                out[oy * out_w + ox] += w * tmp[iy * out_w + ox];
            }
        }
    }
    out
}

/// Resizes token maps `(T, in_h*in_w, D)` to `(T, out_h*out_w, D)`.
pub fn resize_tokens(x: &Tensor, in_hw: (usize, usize), out_hw: (usize, usize)) -> Result<Tensor> {
    let m = bilinear_matrix(in_hw.0, in_hw.1, out_hw.0, out_hw.1);
    let m = constant(m, &[out_hw.0 * out_hw.1, in_hw.0 * in_hw.1], x.dtype())?;
    Ok(m.broadcast_matmul(x)?)
}

/// Flattens a tensor to a `Vec<f64>` regardless of dtype.
pub fn to_vec_f64(x: &Tensor) -> Result<Vec<f64>> {
    Ok(x.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?)
}
