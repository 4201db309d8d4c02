//! Basic differentiable building blocks.

use candle_core::{Result, Tensor, D};

use crate::{conv, fused};
use crate::params::{Init, ParamStore};

#[derive(Debug, Clone)]
pub struct Linear {
    weight: Tensor,
    bias: Tensor,
}

impl Linear {
    pub fn new(ps: &ParamStore, din: usize, dout: usize) -> Result<Self> {
        Self::with_init(ps, din, dout, Init::fan_in(din), Init::Zeros)
    }

    pub fn zeroed(ps: &ParamStore, din: usize, dout: usize) -> Result<Self> {
        Self::with_init(ps, din, dout, Init::Zeros, Init::Zeros)
    }

    pub fn with_init(ps: &ParamStore, din: usize, dout: usize, w: Init, b: Init) -> Result<Self> {
        Ok(Self {
            weight: ps.get("weight", &[dout, din], w)?,
            bias: ps.get("bias", &[dout], b)?,
        })
    }

    /// Applies to the last dimension of `x`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let dims = x.dims().to_vec();
        let din = *dims.last().expect("rank >= 1");
        let rows = x.elem_count() / din.max(1);
        let y = x
            .reshape((rows, din))?
            .matmul(&self.weight.t()?)?
            .broadcast_add(&self.bias)?;
        let mut out = dims;
        *out.last_mut().expect("rank >= 1") = self.bias.dim(0)?;
        y.reshape(out)
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    weight: Tensor,
    bias: Tensor,
    stride: usize,
    pad: usize,
}

impl Conv2d {
    pub fn new(
        ps: &ParamStore,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        let init = Init::fan_in(cin * k * k);
        Self::with_init(ps, cin, cout, k, stride, pad, init)
    }

    pub fn with_init(
        ps: &ParamStore,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
        init: Init,
    ) -> Result<Self> {
        let bias_init = match init {
            Init::Zeros => Init::Zeros,
            _ => Init::fan_in(cin * k * k),
        };
        Ok(Self {
            weight: ps.get("weight", &[cout, cin, k, k], init)?,
            bias: ps.get("bias", &[cout], bias_init)?,
            stride,
            pad,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        conv::conv2d_bias(x, &self.weight, &self.bias, self.stride, self.pad)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    weight: Tensor,
    bias: Tensor,
}

impl LayerNorm {
    pub fn new(ps: &ParamStore, dim: usize) -> Result<Self> {
        Ok(Self {
            weight: ps.get("weight", &[dim], Init::Ones)?,
            bias: ps.get("bias", &[dim], Init::Zeros)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        candle_nn::ops::layer_norm_slow(x, &self.weight, &self.bias, 1e-6)
    }
}

#[derive(Debug, Clone)]
pub struct GroupNorm {
    weight: Tensor,
    bias: Tensor,
    groups: usize,
}

impl GroupNorm {
    pub fn new(ps: &ParamStore, channels: usize) -> Result<Self> {
        let weight = ps.get("weight", &[channels], Init::Ones)?;
        let bias = ps.get("bias", &[channels], Init::Zeros)?;
        Ok(Self {
            weight,
            bias,
            groups: group_count(channels),
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        fused::group_norm(x, &self.weight, &self.bias, self.groups, 1e-5)
    }
}

/// Largest group count from {32, 16, 8, 4, 2, 1} dividing `channels` with at
/// least two channels per group where possible.
pub fn group_count(channels: usize) -> usize {
    [32, 16, 8, 4, 2]
        .into_iter()
        .find(|&g| channels.is_multiple_of(g) && g * 2 <= channels)
        .unwrap_or(1)
}

/// Multi-head attention; `context = None` is self-attention.
#[derive(Debug, Clone)]
pub struct Attention {
    q: Linear,
    k: Linear,
    v: Linear,
    out: Linear,
    heads: usize,
}

impl Attention {
    pub fn new(ps: &ParamStore, dim: usize, heads: usize, zero_out: bool) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            candle_core::bail!("attention: dim {dim} not divisible by {heads} heads");
        }
        let out = if zero_out {
            Linear::zeroed(&ps.pp("out"), dim, dim)?
        } else {
            Linear::new(&ps.pp("out"), dim, dim)?
        };
        Ok(Self {
            q: Linear::new(&ps.pp("q"), dim, dim)?,
            k: Linear::new(&ps.pp("k"), dim, dim)?,
            v: Linear::new(&ps.pp("v"), dim, dim)?,
            out,
            heads,
        })
    }

    /// `x: (B, Nq, d)`, `context: (B, Nk, d)`.
    pub fn forward(&self, x: &Tensor, context: Option<&Tensor>) -> Result<Tensor> {
        let ctx = context.unwrap_or(x);
        let (b, nq, d) = x.dims3()?;
        let nk = ctx.dim(1)?;
        let dh = d / self.heads;
        let split = |t: Tensor, n: usize| -> Result<Tensor> {
            t.reshape((b, n, self.heads, dh))?.transpose(1, 2)?.contiguous()
        };
        let q = split(self.q.forward(x)?, nq)?;
        let k = split(self.k.forward(ctx)?, nk)?;
        let v = split(self.v.forward(ctx)?, nk)?;
        let scores = (q.matmul(&k.t()?.contiguous()?)? * (1.0 / (dh as f64).sqrt()))?;
        let attn = candle_nn::ops::softmax(&scores, D::Minus1)?;
        let y = attn.matmul(&v)?.transpose(1, 2)?.reshape((b, nq, d))?;
        self.out.forward(&y)
    }
}

#[derive(Debug, Clone)]
pub struct Mlp {
    fc1: Linear,
    fc2: Linear,
}

impl Mlp {
    pub fn new(ps: &ParamStore, dim: usize, ratio: usize) -> Result<Self> {
        Ok(Self {
            fc1: Linear::new(&ps.pp("fc1"), dim, dim * ratio)?,
            fc2: Linear::new(&ps.pp("fc2"), dim * ratio, dim)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.fc2.forward(&self.fc1.forward(x)?.gelu_erf()?)
    }
}

/// Sinusoidal `[cos(t w_i), sin(t w_i)]` with `w_i = 10000^(-i/half)`.
pub fn timestep_embedding(ts: &[usize], dim: usize) -> Vec<f32> {
    let half = dim / 2;
    let mut out = vec![0f32; ts.len() * dim];
    for (row, &t) in out.chunks_exact_mut(dim).zip(ts) {
        for i in 0..half {
            let freq = (-(10000f64.ln()) * i as f64 / half as f64).exp();
            let a = t as f64 * freq;
            row[i] = a.cos() as f32;
            row[half + i] = a.sin() as f32;
        }
    }
    out
}

/// Fixed 2D sin-cos position embeddings for a `gh x gw` grid in row-major order.
/// The first half of each vector encodes the row, the second the column.
pub fn sincos_2d(gh: usize, gw: usize, dim: usize) -> Result<Vec<f32>> {
    if !dim.is_multiple_of(4) {
        candle_core::bail!("position embedding dim {dim} must be divisible by 4");
    }
    let quarter = dim / 4;
    let mut out = vec![0f32; gh * gw * dim];
    for i in 0..gh {
        for j in 0..gw {
            let row = &mut out[(i * gw + j) * dim..(i * gw + j + 1) * dim];
            for (half, pos) in [(0, i), (1, j)] {
                for k in 0..quarter {
                    let omega = 1.0 / 10000f64.powf(k as f64 / quarter as f64);
                    let a = pos as f64 * omega;
                    row[half * 2 * quarter + k] = a.sin() as f32;
                    row[half * 2 * quarter + quarter + k] = a.cos() as f32;
                }
            }
        }
    }
    Ok(out)
}
