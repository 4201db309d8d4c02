//! Fused CPU kernels for group normalization and SiLU. Candle composes both
//! from broadcast primitives whose backward passes dominate training time.

use candle_core::{CpuStorage, CustomOp1, CustomOp3, Layout, Result, Shape, Tensor};

fn contiguous_f32<'a>(s: &'a CpuStorage, l: &Layout, op: &str) -> Result<&'a [f32]> {
    let data = match s {
        CpuStorage::F32(v) => v.as_slice(),
        _ => candle_core::bail!("{op}: only f32 is supported"),
    };
    match l.contiguous_offsets() {
        Some((a, b)) => Ok(&data[a..b]),
        None => candle_core::bail!("{op}: input must be contiguous"),
    }
}

fn host_vec(t: &Tensor) -> Result<Vec<f32>> {
    t.flatten_all()?.to_vec1::<f32>()
}

struct GroupNormOp {
    groups: usize,
    eps: f64,
}

impl GroupNormOp {
    /// Per-(batch, group) mean and inverse standard deviation.
    fn stats(&self, x: &[f32], b: usize, c: usize, hw: usize) -> Vec<(f64, f64)> {
        let cg = c / self.groups;
        let n = (cg * hw) as f64;
        (0..b * self.groups)
            .map(|bg| {
                let chunk = &x[bg * cg * hw..(bg + 1) * cg * hw];
                let mean = chunk.iter().map(|&v| v as f64).sum::<f64>() / n;
                let var = chunk.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
                (mean, 1.0 / (var + self.eps).sqrt())
            })
            .collect()
    }
}

fn dims_bchw(shape: &Shape) -> Result<(usize, usize, usize)> {
    let d = shape.dims();
    if d.len() < 3 {
        candle_core::bail!("group_norm: rank must be at least 3, got {d:?}");
    }
    Ok((d[0], d[1], d[2..].iter().product()))
}

impl CustomOp3 for GroupNormOp {
    fn name(&self) -> &'static str {
        "fused-group-norm"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
        s3: &CpuStorage,
        l3: &Layout,
    ) -> Result<(CpuStorage, Shape)> {
        let x = contiguous_f32(s1, l1, "group_norm")?;
        let w = contiguous_f32(s2, l2, "group_norm")?;
        let bias = contiguous_f32(s3, l3, "group_norm")?;
        let (b, c, hw) = dims_bchw(l1.shape())?;
        if c % self.groups != 0 || w.len() != c || bias.len() != c {
            candle_core::bail!("group_norm: {c} channels, {} groups, affine {}", self.groups, w.len());
        }
        let cg = c / self.groups;
        let stats = self.stats(x, b, c, hw);
        let mut out = vec![0f32; x.len()];
        for bi in 0..b {
            for ch in 0..c {
                let (mean, inv) = stats[bi * self.groups + ch / cg];
                let (scale, shift) = (w[ch] as f64 * inv, bias[ch] as f64 - w[ch] as f64 * inv * mean);
                let o = (bi * c + ch) * hw;
                for (y, &v) in out[o..o + hw].iter_mut().zip(&x[o..o + hw]) {
                    *y = (v as f64 * scale + shift) as f32;
                }
            }
        }
        Ok((CpuStorage::F32(out), l1.shape().clone()))
    }

    fn bwd(
        &self,
        x: &Tensor,
        w: &Tensor,
        _b: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> Result<(Option<Tensor>, Option<Tensor>, Option<Tensor>)> {
        let (b, c, hw) = dims_bchw(x.shape())?;
        let xs = host_vec(x)?;
        let ws = host_vec(w)?;
        let gs = host_vec(grad)?;
        let cg = c / self.groups;
        let n = (cg * hw) as f64;
        let stats = self.stats(&xs, b, c, hw);
        let mut dx = vec![0f32; xs.len()];
        let mut dw = vec![0f64; c];
        let mut db = vec![0f64; c];
        for bi in 0..b {
            for g in 0..self.groups {
                let (mean, inv) = stats[bi * self.groups + g];
                let (mut sum_d, mut sum_dx) = (0f64, 0f64);
                for ch in g * cg..(g + 1) * cg {
                    let o = (bi * c + ch) * hw;
                    let (mut cw, mut cb) = (0f64, 0f64);
                    for (&gv, &xv) in gs[o..o + hw].iter().zip(&xs[o..o + hw]) {
                        let xhat = (xv as f64 - mean) * inv;
                        let gv = gv as f64;
                        cw += gv * xhat;
                        cb += gv;
                    }
                    dw[ch] += cw;
                    db[ch] += cb;
                    sum_d += cb * ws[ch] as f64;
                    sum_dx += cw * ws[ch] as f64;
                }
                let (md, mdx) = (sum_d / n, sum_dx / n);
                for ch in g * cg..(g + 1) * cg {
                    let o = (bi * c + ch) * hw;
                    let wc = ws[ch] as f64;
                    for i in o..o + hw {
                        let xhat = (xs[i] as f64 - mean) * inv;
                        dx[i] = (inv * (gs[i] as f64 * wc - md - xhat * mdx)) as f32;
                    }
                }
            }
        }
        let dev = x.device();
        let to32 = |v: Vec<f64>| v.into_iter().map(|a| a as f32).collect::<Vec<_>>();
        Ok((
            Some(Tensor::from_vec(dx, x.shape(), dev)?),
            Some(Tensor::from_vec(to32(dw), c, dev)?),
            Some(Tensor::from_vec(to32(db), c, dev)?),
        ))
    }
}

/// Group normalization of `(B, C, ...)` with per-channel affine parameters.
pub fn group_norm(x: &Tensor, weight: &Tensor, bias: &Tensor, groups: usize, eps: f64) -> Result<Tensor> {
    x.contiguous()?.apply_op3(
        &weight.contiguous()?,
        &bias.contiguous()?,
        GroupNormOp { groups, eps },
    )
}

struct SiluOp;

fn sigmoid(v: f32) -> f32 {
    1.0 / (1.0 + (-v).exp())
}

impl CustomOp1 for SiluOp {
    fn name(&self) -> &'static str {
        "fused-silu"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> Result<(CpuStorage, Shape)> {
        let x = contiguous_f32(s, l, "silu")?;
        let out = x.iter().map(|&v| v * sigmoid(v)).collect();
        Ok((CpuStorage::F32(out), l.shape().clone()))
    }

    fn bwd(&self, x: &Tensor, _res: &Tensor, grad: &Tensor) -> Result<Option<Tensor>> {
        let xs = host_vec(x)?;
        let gs = host_vec(grad)?;
        let dx: Vec<f32> = xs
            .iter()
            .zip(&gs)
            .map(|(&v, &g)| {
                let s = sigmoid(v);
                g * s * (1.0 + v * (1.0 - s))
            })
            .collect();
        Ok(Some(Tensor::from_vec(dx, x.shape(), x.device())?))
    }
}

/// `x * sigmoid(x)`.
pub fn silu(x: &Tensor) -> Result<Tensor> {
    x.contiguous()?.apply_op1(SiluOp)
}

struct AddChannelOp;

impl candle_core::CustomOp2 for AddChannelOp {
    fn name(&self) -> &'static str {
        "add-channel-bias"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> Result<(CpuStorage, Shape)> {
        let x = contiguous_f32(s1, l1, "add_channel")?;
        let e = contiguous_f32(s2, l2, "add_channel")?;
        let (b, c, hw) = dims_bchw(l1.shape())?;
        if e.len() != b * c {
            candle_core::bail!("add_channel: {} offsets for {b}x{c} planes", e.len());
        }
        let mut out = x.to_vec();
        for (plane, &v) in out.chunks_exact_mut(hw).zip(e) {
            plane.iter_mut().for_each(|p| *p += v);
        }
        Ok((CpuStorage::F32(out), l1.shape().clone()))
    }

    fn bwd(&self, _x: &Tensor, e: &Tensor, _res: &Tensor, grad: &Tensor) -> Result<(Option<Tensor>, Option<Tensor>)> {
        let (_, _, hw) = dims_bchw(grad.shape())?;
        let ge: Vec<f32> = host_vec(grad)?
            .chunks_exact(hw)
            .map(|p| p.iter().map(|&v| v as f64).sum::<f64>() as f32)
            .collect();
        Ok((Some(grad.clone()), Some(Tensor::from_vec(ge, e.shape(), e.device())?)))
    }
}

/// `x[b, c, ...] + e[b, c]` for `x: (B, C, ...)` and `e: (B, C)`.
pub fn add_channel(x: &Tensor, e: &Tensor) -> Result<Tensor> {
    x.contiguous()?.apply_op2(&e.contiguous()?, AddChannelOp)
}
