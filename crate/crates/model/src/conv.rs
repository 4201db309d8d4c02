//! 2D convolution as a candle custom op: im2col followed by a single-threaded
//! sgemm, with matching backward kernels. Candle's built-in CPU convolution is
//! several times slower at the small channel counts used here.

use candle_core::{CpuStorage, CustomOp1, CustomOp2, CustomOp3, Layout, Result, Shape, Tensor};

#[derive(Debug, Clone, Copy)]
struct Geometry {
    cin: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl Geometry {
    fn new(cin: usize, h: usize, w: usize, k: usize, stride: usize, pad: usize) -> Result<Self> {
        if h + 2 * pad < k || w + 2 * pad < k {
            candle_core::bail!("conv2d: kernel {k} larger than padded input {h}x{w}");
        }
        Ok(Self {
            cin,
            h,
            w,
            k,
            stride,
            pad,
            ho: (h + 2 * pad - k) / stride + 1,
            wo: (w + 2 * pad - k) / stride + 1,
        })
    }

    fn col_rows(&self) -> usize {
        self.cin * self.k * self.k
    }

    fn out_len(&self) -> usize {
        self.ho * self.wo
    }

    /// Input column for output column `ox` and kernel tap `kx`, if inside the image.
    #[inline]
    fn src_x(&self, ox: usize, kx: usize) -> Option<usize> {
        let ix = (ox * self.stride + kx) as isize - self.pad as isize;
        (ix >= 0 && (ix as usize) < self.w).then_some(ix as usize)
    }

    #[inline]
    fn src_y(&self, oy: usize, ky: usize) -> Option<usize> {
        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
        (iy >= 0 && (iy as usize) < self.h).then_some(iy as usize)
    }

    /// Unfolds one image `(cin, h, w)` into `(cin*k*k, ho*wo)`.
    fn im2col(&self, x: &[f32], cols: &mut [f32]) {
        let hw = self.out_len();
        for c in 0..self.cin {
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let row = ((c * self.k + ky) * self.k + kx) * hw;
                    for oy in 0..self.ho {
                        let dst = &mut cols[row + oy * self.wo..row + (oy + 1) * self.wo];
                        let Some(iy) = self.src_y(oy, ky) else {
                            dst.fill(0.0);
                            continue;
                        };
                        let src = &x[(c * self.h + iy) * self.w..(c * self.h + iy + 1) * self.w];
                        for (ox, d) in dst.iter_mut().enumerate() {
                            *d = self.src_x(ox, kx).map_or(0.0, |ix| src[ix]);
                        }
                    }
                }
            }
        }
    }

    /// Folds `(cin*k*k, ho*wo)` columns back onto an image, accumulating overlaps.
    fn col2im(&self, cols: &[f32], x: &mut [f32]) {
        let hw = self.out_len();
        for c in 0..self.cin {
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let row = ((c * self.k + ky) * self.k + kx) * hw;
                    for oy in 0..self.ho {
                        let Some(iy) = self.src_y(oy, ky) else { continue };
                        let src = &cols[row + oy * self.wo..row + (oy + 1) * self.wo];
                        let dst = &mut x[(c * self.h + iy) * self.w..(c * self.h + iy + 1) * self.w];
                        for (ox, v) in src.iter().enumerate() {
                            if let Some(ix) = self.src_x(ox, kx) {
                                dst[ix] += v;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// `C = alpha * op(A) * op(B) + beta * C` on row-major buffers.
#[allow(clippy::too_many_arguments)]
fn sgemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    a_t: bool,
    b: &[f32],
    b_t: bool,
    c: &mut [f32],
    beta: f32,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserts above bound every access made with these strides.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn f32_slice<'a>(s: &'a CpuStorage, l: &Layout) -> Result<&'a [f32]> {
    let data = match s {
        CpuStorage::F32(v) => v.as_slice(),
        _ => candle_core::bail!("conv2d: only f32 is supported"),
    };
    match l.contiguous_offsets() {
        Some((start, end)) => Ok(&data[start..end]),
        None => candle_core::bail!("conv2d: input must be contiguous"),
    }
}

struct Conv2dOp {
    stride: usize,
    pad: usize,
}

impl CustomOp2 for Conv2dOp {
    fn name(&self) -> &'static str {
        "im2col-conv2d"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> Result<(CpuStorage, Shape)> {
        let x = f32_slice(s1, l1)?;
        let w = f32_slice(s2, l2)?;
        let (b, cin, h, wd) = l1.shape().dims4()?;
        let (cout, wcin, k, k2) = l2.shape().dims4()?;
        if wcin != cin || k != k2 {
            candle_core::bail!("conv2d: weight {:?} incompatible with input {:?}", l2.shape(), l1.shape());
        }
        let g = Geometry::new(cin, h, wd, k, self.stride, self.pad)?;
        let hw = g.out_len();
        let mut cols = vec![0f32; g.col_rows() * hw];
        let mut out = vec![0f32; b * cout * hw];
        for (xi, oi) in x.chunks_exact(cin * h * wd).zip(out.chunks_exact_mut(cout * hw)) {
            g.im2col(xi, &mut cols);
            sgemm(cout, g.col_rows(), hw, w, false, &cols, false, oi, 0.0);
        }
        Ok((CpuStorage::F32(out), Shape::from((b, cout, g.ho, g.wo))))
    }

    fn bwd(
        &self,
        x: &Tensor,
        w: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> Result<(Option<Tensor>, Option<Tensor>)> {
        let grad = grad.contiguous()?;
        let (_, _, h, wd) = x.dims4()?;
        let gx = grad.apply_op2_no_bwd(
            w,
            &ConvInputGrad {
                stride: self.stride,
                pad: self.pad,
                h,
                w: wd,
            },
        )?;
        let (_, _, k, _) = w.dims4()?;
        let gw = x.apply_op2_no_bwd(
            &grad,
            &ConvWeightGrad {
                stride: self.stride,
                pad: self.pad,
                k,
            },
        )?;
        Ok((Some(gx), Some(gw)))
    }
}

/// d(loss)/d(input) from `(grad_out, weight)`.
struct ConvInputGrad {
    stride: usize,
    pad: usize,
    h: usize,
    w: usize,
}

impl CustomOp2 for ConvInputGrad {
    fn name(&self) -> &'static str {
        "im2col-conv2d-input-grad"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> Result<(CpuStorage, Shape)> {
        let gout = f32_slice(s1, l1)?;
        let w = f32_slice(s2, l2)?;
        let (b, cout, ho, wo) = l1.shape().dims4()?;
        let (_, cin, k, _) = l2.shape().dims4()?;
        let g = Geometry::new(cin, self.h, self.w, k, self.stride, self.pad)?;
        debug_assert_eq!((g.ho, g.wo), (ho, wo));
        let hw = g.out_len();
        let mut cols = vec![0f32; g.col_rows() * hw];
        let mut gx = vec![0f32; b * cin * self.h * self.w];
        for (go, gxi) in gout
            .chunks_exact(cout * hw)
            .zip(gx.chunks_exact_mut(cin * self.h * self.w))
        {
            sgemm(g.col_rows(), cout, hw, w, true, go, false, &mut cols, 0.0);
            g.col2im(&cols, gxi);
        }
        Ok((CpuStorage::F32(gx), Shape::from((b, cin, self.h, self.w))))
    }
}

/// d(loss)/d(weight) from `(input, grad_out)`.
struct ConvWeightGrad {
    stride: usize,
    pad: usize,
    k: usize,
}

impl CustomOp2 for ConvWeightGrad {
    fn name(&self) -> &'static str {
        "im2col-conv2d-weight-grad"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> Result<(CpuStorage, Shape)> {
        let x = f32_slice(s1, l1)?;
        let gout = f32_slice(s2, l2)?;
        let (_, cin, h, w) = l1.shape().dims4()?;
        let (_, cout, _, _) = l2.shape().dims4()?;
        let g = Geometry::new(cin, h, w, self.k, self.stride, self.pad)?;
        let hw = g.out_len();
        let mut cols = vec![0f32; g.col_rows() * hw];
        let mut gw = vec![0f32; cout * g.col_rows()];
        for (xi, go) in x.chunks_exact(cin * h * w).zip(gout.chunks_exact(cout * hw)) {
            g.im2col(xi, &mut cols);
            sgemm(cout, hw, g.col_rows(), go, false, &cols, true, &mut gw, 1.0);
        }
        Ok((
            CpuStorage::F32(gw),
            Shape::from((cout, cin, self.k, self.k)),
        ))
    }
}

struct Conv2dBiasOp {
    stride: usize,
    pad: usize,
}

impl CustomOp3 for Conv2dBiasOp {
    fn name(&self) -> &'static str {
        "im2col-conv2d-bias"
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
        let conv = Conv2dOp { stride: self.stride, pad: self.pad };
        let (out, shape) = conv.cpu_fwd(s1, l1, s2, l2)?;
        let bias = f32_slice(s3, l3)?;
        let CpuStorage::F32(mut out) = out else { unreachable!("conv output is f32") };
        let (_, cout, ho, wo) = shape.dims4()?;
        if bias.len() != cout {
            candle_core::bail!("conv2d: bias of {} for {cout} output channels", bias.len());
        }
        for (i, plane) in out.chunks_exact_mut(ho * wo).enumerate() {
            let b = bias[i % cout];
            plane.iter_mut().for_each(|v| *v += b);
        }
        Ok((CpuStorage::F32(out), shape))
    }

    fn bwd(
        &self,
        x: &Tensor,
        w: &Tensor,
        _b: &Tensor,
        res: &Tensor,
        grad: &Tensor,
    ) -> Result<(Option<Tensor>, Option<Tensor>, Option<Tensor>)> {
        let conv = Conv2dOp { stride: self.stride, pad: self.pad };
        let (gx, gw) = conv.bwd(x, w, res, grad)?;
        let (_, cout, ho, wo) = grad.dims4()?;
        let g = grad.flatten_all()?.to_vec1::<f32>()?;
        let mut gb = vec![0f64; cout];
        for (i, plane) in g.chunks_exact(ho * wo).enumerate() {
            gb[i % cout] += plane.iter().map(|&v| v as f64).sum::<f64>();
        }
        let gb: Vec<f32> = gb.into_iter().map(|v| v as f32).collect();
        Ok((gx, gw, Some(Tensor::from_vec(gb, cout, grad.device())?)))
    }
}

/// Convolution plus a per-output-channel bias of shape `(Cout,)`.
pub fn conv2d_bias(x: &Tensor, weight: &Tensor, bias: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
    x.contiguous()?.apply_op3(
        &weight.contiguous()?,
        &bias.contiguous()?,
        Conv2dBiasOp { stride, pad },
    )
}

/// Convolution of `(B, Cin, H, W)` with `(Cout, Cin, k, k)` weights.
pub fn conv2d(x: &Tensor, weight: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
    x.contiguous()?
        .apply_op2(&weight.contiguous()?, Conv2dOp { stride, pad })
}

struct Upsample2x;

impl CustomOp1 for Upsample2x {
    fn name(&self) -> &'static str {
        "nearest-upsample-2x"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> Result<(CpuStorage, Shape)> {
        let x = f32_slice(s, l)?;
        let (b, c, h, w) = l.shape().dims4()?;
        let mut out = vec![0f32; b * c * 4 * h * w];
        for (plane, op) in x.chunks_exact(h * w).zip(out.chunks_exact_mut(4 * h * w)) {
            for y in 0..h {
                for dy in 0..2 {
                    let row = &mut op[(2 * y + dy) * 2 * w..(2 * y + dy + 1) * 2 * w];
                    for xx in 0..w {
                        let v = plane[y * w + xx];
                        row[2 * xx] = v;
                        row[2 * xx + 1] = v;
                    }
                }
            }
        }
        Ok((CpuStorage::F32(out), Shape::from((b, c, 2 * h, 2 * w))))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad: &Tensor) -> Result<Option<Tensor>> {
        Ok(Some(grad.contiguous()?.apply_op1_no_bwd(&SumPool2x)?))
    }
}

struct SumPool2x;

impl CustomOp1 for SumPool2x {
    fn name(&self) -> &'static str {
        "sum-pool-2x"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> Result<(CpuStorage, Shape)> {
        let g = f32_slice(s, l)?;
        let (b, c, h2, w2) = l.shape().dims4()?;
        let (h, w) = (h2 / 2, w2 / 2);
        let mut out = vec![0f32; b * c * h * w];
        for (plane, op) in g.chunks_exact(h2 * w2).zip(out.chunks_exact_mut(h * w)) {
            for y in 0..h {
                for x in 0..w {
                    let i = 2 * y * w2 + 2 * x;
                    op[y * w + x] = plane[i] + plane[i + 1] + plane[i + w2] + plane[i + w2 + 1];
                }
            }
        }
        Ok((CpuStorage::F32(out), Shape::from((b, c, h, w))))
    }
}

/// Nearest-neighbour 2x spatial upsampling of `(B, C, H, W)`.
pub fn upsample2x(x: &Tensor) -> Result<Tensor> {
    x.contiguous()?.apply_op1(Upsample2x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{Device, Var};

    fn rand(shape: &[usize], seed: u64) -> Tensor {
        let n: usize = shape.iter().product();
        let mut s = seed;
        let v: Vec<f32> = (0..n)
            .map(|_| {
                s = maediff_core::seed::derive_seed(s, 1);
                (s >> 40) as f32 / (1u64 << 24) as f32 - 0.5
            })
            .collect();
        Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
    }

    fn max_diff(a: &Tensor, b: &Tensor) -> f32 {
        (a - b).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f32>().unwrap()
    }

    #[test]
    fn matches_candle_conv() {
        for (k, stride, pad) in [(3, 1, 1), (3, 2, 1), (1, 1, 0), (2, 2, 0)] {
            let x = rand(&[2, 3, 8, 6], 1);
            let w = rand(&[4, 3, k, k], 2);
            let ours = conv2d(&x, &w, stride, pad).unwrap();
            let theirs = x.conv2d(&w, pad, stride, 1, 1).unwrap();
            assert_eq!(ours.dims(), theirs.dims());
            assert!(max_diff(&ours, &theirs) < 1e-5);
        }
    }

    #[test]
    fn gradients_match_candle_conv() {
        for (stride, pad) in [(1, 1), (2, 1)] {
            let x = Var::from_tensor(&rand(&[2, 3, 8, 8], 3)).unwrap();
            let w = Var::from_tensor(&rand(&[5, 3, 3, 3], 4)).unwrap();
            let probe = rand(&[2, 5, 8 / stride, 8 / stride], 5);
            let ours = conv2d(x.as_tensor(), w.as_tensor(), stride, pad)
                .unwrap()
                .mul(&probe)
                .unwrap()
                .sum_all()
                .unwrap()
                .backward()
                .unwrap();
            let theirs = x
                .as_tensor()
                .conv2d(w.as_tensor(), pad, stride, 1, 1)
                .unwrap()
                .mul(&probe)
                .unwrap()
                .sum_all()
                .unwrap()
                .backward()
                .unwrap();
            for v in [&x, &w] {
                let a = ours.get(v.as_tensor()).unwrap();
                let b = theirs.get(v.as_tensor()).unwrap();
                assert!(max_diff(a, b) < 1e-4, "stride {stride}");
            }
        }
    }

    #[test]
    fn bias_variant_matches_broadcast_add() {
        let x = Var::from_tensor(&rand(&[2, 3, 6, 6], 11)).unwrap();
        let w = Var::from_tensor(&rand(&[4, 3, 3, 3], 12)).unwrap();
        let b = Var::from_tensor(&rand(&[4], 13)).unwrap();
        let probe = rand(&[2, 4, 3, 3], 14);
        let fused = conv2d_bias(x.as_tensor(), w.as_tensor(), b.as_tensor(), 2, 1).unwrap();
        let plain = conv2d(x.as_tensor(), w.as_tensor(), 2, 1)
            .unwrap()
            .broadcast_add(&b.as_tensor().reshape((1, 4, 1, 1)).unwrap())
            .unwrap();
        assert!(max_diff(&fused, &plain) < 1e-6);
        let ga = fused.mul(&probe).unwrap().sum_all().unwrap().backward().unwrap();
        let gb = plain.mul(&probe).unwrap().sum_all().unwrap().backward().unwrap();
        for v in [&x, &w, &b] {
            assert!(max_diff(ga.get(v.as_tensor()).unwrap(), gb.get(v.as_tensor()).unwrap()) < 1e-5);
        }
    }

    #[test]
    fn upsample_and_its_gradient() {
        let x = Var::from_tensor(&rand(&[1, 2, 3, 4], 9)).unwrap();
        let up = upsample2x(x.as_tensor()).unwrap();
        let reference = x.as_tensor().upsample_nearest2d(6, 8).unwrap();
        assert_eq!(max_diff(&up, &reference), 0.0);
        let probe = rand(&[1, 2, 6, 8], 10);
        let g = up.mul(&probe).unwrap().sum_all().unwrap().backward().unwrap();
        let gx = g.get(x.as_tensor()).unwrap();
        let want = probe
            .reshape((1, 2, 3, 2, 4, 2))
            .unwrap()
            .sum(5)
            .unwrap()
            .sum(3)
            .unwrap();
        assert!(max_diff(gx, &want) < 1e-6);
    }
}
