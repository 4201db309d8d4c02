//! Diffusion U-Net with timestep-conditioned residual blocks. Two stride-2
//! downsamplings put the fusion feature map at a quarter of the input side.

use candle_core::{Device, Result, Tensor};
use serde::{Deserialize, Serialize};

use crate::conv::upsample2x;
use crate::fused::{add_channel, silu};
use crate::layers::{timestep_embedding, Attention, Conv2d, GroupNorm, Linear};
use crate::params::{Init, ParamStore};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UNetConfig {
    pub in_channels: usize,
    pub base_channels: usize,
    /// One multiplier per downsampling level; exactly two levels.
    pub channel_mults: Vec<usize>,
    pub res_blocks_per_level: usize,
    /// Spatial sides with global self-attention; `None` means `[H/2, H/4]`.
    pub attention_resolutions: Option<Vec<usize>>,
    /// `None` means `4 * base_channels`.
    pub time_embed_dim: Option<usize>,
    pub attention_heads: usize,
    pub use_global_attention: bool,
    pub use_mae: bool,
}

impl Default for UNetConfig {
    fn default() -> Self {
        Self {
            in_channels: 1,
            base_channels: 64,
            channel_mults: vec![1, 2],
            res_blocks_per_level: 2,
            attention_resolutions: None,
            time_embed_dim: None,
            attention_heads: 4,
            use_global_attention: true,
            use_mae: true,
        }
    }
}

impl UNetConfig {
    pub fn validate(&self) -> std::result::Result<(), String> {
        if self.in_channels == 0 || self.base_channels == 0 {
            return Err("unet.in_channels and unet.base_channels must be positive".into());
        }
        if !self.base_channels.is_multiple_of(2) {
            return Err("unet.base_channels must be even".into());
        }
        if self.channel_mults.len() != 2 {
            return Err(format!(
                "unet.channel_mults must have exactly 2 levels so the fused feature map is H/4, got {}",
                self.channel_mults.len()
            ));
        }
        if self.channel_mults.contains(&0) {
            return Err("unet.channel_mults must be positive".into());
        }
        if self.res_blocks_per_level == 0 {
            return Err("unet.res_blocks_per_level must be positive".into());
        }
        if self.time_embed_dim == Some(0) {
            return Err("unet.time_embed_dim must be positive".into());
        }
        if self.use_global_attention {
            if self.attention_heads == 0 {
                return Err("unet.attention_heads must be positive".into());
            }
            for m in &self.channel_mults {
                let ch = self.base_channels * m;
                if !ch.is_multiple_of(self.attention_heads) {
                    return Err(format!(
                        "unet channel width {ch} not divisible by unet.attention_heads ({})",
                        self.attention_heads
                    ));
                }
            }
        }
        Ok(())
    }

    pub fn time_dim(&self) -> usize {
        self.time_embed_dim.unwrap_or(4 * self.base_channels)
    }

    /// Channel count of the fused feature map.
    pub fn fusion_channels(&self) -> usize {
        self.base_channels * self.channel_mults[self.channel_mults.len() - 1]
    }

    pub fn resolved_attention(&self, height: usize) -> Vec<usize> {
        if !self.use_global_attention {
            return Vec::new();
        }
        self.attention_resolutions
            .clone()
            .unwrap_or_else(|| vec![height / 2, height / 4])
    }
}

#[derive(Debug, Clone)]
struct ResBlock {
    norm1: GroupNorm,
    conv1: Conv2d,
    emb: Linear,
    norm2: GroupNorm,
    conv2: Conv2d,
    skip: Option<Conv2d>,
}

impl ResBlock {
    fn new(ps: &ParamStore, cin: usize, cout: usize, tdim: usize) -> Result<Self> {
        Ok(Self {
            norm1: GroupNorm::new(&ps.pp("norm1"), cin)?,
            conv1: Conv2d::new(&ps.pp("conv1"), cin, cout, 3, 1, 1)?,
            emb: Linear::new(&ps.pp("emb"), tdim, cout)?,
            norm2: GroupNorm::new(&ps.pp("norm2"), cout)?,
            conv2: Conv2d::with_init(&ps.pp("conv2"), cout, cout, 3, 1, 1, Init::Zeros)?,
            skip: if cin == cout {
                None
            } else {
                Some(Conv2d::new(&ps.pp("skip"), cin, cout, 1, 1, 0)?)
            },
        })
    }

    /// `temb_act` is `SiLU(temb)`, shared by all blocks.
    fn forward(&self, x: &Tensor, temb_act: &Tensor) -> Result<Tensor> {
        let h = self.conv1.forward(&silu(&self.norm1.forward(x)?)?)?;
        let h = add_channel(&h, &self.emb.forward(temb_act)?)?;
        let h = self.conv2.forward(&silu(&self.norm2.forward(&h)?)?)?;
        match &self.skip {
            Some(s) => s.forward(x)? + h,
            None => x + h,
        }
    }
}

/// Global self-attention over all spatial positions.
#[derive(Debug, Clone)]
struct AttnBlock {
    norm: GroupNorm,
    attn: Attention,
}

impl AttnBlock {
    fn new(ps: &ParamStore, ch: usize, heads: usize) -> Result<Self> {
        Ok(Self {
            norm: GroupNorm::new(&ps.pp("norm"), ch)?,
            attn: Attention::new(&ps.pp("attn"), ch, heads, true)?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        let seq = self.norm.forward(x)?.reshape((b, c, h * w))?.transpose(1, 2)?;
        let y = self.attn.forward(&seq, None)?.transpose(1, 2)?.reshape((b, c, h, w))?;
        x + y
    }
}

#[derive(Debug, Clone)]
struct Stage {
    res: ResBlock,
    attn: Option<AttnBlock>,
}

impl Stage {
    fn forward(&self, x: &Tensor, temb_act: &Tensor) -> Result<Tensor> {
        let h = self.res.forward(x, temb_act)?;
        match &self.attn {
            Some(a) => a.forward(&h),
            None => Ok(h),
        }
    }
}

#[derive(Debug, Clone)]
struct Upsample {
    conv: Conv2d,
}

impl Upsample {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.conv.forward(&upsample2x(x)?)
    }
}

/// Encoder output: the fusion feature map and skip tensors in push order.
#[derive(Debug, Clone)]
pub struct Encoded {
    pub f: Tensor,
    pub skips: Vec<Tensor>,
}

#[derive(Debug, Clone)]
pub struct UNet {
    cfg: UNetConfig,
    shape: (usize, usize),
    device: Device,
    time_fc1: Linear,
    time_fc2: Linear,
    in_conv: Conv2d,
    /// Per level: residual stages then the stride-2 downsampling conv.
    down: Vec<(Vec<Stage>, Conv2d)>,
    mid1: ResBlock,
    mid_attn: Option<AttnBlock>,
    mid2: ResBlock,
    /// Per decoder resolution, coarsest first: stages consuming skips, then an
    /// optional upsampling.
    up: Vec<(Vec<Stage>, Option<Upsample>)>,
    out_norm: GroupNorm,
    out_conv: Conv2d,
}

impl UNet {
    pub fn new(ps: &ParamStore, cfg: &UNetConfig, shape: (usize, usize)) -> Result<Self> {
        cfg.validate().map_err(candle_core::Error::msg)?;
        let (h, w) = shape;
        if h % 4 != 0 || w % 4 != 0 {
            candle_core::bail!("unet: input {h}x{w} must have sides divisible by 4");
        }
        let attn_at = cfg.resolved_attention(h);
        let heads = cfg.attention_heads;
        let tdim = cfg.time_dim();
        let base = cfg.base_channels;
        let n = cfg.res_blocks_per_level;
        let mk_attn = |ps: &ParamStore, res: usize, ch: usize| -> Result<Option<AttnBlock>> {
            if attn_at.contains(&res) {
                Ok(Some(AttnBlock::new(&ps.pp("attn"), ch, heads)?))
            } else {
                Ok(None)
            }
        };

        let time_fc1 = Linear::new(&ps.pp("time.fc1"), base, tdim)?;
        let time_fc2 = Linear::new(&ps.pp("time.fc2"), tdim, tdim)?;
        let in_conv = Conv2d::new(&ps.pp("in_conv"), cfg.in_channels, base, 3, 1, 1)?;

        let mut ch = base;
        let mut res = h;
        // (resolution, channels) of each skip, in push order
        let mut skip_meta = Vec::new();
        let mut down = Vec::new();
        for (l, &m) in cfg.channel_mults.iter().enumerate() {
            let lp = ps.pp(format!("down.{l}"));
            let mut stages = Vec::new();
            for i in 0..n {
                let sp = lp.pp(format!("{i}"));
                let cout = base * m;
                stages.push(Stage {
                    res: ResBlock::new(&sp.pp("res"), ch, cout, tdim)?,
                    attn: mk_attn(&sp, res, cout)?,
                });
                ch = cout;
                skip_meta.push((res, ch));
            }
            let ds = Conv2d::new(&lp.pp("downsample"), ch, ch, 3, 2, 1)?;
            res /= 2;
            skip_meta.push((res, ch));
            down.push((stages, ds));
        }

        let mid1 = ResBlock::new(&ps.pp("mid.res1"), ch, ch, tdim)?;
        let mid_attn = mk_attn(&ps.pp("mid"), res, ch)?;
        let mid2 = ResBlock::new(&ps.pp("mid.res2"), ch, ch, tdim)?;

        let mut up = Vec::new();
        let levels = cfg.channel_mults.len();
        for u in 0..=levels {
            let lp = ps.pp(format!("up.{u}"));
            // decoder level u runs at side h / 2^(levels - u)
            let level = levels - u;
            let cout = base * cfg.channel_mults[level.min(levels - 1)];
            let mut stages = Vec::new();
            let mut i = 0;
            while let Some(&(sres, sch)) = skip_meta.last() {
                if sres != res {
                    break;
                }
                skip_meta.pop();
                let sp = lp.pp(format!("{i}"));
                stages.push(Stage {
                    res: ResBlock::new(&sp.pp("res"), ch + sch, cout, tdim)?,
                    attn: mk_attn(&sp, res, cout)?,
                });
                ch = cout;
                i += 1;
            }
            let upsample = if level > 0 {
                res *= 2;
                Some(Upsample {
                    conv: Conv2d::new(&lp.pp("upsample"), ch, ch, 3, 1, 1)?,
                })
            } else {
                None
            };
            up.push((stages, upsample));
        }
        debug_assert!(skip_meta.is_empty());

        let out_norm = GroupNorm::new(&ps.pp("out.norm"), ch)?;
        let out_conv = Conv2d::new(&ps.pp("out.conv"), ch, cfg.in_channels, 3, 1, 1)?;
        Ok(Self {
            cfg: cfg.clone(),
            shape,
            device: ps.device().clone(),
            time_fc1,
            time_fc2,
            in_conv,
            down,
            mid1,
            mid_attn,
            mid2,
            up,
            out_norm,
            out_conv,
        })
    }

    pub fn config(&self) -> &UNetConfig {
        &self.cfg
    }

    pub fn input_shape(&self) -> (usize, usize) {
        self.shape
    }

    /// Number of skip tensors produced by [`encode`](Self::encode).
    pub fn num_skips(&self) -> usize {
        self.cfg.channel_mults.len() * (self.cfg.res_blocks_per_level + 1)
    }

    /// Projected timestep embedding, `(B, time_dim)`.
    pub fn embed_timestep(&self, ts: &[usize]) -> Result<Tensor> {
        let base = self.cfg.base_channels;
        let sin = Tensor::from_vec(timestep_embedding(ts, base), (ts.len(), base), &self.device)?;
        self.time_fc2.forward(&silu(&self.time_fc1.forward(&sin)?)?)
    }

    pub fn encode(&self, x: &Tensor, temb: &Tensor) -> Result<Encoded> {
        let (_, c, h, w) = x.dims4()?;
        if (h, w) != self.shape || c != self.cfg.in_channels {
            candle_core::bail!("unet: expected (B, {}, {}, {}), got {:?}", self.cfg.in_channels, self.shape.0, self.shape.1, x.dims());
        }
        let ta = silu(temb)?;
        let mut hcur = self.in_conv.forward(x)?;
        let mut skips = Vec::with_capacity(self.num_skips());
        for (stages, ds) in &self.down {
            for s in stages {
                hcur = s.forward(&hcur, &ta)?;
                skips.push(hcur.clone());
            }
            hcur = ds.forward(&hcur)?;
            skips.push(hcur.clone());
        }
        Ok(Encoded { f: hcur, skips })
    }

    pub fn middle(&self, x: &Tensor, temb: &Tensor) -> Result<Tensor> {
        let ta = silu(temb)?;
        let mut h = self.mid1.forward(x, &ta)?;
        if let Some(a) = &self.mid_attn {
            h = a.forward(&h)?;
        }
        self.mid2.forward(&h, &ta)
    }

    pub fn decode(&self, x: &Tensor, mut skips: Vec<Tensor>, temb: &Tensor) -> Result<Tensor> {
        let ta = silu(temb)?;
        let mut h = x.clone();
        for (stages, upsample) in &self.up {
            for s in stages {
                let Some(skip) = skips.pop() else {
                    candle_core::bail!("unet: ran out of skip tensors");
                };
                h = s.forward(&Tensor::cat(&[&h, &skip], 1)?, &ta)?;
            }
            if let Some(u) = upsample {
                h = u.forward(&h)?;
            }
        }
        if !skips.is_empty() {
            candle_core::bail!("unet: {} unused skip tensors", skips.len());
        }
        self.out_conv.forward(&silu(&self.out_norm.forward(&h)?)?)
    }

    /// Full pass with an optional additive term at the fusion point.
    pub fn forward(&self, x: &Tensor, ts: &[usize], fuse: Option<&Tensor>) -> Result<Tensor> {
        let temb = self.embed_timestep(ts)?;
        let Encoded { f, skips } = self.encode(x, &temb)?;
        let f = match fuse {
            Some(m) => fuse_mae(&f, m)?,
            None => f,
        };
        let h = self.middle(&f, &temb)?;
        self.decode(&h, skips, &temb)
    }
}

/// Element-wise `f + mae_out`.
pub fn fuse_mae(f: &Tensor, mae_out: &Tensor) -> Result<Tensor> {
    if f.dims() != mae_out.dims() {
        candle_core::bail!("fuse: shapes {:?} and {:?} differ", f.dims(), mae_out.dims());
    }
    f + mae_out
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};

    fn tiny(attn: bool) -> UNetConfig {
        UNetConfig {
            base_channels: 8,
            res_blocks_per_level: 1,
            attention_heads: 2,
            use_global_attention: attn,
            use_mae: false,
            ..UNetConfig::default()
        }
    }

    #[test]
    fn shapes_and_skip_count() {
        for attn in [false, true] {
            let ps = ParamStore::new(0);
            let cfg = tiny(attn);
            let net = UNet::new(&ps, &cfg, (16, 24)).unwrap();
            let x = Tensor::randn(0f32, 1.0, (2, 1, 16, 24), &Device::Cpu).unwrap();
            let temb = net.embed_timestep(&[1, 500]).unwrap();
            assert_eq!(temb.dims(), &[2, 32]);
            let enc = net.encode(&x, &temb).unwrap();
            assert_eq!(enc.f.dims(), &[2, 16, 4, 6]);
            assert_eq!(enc.skips.len(), net.num_skips());
            assert_eq!(net.num_skips(), 4);
            let y = net.forward(&x, &[1, 500], None).unwrap();
            assert_eq!(y.dims(), x.dims());
        }
    }

    #[test]
    fn attention_adds_parameters() {
        let a = ParamStore::new(0);
        UNet::new(&a, &tiny(false), (16, 16)).unwrap();
        let b = ParamStore::new(0);
        UNet::new(&b, &tiny(true), (16, 16)).unwrap();
        assert!(b.num_params() > a.num_params());
        assert_eq!(a.num_params_with_prefix("down.1.0.attn"), 0);
        assert!(b.num_params_with_prefix("down.1.0.attn") > 0);
        assert_eq!(b.num_params_with_prefix("down.0.0.attn"), 0);
    }

    #[test]
    fn fusion_with_zero_is_identity() {
        let f = Tensor::randn(0f32, 1.0, (1, 4, 3, 3), &Device::Cpu).unwrap();
        let z = Tensor::zeros((1, 4, 3, 3), DType::F32, &Device::Cpu).unwrap();
        let out = fuse_mae(&f, &z).unwrap();
        assert_eq!(
            out.flatten_all().unwrap().to_vec1::<f32>().unwrap(),
            f.flatten_all().unwrap().to_vec1::<f32>().unwrap()
        );
        assert!(fuse_mae(&f, &z.narrow(3, 0, 2).unwrap()).is_err());
    }

    #[test]
    fn rejects_bad_configs() {
        let mut c = tiny(false);
        c.channel_mults = vec![1, 2, 2];
        assert!(c.validate().is_err());
        let ps = ParamStore::new(0);
        assert!(UNet::new(&ps, &tiny(false), (18, 16)).is_err());
    }
}
