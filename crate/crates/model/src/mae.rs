//! Masked autoencoder over grid tokens of the U-Net feature map. The encoder
//! sees only visible grids; the decoder attends over every grid and
//! cross-attends to encoder latents in reverse depth order.

use candle_core::{Result, Tensor};
use serde::{Deserialize, Serialize};

use crate::layers::{sincos_2d, Attention, LayerNorm, Linear, Mlp};
use crate::params::{Init, ParamStore};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MaeConfig {
    pub d1: usize,
    pub enc_blocks: usize,
    pub enc_heads: usize,
    pub d2: usize,
    pub dec_blocks: usize,
    pub dec_heads: usize,
    pub mlp_ratio: usize,
    /// Encoder block (1-based) read by each decoder block; `None` uses [`block_mapping`].
    pub block_map: Option<Vec<usize>>,
    /// Add a projected timestep embedding to decoder tokens.
    pub use_timestep: bool,
}

impl Default for MaeConfig {
    fn default() -> Self {
        Self {
            d1: 384,
            enc_blocks: 12,
            enc_heads: 6,
            d2: 512,
            dec_blocks: 8,
            dec_heads: 16,
            mlp_ratio: 4,
            block_map: None,
            use_timestep: false,
        }
    }
}

impl MaeConfig {
    pub fn validate(&self) -> std::result::Result<(), String> {
        if self.enc_heads == 0 || !self.d1.is_multiple_of(self.enc_heads) {
            return Err(format!("mae.d1 ({}) must be divisible by mae.enc_heads ({})", self.d1, self.enc_heads));
        }
        if self.dec_heads == 0 || !self.d2.is_multiple_of(self.dec_heads) {
            return Err(format!("mae.d2 ({}) must be divisible by mae.dec_heads ({})", self.d2, self.dec_heads));
        }
        if !self.d1.is_multiple_of(4) || !self.d2.is_multiple_of(4) {
            return Err("mae.d1 and mae.d2 must be divisible by 4".into());
        }
        if self.enc_blocks == 0 || self.dec_blocks == 0 {
            return Err("mae block counts must be positive".into());
        }
        if self.dec_blocks > self.enc_blocks {
            return Err(format!(
                "mae.dec_blocks ({}) must not exceed mae.enc_blocks ({})",
                self.dec_blocks, self.enc_blocks
            ));
        }
        if self.mlp_ratio == 0 {
            return Err("mae.mlp_ratio must be positive".into());
        }
        if let Some(map) = &self.block_map {
            if map.len() != self.dec_blocks || map.iter().any(|&e| e == 0 || e > self.enc_blocks) {
                return Err(format!(
                    "mae.block_map must list {} encoder blocks in 1..={}",
                    self.dec_blocks, self.enc_blocks
                ));
            }
        }
        Ok(())
    }

    pub fn resolved_block_map(&self) -> Vec<usize> {
        self.block_map
            .clone()
            .unwrap_or_else(|| block_mapping(self.dec_blocks, self.enc_blocks))
    }
}

/// `e(j) = enc - floor((j - 1) * enc / dec)` for `j = 1..=dec`.
pub fn block_mapping(dec_blocks: usize, enc_blocks: usize) -> Vec<usize> {
    (1..=dec_blocks)
        .map(|j| enc_blocks - (j - 1) * enc_blocks / dec_blocks)
        .collect()
}

/// Grid layout of the feature map seen by the MAE.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TokenGrid {
    pub channels: usize,
    /// Side of one grid cell on the feature map (`r / 4`).
    pub cell: usize,
    pub rows: usize,
    pub cols: usize,
}

impl TokenGrid {
    pub fn num_tokens(&self) -> usize {
        self.rows * self.cols
    }

    pub fn token_dim(&self) -> usize {
        self.channels * self.cell * self.cell
    }

    fn upsample_stages(&self) -> usize {
        self.cell.trailing_zeros() as usize
    }
}

/// `(B, C, rows*cell, cols*cell)` to `(B, N, C*cell*cell)`, row-major over cells.
pub fn tokenize(f: &Tensor, grid: &TokenGrid) -> Result<Tensor> {
    let (b, c, h, w) = f.dims4()?;
    let TokenGrid { cell, rows, cols, .. } = *grid;
    if c != grid.channels || h != rows * cell || w != cols * cell {
        candle_core::bail!(
            "tokenize: feature map {:?} does not tile into {rows}x{cols} cells of {cell} with {} channels",
            f.dims(),
            grid.channels
        );
    }
    f.reshape((b, c, rows, cell, cols, cell))?
        .permute((0, 2, 4, 1, 3, 5))?
        .reshape((b, rows * cols, c * cell * cell))
}

/// Inverse of [`tokenize`].
pub fn untokenize(tokens: &Tensor, grid: &TokenGrid) -> Result<Tensor> {
    let (b, _, _) = tokens.dims3()?;
    let TokenGrid { channels: c, cell, rows, cols } = *grid;
    tokens
        .reshape((b, rows, cols, c, cell, cell))?
        .permute((0, 3, 1, 4, 2, 5))?
        .reshape((b, c, rows * cell, cols * cell))
}

#[derive(Debug, Clone)]
struct ViTBlock {
    norm1: LayerNorm,
    attn: Attention,
    norm2: LayerNorm,
    mlp: Mlp,
}

impl ViTBlock {
    fn new(ps: &ParamStore, dim: usize, heads: usize, ratio: usize) -> Result<Self> {
        Ok(Self {
            norm1: LayerNorm::new(&ps.pp("norm1"), dim)?,
            attn: Attention::new(&ps.pp("attn"), dim, heads, false)?,
            norm2: LayerNorm::new(&ps.pp("norm2"), dim)?,
            mlp: Mlp::new(&ps.pp("mlp"), dim, ratio)?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let x = (x + self.attn.forward(&self.norm1.forward(x)?, None)?)?;
        &x + self.mlp.forward(&self.norm2.forward(&x)?)?
    }
}

#[derive(Debug, Clone)]
struct DecoderBlock {
    ctx_norm: LayerNorm,
    ctx_proj: Linear,
    norm_cross: LayerNorm,
    cross: Attention,
    inner: ViTBlock,
}

impl DecoderBlock {
    fn new(ps: &ParamStore, cfg: &MaeConfig) -> Result<Self> {
        Ok(Self {
            ctx_norm: LayerNorm::new(&ps.pp("ctx_norm"), cfg.d1)?,
            ctx_proj: Linear::new(&ps.pp("ctx_proj"), cfg.d1, cfg.d2)?,
            norm_cross: LayerNorm::new(&ps.pp("norm_cross"), cfg.d2)?,
            cross: Attention::new(&ps.pp("cross"), cfg.d2, cfg.dec_heads, false)?,
            inner: ViTBlock::new(ps, cfg.d2, cfg.dec_heads, cfg.mlp_ratio)?,
        })
    }

    fn forward(&self, z: &Tensor, latent: &Tensor) -> Result<Tensor> {
        let ctx = self.ctx_proj.forward(&self.ctx_norm.forward(latent)?)?;
        let z = (z + self.cross.forward(&self.norm_cross.forward(z)?, Some(&ctx))?)?;
        self.inner.forward(&z)
    }
}

/// Stride-2, kernel-2 transposed convolution: a per-pixel linear map followed
/// by a 2x2 pixel shuffle.
#[derive(Debug, Clone)]
struct Deconv2x {
    proj: Linear,
    bias: Tensor,
    cout: usize,
}

impl Deconv2x {
    fn new(ps: &ParamStore, cin: usize, cout: usize) -> Result<Self> {
        Ok(Self {
            proj: Linear::with_init(&ps.pp("proj"), cin, cout * 4, Init::fan_in(cin), Init::Zeros)?,
            bias: ps.get("bias", &[cout], Init::Zeros)?,
            cout,
        })
    }

    /// `(B, h, w, cin)` channels-last to `(B, cout, 2h, 2w)`.
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, h, w, _) = x.dims4()?;
        self.proj
            .forward(x)?
            .reshape((b, h, w, self.cout, 2, 2))?
            .permute((0, 3, 1, 4, 2, 5))?
            .reshape((b, self.cout, 2 * h, 2 * w))?
            .broadcast_add(&self.bias.reshape((1, self.cout, 1, 1))?)
    }
}

#[derive(Debug, Clone)]
pub struct MaeModule {
    cfg: MaeConfig,
    grid: TokenGrid,
    block_map: Vec<usize>,
    enc_embed: Linear,
    dec_embed: Linear,
    enc_pos: Tensor,
    dec_pos: Tensor,
    encoder: Vec<ViTBlock>,
    decoder: Vec<DecoderBlock>,
    dec_norm: LayerNorm,
    time_proj: Option<Linear>,
    upsample: Vec<Deconv2x>,
    /// Used instead of `upsample` when a grid cell is a single feature pixel.
    flat_out: Option<Linear>,
}

impl MaeModule {
    pub fn new(ps: &ParamStore, cfg: &MaeConfig, grid: TokenGrid, time_dim: usize) -> Result<Self> {
        cfg.validate().map_err(candle_core::Error::msg)?;
        if !grid.cell.is_power_of_two() {
            candle_core::bail!("mae: grid cell side {} on the feature map must be a power of two", grid.cell);
        }
        let dev = ps.device();
        let n = grid.num_tokens();
        let enc_pos = Tensor::from_vec(sincos_2d(grid.rows, grid.cols, cfg.d1)?, (n, cfg.d1), dev)?;
        let dec_pos = Tensor::from_vec(sincos_2d(grid.rows, grid.cols, cfg.d2)?, (n, cfg.d2), dev)?;
        let enc_embed = Linear::new(&ps.pp("enc_embed"), grid.token_dim(), cfg.d1)?;
        let dec_embed = Linear::new(&ps.pp("dec_embed"), grid.token_dim(), cfg.d2)?;
        let encoder = (0..cfg.enc_blocks)
            .map(|i| ViTBlock::new(&ps.pp(format!("encoder.{i}")), cfg.d1, cfg.enc_heads, cfg.mlp_ratio))
            .collect::<Result<Vec<_>>>()?;
        let decoder = (0..cfg.dec_blocks)
            .map(|i| DecoderBlock::new(&ps.pp(format!("decoder.{i}")), cfg))
            .collect::<Result<Vec<_>>>()?;
        let dec_norm = LayerNorm::new(&ps.pp("dec_norm"), cfg.d2)?;
        let time_proj = if cfg.use_timestep {
            Some(Linear::new(&ps.pp("time_proj"), time_dim, cfg.d2)?)
        } else {
            None
        };
        let stages = grid.upsample_stages();
        let mut upsample = Vec::with_capacity(stages);
        let mut cin = cfg.d2;
        for s in 0..stages {
            let cout = if s + 1 == stages { grid.channels } else { (cin / 2).max(1) };
            upsample.push(Deconv2x::new(&ps.pp(format!("upsample.{s}")), cin, cout)?);
            cin = cout;
        }
        let flat_out = if stages == 0 {
            Some(Linear::new(&ps.pp("flat_out"), cfg.d2, grid.channels)?)
        } else {
            None
        };
        Ok(Self {
            cfg: cfg.clone(),
            grid,
            block_map: cfg.resolved_block_map(),
            enc_embed,
            dec_embed,
            enc_pos,
            dec_pos,
            encoder,
            decoder,
            dec_norm,
            time_proj,
            upsample,
            flat_out,
        })
    }

    pub fn config(&self) -> &MaeConfig {
        &self.cfg
    }

    pub fn grid(&self) -> &TokenGrid {
        &self.grid
    }

    pub fn block_map(&self) -> &[usize] {
        &self.block_map
    }

    /// Runs the encoder on the visible grids of each sample and returns every
    /// block's output, each `(B, |visible|, d1)`.
    pub fn encode_visible(&self, f: &Tensor, visible: &[Vec<usize>]) -> Result<Vec<Tensor>> {
        let cells = tokenize(f, &self.grid)?;
        let (b, n, dim) = cells.dims3()?;
        if visible.len() != b {
            candle_core::bail!("encode_visible: {} visible sets for batch of {b}", visible.len());
        }
        let nv = visible[0].len();
        if nv == 0 {
            candle_core::bail!("encode_visible: empty visible set");
        }
        let mut flat = Vec::with_capacity(b * nv);
        let mut pos = Vec::with_capacity(b * nv);
        for (i, vis) in visible.iter().enumerate() {
            if vis.len() != nv {
                candle_core::bail!("encode_visible: visible set sizes differ within the batch");
            }
            for &g in vis {
                if g >= n {
                    candle_core::bail!("encode_visible: grid {g} out of range {n}");
                }
                flat.push((i * n + g) as u32);
                pos.push(g as u32);
            }
        }
        let dev = f.device();
        let flat = Tensor::from_vec(flat, b * nv, dev)?;
        let pos = Tensor::from_vec(pos, b * nv, dev)?;
        let gathered = cells.reshape((b * n, dim))?.index_select(&flat, 0)?;
        let mut x = (self.enc_embed.forward(&gathered)? + self.enc_pos.index_select(&pos, 0)?)?
            .reshape((b, nv, self.cfg.d1))?;
        let mut latents = Vec::with_capacity(self.encoder.len());
        for block in &self.encoder {
            x = block.forward(&x)?;
            latents.push(x.clone());
        }
        Ok(latents)
    }

    /// Decoder tokens before the first block: projection of every grid plus
    /// position embeddings.
    pub fn embed_decoder_tokens(&self, f: &Tensor) -> Result<Tensor> {
        let cells = tokenize(f, &self.grid)?;
        self.dec_embed.forward(&cells)?.broadcast_add(&self.dec_pos)
    }

    /// Returns the final `(B, N, d2)` token matrix.
    pub fn decode(&self, f: &Tensor, latents: &[Tensor], temb: Option<&Tensor>) -> Result<Tensor> {
        if latents.len() != self.encoder.len() {
            candle_core::bail!("decode: {} latents for {} encoder blocks", latents.len(), self.encoder.len());
        }
        let mut z = self.embed_decoder_tokens(f)?;
        if let Some(proj) = &self.time_proj {
            let Some(temb) = temb else {
                candle_core::bail!("decode: timestep conditioning enabled but no embedding given");
            };
            z = z.broadcast_add(&proj.forward(temb)?.unsqueeze(1)?)?;
        }
        for (block, &e) in self.decoder.iter().zip(&self.block_map) {
            z = block.forward(&z, &latents[e - 1])?;
        }
        self.dec_norm.forward(&z)
    }

    /// `(B, N, d2)` tokens to a `(B, C, H/4, W/4)` feature map.
    pub fn detokenize(&self, z: &Tensor) -> Result<Tensor> {
        let (b, n, d) = z.dims3()?;
        if n != self.grid.num_tokens() || d != self.cfg.d2 {
            candle_core::bail!("detokenize: got {:?} tokens", z.dims());
        }
        let (rows, cols) = (self.grid.rows, self.grid.cols);
        if let Some(out) = &self.flat_out {
            return out
                .forward(z)?
                .reshape((b, rows, cols, self.grid.channels))?
                .permute((0, 3, 1, 2))?
                .contiguous();
        }
        let mut x = z.reshape((b, rows, cols, d))?;
        let last = self.upsample.len() - 1;
        for (i, up) in self.upsample.iter().enumerate() {
            let y = up.forward(&x)?;
            if i == last {
                return Ok(y);
            }
            x = y.silu()?.permute((0, 2, 3, 1))?;
        }
        unreachable!("at least one upsampling stage")
    }

    /// MAE branch output with the same shape as `f`. Samples with no visible
    /// grids receive zeros.
    pub fn forward(&self, f: &Tensor, visible: &[Vec<usize>], temb: Option<&Tensor>) -> Result<Tensor> {
        if visible.iter().all(|v| v.is_empty()) {
            return f.zeros_like();
        }
        if visible.iter().any(|v| v.is_empty()) {
            candle_core::bail!("mae: batch mixes empty and non-empty visible sets");
        }
        let latents = self.encode_visible(f, visible)?;
        let z = self.decode(f, &latents, temb)?;
        self.detokenize(&z)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    fn small_cfg() -> MaeConfig {
        MaeConfig {
            d1: 16,
            enc_blocks: 3,
            enc_heads: 2,
            d2: 24,
            dec_blocks: 2,
            dec_heads: 3,
            ..MaeConfig::default()
        }
    }

    fn grid() -> TokenGrid {
        TokenGrid { channels: 3, cell: 4, rows: 2, cols: 3 }
    }

    fn max_abs(t: &Tensor) -> f32 {
        t.abs().unwrap().max_all().unwrap().to_scalar::<f32>().unwrap()
    }

    #[test]
    fn default_block_map() {
        assert_eq!(block_mapping(8, 12), vec![12, 11, 9, 8, 6, 5, 3, 2]);
        assert_eq!(block_mapping(4, 4), vec![4, 3, 2, 1]);
        assert_eq!(block_mapping(1, 12), vec![12]);
    }

    #[test]
    fn config_validation() {
        assert!(MaeConfig::default().validate().is_ok());
        let mut c = MaeConfig::default();
        c.d1 = 385;
        assert!(c.validate().is_err());
        let mut c = MaeConfig::default();
        c.dec_blocks = 13;
        assert!(c.validate().is_err());
        let mut c = small_cfg();
        c.block_map = Some(vec![1, 4]);
        assert!(c.validate().is_err());
    }

    #[test]
    fn tokenize_round_trip_and_order() {
        let g = grid();
        let f = Tensor::randn(0f32, 1.0, (2, 3, 8, 12), &Device::Cpu).unwrap();
        let tok = tokenize(&f, &g).unwrap();
        assert_eq!(tok.dims(), &[2, 6, 48]);
        let back = untokenize(&tok, &g).unwrap();
        assert_eq!(max_abs(&(back - &f).unwrap()), 0.0);
        // token 4 is cell (1, 1); its first entry is channel 0, pixel (4, 4)
        let a = tok.get(1).unwrap().get(4).unwrap().get(0).unwrap().to_scalar::<f32>().unwrap();
        let b = f.get(1).unwrap().get(0).unwrap().get(4).unwrap().get(4).unwrap();
        assert_eq!(a, b.to_scalar::<f32>().unwrap());
        assert!(tokenize(&f.narrow(3, 0, 10).unwrap(), &g).is_err());
    }

    #[test]
    fn zero_features_give_position_embeddings() {
        let ps = ParamStore::new(0);
        let m = MaeModule::new(&ps, &small_cfg(), grid(), 8).unwrap();
        let f = Tensor::zeros((1, 3, 8, 12), candle_core::DType::F32, &Device::Cpu).unwrap();
        let z = m.embed_decoder_tokens(&f).unwrap().squeeze(0).unwrap();
        assert_eq!(max_abs(&(z - &m.dec_pos).unwrap()), 0.0);
    }

    #[test]
    fn shapes_and_empty_visible() {
        let ps = ParamStore::new(0);
        let m = MaeModule::new(&ps, &small_cfg(), grid(), 8).unwrap();
        let f = Tensor::randn(0f32, 1.0, (2, 3, 8, 12), &Device::Cpu).unwrap();
        let vis = vec![vec![0, 2, 5], vec![1, 3, 4]];
        let lat = m.encode_visible(&f, &vis).unwrap();
        assert_eq!(lat.len(), 3);
        assert!(lat.iter().all(|l| l.dims() == [2, 3, 16]));
        let out = m.forward(&f, &vis, None).unwrap();
        assert_eq!(out.dims(), f.dims());
        let empty = m.forward(&f, &[vec![], vec![]], None).unwrap();
        assert_eq!(max_abs(&empty), 0.0);
        assert!(m.encode_visible(&f, &[vec![0], vec![1, 2]]).is_err());
    }

    #[test]
    fn cell_of_one_uses_flat_projection() {
        let ps = ParamStore::new(0);
        let g = TokenGrid { channels: 2, cell: 1, rows: 3, cols: 3 };
        let m = MaeModule::new(&ps, &small_cfg(), g, 8).unwrap();
        let f = Tensor::randn(0f32, 1.0, (1, 2, 3, 3), &Device::Cpu).unwrap();
        assert_eq!(m.forward(&f, &[vec![0, 4]], None).unwrap().dims(), &[1, 2, 3, 3]);
    }
}
