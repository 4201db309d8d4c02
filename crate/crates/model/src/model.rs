//! The full denoiser: U-Net encoder, MAE branch on the quarter-resolution
//! feature map, additive fusion, and U-Net decoder. Predicts `x0` directly.

use candle_core::{Device, Tensor};
use maediff_core::inference::{Denoiser, PatchQuery};
use maediff_core::{PatchGeometry, PatchPlan};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mae::{MaeConfig, MaeModule, TokenGrid};
use crate::params::ParamStore;
use crate::unet::{fuse_mae, Encoded, UNet, UNetConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
#[derive(Default)]
pub struct ModelConfig {
    pub geometry: PatchGeometry,
    pub unet: UNetConfig,
    pub mae: MaeConfig,
    /// Seed of the parameter initialization stream.
    pub init_seed: u64,
}


impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        PatchPlan::new(self.geometry)?;
        self.unet.validate().map_err(Error::Config)?;
        if self.unet.use_mae {
            self.mae.validate().map_err(Error::Config)?;
            let r = self.geometry.grid;
            if !r.is_multiple_of(4) || !(r / 4).is_power_of_two() {
                return Err(Error::Config(format!(
                    "grid side r = {r} must be 4 times a power of two to map onto the H/4 feature map"
                )));
            }
            if self.mae.use_timestep && self.unet.time_dim() == 0 {
                return Err(Error::Config("mae timestep conditioning needs a time embedding".into()));
            }
        }
        Ok(())
    }
}

pub struct MaeDiffModel {
    cfg: ModelConfig,
    plan: PatchPlan,
    params: ParamStore,
    unet: UNet,
    mae: Option<MaeModule>,
}

impl MaeDiffModel {
    pub fn new(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let plan = PatchPlan::new(cfg.geometry)?;
        let params = ParamStore::new(cfg.init_seed);
        let unet = UNet::new(&params.pp("unet"), &cfg.unet, plan.shape())?;
        let mae = if cfg.unet.use_mae {
            let (rows, cols) = plan.grid_dims();
            let grid = TokenGrid {
                channels: cfg.unet.fusion_channels(),
                cell: cfg.geometry.grid / 4,
                rows,
                cols,
            };
            Some(MaeModule::new(&params.pp("mae"), &cfg.mae, grid, cfg.unet.time_dim())?)
        } else {
            None
        };
        Ok(Self {
            cfg: cfg.clone(),
            plan,
            params,
            unet,
            mae,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn plan(&self) -> &PatchPlan {
        &self.plan
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn unet(&self) -> &UNet {
        &self.unet
    }

    pub fn mae(&self) -> Option<&MaeModule> {
        self.mae.as_ref()
    }

    pub fn num_params(&self) -> usize {
        self.params.num_params()
    }

    pub fn num_mae_params(&self) -> usize {
        self.params.num_params_with_prefix("mae.")
    }

    pub fn device(&self) -> &Device {
        self.params.device()
    }

    /// `x_tilde: (B, C, H, W)`; one patch index and timestep per sample.
    pub fn predict_x0(&self, x_tilde: &Tensor, patches: &[usize], ts: &[usize]) -> Result<Tensor> {
        let b = x_tilde.dim(0)?;
        if patches.len() != b || ts.len() != b {
            return Err(Error::Config(format!(
                "predict_x0: batch {b} with {} patches and {} timesteps",
                patches.len(),
                ts.len()
            )));
        }
        let temb = self.unet.embed_timestep(ts)?;
        let Encoded { f, skips } = self.unet.encode(x_tilde, &temb)?;
        let f = match &self.mae {
            Some(mae) => {
                let visible = patches
                    .iter()
                    .map(|&k| self.plan.visible_grids(k))
                    .collect::<maediff_core::Result<Vec<_>>>()?;
                let m = mae.forward(&f, &visible, Some(&temb))?;
                fuse_mae(&f, &m)?
            }
            None => f,
        };
        let h = self.unet.middle(&f, &temb)?;
        Ok(self.unet.decode(&h, skips, &temb)?)
    }
}

/// Stacks equally shaped images into `(B, 1, H, W)`.
pub fn images_to_tensor<'a, I>(images: I, shape: (usize, usize), device: &Device) -> Result<Tensor>
where
    I: IntoIterator<Item = ndarray::ArrayView2<'a, f32>>,
{
    let mut data = Vec::new();
    let mut b = 0;
    for im in images {
        if im.dim() != shape {
            return Err(maediff_core::Error::Shape {
                expected: vec![shape.0, shape.1],
                got: im.shape().to_vec(),
            }
            .into());
        }
        data.extend(im.iter().copied());
        b += 1;
    }
    Ok(Tensor::from_vec(data, (b, 1, shape.0, shape.1), device)?)
}

/// Splits `(B, 1, H, W)` into images.
pub fn tensor_to_images(t: &Tensor) -> Result<Vec<Array2<f32>>> {
    let (b, c, h, w) = t.dims4()?;
    if c != 1 {
        return Err(Error::Config(format!("expected one channel, got {c}")));
    }
    let flat = t.flatten_all()?.to_vec1::<f32>()?;
    Ok((0..b)
        .map(|i| {
            Array2::from_shape_vec((h, w), flat[i * h * w..(i + 1) * h * w].to_vec())
                .expect("length matches shape")
        })
        .collect())
}

impl Denoiser for MaeDiffModel {
    fn predict(&mut self, plan: &PatchPlan, queries: &[PatchQuery]) -> maediff_core::Result<Vec<Array2<f32>>> {
        if plan.geometry() != self.plan.geometry() {
            return Err(maediff_core::Error::Denoiser(
                "plan geometry differs from the model's".into(),
            ));
        }
        let run = || -> Result<Vec<Array2<f32>>> {
            let x = images_to_tensor(queries.iter().map(|q| q.x_tilde.view()), self.plan.shape(), self.device())?;
            let patches: Vec<usize> = queries.iter().map(|q| q.patch).collect();
            let ts: Vec<usize> = queries.iter().map(|q| q.t).collect();
            tensor_to_images(&self.predict_x0(&x, &patches, &ts)?)
        };
        run().map_err(|e| maediff_core::Error::Denoiser(e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn tiny_config(attn: bool, mae: bool) -> ModelConfig {
        ModelConfig {
            geometry: PatchGeometry {
                height: 32,
                width: 32,
                patch: 16,
                stride: 8,
                grid: 8,
            },
            unet: UNetConfig {
                base_channels: 8,
                res_blocks_per_level: 1,
                attention_heads: 2,
                use_global_attention: attn,
                use_mae: mae,
                ..UNetConfig::default()
            },
            mae: MaeConfig {
                d1: 16,
                enc_blocks: 2,
                enc_heads: 2,
                d2: 16,
                dec_blocks: 2,
                dec_heads: 2,
                ..MaeConfig::default()
            },
            init_seed: 3,
        }
    }

    #[test]
    fn output_shape_and_determinism() {
        let cfg = tiny_config(true, true);
        let a = MaeDiffModel::new(&cfg).unwrap();
        let b = MaeDiffModel::new(&cfg).unwrap();
        let x = Tensor::randn(0f32, 1.0, (2, 1, 32, 32), &Device::Cpu).unwrap();
        let ya = a.predict_x0(&x, &[0, 8], &[10, 900]).unwrap();
        let yb = b.predict_x0(&x, &[0, 8], &[10, 900]).unwrap();
        assert_eq!(ya.dims(), x.dims());
        assert_eq!(
            ya.flatten_all().unwrap().to_vec1::<f32>().unwrap(),
            yb.flatten_all().unwrap().to_vec1::<f32>().unwrap()
        );
    }

    #[test]
    fn ablation_flags_control_parameters() {
        let counts: Vec<(usize, usize)> = [(false, false), (true, false), (false, true), (true, true)]
            .into_iter()
            .map(|(a, m)| {
                let model = MaeDiffModel::new(&tiny_config(a, m)).unwrap();
                (model.num_params(), model.num_mae_params())
            })
            .collect();
        assert_eq!(counts[0].1, 0);
        assert_eq!(counts[1].1, 0);
        assert!(counts[2].1 > 0);
        let mut totals: Vec<usize> = counts.iter().map(|c| c.0).collect();
        totals.sort();
        totals.dedup();
        assert_eq!(totals.len(), 4);
    }

    #[test]
    fn rejects_grid_incompatible_with_feature_map() {
        let mut cfg = tiny_config(false, true);
        cfg.geometry = PatchGeometry { height: 36, width: 36, patch: 12, stride: 6, grid: 6 };
        assert!(matches!(MaeDiffModel::new(&cfg), Err(Error::Config(_))));
        cfg.unet.use_mae = false;
        assert!(MaeDiffModel::new(&cfg).is_ok());
    }
}
