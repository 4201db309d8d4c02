//! Patch-wise training: simplex-noised patch, clean context, masked l1 on the
//! noised region, Adam updates, and best-checkpoint selection on a fixed
//! validation sweep.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use candle_core::{Tensor, D};
use maediff_core::diffusion::forward_diffuse;
use maediff_core::patching::compose_partial;
use maediff_core::seed::derive_seed;
use maediff_core::simplex::fractal_field;
use maediff_core::{NoiseSchedule, SimplexParams};
use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{images_to_tensor, MaeDiffModel};
use crate::optim::{Adam, AdamConfig};

const EPOCH_STREAM: u64 = 0x4550_4f43;
const VAL_STREAM: u64 = 0x5641_4c49;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    pub grad_clip: Option<f64>,
    /// Smallest sampled timestep.
    pub t_min: usize,
    /// Largest sampled timestep; `None` is the schedule length.
    pub t_max: Option<usize>,
    /// Stops early after this many optimizer steps.
    pub max_steps: Option<usize>,
    /// Validation cadence in steps; 0 validates only at the start and end.
    pub val_every: usize,
    /// Seeded `(t, patch, noise)` draws per validation image.
    pub val_samples_per_image: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 1600,
            batch_size: 32,
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            weight_decay: 0.0,
            grad_clip: None,
            t_min: 1,
            t_max: None,
            max_steps: None,
            val_every: 100,
            val_samples_per_image: 4,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, timesteps: usize) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.batch_size == 0 {
            return bad("train.batch_size must be positive".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("train.learning_rate must be positive".into());
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.adam_eps <= 0.0 {
            return bad("train Adam betas must lie in [0, 1) and adam_eps must be positive".into());
        }
        if self.weight_decay < 0.0 || self.grad_clip.is_some_and(|c| c <= 0.0) {
            return bad("train.weight_decay must be >= 0 and train.grad_clip > 0".into());
        }
        let t_max = self.t_max.unwrap_or(timesteps);
        if self.t_min == 0 || self.t_min > t_max || t_max > timesteps {
            return bad(format!(
                "train t range [{}, {t_max}] must lie within [1, {timesteps}]",
                self.t_min
            ));
        }
        if self.val_samples_per_image == 0 {
            return bad("train.val_samples_per_image must be positive".into());
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.adam_eps,
            weight_decay: self.weight_decay,
            grad_clip: self.grad_clip,
        }
    }

    pub fn steps_per_epoch(&self, n_train: usize) -> usize {
        n_train.div_ceil(self.batch_size)
    }

    pub fn total_steps(&self, n_train: usize) -> usize {
        let full = self.epochs * self.steps_per_epoch(n_train);
        self.max_steps.map_or(full, |m| m.min(full))
    }
}

/// Per-sample mean of `|pred - target|` over `mask`, averaged over the batch.
/// All tensors are `(B, C, H, W)`; every sample's mask must be non-empty.
pub fn masked_l1(pred: &Tensor, target: &Tensor, mask: &Tensor) -> candle_core::Result<Tensor> {
    let b = pred.dim(0)?;
    let num = ((pred - target)?.abs()? * mask)?.reshape((b, ()))?.sum(D::Minus1)?;
    let den = mask.reshape((b, ()))?.sum(D::Minus1)?;
    (num / den)?.mean_all()
}

/// Random choices for one training or validation sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SampleDraw {
    pub t: usize,
    pub patch: usize,
    pub noise_seed: u64,
}

impl SampleDraw {
    pub fn sample<R: Rng>(rng: &mut R, t_min: usize, t_max: usize, num_patches: usize) -> Self {
        Self {
            t: rng.random_range(t_min..=t_max),
            patch: rng.random_range(0..num_patches),
            noise_seed: rng.next_u64(),
        }
    }
}

/// Model input `x~_t` and the patch mask for one draw.
pub fn noised_input(
    x0: &Array2<f32>,
    draw: SampleDraw,
    model: &MaeDiffModel,
    sched: &NoiseSchedule,
    noise: &SimplexParams,
) -> Result<(Array2<f32>, Array2<f32>)> {
    let plan = model.plan();
    let eps = fractal_field(plan.shape(), &noise.with_seed(draw.noise_seed))?;
    let x_t = forward_diffuse(x0.view(), eps.view(), draw.t, sched)?;
    let mask = plan.make_mask(draw.patch)?;
    let x_tilde = compose_partial(x_t.view(), x0.view(), mask.view())?;
    Ok((x_tilde, mask.view().to_owned()))
}

/// Builds the loss graph for a batch of draws.
pub fn batch_loss(
    model: &MaeDiffModel,
    images: &[&Array2<f32>],
    draws: &[SampleDraw],
    sched: &NoiseSchedule,
    noise: &SimplexParams,
) -> Result<Tensor> {
    let mut xs = Vec::with_capacity(images.len());
    let mut masks = Vec::with_capacity(images.len());
    for (x0, &d) in images.iter().zip(draws) {
        let (xt, m) = noised_input(x0, d, model, sched, noise)?;
        xs.push(xt);
        masks.push(m);
    }
    let shape = model.plan().shape();
    let dev = model.device();
    let x_tilde = images_to_tensor(xs.iter().map(|a| a.view()), shape, dev)?;
    let target = images_to_tensor(images.iter().map(|a| a.view()), shape, dev)?;
    let mask = images_to_tensor(masks.iter().map(|a| a.view()), shape, dev)?;
    let patches: Vec<usize> = draws.iter().map(|d| d.patch).collect();
    let ts: Vec<usize> = draws.iter().map(|d| d.t).collect();
    let pred = model.predict_x0(&x_tilde, &patches, &ts)?;
    Ok(masked_l1(&pred, &target, &mask)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    /// Optimizer steps completed.
    pub step: usize,
    pub epoch: usize,
    pub loss: Option<f64>,
    pub val: Option<f64>,
    pub wall_time: f64,
}

#[derive(Debug, Clone)]
pub struct StepStats {
    pub loss: f64,
    pub draws: Vec<SampleDraw>,
}

pub struct FitOutcome {
    pub best_params: BTreeMap<String, Tensor>,
    pub best_val: f64,
    pub best_step: usize,
    pub steps: usize,
    pub records: Vec<TrainRecord>,
}

pub struct Trainer<'m> {
    model: &'m MaeDiffModel,
    cfg: TrainConfig,
    sched: NoiseSchedule,
    noise: SimplexParams,
    opt: Adam,
}

impl<'m> Trainer<'m> {
    pub fn new(model: &'m MaeDiffModel, cfg: TrainConfig, sched: NoiseSchedule, noise: SimplexParams) -> Result<Self> {
        cfg.validate(sched.len())?;
        noise.validate()?;
        let opt = Adam::new(model.params().vars(), cfg.adam())?;
        Ok(Self { model, cfg, sched, noise, opt })
    }

    pub fn step(&self) -> usize {
        self.opt.steps_taken()
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    /// Saves optimizer moments and the step counter.
    pub fn save_state(&self, path: &Path) -> Result<()> {
        self.opt.save(path)
    }

    pub fn load_state(&mut self, path: &Path) -> Result<()> {
        self.opt.load(path)
    }

    fn t_max(&self) -> usize {
        self.cfg.t_max.unwrap_or(self.sched.len())
    }

    /// Draws for the next step; depend only on the seed and the step index.
    pub fn draws_for_step(&self, step: usize, batch: usize) -> Vec<SampleDraw> {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.cfg.seed, step as u64));
        let k = self.model.plan().num_patches();
        (0..batch)
            .map(|_| SampleDraw::sample(&mut rng, self.cfg.t_min, self.t_max(), k))
            .collect()
    }

    /// Training-set indices used at `step`.
    pub fn batch_indices(&self, step: usize, n_train: usize) -> Vec<usize> {
        let spe = self.cfg.steps_per_epoch(n_train);
        let epoch = step / spe;
        let mut perm: Vec<usize> = (0..n_train).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(derive_seed(self.cfg.seed, EPOCH_STREAM), epoch as u64));
        perm.shuffle(&mut rng);
        let start = (step % spe) * self.cfg.batch_size;
        perm[start..(start + self.cfg.batch_size).min(n_train)].to_vec()
    }

    /// One optimizer update on `images`.
    pub fn train_step(&mut self, images: &[&Array2<f32>]) -> Result<StepStats> {
        let step = self.opt.steps_taken();
        let draws = self.draws_for_step(step, images.len());
        let loss = batch_loss(self.model, images, &draws, &self.sched, &self.noise)?;
        let value = loss.to_scalar::<f32>()? as f64;
        if !value.is_finite() {
            return Err(Error::NonFiniteLoss {
                step,
                loss: value,
                t: draws.iter().map(|d| d.t).collect(),
                patches: draws.iter().map(|d| d.patch).collect(),
            });
        }
        let grads = loss.backward()?;
        self.opt.step(&grads)?;
        Ok(StepStats { loss: value, draws })
    }

    /// Mean masked l1 over a fixed, seeded sweep of draws on `val`.
    pub fn validate(&self, val: &[Array2<f32>]) -> Result<f64> {
        validation_loss(self.model, val, &self.sched, &self.noise, &self.cfg)
    }

    /// Trains until the configured step budget, validating on `val` and
    /// retaining the parameters with the lowest validation loss.
    pub fn fit(
        &mut self,
        train: &[Array2<f32>],
        val: &[Array2<f32>],
        mut on_record: impl FnMut(&TrainRecord),
    ) -> Result<FitOutcome> {
        if train.is_empty() {
            return Err(Error::EmptyDataset("training"));
        }
        if val.is_empty() {
            return Err(Error::EmptyDataset("validation"));
        }
        let start = Instant::now();
        let total = self.cfg.total_steps(train.len());
        let spe = self.cfg.steps_per_epoch(train.len());
        let mut records = Vec::new();
        let mut emit = |r: TrainRecord, records: &mut Vec<TrainRecord>| {
            on_record(&r);
            records.push(r);
        };

        let first = self.step();
        let v0 = self.checked_validation(val, first)?;
        emit(
            TrainRecord { step: first, epoch: first / spe, loss: None, val: Some(v0), wall_time: start.elapsed().as_secs_f64() },
            &mut records,
        );
        let mut best = (v0, first, self.model.params().snapshot()?);

        while self.step() < total {
            let step = self.step();
            let idx = self.batch_indices(step, train.len());
            let batch: Vec<&Array2<f32>> = idx.iter().map(|&i| &train[i]).collect();
            let stats = self.train_step(&batch)?;
            let done = self.step();
            let validate_now = done == total || (self.cfg.val_every > 0 && done.is_multiple_of(self.cfg.val_every));
            let val_loss = if validate_now {
                let v = self.checked_validation(val, done)?;
                if v < best.0 {
                    best = (v, done, self.model.params().snapshot()?);
                }
                Some(v)
            } else {
                None
            };
            emit(
                TrainRecord {
                    step: done,
                    epoch: step / spe,
                    loss: Some(stats.loss),
                    val: val_loss,
                    wall_time: start.elapsed().as_secs_f64(),
                },
                &mut records,
            );
        }
        Ok(FitOutcome {
            best_val: best.0,
            best_step: best.1,
            best_params: best.2,
            steps: self.step(),
            records,
        })
    }

    fn checked_validation(&self, val: &[Array2<f32>], step: usize) -> Result<f64> {
        let v = self.validate(val)?;
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::NonFiniteValidation(step))
        }
    }
}

/// Seeded validation criterion, independent of the training step.
pub fn validation_loss(
    model: &MaeDiffModel,
    val: &[Array2<f32>],
    sched: &NoiseSchedule,
    noise: &SimplexParams,
    cfg: &TrainConfig,
) -> Result<f64> {
    if val.is_empty() {
        return Err(Error::EmptyDataset("validation"));
    }
    let base = derive_seed(cfg.seed, VAL_STREAM);
    let t_max = cfg.t_max.unwrap_or(sched.len());
    let k = model.plan().num_patches();
    let mut items: Vec<(&Array2<f32>, SampleDraw)> = Vec::new();
    for (i, x) in val.iter().enumerate() {
        for j in 0..cfg.val_samples_per_image {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(base, (i * cfg.val_samples_per_image + j) as u64));
            items.push((x, SampleDraw::sample(&mut rng, cfg.t_min, t_max, k)));
        }
    }
    let mut total = 0f64;
    for chunk in items.chunks(cfg.batch_size) {
        let images: Vec<&Array2<f32>> = chunk.iter().map(|c| c.0).collect();
        let draws: Vec<SampleDraw> = chunk.iter().map(|c| c.1).collect();
        let loss = batch_loss(model, &images, &draws, sched, noise)?.detach();
        total += loss.to_scalar::<f32>()? as f64 * chunk.len() as f64;
    }
    Ok(total / items.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{Device, Var};

    #[test]
    fn masked_l1_reduction() {
        let dev = Device::Cpu;
        let pred = Tensor::new(&[[[[1.0f32, 2.0], [3.0, 4.0]]], [[[0.0, 0.0], [0.0, 0.0]]]], &dev).unwrap();
        let target = pred.zeros_like().unwrap();
        let mask = Tensor::new(&[[[[1.0f32, 1.0], [0.0, 0.0]]], [[[1.0, 0.0], [0.0, 0.0]]]], &dev).unwrap();
        let l = masked_l1(&pred, &target, &mask).unwrap().to_scalar::<f32>().unwrap();
        // sample 0: (1 + 2) / 2, sample 1: 0
        assert!((l - 0.75).abs() < 1e-7);
        assert_eq!(masked_l1(&target, &target, &mask).unwrap().to_scalar::<f32>().unwrap(), 0.0);
    }

    #[test]
    fn gradient_vanishes_outside_mask() {
        let dev = Device::Cpu;
        let pred = Var::from_tensor(&Tensor::randn(0f32, 1.0, (2, 1, 4, 4), &dev).unwrap()).unwrap();
        let target = Tensor::randn(0f32, 1.0, (2, 1, 4, 4), &dev).unwrap();
        let mask = Tensor::from_vec(
            (0..32).map(|i| f32::from(i % 3 == 0)).collect::<Vec<_>>(),
            (2, 1, 4, 4),
            &dev,
        )
        .unwrap();
        let g = masked_l1(pred.as_tensor(), &target, &mask).unwrap().backward().unwrap();
        let g = g.get(pred.as_tensor()).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        for (i, v) in g.iter().enumerate() {
            if i % 3 != 0 {
                assert_eq!(*v, 0.0);
            } else {
                assert!(v.abs() > 0.0);
            }
        }
    }

    #[test]
    fn config_checks() {
        assert!(TrainConfig::default().validate(1000).is_ok());
        let c = TrainConfig { t_max: Some(1001), ..TrainConfig::default() };
        assert!(c.validate(1000).is_err());
        let c = TrainConfig { batch_size: 0, ..TrainConfig::default() };
        assert!(c.validate(1000).is_err());
        let c = TrainConfig { epochs: 3, batch_size: 4, max_steps: Some(5), ..TrainConfig::default() };
        assert_eq!(c.steps_per_epoch(10), 3);
        assert_eq!(c.total_steps(10), 5);
    }
}
