//! Sequential patch-wise reconstruction with overlap averaging and the
//! pixel-wise anomaly score.

use ndarray::{s, Array2, ArrayView2, Zip};

use crate::diffusion::{forward_diffuse, NoiseSchedule};
use crate::error::{ensure_same_shape, Error, Result};
use crate::patching::{compose_partial, PatchPlan};
use crate::seed::derive_seed;
use crate::simplex::{fractal_field, SimplexParams};

/// One denoiser request: a partially noised image and the patch that was noised.
#[derive(Debug, Clone)]
pub struct PatchQuery {
    pub x_tilde: Array2<f32>,
    pub patch: usize,
    pub t: usize,
}

/// Anything that maps `(x~_t, patch, t)` to an estimate of the clean image.
pub trait Denoiser {
    /// Returns one full-size prediction per query, in order.
    fn predict(&mut self, plan: &PatchPlan, queries: &[PatchQuery]) -> Result<Vec<Array2<f32>>>;
}

impl<D: Denoiser + ?Sized> Denoiser for &mut D {
    fn predict(&mut self, plan: &PatchPlan, queries: &[PatchQuery]) -> Result<Vec<Array2<f32>>> {
        (**self).predict(plan, queries)
    }
}

#[derive(Debug, Clone)]
pub struct ReconstructOptions {
    pub t_test: usize,
    /// Noise parameters; `seed` selects the field.
    pub noise: SimplexParams,
    /// Draw a fresh noise field per patch instead of one per image.
    pub per_patch_noise: bool,
    /// Maximum number of patches sent to the denoiser at once.
    pub batch_size: usize,
    /// Processing order over patch indices; `None` is row-major.
    pub order: Option<Vec<usize>>,
}

impl ReconstructOptions {
    pub fn new(t_test: usize, noise: SimplexParams) -> Self {
        Self {
            t_test,
            noise,
            per_patch_noise: false,
            batch_size: 16,
            order: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ReconstructionResult {
    pub x0_rec: Array2<f32>,
    pub coverage: Array2<u32>,
    pub score: Array2<f32>,
}

/// Reconstructs `x0` patch by patch and scores it.
///
/// Predictions are reduced in patch-index order regardless of `opts.order`, so
/// the result does not depend on processing order.
pub fn reconstruct<D: Denoiser + ?Sized>(
    x0: ArrayView2<f32>,
    denoiser: &mut D,
    sched: &NoiseSchedule,
    plan: &PatchPlan,
    opts: &ReconstructOptions,
) -> Result<ReconstructionResult> {
    let shape = plan.shape();
    ensure_same_shape(&[shape.0, shape.1], x0.shape())?;
    let k_total = plan.num_patches();
    let order: Vec<usize> = match &opts.order {
        Some(o) => {
            let mut sorted = o.clone();
            sorted.sort_unstable();
            if sorted != (0..k_total).collect::<Vec<_>>() {
                return Err(Error::Config(
                    "patch order must be a permutation of 0..K".into(),
                ));
            }
            o.clone()
        }
        None => (0..k_total).collect(),
    };

    let shared_xt = if opts.per_patch_noise {
        None
    } else {
        let eps = fractal_field(shape, &opts.noise)?;
        Some(forward_diffuse(x0, eps.view(), opts.t_test, sched)?)
    };

    let mut preds: Vec<Option<Array2<f32>>> = vec![None; k_total];
    for chunk in order.chunks(opts.batch_size.max(1)) {
        let mut queries = Vec::with_capacity(chunk.len());
        for &k in chunk {
            let x_t = match &shared_xt {
                Some(x) => x.clone(),
                None => {
                    let noise = opts
                        .noise
                        .with_seed(derive_seed(opts.noise.seed, k as u64 + 1));
                    let eps = fractal_field(shape, &noise)?;
                    forward_diffuse(x0, eps.view(), opts.t_test, sched)?
                }
            };
            let mask = plan.make_mask(k)?;
            queries.push(PatchQuery {
                x_tilde: compose_partial(x_t.view(), x0, mask.view())?,
                patch: k,
                t: opts.t_test,
            });
        }
        let out = denoiser.predict(plan, &queries)?;
        if out.len() != queries.len() {
            return Err(Error::Denoiser(format!(
                "expected {} predictions, got {}",
                queries.len(),
                out.len()
            )));
        }
        for (&k, pred) in chunk.iter().zip(out) {
            ensure_same_shape(&[shape.0, shape.1], pred.shape())?;
            if pred.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("denoiser output for patch {k}")));
            }
            preds[k] = Some(pred);
        }
    }

    let p = plan.patch_side();
    // f64 sums of f32 values are exact for any realistic coverage, so equal
    // predictions average back to themselves bit for bit.
    let mut acc = Array2::<f64>::zeros(shape);
    let mut coverage = Array2::<u32>::zeros(shape);
    for (k, pred) in preds.iter().enumerate() {
        let pred = pred.as_ref().expect("every patch predicted");
        let (y, x) = plan.origins()[k];
        let region = s![y..y + p, x..x + p];
        acc.slice_mut(region).zip_mut_with(&pred.slice(region), |a, &v| *a += v as f64);
        coverage.slice_mut(region).mapv_inplace(|c| c + 1);
    }
    if coverage.iter().any(|&c| c == 0) {
        return Err(Error::Config("plan leaves pixels uncovered".into()));
    }
    let x0_rec = Zip::from(&acc)
        .and(&coverage)
        .map_collect(|&a, &c| (a / c as f64) as f32);
    let score = anomaly_map(x0, x0_rec.view())?;
    Ok(ReconstructionResult {
        x0_rec,
        coverage,
        score,
    })
}

/// `|x0 - x0_rec|`, element-wise.
pub fn anomaly_map(x0: ArrayView2<f32>, rec: ArrayView2<f32>) -> Result<Array2<f32>> {
    ensure_same_shape(x0.shape(), rec.shape())?;
    Ok(Zip::from(&x0).and(&rec).map_collect(|&a, &b| (a - b).abs()))
}

/// Test denoiser that always returns a fixed image.
#[derive(Debug, Clone)]
pub struct OracleDenoiser {
    pub image: Array2<f32>,
}

impl Denoiser for OracleDenoiser {
    fn predict(&mut self, _plan: &PatchPlan, queries: &[PatchQuery]) -> Result<Vec<Array2<f32>>> {
        Ok(queries.iter().map(|_| self.image.clone()).collect())
    }
}
