//! WebAssembly bindings for the static demo page in `www/`. Every function
//! returns RGBA bytes ready for `ImageData`, row-major, `size * size * 4` long.

use maediff_core::diffusion::forward_diffuse;
use maediff_core::inference::anomaly_map;
use maediff_core::metrics::dice;
use maediff_core::patching::compose_partial;
use maediff_core::phantom::{generate_phantom, inject_anomaly};
use maediff_core::postprocess::{prepare_score, segment};
use maediff_core::simplex::fractal_field;
use maediff_core::{DiffusionConfig, NoiseSchedule, PatchGeometry, PatchPlan, PostprocessConfig, SimplexParams};
use ndarray::{Array2, ArrayView2, Zip};
use wasm_bindgen::prelude::*;

pub const SIZE: usize = 64;

fn err(e: impl std::fmt::Display) -> JsValue {
    JsValue::from_str(&e.to_string())
}

fn gray(img: ArrayView2<f32>, lo: f32, hi: f32) -> Vec<u8> {
    let span = (hi - lo).max(f32::EPSILON);
    img.iter()
        .flat_map(|&v| {
            let g = (((v - lo) / span).clamp(0.0, 1.0) * 255.0).round() as u8;
            [g, g, g, 255]
        })
        .collect()
}

fn tint(rgba: &mut [u8], mask: ArrayView2<bool>, rgb: [u8; 3], alpha: f32) {
    for (px, &m) in rgba.chunks_exact_mut(4).zip(mask.iter()) {
        if m {
            for (c, &t) in px.iter_mut().zip(&rgb) {
                *c = (*c as f32 * (1.0 - alpha) + t as f32 * alpha).round() as u8;
            }
        }
    }
}

fn plan() -> PatchPlan {
    PatchPlan::new(PatchGeometry { height: SIZE, width: SIZE, patch: 32, stride: 16, grid: 16 })
        .expect("demo plan is valid")
}

/// Standardized fractal simplex field.
#[wasm_bindgen]
pub fn simplex_field(seed: u64, frequency: f64, octaves: usize, persistence: f64) -> Result<Vec<u8>, JsValue> {
    let params = SimplexParams { frequency, octaves, persistence, seed };
    params.validate().map_err(err)?;
    let field = fractal_field((SIZE, SIZE), &params).map_err(err)?;
    Ok(gray(field.view(), -3.0, 3.0))
}

/// Number of patches in the demo plan.
#[wasm_bindgen]
pub fn patch_count() -> usize {
    plan().num_patches()
}

/// A phantom with patch `k` replaced by its simplex-noised version at step `t`;
/// the patch border is drawn in orange.
#[wasm_bindgen]
pub fn noised_patch(seed: u64, k: usize, t: usize) -> Result<Vec<u8>, JsValue> {
    let plan = plan();
    let sched = NoiseSchedule::linear(&DiffusionConfig::default()).map_err(err)?;
    let x0 = generate_phantom(seed, (SIZE, SIZE)).map_err(err)?.image;
    let eps = fractal_field((SIZE, SIZE), &SimplexParams::default().with_seed(seed ^ 0x5eed)).map_err(err)?;
    let x_t = forward_diffuse(x0.view(), eps.view(), t, &sched).map_err(err)?;
    let mask = plan.make_mask(k).map_err(err)?;
    let x_tilde = compose_partial(x_t.view(), x0.view(), mask.view()).map_err(err)?;
    let mut rgba = gray(x_tilde.view(), 0.0, 1.0);
    let (y0, x0c) = mask.origin();
    let p = mask.side();
    let border = Array2::from_shape_fn((SIZE, SIZE), |(i, j)| {
        let inside = i >= y0 && i < y0 + p && j >= x0c && j < x0c + p;
        inside && (i == y0 || i == y0 + p - 1 || j == x0c || j == x0c + p - 1)
    });
    tint(&mut rgba, border.view(), [255, 140, 0], 1.0);
    Ok(rgba)
}

/// Result of [`segment_demo`]: an RGBA overlay and the Dice score.
#[wasm_bindgen]
pub struct Segmentation {
    rgba: Vec<u8>,
    dice: f64,
}

#[wasm_bindgen]
impl Segmentation {
    #[wasm_bindgen(getter)]
    pub fn rgba(&self) -> Vec<u8> {
        self.rgba.clone()
    }

    #[wasm_bindgen(getter)]
    pub fn dice(&self) -> f64 {
        self.dice
    }
}

/// Segments an imperfect reconstruction of a lesioned phantom. The
/// "reconstruction" is the healthy phantom plus simplex noise of amplitude
/// `error`; predicted pixels are red, missed lesion pixels green.
#[wasm_bindgen]
pub fn segment_demo(seed: u64, error: f32, threshold: f32) -> Result<Segmentation, JsValue> {
    let healthy = generate_phantom(seed, (SIZE, SIZE)).map_err(err)?;
    let (sick, _) = inject_anomaly(&healthy, seed.wrapping_add(1)).map_err(err)?;
    let field = fractal_field((SIZE, SIZE), &SimplexParams::default().with_seed(seed.wrapping_add(2))).map_err(err)?;
    let rec = Zip::from(&healthy.image).and(&field).map_collect(|&h, &n| h + error * n);
    let raw = anomaly_map(sick.image.view(), rec.view()).map_err(err)?;
    let cfg = PostprocessConfig::default();
    let score = prepare_score(raw.view(), sick.brain_mask.view(), &cfg).map_err(err)?;
    let pred = segment(score.view(), threshold, &cfg);
    let missed = Zip::from(&sick.anomaly_mask).and(&pred).map_collect(|&g, &p| g && !p);
    let mut rgba = gray(sick.image.view(), 0.0, 1.0);
    tint(&mut rgba, pred.view(), [230, 40, 40], 0.6);
    tint(&mut rgba, missed.view(), [40, 200, 80], 0.6);
    let dice = dice(pred.view(), sick.anomaly_mask.view()).map_err(err)?;
    Ok(Segmentation { rgba, dice })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn buffers_have_image_size() {
        let n = SIZE * SIZE * 4;
        assert_eq!(simplex_field(1, 1.0 / 64.0, 6, 0.8).unwrap().len(), n);
        assert_eq!(noised_patch(1, 3, 400).unwrap().len(), n);
        assert_eq!(segment_demo(1, 0.02, 0.1).unwrap().rgba.len(), n);
        assert_eq!(patch_count(), 9);
    }

    #[test]
    fn exact_reconstruction_finds_lesions() {
        // With no reconstruction error the score is the lesion contrast itself.
        let s = segment_demo(4, 0.0, 0.05).unwrap();
        assert!(s.dice > 0.5, "dice {}", s.dice);
    }
}
