//! Synthetic brain-like phantoms and lesion injection.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::postprocess::erode_mask;
use crate::seed::derive_seed;
use crate::simplex::{fractal_raw, Simplex2d, SimplexParams};

pub const MIN_PHANTOM_SIDE: usize = 32;
const TISSUE_MIN: f32 = 0.1;
const TISSUE_MAX: f32 = 0.9;
/// Mean intensity of the outer tissue and of each nested band, outermost first.
const TISSUE_LEVELS: [f32; 5] = [0.55, 0.75, 0.35, 0.8, 0.25];
const LEVEL_JITTER: f32 = 0.03;

/// Image with its brain mask and (possibly empty) anomaly mask.
#[derive(Debug, Clone, PartialEq)]
pub struct Phantom {
    pub image: Array2<f32>,
    pub brain_mask: Array2<bool>,
    pub anomaly_mask: Array2<bool>,
}

impl Phantom {
    pub fn is_healthy(&self) -> bool {
        !self.anomaly_mask.iter().any(|&v| v)
    }

    pub fn shape(&self) -> (usize, usize) {
        self.image.dim()
    }
}

/// One injected lesion.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Lesion {
    pub size: usize,
    pub shift: f32,
}

/// Healthy phantom: a jittered elliptical brain holding 2-4 nested tissue
/// bands with wobbly boundaries and a faint low-frequency texture.
pub fn generate_phantom(seed: u64, shape: (usize, usize)) -> Result<Phantom> {
    let (h, w) = shape;
    if h < MIN_PHANTOM_SIDE || w < MIN_PHANTOM_SIDE {
        return Err(Error::Phantom(format!(
            "phantom must be at least {MIN_PHANTOM_SIDE}x{MIN_PHANTOM_SIDE}, got {h}x{w}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (hf, wf) = (h as f64, w as f64);
    let cy = hf * (0.5 + rng.random_range(-0.03..0.03));
    let cx = wf * (0.5 + rng.random_range(-0.03..0.03));
    let ay = hf * rng.random_range(0.35..0.44);
    let ax = wf * rng.random_range(0.35..0.44);
    let theta: f64 = rng.random_range(-0.3..0.3);
    let (sin, cos) = theta.sin_cos();

    // Each band is a tissue class with a fixed contrast, as in real anatomy;
    // only a small per-image jitter varies.
    let n_bands = rng.random_range(2..=4usize);
    let background_tissue = TISSUE_LEVELS[0] + rng.random_range(-LEVEL_JITTER..LEVEL_JITTER);
    let bands: Vec<(f64, f32)> = (0..n_bands)
        .map(|b| {
            let scale = 0.85 - 0.7 * (b as f64 + 1.0) / (n_bands as f64 + 1.0) + rng.random_range(-0.03..0.03);
            (scale, TISSUE_LEVELS[b + 1] + rng.random_range(-LEVEL_JITTER..LEVEL_JITTER))
        })
        .collect();

    let wobble = Simplex2d::new(derive_seed(seed, 1));
    let texture = fractal_raw(
        shape,
        &SimplexParams {
            frequency: 1.0 / 16.0,
            octaves: 2,
            persistence: 0.5,
            seed: derive_seed(seed, 2),
        },
    )?;

    let mut image = Array2::<f32>::zeros(shape);
    let mut brain = Array2::from_elem(shape, false);
    for i in 0..h {
        for j in 0..w {
            let (dy, dx) = (i as f64 + 0.5 - cy, j as f64 + 0.5 - cx);
            let u = (cos * dy + sin * dx) / ay;
            let v = (-sin * dy + cos * dx) / ax;
            let rho = (u * u + v * v).sqrt();
            if rho >= 1.0 {
                continue;
            }
            brain[[i, j]] = true;
            let rho = rho + 0.06 * wobble.sample(i as f64 / 12.0, j as f64 / 12.0);
            let mut value = background_tissue;
            for &(scale, level) in &bands {
                if rho < scale {
                    value = level;
                }
            }
            value += 0.04 * texture[[i, j]] as f32;
            image[[i, j]] = value.clamp(TISSUE_MIN, TISSUE_MAX);
        }
    }
    Ok(Phantom {
        image,
        brain_mask: brain,
        anomaly_mask: Array2::from_elem(shape, false),
    })
}

/// Adds 1-3 random-walk-grown lesions (10-200 pixels each) inside the brain,
/// each shifting intensity by 0.2-0.5 toward the far end of `[0, 1]`.
pub fn inject_anomaly(ph: &Phantom, seed: u64) -> Result<(Phantom, Vec<Lesion>)> {
    const MIN_SIZE: usize = 10;
    const MAX_SIZE: usize = 200;
    let (h, w) = ph.shape();
    let eligible = erode_mask(ph.brain_mask.view(), 2);
    let cells: Vec<(usize, usize)> = eligible
        .indexed_iter()
        .filter(|(_, &v)| v)
        .map(|(ij, _)| ij)
        .collect();
    if cells.len() < MAX_SIZE {
        return Err(Error::Phantom(format!(
            "brain mask too small to host a lesion ({} eligible pixels)",
            cells.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = ph.clone();
    let mut lesions = Vec::new();
    let count = rng.random_range(1..=3usize);
    for _ in 0..count {
        let target = rng.random_range(MIN_SIZE..=MAX_SIZE);
        let mut blob = Vec::new();
        for _attempt in 0..20 {
            blob.clear();
            let start = cells[rng.random_range(0..cells.len())];
            if out.anomaly_mask[start] {
                continue;
            }
            let mut member = Array2::from_elem((h, w), false);
            member[start] = true;
            blob.push(start);
            let mut steps = 0;
            while blob.len() < target && steps < 400 * target {
                steps += 1;
                let (y, x) = blob[rng.random_range(0..blob.len())];
                let (ny, nx) = match rng.random_range(0..4) {
                    0 if y > 0 => (y - 1, x),
                    1 if y + 1 < h => (y + 1, x),
                    2 if x > 0 => (y, x - 1),
                    3 if x + 1 < w => (y, x + 1),
                    _ => continue,
                };
                if eligible[[ny, nx]] && !member[[ny, nx]] && !out.anomaly_mask[[ny, nx]] {
                    member[[ny, nx]] = true;
                    blob.push((ny, nx));
                }
            }
            if blob.len() >= MIN_SIZE {
                break;
            }
        }
        if blob.len() < MIN_SIZE {
            return Err(Error::Phantom("could not grow a lesion of minimum size".into()));
        }
        let mean = blob.iter().map(|&p| ph.image[p]).sum::<f32>() / blob.len() as f32;
        let magnitude = rng.random_range(0.2f32..=0.5);
        let shift = if mean <= 0.5 { magnitude } else { -magnitude };
        for &p in &blob {
            out.anomaly_mask[p] = true;
            out.image[p] = (ph.image[p] + shift).clamp(0.0, 1.0);
        }
        lesions.push(Lesion {
            size: blob.len(),
            shift,
        });
    }
    Ok((out, lesions))
}
