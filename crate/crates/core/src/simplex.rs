//! 2D simplex noise and its multi-octave fractal sum.
//!
//! Gradient selection uses a 256-entry permutation shuffled by Fisher-Yates
//! driven by SplitMix64, so a given seed produces the same field on every
//! platform.

use ndarray::Array2;
use rand::{RngCore, SeedableRng};
use rand_xoshiro::SplitMix64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const F2: f64 = 0.366_025_403_784_438_6; // (sqrt(3) - 1) / 2
const G2: f64 = 0.211_324_865_405_187_1; // (3 - sqrt(3)) / 6

const GRAD: [(f64, f64); 12] = [
    (1.0, 1.0),
    (-1.0, 1.0),
    (1.0, -1.0),
    (-1.0, -1.0),
    (1.0, 0.0),
    (-1.0, 0.0),
    (1.0, 0.0),
    (-1.0, 0.0),
    (0.0, 1.0),
    (0.0, -1.0),
    (0.0, 1.0),
    (0.0, -1.0),
];

/// Seeded 2D simplex noise generator.
#[derive(Clone)]
pub struct Simplex2d {
    perm: [u8; 512],
}

impl Simplex2d {
    pub fn new(seed: u64) -> Self {
        let mut table: [u8; 256] = std::array::from_fn(|i| i as u8);
        let mut rng = SplitMix64::from_seed(seed.to_le_bytes());
        for i in (1..256).rev() {
            let j = (rng.next_u64() % (i as u64 + 1)) as usize;
            table.swap(i, j);
        }
        let mut perm = [0u8; 512];
        for (i, p) in perm.iter_mut().enumerate() {
            *p = table[i & 255];
        }
        Self { perm }
    }

    fn grad_index(&self, i: i64, j: i64) -> usize {
        let ii = (i & 255) as usize;
        let jj = (j & 255) as usize;
        self.perm[ii + self.perm[jj] as usize] as usize % 12
    }

    /// Noise value at `(x, y)`, in `[-1, 1]`.
    pub fn sample(&self, x: f64, y: f64) -> f64 {
        let s = (x + y) * F2;
        let i = (x + s).floor();
        let j = (y + s).floor();
        let t = (i + j) * G2;
        let x0 = x - (i - t);
        let y0 = y - (j - t);
        let (i1, j1) = if x0 > y0 { (1.0, 0.0) } else { (0.0, 1.0) };
        let x1 = x0 - i1 + G2;
        let y1 = y0 - j1 + G2;
        let x2 = x0 - 1.0 + 2.0 * G2;
        let y2 = y0 - 1.0 + 2.0 * G2;
        let (i, j) = (i as i64, j as i64);

        let corner = |dx: f64, dy: f64, gi: usize| {
            let t = 0.5 - dx * dx - dy * dy;
            if t < 0.0 {
                0.0
            } else {
                let (gx, gy) = GRAD[gi];
                let t2 = t * t;
                t2 * t2 * (gx * dx + gy * dy)
            }
        };
        let n0 = corner(x0, y0, self.grad_index(i, j));
        let n1 = corner(x1, y1, self.grad_index(i + i1 as i64, j + j1 as i64));
        let n2 = corner(x2, y2, self.grad_index(i + 1, j + 1));
        70.0 * (n0 + n1 + n2)
    }
}

/// One-shot simplex evaluation; builds the permutation table for `seed` on every call.
pub fn simplex2d(seed: u64, x: f64, y: f64) -> f64 {
    Simplex2d::new(seed).sample(x, y)
}

/// Fractal simplex parameters: base frequency, octave count and per-octave
/// amplitude decay.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimplexParams {
    pub frequency: f64,
    pub octaves: usize,
    pub persistence: f64,
    pub seed: u64,
}

impl Default for SimplexParams {
    fn default() -> Self {
        Self {
            frequency: 1.0 / 64.0,
            octaves: 6,
            persistence: 0.8,
            seed: 0,
        }
    }
}

impl SimplexParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.frequency > 0.0 && self.frequency.is_finite()) {
            return Err(Error::Config("simplex.frequency must be > 0".into()));
        }
        if self.octaves == 0 {
            return Err(Error::Config("simplex.octaves must be >= 1".into()));
        }
        if !(self.persistence > 0.0 && self.persistence < 1.0) {
            return Err(Error::Config(
                "simplex.persistence must lie in (0, 1)".into(),
            ));
        }
        Ok(())
    }

    pub fn with_seed(self, seed: u64) -> Self {
        Self { seed, ..self }
    }
}

/// Unweighted octave `k`: `simplex(seed + k, i * nu * 2^k, j * nu * 2^k)`.
pub fn octave_layer(shape: (usize, usize), params: &SimplexParams, k: usize) -> Array2<f64> {
    let gen = Simplex2d::new(params.seed.wrapping_add(k as u64));
    let freq = params.frequency * (1u64 << k) as f64;
    Array2::from_shape_fn(shape, |(i, j)| gen.sample(i as f64 * freq, j as f64 * freq))
}

/// Weighted octave sum before standardization.
pub fn fractal_raw(shape: (usize, usize), params: &SimplexParams) -> Result<Array2<f64>> {
    params.validate()?;
    let mut raw = Array2::<f64>::zeros(shape);
    let mut amp = 1.0;
    for k in 0..params.octaves {
        raw.scaled_add(amp, &octave_layer(shape, params, k));
        amp *= params.persistence;
    }
    Ok(raw)
}

/// Fractal simplex field standardized to zero mean and unit variance.
pub fn fractal_field(shape: (usize, usize), params: &SimplexParams) -> Result<Array2<f32>> {
    if shape.0 == 0 || shape.1 == 0 {
        return Err(Error::Config("noise field must be at least 1x1".into()));
    }
    let raw = fractal_raw(shape, params)?;
    let n = raw.len() as f64;
    let mean = raw.sum() / n;
    let var = raw.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    if !(var > 1e-24) {
        return Err(Error::ZeroVariance);
    }
    let inv_std = 1.0 / var.sqrt();
    Ok(raw.mapv(|v| ((v - mean) * inv_std) as f32))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn pearson(a: impl Iterator<Item = f64> + Clone, b: impl Iterator<Item = f64> + Clone) -> f64 {
        let xs: Vec<f64> = a.collect();
        let ys: Vec<f64> = b.collect();
        let n = xs.len() as f64;
        let mx = xs.iter().sum::<f64>() / n;
        let my = ys.iter().sum::<f64>() / n;
        let mut sxy = 0.0;
        let mut sxx = 0.0;
        let mut syy = 0.0;
        for (x, y) in xs.iter().zip(&ys) {
            sxy += (x - mx) * (y - my);
            sxx += (x - mx) * (x - mx);
            syy += (y - my) * (y - my);
        }
        sxy / (sxx * syy).sqrt()
    }

    fn reference(seed: u64) -> SimplexParams {
        SimplexParams::default().with_seed(seed)
    }

    #[test]
    fn deterministic() {
        let a = simplex2d(42, 3.7, -1.25);
        let b = simplex2d(42, 3.7, -1.25);
        assert_eq!(a.to_bits(), b.to_bits());
        let f1 = fractal_field((40, 24), &reference(9)).unwrap();
        let f2 = fractal_field((40, 24), &reference(9)).unwrap();
        assert_eq!(f1, f2);
    }

    #[test]
    fn bounded_over_random_coordinates() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let gen = Simplex2d::new(77);
        let mut max_abs: f64 = 0.0;
        for _ in 0..1_000_000 {
            let x = rng.random_range(-300.0..300.0);
            let y = rng.random_range(-300.0..300.0);
            max_abs = max_abs.max(gen.sample(x, y).abs());
        }
        assert!(max_abs <= 1.0, "max |v| = {max_abs}");
        assert!(max_abs > 0.5);
    }

    #[test]
    fn different_seeds_decorrelate() {
        let a = Simplex2d::new(1);
        let b = Simplex2d::new(2);
        let coords: Vec<(f64, f64)> = (0..64)
            .flat_map(|i| (0..64).map(move |j| (i as f64 * 0.7, j as f64 * 0.7)))
            .collect();
        let r = pearson(
            coords.iter().map(|&(x, y)| a.sample(x, y)),
            coords.iter().map(|&(x, y)| b.sample(x, y)),
        );
        assert!(r.abs() < 0.2, "r = {r}");
    }

    #[test]
    fn continuity() {
        let g = Simplex2d::new(5);
        for k in 0..200 {
            let x = k as f64 * 0.173;
            let y = k as f64 * 0.091 - 3.0;
            assert!((g.sample(x, y) - g.sample(x + 1e-7, y - 1e-7)).abs() < 1e-5);
        }
    }

    #[test]
    fn standardized_reference_params() {
        let f = fractal_field((96, 96), &reference(123)).unwrap();
        let n = f.len() as f64;
        let mean = f.iter().map(|&v| v as f64).sum::<f64>() / n;
        let var = f.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
        assert!(mean.abs() < 1e-6, "mean {mean}");
        assert!((var - 1.0).abs() < 1e-6, "var {var}");
    }

    #[test]
    fn single_octave_is_standardized_layer() {
        let p = SimplexParams {
            octaves: 1,
            ..reference(3)
        };
        let layer = octave_layer((32, 32), &p, 0);
        let q = SimplexParams {
            persistence: 0.3,
            ..p
        };
        let f = fractal_field((32, 32), &p).unwrap();
        assert_eq!(f, fractal_field((32, 32), &q).unwrap());
        let r = pearson(layer.iter().copied(), f.iter().map(|&v| v as f64));
        assert!(r > 0.999_999);
    }

    #[test]
    fn octave_decomposition() {
        let p = reference(11);
        let raw = fractal_raw((48, 48), &p).unwrap();
        let mut sum = Array2::<f64>::zeros((48, 48));
        for k in 0..p.octaves {
            let layer = octave_layer((48, 48), &p, k);
            let weight = p.persistence.powi(k as i32);
            sum.scaled_add(weight, &layer);
            // Contribution of octave k relative to its unit-amplitude layer is gamma^k.
            let ratio = (&layer * weight).iter().map(|v| v.abs()).sum::<f64>()
                / layer.iter().map(|v| v.abs()).sum::<f64>();
            assert!((ratio - weight).abs() < 1e-12);
        }
        for (a, b) in raw.iter().zip(sum.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn spatially_correlated() {
        let f = fractal_field((96, 96), &reference(8)).unwrap();
        let left = f.slice(ndarray::s![.., ..95]);
        let right = f.slice(ndarray::s![.., 1..]);
        let r = pearson(
            left.iter().map(|&v| v as f64),
            right.iter().map(|&v| v as f64),
        );
        assert!(r > 0.3, "adjacent correlation {r}");
    }

    #[test]
    fn degenerate_field_errors() {
        assert!(matches!(
            fractal_field((1, 1), &reference(0)),
            Err(Error::ZeroVariance)
        ));
        let bad = SimplexParams {
            persistence: 1.0,
            ..reference(0)
        };
        assert!(fractal_field((8, 8), &bad).is_err());
    }
}
