//! Hierarchical partition: overlapping `p x p` patches on a stride-`s` lattice
//! over non-overlapping `r x r` grid cells, plus the binary-mask algebra used
//! to build partially noised inputs.

use ndarray::{Array2, ArrayView2, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{ensure_same_shape, Error, Result};

/// Geometry of the partition as it appears in configuration files.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PatchGeometry {
    pub height: usize,
    pub width: usize,
    /// Upper-level patch side `p`.
    pub patch: usize,
    /// Lattice stride `s` between patch origins.
    pub stride: usize,
    /// Sub-level grid side `r`.
    pub grid: usize,
}

impl Default for PatchGeometry {
    fn default() -> Self {
        Self {
            height: 64,
            width: 64,
            patch: 32,
            stride: 16,
            grid: 16,
        }
    }
}

/// Row-major top-left corners `(i*s, j*s)` of every `p x p` patch fitting in `h x w`.
pub fn enumerate_origins(h: usize, w: usize, p: usize, s: usize) -> Vec<(usize, usize)> {
    if p > h || p > w || s == 0 {
        return Vec::new();
    }
    let rows = (0..=h - p).step_by(s);
    rows.flat_map(|y| (0..=w - p).step_by(s).map(move |x| (y, x)))
        .collect()
}

/// A validated partition with its patch origins.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PatchPlan {
    geometry: PatchGeometry,
    origins: Vec<(usize, usize)>,
}

impl PatchPlan {
    pub fn new(geometry: PatchGeometry) -> Result<Self> {
        let PatchGeometry {
            height: h,
            width: w,
            patch: p,
            stride: s,
            grid: r,
        } = geometry;
        let fail = |msg: String| Err(Error::Config(msg));
        if h == 0 || w == 0 || p == 0 || s == 0 || r == 0 {
            return fail(format!("plan sizes must be positive: {geometry:?}"));
        }
        if p > h || p > w {
            return fail(format!("patch {p} larger than image {h}x{w}"));
        }
        if r >= p {
            return fail(format!("grid side r={r} must be smaller than patch side p={p}"));
        }
        if s % r != 0 {
            return fail(format!("stride s={s} must be divisible by grid side r={r}"));
        }
        if h % r != 0 || w % r != 0 {
            return fail(format!("image {h}x{w} must be divisible by grid side r={r}"));
        }
        if p % r != 0 {
            return fail(format!("patch p={p} must be divisible by grid side r={r}"));
        }
        if (h - p) % s != 0 || (w - p) % s != 0 {
            return fail(format!(
                "(H-p) and (W-p) must be divisible by stride s={s} (H={h}, W={w}, p={p})"
            ));
        }
        if s > p && (h > p || w > p) {
            return fail(format!("stride s={s} > patch p={p} leaves pixels uncovered"));
        }
        let origins = enumerate_origins(h, w, p, s);
        Ok(Self { geometry, origins })
    }

    pub fn geometry(&self) -> PatchGeometry {
        self.geometry
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.geometry.height, self.geometry.width)
    }

    pub fn patch_side(&self) -> usize {
        self.geometry.patch
    }

    pub fn grid_side(&self) -> usize {
        self.geometry.grid
    }

    pub fn origins(&self) -> &[(usize, usize)] {
        &self.origins
    }

    /// Number of patches `K`.
    pub fn num_patches(&self) -> usize {
        self.origins.len()
    }

    /// `K = (H - p + s)(W - p + s) / s^2`.
    pub fn patch_count_formula(&self) -> usize {
        let g = self.geometry;
        (g.height - g.patch + g.stride) * (g.width - g.patch + g.stride) / (g.stride * g.stride)
    }

    /// Grid lattice dimensions `(H/r, W/r)`.
    pub fn grid_dims(&self) -> (usize, usize) {
        (
            self.geometry.height / self.geometry.grid,
            self.geometry.width / self.geometry.grid,
        )
    }

    /// Number of grid cells `N = HW / r^2`.
    pub fn num_grids(&self) -> usize {
        let (gh, gw) = self.grid_dims();
        gh * gw
    }

    fn check_index(&self, k: usize) -> Result<(usize, usize)> {
        self.origins.get(k).copied().ok_or(Error::Index {
            index: k,
            len: self.origins.len(),
        })
    }

    pub fn make_mask(&self, k: usize) -> Result<PatchMask> {
        let origin = self.check_index(k)?;
        Ok(PatchMask::new(self.shape(), origin, self.geometry.patch))
    }

    /// Grid indices (row-major) lying inside patch `k`.
    pub fn grids_for_patch(&self, k: usize) -> Result<Vec<usize>> {
        let (oy, ox) = self.check_index(k)?;
        let r = self.geometry.grid;
        let cells = self.geometry.patch / r;
        let (_, gw) = self.grid_dims();
        let (gy0, gx0) = (oy / r, ox / r);
        Ok((0..cells)
            .flat_map(|dy| (0..cells).map(move |dx| (gy0 + dy) * gw + gx0 + dx))
            .collect())
    }

    /// Complement of [`grids_for_patch`](Self::grids_for_patch), row-major.
    pub fn visible_grids(&self, k: usize) -> Result<Vec<usize>> {
        let masked = self.grids_for_patch(k)?;
        Ok((0..self.num_grids())
            .filter(|g| masked.binary_search(g).is_err())
            .collect())
    }

    /// Number of patches covering each pixel.
    pub fn coverage(&self) -> Array2<u32> {
        let mut cov = Array2::<u32>::zeros(self.shape());
        let p = self.geometry.patch;
        for &(y, x) in &self.origins {
            cov.slice_mut(ndarray::s![y..y + p, x..x + p])
                .mapv_inplace(|c| c + 1);
        }
        cov
    }
}

/// Binary mask with ones on one `p x p` square.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchMask {
    mask: Array2<f32>,
    origin: (usize, usize),
    side: usize,
}

impl PatchMask {
    fn new(shape: (usize, usize), origin: (usize, usize), side: usize) -> Self {
        let mut mask = Array2::<f32>::zeros(shape);
        mask.slice_mut(ndarray::s![origin.0..origin.0 + side, origin.1..origin.1 + side])
            .fill(1.0);
        Self { mask, origin, side }
    }

    pub fn view(&self) -> ArrayView2<'_, f32> {
        self.mask.view()
    }

    pub fn origin(&self) -> (usize, usize) {
        self.origin
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn contains(&self, i: usize, j: usize) -> bool {
        i >= self.origin.0
            && i < self.origin.0 + self.side
            && j >= self.origin.1
            && j < self.origin.1 + self.side
    }
}

/// `x_t * M + x0 * (1 - M)`.
pub fn compose_partial(
    x_t: ArrayView2<f32>,
    x0: ArrayView2<f32>,
    mask: ArrayView2<f32>,
) -> Result<Array2<f32>> {
    ensure_same_shape(x_t.shape(), x0.shape())?;
    ensure_same_shape(x_t.shape(), mask.shape())?;
    Ok(Zip::from(&x_t)
        .and(&x0)
        .and(&mask)
        .map_collect(|&n, &c, &m| if m != 0.0 { n } else { c }))
}

/// `x0 * (1 - M)`: the unnoised context.
pub fn visible_region(x0: ArrayView2<f32>, mask: ArrayView2<f32>) -> Result<Array2<f32>> {
    ensure_same_shape(x0.shape(), mask.shape())?;
    Ok(Zip::from(&x0)
        .and(&mask)
        .map_collect(|&c, &m| if m != 0.0 { 0.0 } else { c }))
}
