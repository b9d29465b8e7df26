use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::error::{MlrError, Result};
use crate::registry::Registry;
use crate::rng::Rng;
use crate::types::Observation;

/// Where a mask plan is applied.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum MaskSpace {
    Pixel,
    Feature,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CubeMaskSpec {
    /// Temporal depth of a cube, in timesteps.
    pub k: usize,
    /// Spatial cube size in pixels.
    pub h: usize,
    pub w: usize,
    /// Fraction of cells masked.
    pub ratio: f64,
    /// Registered strategy name (`cube`, `spatial`, `temporal`, `feature`).
    pub strategy: String,
    pub fill_value: f32,
}

impl Default for CubeMaskSpec {
    fn default() -> Self {
        Self { k: 8, h: 10, w: 10, ratio: 0.5, strategy: "cube".into(), fill_value: 0.0 }
    }
}

impl CubeMaskSpec {
    pub fn validate(&self, extents: [usize; 3]) -> Result<()> {
        let [kk, hh, ww] = extents;
        if !(0.0..=1.0).contains(&self.ratio) {
            return Err(MlrError::InvalidSpec(format!("mask ratio {} outside [0, 1]", self.ratio)));
        }
        if self.k == 0 || self.h == 0 || self.w == 0 {
            return Err(MlrError::InvalidSpec("cube extents must be positive".into()));
        }
        if self.k > kk || self.h > hh || self.w > ww {
            return Err(MlrError::InvalidSpec(format!(
                "cube [{}, {}, {}] exceeds sequence [{kk}, {hh}, {ww}]",
                self.k, self.h, self.w
            )));
        }
        Ok(())
    }
}

/// Masked cells of a `[T, Y, X]` cell grid and the cell extents that expand it
/// over a `[K, H, W]` volume. `true` means masked.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskPlan {
    pub grid_shape: [usize; 3],
    pub grid: Vec<bool>,
    pub cell: [usize; 3],
    pub extents: [usize; 3],
    pub space: MaskSpace,
}

impl MaskPlan {
    pub fn masked_cells(&self) -> usize {
        self.grid.iter().filter(|&&m| m).count()
    }

    pub fn cell_masked(&self, t: usize, y: usize, x: usize) -> bool {
        let [_, gy, gx] = self.grid_shape;
        self.grid[(t * gy + y) * gx + x]
    }

    /// Whether volume position `(t, y, x)` is covered by a masked cell.
    pub fn is_masked(&self, t: usize, y: usize, x: usize) -> bool {
        self.cell_masked(t / self.cell[0], y / self.cell[1], x / self.cell[2])
    }

    /// Per-position mask `[K, H, W]`, row-major.
    pub fn pixel_mask(&self) -> Vec<bool> {
        let [kk, hh, ww] = self.extents;
        let mut out = Vec::with_capacity(kk * hh * ww);
        for t in 0..kk {
            for y in 0..hh {
                for x in 0..ww {
                    out.push(self.is_masked(t, y, x));
                }
            }
        }
        out
    }
}

fn ceil_div(a: usize, b: usize) -> usize {
    a.div_ceil(b)
}

fn choose(n: usize, ratio: f64, rng: &mut Rng) -> Vec<bool> {
    let count = (ratio * n as f64).round() as usize;
    let mut grid = vec![false; n];
    for i in index::sample(rng, n, count.min(n)).iter() {
        grid[i] = true;
    }
    grid
}

/// A way of laying out and sampling masked cells.
pub trait MaskStrategy: Send + Sync {
    fn name(&self) -> &'static str;

    fn space(&self) -> MaskSpace {
        MaskSpace::Pixel
    }

    /// Cell extents over a `[K, H, W]` volume.
    fn cell(&self, spec: &CubeMaskSpec, extents: [usize; 3]) -> [usize; 3];

    fn sample(&self, spec: &CubeMaskSpec, extents: [usize; 3], rng: &mut Rng) -> MaskPlan {
        let cell = self.cell(spec, extents);
        let grid_shape = [
            ceil_div(extents[0], cell[0]),
            ceil_div(extents[1], cell[1]),
            ceil_div(extents[2], cell[2]),
        ];
        let grid = choose(grid_shape.iter().product(), spec.ratio, rng);
        MaskPlan { grid_shape, grid, cell, extents, space: self.space() }
    }
}

/// Space-time cubes of `k x h x w`.
struct Cube;

impl MaskStrategy for Cube {
    fn name(&self) -> &'static str {
        "cube"
    }

    fn cell(&self, spec: &CubeMaskSpec, _: [usize; 3]) -> [usize; 3] {
        [spec.k, spec.h, spec.w]
    }
}

/// `h x w` patches drawn independently for every frame.
struct Spatial;

impl MaskStrategy for Spatial {
    fn name(&self) -> &'static str {
        "spatial"
    }

    fn cell(&self, spec: &CubeMaskSpec, _: [usize; 3]) -> [usize; 3] {
        [1, spec.h, spec.w]
    }

    fn sample(&self, spec: &CubeMaskSpec, extents: [usize; 3], rng: &mut Rng) -> MaskPlan {
        let cell = self.cell(spec, extents);
        let grid_shape = [extents[0], ceil_div(extents[1], spec.h), ceil_div(extents[2], spec.w)];
        let per_frame = grid_shape[1] * grid_shape[2];
        let grid = (0..extents[0]).flat_map(|_| choose(per_frame, spec.ratio, rng)).collect();
        MaskPlan { grid_shape, grid, cell, extents, space: MaskSpace::Pixel }
    }
}

/// Whole frames in segments of `k`.
struct Temporal;

impl MaskStrategy for Temporal {
    fn name(&self) -> &'static str {
        "temporal"
    }

    fn cell(&self, spec: &CubeMaskSpec, extents: [usize; 3]) -> [usize; 3] {
        [spec.k, extents[1], extents[2]]
    }
}

/// Cubes over encoder feature maps. The volume passed in is the feature-map
/// extent; the cube spatial size is the pixel-space size rescaled by the caller.
struct Feature;

impl MaskStrategy for Feature {
    fn name(&self) -> &'static str {
        "feature"
    }

    fn space(&self) -> MaskSpace {
        MaskSpace::Feature
    }

    fn cell(&self, spec: &CubeMaskSpec, _: [usize; 3]) -> [usize; 3] {
        [spec.k, spec.h, spec.w]
    }
}

pub fn mask_strategies() -> Registry<fn() -> Box<dyn MaskStrategy>> {
    let mut r: Registry<fn() -> Box<dyn MaskStrategy>> = Registry::new("mask strategy");
    r.register("cube", || Box::new(Cube))
        .register("spatial", || Box::new(Spatial))
        .register("temporal", || Box::new(Temporal))
        .register("feature", || Box::new(Feature));
    r
}

pub fn mask_strategy(name: &str) -> Result<Box<dyn MaskStrategy>> {
    Ok(mask_strategies().get(name)?())
}

/// Sample a plan over a `[K, H, W]` volume.
pub fn sample_mask(spec: &CubeMaskSpec, extents: [usize; 3], rng: &mut Rng) -> Result<MaskPlan> {
    let strategy = mask_strategy(&spec.strategy)?;
    spec.validate(extents)?;
    Ok(strategy.sample(spec, extents, rng))
}

/// Set every masked pixel, across all channels, to `fill`.
pub fn apply_mask(seq: &[Observation], plan: &MaskPlan, fill: f32) -> Result<Vec<Observation>> {
    let [kk, hh, ww] = plan.extents;
    if seq.len() != kk {
        return Err(MlrError::ShapeMismatch(format!("sequence of {} for a plan over {kk} steps", seq.len())));
    }
    seq.iter()
        .enumerate()
        .map(|(t, o)| {
            if o.height != hh || o.width != ww {
                return Err(MlrError::ShapeMismatch(format!(
                    "frame {}x{} for a plan over {hh}x{ww}",
                    o.height, o.width
                )));
            }
            let mut out = o.clone();
            for y in 0..hh {
                for x in 0..ww {
                    if plan.is_masked(t, y, x) {
                        for c in 0..o.channels {
                            out.pixels[(c * hh + y) * ww + x] = fill;
                        }
                    }
                }
            }
            Ok(out)
        })
        .collect()
}

/// Multiplicative 0/1 mask for feature maps `[K, C, Hf, Wf]`, flattened.
pub fn apply_mask_to_features(plan: &MaskPlan, channels: usize) -> Vec<f64> {
    let [kk, hh, ww] = plan.extents;
    let mut out = Vec::with_capacity(kk * channels * hh * ww);
    for t in 0..kk {
        for _ in 0..channels {
            for y in 0..hh {
                for x in 0..ww {
                    out.push(if plan.is_masked(t, y, x) { 0.0 } else { 1.0 });
                }
            }
        }
    }
    out
}
