use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{MlrError, Result};
use crate::rng::Rng;
use crate::types::Observation;

/// How the crop margin is obtained.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum CropMode {
    /// Observations are rendered `out + margin` wide and cropped down.
    Render,
    /// Observations are `out` wide; they are edge-padded by `margin / 2` on
    /// each side and cropped back.
    Pad,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CropSpec {
    pub margin: usize,
    pub out_size: (usize, usize),
    pub mode: CropMode,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IntensitySpec {
    pub scale: f64,
    pub clip: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentSpec {
    pub crop: CropSpec,
    pub intensity: IntensitySpec,
}

impl AugmentSpec {
    pub fn new(out: usize, margin: usize, mode: CropMode) -> Self {
        Self {
            crop: CropSpec { margin, out_size: (out, out), mode },
            intensity: IntensitySpec { scale: 0.05, clip: 2.0 },
        }
    }

    /// Spatial size observations are expected to have before cropping.
    pub fn source_size(&self) -> (usize, usize) {
        match self.crop.mode {
            CropMode::Render => (self.crop.out_size.0 + self.crop.margin, self.crop.out_size.1 + self.crop.margin),
            CropMode::Pad => self.crop.out_size,
        }
    }
}

fn check_seq(seq: &[Observation]) -> Result<(usize, usize, usize)> {
    let first = seq
        .first()
        .ok_or_else(|| MlrError::InvalidArgument("empty sequence".into()))?;
    if seq.iter().any(|o| o.shape() != first.shape()) {
        return Err(MlrError::ShapeMismatch("sequence frames differ in shape".into()));
    }
    Ok((first.channels, first.height, first.width))
}

fn edge_pad(o: &Observation, pad: usize) -> Observation {
    let (h, w) = (o.height + 2 * pad, o.width + 2 * pad);
    let mut px = Vec::with_capacity(o.channels * h * w);
    for c in 0..o.channels {
        for y in 0..h {
            let sy = y.saturating_sub(pad).min(o.height - 1);
            for x in 0..w {
                let sx = x.saturating_sub(pad).min(o.width - 1);
                px.push(o.get(c, sy, sx));
            }
        }
    }
    Observation { channels: o.channels, height: h, width: w, pixels: px }
}

fn crop_at(o: &Observation, oy: usize, ox: usize, (h, w): (usize, usize)) -> Observation {
    let mut px = Vec::with_capacity(o.channels * h * w);
    for c in 0..o.channels {
        for y in 0..h {
            let row = (c * o.height + oy + y) * o.width + ox;
            px.extend_from_slice(&o.pixels[row..row + w]);
        }
    }
    Observation { channels: o.channels, height: h, width: w, pixels: px }
}

/// Source frames (padded if needed) and the largest valid offsets.
fn prepared(seq: &[Observation], spec: &CropSpec) -> Result<(Vec<Observation>, usize, usize)> {
    let (_, h, w) = check_seq(seq)?;
    let src: Vec<Observation> = match spec.mode {
        CropMode::Render => seq.to_vec(),
        CropMode::Pad if spec.margin > 0 => seq.iter().map(|o| edge_pad(o, spec.margin / 2)).collect(),
        CropMode::Pad => seq.to_vec(),
    };
    let (sh, sw) = match spec.mode {
        CropMode::Render => (h, w),
        CropMode::Pad => (h + spec.margin / 2 * 2, w + spec.margin / 2 * 2),
    };
    let (oh, ow) = spec.out_size;
    if oh > sh || ow > sw {
        return Err(MlrError::InvalidSpec(format!("crop {oh}x{ow} exceeds source {sh}x{sw}")));
    }
    Ok((src, sh - oh, sw - ow))
}

/// Offset drawn uniformly over every valid position.
pub fn sample_crop_offset(max_y: usize, max_x: usize, rng: &mut Rng) -> (usize, usize) {
    (rng.random_range(0..=max_y), rng.random_range(0..=max_x))
}

/// Crop every frame of the sequence at one shared random offset.
pub fn random_crop(seq: &[Observation], spec: &AugmentSpec, rng: &mut Rng) -> Result<Vec<Observation>> {
    let (src, my, mx) = prepared(seq, &spec.crop)?;
    let (oy, ox) = sample_crop_offset(my, mx, rng);
    Ok(src.iter().map(|o| crop_at(o, oy, ox, spec.crop.out_size)).collect())
}

/// Deterministic centre crop, used when acting.
pub fn center_crop(seq: &[Observation], spec: &AugmentSpec) -> Result<Vec<Observation>> {
    let (src, my, mx) = prepared(seq, &spec.crop)?;
    Ok(src.iter().map(|o| crop_at(o, my / 2, mx / 2, spec.crop.out_size)).collect())
}

/// `1 + scale * r` with `r ~ N(0, 1)` clipped to `[-clip, clip]`.
pub fn sample_intensity_multiplier(spec: &IntensitySpec, rng: &mut Rng) -> f64 {
    let r: f64 = StandardNormal.sample(rng);
    1.0 + spec.scale * r.clamp(-spec.clip, spec.clip)
}

pub fn apply_intensity(seq: &[Observation], multiplier: f64) -> Vec<Observation> {
    let m = multiplier as f32;
    seq.iter()
        .map(|o| Observation {
            pixels: o.pixels.iter().map(|&p| (p * m).clamp(0.0, 1.0)).collect(),
            ..o.clone()
        })
        .collect()
}

/// Scale every frame by one shared random multiplier.
pub fn random_intensity(seq: &[Observation], spec: &AugmentSpec, rng: &mut Rng) -> Vec<Observation> {
    let m = sample_intensity_multiplier(&spec.intensity, rng);
    if spec.intensity.scale == 0.0 {
        return seq.to_vec();
    }
    apply_intensity(seq, m)
}
