//! Domain types shared by every module.

use autograd::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{MlrError, Result};

/// Stacked frames `[channels, height, width]` with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<f32>,
}

impl Observation {
    pub fn new(channels: usize, height: usize, width: usize, pixels: Vec<f32>) -> Result<Self> {
        if pixels.len() != channels * height * width {
            return Err(MlrError::ShapeMismatch(format!(
                "{} pixels for shape [{channels}, {height}, {width}]",
                pixels.len()
            )));
        }
        Ok(Self { channels, height, width, pixels })
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
            pixels: vec![0.0; channels * height * width],
        }
    }

    pub fn shape(&self) -> [usize; 3] {
        [self.channels, self.height, self.width]
    }

    pub fn len(&self) -> usize {
        self.pixels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.pixels[(c * self.height + y) * self.width + x]
    }

    pub fn in_unit_range(&self) -> bool {
        self.pixels.iter().all(|p| (0.0..=1.0).contains(p))
    }

    /// 8-bit quantisation used for storage.
    pub fn to_bytes(&self) -> Vec<u8> {
        self.pixels
            .iter()
            .map(|&p| (p.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect()
    }

    pub fn from_bytes(shape: [usize; 3], bytes: &[u8]) -> Self {
        Self {
            channels: shape[0],
            height: shape[1],
            width: shape[2],
            pixels: bytes.iter().map(|&b| b as f32 / 255.0).collect(),
        }
    }
}

/// Stack observations into a `[B, C, H, W]` tensor.
pub fn batch_tensor(obs: &[Observation]) -> Result<Tensor> {
    let first = obs
        .first()
        .ok_or_else(|| MlrError::InvalidArgument("empty observation batch".into()))?;
    let shape = first.shape();
    let mut data = Vec::with_capacity(obs.len() * first.len());
    for o in obs {
        if o.shape() != shape {
            return Err(MlrError::ShapeMismatch(format!(
                "observation {:?} in batch of {:?}",
                o.shape(),
                shape
            )));
        }
        data.extend(o.pixels.iter().map(|&p| p as f64));
    }
    Ok(Tensor::new(&[obs.len(), shape[0], shape[1], shape[2]], data))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Action {
    Continuous(Vec<f64>),
    Discrete(usize),
}

impl Action {
    pub fn as_continuous(&self) -> Option<&[f64]> {
        match self {
            Action::Continuous(v) => Some(v),
            Action::Discrete(_) => None,
        }
    }

    pub fn as_discrete(&self) -> Option<usize> {
        match self {
            Action::Discrete(a) => Some(*a),
            Action::Continuous(_) => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ActionSpace {
    Continuous { dim: usize },
    Discrete { count: usize },
}

impl ActionSpace {
    pub fn validate(&self, action: &Action) -> Result<()> {
        match (self, action) {
            (ActionSpace::Continuous { dim }, Action::Continuous(v)) => {
                if v.len() != *dim {
                    return Err(MlrError::LengthMismatch { expected: *dim, got: v.len() });
                }
                if !v.iter().all(|x| x.is_finite()) {
                    return Err(MlrError::InvalidArgument("non-finite action component".into()));
                }
                Ok(())
            }
            (ActionSpace::Discrete { count }, Action::Discrete(a)) => {
                if a < count {
                    Ok(())
                } else {
                    Err(MlrError::InvalidArgument(format!("action {a} outside [0, {count})")))
                }
            }
            _ => Err(MlrError::InvalidArgument(format!("{action:?} does not belong to {self:?}"))),
        }
    }

    /// Width of the flat encoding used by networks (action dim or one-hot size).
    pub fn width(&self) -> usize {
        match self {
            ActionSpace::Continuous { dim } => *dim,
            ActionSpace::Discrete { count } => *count,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub obs: Observation,
    pub action: Action,
    pub reward: f64,
    pub next_obs: Observation,
    /// Episode boundary.
    pub done: bool,
    /// Boundary caused by a true terminal state (no bootstrapping); a `done`
    /// without `terminal` is a time-limit truncation.
    pub terminal: bool,
}

/// `K` consecutive steps from one episode.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub observations: Vec<Observation>,
    pub actions: Vec<Action>,
    pub start_index: usize,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.observations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.observations.is_empty()
    }
}
