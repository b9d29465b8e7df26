//! Toy pixel environments and the wrapper that turns raw frames into stacked
//! observations.

mod catch;
mod chain;
mod pendulum;

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

pub use catch::PixelCatch;
pub use chain::TwoStateChain;
pub use pendulum::PixelPendulum;

use crate::error::{MlrError, Result};
use crate::registry::Registry;
use crate::types::{Action, ActionSpace, Observation};

/// One rendered frame, 8-bit, `[channels, height, width]`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Frame {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl Frame {
    pub fn blank(channels: usize, height: usize, width: usize) -> Self {
        Self { channels, height, width, data: vec![0; channels * height * width] }
    }

    pub fn set(&mut self, c: usize, y: usize, x: usize, v: u8) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> u8 {
        self.data[(c * self.height + y) * self.width + x]
    }

    /// Nearest-neighbour resize.
    pub fn resized(&self, height: usize, width: usize) -> Frame {
        if (height, width) == (self.height, self.width) {
            return self.clone();
        }
        let mut out = Frame::blank(self.channels, height, width);
        for c in 0..self.channels {
            for y in 0..height {
                let sy = y * self.height / height;
                for x in 0..width {
                    out.set(c, y, x, self.get(c, sy, x * self.width / width));
                }
            }
        }
        out
    }
}

/// An environment before action repeat and frame stacking.
pub trait RawEnv: Send {
    fn id(&self) -> &'static str;

    fn action_space(&self) -> ActionSpace;

    fn reset(&mut self, seed: u64);

    /// Advance one frame. Returns the reward and whether a terminal state was
    /// reached.
    fn step(&mut self, action: &Action) -> (f64, bool);

    fn render(&self) -> Frame;

    fn save_state(&self) -> Result<Vec<u8>>;

    fn load_state(&mut self, bytes: &[u8]) -> Result<()>;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvSpec {
    pub id: String,
    pub render_size: (usize, usize),
    pub action_repeat: usize,
    pub frame_stack: usize,
    /// Raw frames before an episode is truncated.
    pub max_episode_frames: usize,
}

impl EnvSpec {
    pub fn validate(&self) -> Result<()> {
        if self.action_repeat == 0 || self.frame_stack == 0 {
            return Err(MlrError::InvalidSpec("action repeat and frame stack must be at least 1".into()));
        }
        if self.render_size.0 == 0 || self.render_size.1 == 0 || self.max_episode_frames == 0 {
            return Err(MlrError::InvalidSpec("render size and episode length must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepResult {
    pub obs: Observation,
    pub reward: f64,
    /// Episode over (terminal or truncated).
    pub done: bool,
    pub terminal: bool,
}

/// Action repeat, frame stacking, resizing and `[0, 1]` scaling around a raw
/// environment. Environment steps are counted in raw frames.
pub struct PixelEnv {
    raw: Box<dyn RawEnv>,
    spec: EnvSpec,
    frames: VecDeque<Frame>,
    env_steps: u64,
    episode_frames: usize,
    done: bool,
}

#[derive(Serialize, Deserialize)]
struct WrapperState {
    raw: Vec<u8>,
    frames: Vec<Frame>,
    env_steps: u64,
    episode_frames: usize,
    done: bool,
}

impl PixelEnv {
    pub fn wrap(raw: Box<dyn RawEnv>, spec: EnvSpec) -> Result<Self> {
        spec.validate()?;
        Ok(Self { raw, spec, frames: VecDeque::new(), env_steps: 0, episode_frames: 0, done: true })
    }

    pub fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    pub fn action_space(&self) -> ActionSpace {
        self.raw.action_space()
    }

    pub fn raw(&self) -> &dyn RawEnv {
        self.raw.as_ref()
    }

    /// Raw frames simulated since construction.
    pub fn env_steps(&self) -> u64 {
        self.env_steps
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    pub fn observation_shape(&self) -> [usize; 3] {
        let c = self.raw.render().channels;
        [c * self.spec.frame_stack, self.spec.render_size.0, self.spec.render_size.1]
    }

    fn frame(&self) -> Frame {
        self.raw.render().resized(self.spec.render_size.0, self.spec.render_size.1)
    }

    fn observation(&self) -> Observation {
        let f = &self.frames[0];
        let mut pixels = Vec::with_capacity(self.frames.len() * f.data.len());
        for fr in &self.frames {
            pixels.extend(fr.data.iter().map(|&b| b as f32 / 255.0));
        }
        Observation { channels: f.channels * self.frames.len(), height: f.height, width: f.width, pixels }
    }

    pub fn reset(&mut self, seed: u64) -> Observation {
        self.raw.reset(seed);
        let f = self.frame();
        self.frames = std::iter::repeat_n(f, self.spec.frame_stack).collect();
        self.episode_frames = 0;
        self.done = false;
        self.observation()
    }

    pub fn step(&mut self, action: &Action) -> Result<StepResult> {
        if self.done {
            return Err(MlrError::SteppedDoneEnv);
        }
        self.raw.action_space().validate(action)?;
        let mut reward = 0.0;
        let mut terminal = false;
        for _ in 0..self.spec.action_repeat {
            let (r, t) = self.raw.step(action);
            reward += r;
            self.env_steps += 1;
            self.episode_frames += 1;
            if t {
                terminal = true;
                break;
            }
            if self.episode_frames >= self.spec.max_episode_frames {
                break;
            }
        }
        self.frames.pop_front();
        self.frames.push_back(self.frame());
        self.done = terminal || self.episode_frames >= self.spec.max_episode_frames;
        Ok(StepResult { obs: self.observation(), reward, done: self.done, terminal })
    }

    pub fn save_state(&self) -> Result<Vec<u8>> {
        let state = WrapperState {
            raw: self.raw.save_state()?,
            frames: self.frames.iter().cloned().collect(),
            env_steps: self.env_steps,
            episode_frames: self.episode_frames,
            done: self.done,
        };
        crate::agents::to_cbor(&state)
    }

    pub fn load_state(&mut self, bytes: &[u8]) -> Result<()> {
        let s: WrapperState = crate::agents::from_cbor(bytes)?;
        self.raw.load_state(&s.raw)?;
        self.frames = s.frames.into();
        self.env_steps = s.env_steps;
        self.episode_frames = s.episode_frames;
        self.done = s.done;
        Ok(())
    }
}

pub type EnvConstructor = fn(render: (usize, usize)) -> Box<dyn RawEnv>;

pub fn environments() -> Registry<EnvConstructor> {
    let mut r: Registry<EnvConstructor> = Registry::new("environment");
    r.register("pendulum", |(h, w)| Box::new(PixelPendulum::new(h, w)))
        .register("catch", |(h, w)| Box::new(PixelCatch::new(h, w)))
        .register("two_state", |_| Box::new(TwoStateChain::continuous()))
        .register("two_state_discrete", |_| Box::new(TwoStateChain::discrete()));
    r
}

/// Build and wrap a registered environment.
pub fn make_env(spec: &EnvSpec) -> Result<PixelEnv> {
    let raw = environments().get(&spec.id)?(spec.render_size);
    PixelEnv::wrap(raw, spec.clone())
}
