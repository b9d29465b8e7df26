use serde::{Deserialize, Serialize};

use super::{Frame, RawEnv};
use crate::error::Result;
use crate::types::{Action, ActionSpace};

/// Deterministic two-state cycle `0 -> 1 -> 0 -> ...` with reward 1 for
/// leaving state 0. Actions have no effect. The frame is a one-hot `1x2` image.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TwoStateChain {
    state: usize,
    actions: ActionSpace,
}

impl TwoStateChain {
    pub fn continuous() -> Self {
        Self { state: 0, actions: ActionSpace::Continuous { dim: 1 } }
    }

    pub fn discrete() -> Self {
        Self { state: 0, actions: ActionSpace::Discrete { count: 1 } }
    }

    pub fn state(&self) -> usize {
        self.state
    }

    /// Exact action values by value iteration (to machine precision).
    pub fn q_star(gamma: f64) -> [f64; 2] {
        let mut q = [0.0f64; 2];
        for _ in 0..100_000 {
            let next = [1.0 + gamma * q[1], gamma * q[0]];
            let delta = (next[0] - q[0]).abs().max((next[1] - q[1]).abs());
            q = next;
            if delta < 1e-13 {
                break;
            }
        }
        q
    }
}

impl RawEnv for TwoStateChain {
    fn id(&self) -> &'static str {
        "two_state"
    }

    fn action_space(&self) -> ActionSpace {
        self.actions
    }

    fn reset(&mut self, seed: u64) {
        self.state = (seed % 2) as usize;
    }

    fn step(&mut self, _: &Action) -> (f64, bool) {
        let r = if self.state == 0 { 1.0 } else { 0.0 };
        self.state = 1 - self.state;
        (r, false)
    }

    fn render(&self) -> Frame {
        let mut f = Frame::blank(1, 1, 2);
        f.set(0, 0, self.state, 255);
        f
    }

    fn save_state(&self) -> Result<Vec<u8>> {
        crate::agents::to_cbor(self)
    }

    fn load_state(&mut self, bytes: &[u8]) -> Result<()> {
        *self = crate::agents::from_cbor(bytes)?;
        Ok(())
    }
}
