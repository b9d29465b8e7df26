use rand::{Rng as _, SeedableRng};
use serde::{Deserialize, Serialize};

use super::{Frame, RawEnv};
use crate::error::Result;
use crate::rng::Rng;
use crate::types::{Action, ActionSpace};

pub const ROWS: usize = 10;
pub const COLS: usize = 10;

/// Objects fall one row per frame; the paddle on the bottom row moves
/// left, stays or moves right. Each object that reaches the bottom scores +1
/// if caught and -1 otherwise. The episode ends after `drops` objects.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PixelCatch {
    pub ball: (usize, usize),
    pub paddle: usize,
    pub drops: usize,
    pub remaining: usize,
    rng: Rng,
    height: usize,
    width: usize,
}

impl PixelCatch {
    pub const DROPS: usize = 3;

    pub fn new(height: usize, width: usize) -> Self {
        Self {
            ball: (0, 0),
            paddle: COLS / 2,
            drops: Self::DROPS,
            remaining: Self::DROPS,
            rng: Rng::seed_from_u64(0),
            height,
            width,
        }
    }

    /// Frames per episode.
    pub fn episode_frames(&self) -> usize {
        self.drops * (ROWS - 1)
    }

    fn drop_ball(&mut self) {
        self.ball = (0, self.rng.random_range(0..COLS));
    }

    /// The action that moves the paddle toward the object.
    pub fn scripted_action(&self) -> usize {
        match self.ball.1.cmp(&self.paddle) {
            std::cmp::Ordering::Less => 0,
            std::cmp::Ordering::Equal => 1,
            std::cmp::Ordering::Greater => 2,
        }
    }
}

impl RawEnv for PixelCatch {
    fn id(&self) -> &'static str {
        "catch"
    }

    fn action_space(&self) -> ActionSpace {
        ActionSpace::Discrete { count: 3 }
    }

    fn reset(&mut self, seed: u64) {
        self.rng = Rng::seed_from_u64(seed);
        self.paddle = COLS / 2;
        self.remaining = self.drops;
        self.drop_ball();
    }

    fn step(&mut self, action: &Action) -> (f64, bool) {
        match action.as_discrete() {
            Some(0) => self.paddle = self.paddle.saturating_sub(1),
            Some(2) => self.paddle = (self.paddle + 1).min(COLS - 1),
            _ => {}
        }
        self.ball.0 += 1;
        if self.ball.0 < ROWS - 1 {
            return (0.0, false);
        }
        let r = if self.ball.1 == self.paddle { 1.0 } else { -1.0 };
        self.remaining -= 1;
        if self.remaining == 0 {
            return (r, true);
        }
        self.drop_ball();
        (r, false)
    }

    fn render(&self) -> Frame {
        let mut f = Frame::blank(1, self.height, self.width);
        let cell = (self.height / ROWS).min(self.width / COLS).max(1);
        let oy = self.height.saturating_sub(cell * ROWS) / 2;
        let ox = self.width.saturating_sub(cell * COLS) / 2;
        let mut fill = |row: usize, col: usize, v: u8| {
            for y in 0..cell {
                for x in 0..cell {
                    let (py, px) = (oy + row * cell + y, ox + col * cell + x);
                    if py < self.height && px < self.width {
                        f.set(0, py, px, v);
                    }
                }
            }
        };
        fill(ROWS - 1, self.paddle, 160);
        fill(self.ball.0, self.ball.1, 255);
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
