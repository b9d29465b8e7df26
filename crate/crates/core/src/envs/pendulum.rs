use std::f64::consts::PI;

use rand::{Rng as _, SeedableRng};
use serde::{Deserialize, Serialize};

use super::{Frame, RawEnv};
use crate::error::Result;
use crate::rng::Rng;
use crate::types::{Action, ActionSpace};

const GRAVITY: f64 = 9.81;
const DT: f64 = 0.05;
const SUBSTEPS: usize = 4;
const MAX_SPEED: f64 = 8.0;
const MAX_TORQUE: f64 = 2.0;
const MAX_COST: f64 = PI * PI + 0.1 * MAX_SPEED * MAX_SPEED + 0.001 * MAX_TORQUE * MAX_TORQUE;

/// Torque-limited swing-up pendulum rendered as an RGB rod over a checkered
/// backdrop. The angle is zero when the rod points up.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PixelPendulum {
    pub theta: f64,
    pub omega: f64,
    height: usize,
    width: usize,
}

fn wrap_angle(theta: f64) -> f64 {
    (theta + PI).rem_euclid(2.0 * PI) - PI
}

impl PixelPendulum {
    pub fn new(height: usize, width: usize) -> Self {
        Self { theta: PI, omega: 0.0, height, width }
    }

    /// Angular acceleration per unit of `sin(theta)`.
    pub fn stiffness() -> f64 {
        1.5 * GRAVITY
    }

    /// Mechanical energy per unit inertia, `0.5 w^2 + k cos(theta)`.
    pub fn energy(&self) -> f64 {
        0.5 * self.omega * self.omega + Self::stiffness() * self.theta.cos()
    }

    /// Per-frame reward in `[0, 1]`.
    pub fn reward(theta: f64, omega: f64, torque: f64) -> f64 {
        let th = wrap_angle(theta);
        let cost = th * th + 0.1 * omega * omega + 0.001 * torque * torque;
        (1.0 - cost / MAX_COST).clamp(0.0, 1.0)
    }

    fn accel(&self, torque: f64) -> f64 {
        Self::stiffness() * self.theta.sin() + 3.0 * torque
    }

    /// Leapfrog integration over one frame.
    fn integrate(&mut self, torque: f64) {
        let h = DT / SUBSTEPS as f64;
        for _ in 0..SUBSTEPS {
            self.omega += 0.5 * h * self.accel(torque);
            self.theta += h * self.omega;
            self.omega += 0.5 * h * self.accel(torque);
        }
        self.omega = self.omega.clamp(-MAX_SPEED, MAX_SPEED);
    }
}

impl RawEnv for PixelPendulum {
    fn id(&self) -> &'static str {
        "pendulum"
    }

    fn action_space(&self) -> ActionSpace {
        ActionSpace::Continuous { dim: 1 }
    }

    fn reset(&mut self, seed: u64) {
        let mut rng = Rng::seed_from_u64(seed);
        self.theta = rng.random_range(-PI..PI);
        self.omega = rng.random_range(-1.0..1.0);
    }

    fn step(&mut self, action: &Action) -> (f64, bool) {
        let u = action.as_continuous().map_or(0.0, |a| a[0]).clamp(-1.0, 1.0) * MAX_TORQUE;
        let r = Self::reward(self.theta, self.omega, u);
        self.integrate(u);
        (r, false)
    }

    fn render(&self) -> Frame {
        let (h, w) = (self.height, self.width);
        let mut f = Frame::blank(3, h, w);
        let size = h.min(w) as f64;
        let (cx, cy) = (w as f64 / 2.0, h as f64 / 2.0);
        let len = 0.4 * size;
        let (ex, ey) = (cx + len * self.theta.sin(), cy - len * self.theta.cos());
        let half = (size / 20.0).max(1.0);
        let bob = (size / 10.0).max(1.5);
        let (dx, dy) = (ex - cx, ey - cy);
        let len2 = dx * dx + dy * dy;
        for y in 0..h {
            for x in 0..w {
                let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                let t = (((px - cx) * dx + (py - cy) * dy) / len2).clamp(0.0, 1.0);
                let (qx, qy) = (cx + t * dx - px, cy + t * dy - py);
                if (px - ex).hypot(py - ey) <= bob {
                    f.set(0, y, x, 230);
                    f.set(1, y, x, 60);
                    f.set(2, y, x, 40);
                } else if qx.hypot(qy) <= half {
                    f.set(0, y, x, 200);
                    f.set(1, y, x, 200);
                    f.set(2, y, x, 255);
                } else if (px - cx).hypot(py - cy) <= half {
                    f.set(1, y, x, 255);
                } else {
                    let shade = if (x * 8 / w + y * 8 / h) % 2 == 0 { [40, 50, 70] } else { [75, 90, 115] };
                    for (c, v) in shade.into_iter().enumerate() {
                        f.set(c, y, x, v);
                    }
                }
            }
        }
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
