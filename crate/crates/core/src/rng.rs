//! Seed fan-out. One master seed derives an independent generator per named
//! randomness source, so changing how one source is consumed leaves every
//! other stream untouched.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

pub const ENV: &str = "env";
pub const MASK: &str = "mask";
pub const AUGMENT: &str = "augment";
pub const INIT: &str = "init";
pub const SAMPLER: &str = "sampler";
pub const POLICY: &str = "policy";
pub const EVAL: &str = "eval";

fn fnv1a(s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SeedStreams {
    master: u64,
}

impl SeedStreams {
    pub fn new(master: u64) -> Self {
        Self { master }
    }

    pub fn master(&self) -> u64 {
        self.master
    }

    pub fn seed(&self, name: &str) -> u64 {
        splitmix(self.master ^ fnv1a(name))
    }

    pub fn stream(&self, name: &str) -> Rng {
        Rng::seed_from_u64(self.seed(name))
    }
}
