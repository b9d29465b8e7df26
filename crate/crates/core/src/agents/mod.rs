//! Base agents sharing the encoder with the auxiliary objective.

mod rainbow;
mod sac;

use serde::{Deserialize, Serialize};

pub use rainbow::{categorical_projection, Rainbow, RainbowConfig};
pub use sac::{sac_alpha_loss, soft_bellman_loss, tanh_gaussian, tanh_gaussian_log_prob, Sac, SacConfig};

use autograd::ParamStore;

use crate::error::Result;
use crate::mlr::{MlrConfig, MlrObjective};
use crate::nets::{Encoder, EncoderConfig};
use crate::pixelops::{random_crop, AugmentSpec};
use crate::registry::Registry;
use crate::replay::ReplayBuffer;
use crate::rng::{Rng, SeedStreams};
use crate::types::{Action, ActionSpace, Observation};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ActMode {
    Train,
    Eval,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct UpdateReport {
    pub rl_loss: f64,
    /// Absent when the objective is disabled or skipped this update.
    pub mlr_loss: Option<f64>,
    pub total_loss: f64,
    pub lr_aux: Option<f64>,
    pub grad_norm: f64,
    pub extra: Vec<(&'static str, f64)>,
}

/// Everything needed to build an agent.
#[derive(Clone, Debug)]
pub struct AgentSpec {
    pub encoder: EncoderConfig,
    pub actions: ActionSpace,
    pub augment: AugmentSpec,
    /// `None` (or `lambda = 0`) gives the baseline agent.
    pub mlr: Option<MlrConfig>,
    pub sac: SacConfig,
    pub rainbow: RainbowConfig,
    pub seeds: SeedStreams,
}

pub trait Agent: Send {
    fn name(&self) -> &'static str;

    fn action_space(&self) -> ActionSpace;

    fn act(&mut self, obs: &Observation, mode: ActMode) -> Result<Action>;

    /// Uniform random action from the policy stream (initial exploration).
    fn random_action(&mut self) -> Action;

    /// One learner update. `progress` in `[0, 1]` is the fraction of the
    /// training budget consumed.
    fn update(&mut self, buffer: &mut ReplayBuffer, progress: f64) -> Result<UpdateReport>;

    /// Smallest replay size at which `update` may be called.
    fn min_replay(&self) -> usize;

    /// Interaction steps taken with uniform random actions before the policy
    /// acts and learning starts.
    fn exploration_steps(&self) -> usize {
        0
    }

    fn encoder(&self) -> &Encoder;

    fn encoder_params(&self) -> &ParamStore;

    fn encoder_params_mut(&mut self) -> &mut ParamStore;

    fn mlr(&self) -> Option<&MlrObjective>;

    fn save_state(&self) -> Result<Vec<u8>>;

    fn load_state(&mut self, bytes: &[u8]) -> Result<()>;

    fn as_any(&self) -> &dyn std::any::Any;
}

pub type AgentConstructor = fn(&AgentSpec) -> Result<Box<dyn Agent>>;

pub fn agents() -> Registry<AgentConstructor> {
    let mut r: Registry<AgentConstructor> = Registry::new("agent");
    r.register("sac", |s| Ok(Box::new(Sac::new(s)?)))
        .register("rainbow", |s| Ok(Box::new(Rainbow::new(s)?)));
    r
}

pub fn build_agent(name: &str, spec: &AgentSpec) -> Result<Box<dyn Agent>> {
    agents().get(name)?(spec)
}

/// Independent random crop for each observation.
pub(crate) fn crop_each(obs: &[Observation], spec: &AugmentSpec, rng: &mut Rng) -> Result<Vec<Observation>> {
    obs.iter()
        .map(|o| random_crop(std::slice::from_ref(o), spec, rng).map(|mut v| v.remove(0)))
        .collect()
}

pub(crate) fn to_cbor<T: Serialize>(value: &T) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    ciborium::into_writer(value, &mut out).map_err(|e| crate::MlrError::Serialization(e.to_string()))?;
    Ok(out)
}

pub(crate) fn from_cbor<T: for<'de> Deserialize<'de>>(bytes: &[u8]) -> Result<T> {
    ciborium::from_reader(bytes).map_err(|e| crate::MlrError::Serialization(e.to_string()))
}

/// Build the MLR objective when it is enabled.
pub(crate) fn build_mlr(spec: &AgentSpec, encoder: &Encoder, params: &ParamStore, init: &mut Rng) -> Result<Option<MlrObjective>> {
    match &spec.mlr {
        Some(cfg) if cfg.lambda > 0.0 => Ok(Some(MlrObjective::new(
            cfg.clone(),
            spec.augment,
            encoder,
            params,
            spec.actions,
            init,
            spec.seeds.seed(crate::rng::MASK),
            spec.seeds.seed(crate::rng::AUGMENT) ^ 0x5eed,
        )?)),
        _ => Ok(None),
    }
}
