use autograd::optim::grad_norm;
use autograd::{Adam, AdamConfig, Binding, Graph, ParamStore, Tensor, Var};
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{build_mlr, crop_each, from_cbor, to_cbor, ActMode, Agent, AgentSpec, UpdateReport};
use crate::error::{check_finite, MlrError, Result};
use crate::mlr::MlrObjective;
use crate::nets::{Encoder, MomentumPair, Mlp};
use crate::pixelops::{center_crop, AugmentSpec};
use crate::replay::ReplayBuffer;
use crate::rng::{self, Rng};
use crate::types::{batch_tensor, Action, ActionSpace, Observation, Trajectory};

const LOG_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SacConfig {
    pub gamma: f64,
    pub init_temperature: f64,
    pub learn_temperature: bool,
    /// Defaults to `-dim(A)`.
    pub target_entropy: Option<f64>,
    /// EMA coefficient of the critic target (encoder included).
    pub critic_target_m: f64,
    pub target_update_freq: u64,
    pub actor_update_freq: u64,
    pub lr: f64,
    pub alpha_lr: f64,
    pub batch: usize,
    pub hidden_dim: usize,
    pub twin: bool,
    pub log_std_min: f64,
    pub log_std_max: f64,
    pub init_steps: usize,
}

impl Default for SacConfig {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            init_temperature: 0.1,
            learn_temperature: true,
            target_entropy: None,
            critic_target_m: 0.99,
            target_update_freq: 2,
            actor_update_freq: 2,
            lr: 1e-3,
            alpha_lr: 1e-4,
            batch: 512,
            hidden_dim: 1024,
            twin: true,
            log_std_min: -10.0,
            log_std_max: 2.0,
            init_steps: 1000,
        }
    }
}

/// Reparameterised tanh-squashed Gaussian sample `tanh(mu + sigma * eps)` and
/// its log-density, summed over the last dimension (`[n, A] -> [n]`).
pub fn tanh_gaussian(g: &mut Graph, mu: Var, log_std: Var, eps: &Tensor) -> (Var, Var) {
    let a_dim = g.shape(mu)[1];
    let e = g.constant(eps.clone());
    let std = g.exp(log_std);
    let noise = g.mul(std, e);
    let u = g.add(mu, noise);
    let action = g.tanh(u);
    let half_sq = g.constant(eps.map(|x| -0.5 * x * x));
    let gauss = g.sub(half_sq, log_std);
    let gauss = g.sum_last(gauss);
    let gauss = g.add_scalar(gauss, -0.5 * LOG_2PI * a_dim as f64);
    // log(1 - tanh(u)^2) = 2 (log 2 - u - softplus(-2u))
    let m2u = g.scale(u, -2.0);
    let sp = g.softplus(m2u);
    let corr = g.add(u, sp);
    let corr = g.neg(corr);
    let corr = g.add_scalar(corr, std::f64::consts::LN_2);
    let corr = g.scale(corr, 2.0);
    let corr = g.sum_last(corr);
    let logp = g.sub(gauss, corr);
    (action, logp)
}

/// Scalar density of `a = tanh(u)`, `u ~ N(mu, sigma^2)`.
pub fn tanh_gaussian_log_prob(a: f64, mu: f64, sigma: f64) -> f64 {
    let u = a.atanh();
    let z = (u - mu) / sigma;
    -0.5 * z * z - sigma.ln() - 0.5 * LOG_2PI - (1.0 - a * a).ln()
}

/// Mean over critics of the mean squared error to a shared target.
pub fn soft_bellman_loss(g: &mut Graph, qs: &[Var], target: Var) -> Var {
    let mut total: Option<Var> = None;
    for &q in qs {
        let d = g.sub(q, target);
        let sq = g.square(d);
        let m = g.mean(sq);
        total = Some(match total {
            Some(t) => g.add(t, m),
            None => m,
        });
    }
    g.scale(total.expect("at least one critic"), 1.0 / qs.len() as f64)
}

/// Temperature loss `mean(-alpha * (log_pi + target_entropy))` and its
/// derivative with respect to `log alpha`.
pub fn sac_alpha_loss(log_alpha: f64, log_probs: &[f64], target_entropy: f64) -> (f64, f64) {
    let alpha = log_alpha.exp();
    let mean: f64 = log_probs.iter().map(|lp| -(lp + target_entropy)).sum::<f64>() / log_probs.len() as f64;
    (alpha * mean, alpha * mean)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Sac {
    cfg: SacConfig,
    action_dim: usize,
    augment: AugmentSpec,
    encoder: Encoder,
    enc: ParamStore,
    critics: Vec<Mlp>,
    critic_params: ParamStore,
    actor: Mlp,
    actor_params: ParamStore,
    log_alpha: ParamStore,
    target_enc: MomentumPair,
    target_critic: MomentumPair,
    enc_opt: Adam,
    critic_opt: Adam,
    actor_opt: Adam,
    alpha_opt: Adam,
    mlr: Option<MlrObjective>,
    lambda: f64,
    updates: u64,
    policy_rng: Rng,
    sampler_rng: Rng,
    noise_rng: Rng,
    aug_rng: Rng,
}

struct Sampled {
    action: Tensor,
    log_prob: Tensor,
}

impl Sac {
    pub fn new(spec: &AgentSpec) -> Result<Self> {
        let cfg = spec.sac.clone();
        let action_dim = match spec.actions {
            ActionSpace::Continuous { dim } => dim,
            ActionSpace::Discrete { .. } => {
                return Err(MlrError::InvalidSpec("soft actor-critic needs a continuous action space".into()))
            }
        };
        if !(0.0..=1.0).contains(&cfg.gamma) {
            return Err(MlrError::InvalidSpec(format!("gamma {}", cfg.gamma)));
        }
        if cfg.learn_temperature && cfg.init_temperature <= 0.0 {
            return Err(MlrError::InvalidSpec("a learned temperature must start positive".into()));
        }
        let mut init = spec.seeds.stream(rng::INIT);
        let mut enc = ParamStore::new();
        let encoder = Encoder::new(spec.encoder.clone(), &mut enc, &mut init)?;
        let d = encoder.latent_dim();
        let h = cfg.hidden_dim;
        let mut critic_params = ParamStore::new();
        let critics = (0..if cfg.twin { 2 } else { 1 })
            .map(|i| Mlp::new(&mut critic_params, &format!("critic{i}"), &[d + action_dim, h, h, 1], &mut init))
            .collect();
        let mut actor_params = ParamStore::new();
        let actor = Mlp::new(&mut actor_params, "actor", &[d, h, h, 2 * action_dim], &mut init);
        let mut log_alpha = ParamStore::new();
        log_alpha.add("log_alpha", Tensor::scalar(cfg.init_temperature.max(1e-300).ln()));
        let mlr = build_mlr(spec, &encoder, &enc, &mut init)?;
        Ok(Self {
            enc_opt: Adam::new(&enc, AdamConfig::new(cfg.lr)),
            critic_opt: Adam::new(&critic_params, AdamConfig::new(cfg.lr)),
            actor_opt: Adam::new(&actor_params, AdamConfig::new(cfg.lr)),
            alpha_opt: Adam::new(&log_alpha, AdamConfig::new(cfg.alpha_lr).betas(0.5, 0.999)),
            target_enc: MomentumPair::new(&enc, cfg.critic_target_m),
            target_critic: MomentumPair::new(&critic_params, cfg.critic_target_m),
            lambda: spec.mlr.as_ref().map_or(0.0, |m| m.lambda),
            mlr,
            action_dim,
            augment: spec.augment,
            encoder,
            enc,
            critics,
            critic_params,
            actor,
            actor_params,
            log_alpha,
            updates: 0,
            policy_rng: spec.seeds.stream(rng::POLICY),
            sampler_rng: spec.seeds.stream(rng::SAMPLER),
            noise_rng: spec.seeds.stream("noise"),
            aug_rng: spec.seeds.stream(rng::AUGMENT),
            cfg,
        })
    }

    pub fn alpha(&self) -> f64 {
        if self.cfg.learn_temperature {
            self.log_alpha.values()[0].item().exp()
        } else {
            self.cfg.init_temperature
        }
    }

    pub fn target_entropy(&self) -> f64 {
        self.cfg.target_entropy.unwrap_or(-(self.action_dim as f64))
    }

    pub fn config(&self) -> &SacConfig {
        &self.cfg
    }

    pub fn updates(&self) -> u64 {
        self.updates
    }

    pub fn critic_params(&self) -> &ParamStore {
        &self.critic_params
    }

    pub fn target_critic_params(&self) -> &ParamStore {
        &self.target_critic.momentum
    }

    pub fn target_encoder_params(&self) -> &ParamStore {
        &self.target_enc.momentum
    }

    /// `(mu, log_std)` for latent states `h`.
    fn actor_heads(&self, g: &mut Graph, p: Binding<'_>, h: Var) -> (Var, Var) {
        let out = self.actor.forward(g, p, h);
        let a = self.action_dim;
        let mu = g.narrow(out, 1, 0, a);
        let raw = g.narrow(out, 1, a, a);
        let t = g.tanh(raw);
        let t = g.add_scalar(t, 1.0);
        let span = 0.5 * (self.cfg.log_std_max - self.cfg.log_std_min);
        let ls = g.scale(t, span);
        let ls = g.add_scalar(ls, self.cfg.log_std_min);
        (mu, ls)
    }

    fn q_min(&self, g: &mut Graph, p: Binding<'_>, h: Var, a: Var) -> (Vec<Var>, Var) {
        let x = g.concat(&[h, a], 1);
        let qs: Vec<Var> = self.critics.iter().map(|c| c.forward(g, p, x)).collect();
        let mut m = qs[0];
        for &q in &qs[1..] {
            m = g.minimum(m, q);
        }
        (qs, m)
    }

    fn sample_policy(&mut self, latents: &Tensor) -> Sampled {
        let n = latents.shape()[0];
        let eps = Tensor::from_fn(&[n, self.action_dim], |_| StandardNormal.sample(&mut self.noise_rng));
        let mut g = Graph::new();
        let h = g.constant(latents.clone());
        let (mu, ls) = self.actor_heads(&mut g, Binding::frozen(&self.actor_params), h);
        let (a, lp) = tanh_gaussian(&mut g, mu, ls, &eps);
        Sampled { action: g.value(a).clone(), log_prob: g.value(lp).clone() }
    }

    /// Critic estimates `Q_i(s, a)` on centre-cropped observations.
    pub fn q_values(&self, obs: &[Observation], actions: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        let obs = center_crop_each(obs, &self.augment)?;
        let h = self.encoder.encode(&self.enc, &obs)?;
        let a = Tensor::new(&[actions.len(), self.action_dim], actions.concat());
        let mut g = Graph::new();
        let hv = g.constant(h);
        let av = g.constant(a);
        let (qs, _) = self.q_min(&mut g, Binding::frozen(&self.critic_params), hv, av);
        Ok(qs.iter().map(|&q| g.value(q).data().to_vec()).collect())
    }

    fn aux_batch(&mut self, buffer: &ReplayBuffer) -> Option<Vec<Trajectory>> {
        let mlr = self.mlr.as_ref()?;
        let (n, k) = (mlr.config.aux_batch, mlr.config.seq_len);
        let batch: Result<Vec<_>> = (0..n).map(|_| buffer.sample_trajectory(k, &mut self.sampler_rng)).collect();
        match batch {
            Ok(b) => Some(b),
            Err(e) => {
                log::debug!("skipping auxiliary loss: {e}");
                None
            }
        }
    }
}

fn center_crop_each(obs: &[Observation], spec: &AugmentSpec) -> Result<Vec<Observation>> {
    obs.iter()
        .map(|o| center_crop(std::slice::from_ref(o), spec).map(|mut v| v.remove(0)))
        .collect()
}

impl Agent for Sac {
    fn name(&self) -> &'static str {
        "sac"
    }

    fn action_space(&self) -> ActionSpace {
        ActionSpace::Continuous { dim: self.action_dim }
    }

    fn act(&mut self, obs: &Observation, mode: ActMode) -> Result<Action> {
        let o = center_crop_each(std::slice::from_ref(obs), &self.augment)?;
        let h = self.encoder.encode(&self.enc, &o)?;
        let action = match mode {
            ActMode::Eval => {
                let mut g = Graph::new();
                let hv = g.constant(h);
                let (mu, _) = self.actor_heads(&mut g, Binding::frozen(&self.actor_params), hv);
                g.value(mu).data().iter().map(|m| m.tanh()).collect()
            }
            ActMode::Train => {
                let eps = Tensor::from_fn(&[1, self.action_dim], |_| StandardNormal.sample(&mut self.policy_rng));
                let mut g = Graph::new();
                let hv = g.constant(h);
                let (mu, ls) = self.actor_heads(&mut g, Binding::frozen(&self.actor_params), hv);
                let (a, _) = tanh_gaussian(&mut g, mu, ls, &eps);
                g.value(a).data().to_vec()
            }
        };
        Ok(Action::Continuous(action))
    }

    fn random_action(&mut self) -> Action {
        Action::Continuous((0..self.action_dim).map(|_| self.policy_rng.random_range(-1.0..1.0)).collect())
    }

    fn min_replay(&self) -> usize {
        1
    }

    fn exploration_steps(&self) -> usize {
        self.cfg.init_steps
    }

    fn update(&mut self, buffer: &mut ReplayBuffer, _progress: f64) -> Result<UpdateReport> {
        let batch = buffer.sample_batch(self.cfg.batch, 0.0, &mut self.sampler_rng)?;
        let n = batch.transitions.len();
        let obs: Vec<Observation> = batch.transitions.iter().map(|t| t.obs.clone()).collect();
        let next: Vec<Observation> = batch.transitions.iter().map(|t| t.next_obs.clone()).collect();
        let obs = crop_each(&obs, &self.augment, &mut self.aug_rng)?;
        let next = crop_each(&next, &self.augment, &mut self.aug_rng)?;
        let mut actions = Vec::with_capacity(n * self.action_dim);
        for t in &batch.transitions {
            let a = t
                .action
                .as_continuous()
                .ok_or_else(|| MlrError::InvalidArgument("discrete action in continuous replay".into()))?;
            actions.extend_from_slice(a);
        }
        let alpha = self.alpha();

        // Soft Bellman target.
        let next_h = self.encoder.encode(&self.enc, &next)?;
        let sampled = self.sample_policy(&next_h);
        let target = {
            let tgt_h = self.encoder.encode(&self.target_enc.momentum, &next)?;
            let mut g = Graph::new();
            let hv = g.constant(tgt_h);
            let av = g.constant(sampled.action.clone());
            let (_, qmin) = self.q_min(&mut g, Binding::frozen(&self.target_critic.momentum), hv, av);
            let q = g.value(qmin).data().to_vec();
            let data = (0..n)
                .map(|i| {
                    let t = &batch.transitions[i];
                    let v = q[i] - alpha * sampled.log_prob.data()[i];
                    t.reward + if t.terminal { 0.0 } else { self.cfg.gamma * v }
                })
                .collect();
            Tensor::new(&[n, 1], data)
        };

        // Critic (plus auxiliary) loss on one tape.
        let aux = self.aux_batch(buffer);
        let mut g = Graph::new();
        let x = g.constant(batch_tensor(&obs)?);
        let h = self.encoder.forward(&mut g, Binding::train(&self.enc), x);
        let a = g.constant(Tensor::new(&[n, self.action_dim], actions));
        let (qs, _) = self.q_min(&mut g, Binding::train(&self.critic_params), h, a);
        let tv = g.constant(target);
        let critic_loss = soft_bellman_loss(&mut g, &qs, tv);
        let rl_loss = check_finite("critic loss", g.value(critic_loss).item())?;
        let mut total = critic_loss;
        let mut mlr_loss = None;
        if let (Some(mlr), Some(traj)) = (self.mlr.as_mut(), aux) {
            match mlr.forward(&mut g, &self.encoder, &self.enc, &traj) {
                Ok(f) => {
                    let scaled = g.scale(f.loss, self.lambda);
                    total = g.add(critic_loss, scaled);
                    mlr_loss = Some(f.value);
                }
                Err(MlrError::NumericalError(e)) => log::warn!("skipping auxiliary gradient: {e}"),
                Err(e) => return Err(e),
            }
        }
        let total_value = g.value(total).item();
        let grads = g.backward(total);
        let enc_grads = grads.for_store(&self.enc);
        let critic_grads = grads.for_store(&self.critic_params);
        let norm = grad_norm(&[enc_grads.clone(), critic_grads.clone()].concat());
        let enc_owned: Vec<Option<Tensor>> = enc_grads.into_iter().map(|t| t.cloned()).collect();
        let critic_owned: Vec<Option<Tensor>> = critic_grads.into_iter().map(|t| t.cloned()).collect();
        self.enc_opt.step(&mut self.enc, &enc_owned.iter().map(Option::as_ref).collect::<Vec<_>>());
        self.critic_opt
            .step(&mut self.critic_params, &critic_owned.iter().map(Option::as_ref).collect::<Vec<_>>());
        let lr_aux = match (&mut self.mlr, mlr_loss) {
            (Some(mlr), Some(_)) => Some(mlr.step(&grads)),
            _ => None,
        };
        let h_value = g.value(h).clone();
        drop(grads);
        drop(g);

        let mut extra = vec![("alpha", alpha)];
        if self.updates.is_multiple_of(self.cfg.actor_update_freq) {
            let eps = Tensor::from_fn(&[n, self.action_dim], |_| StandardNormal.sample(&mut self.noise_rng));
            let mut g = Graph::new();
            let hv = g.constant(h_value);
            let (mu, ls) = self.actor_heads(&mut g, Binding::train(&self.actor_params), hv);
            let (act, logp) = tanh_gaussian(&mut g, mu, ls, &eps);
            let (_, qmin) = self.q_min(&mut g, Binding::frozen(&self.critic_params), hv, act);
            let qmin = g.reshape(qmin, &[n]);
            let scaled = g.scale(logp, alpha);
            let diff = g.sub(scaled, qmin);
            let actor_loss = g.mean(diff);
            let actor_value = check_finite("actor loss", g.value(actor_loss).item())?;
            let log_probs = g.value(logp).data().to_vec();
            let grads = g.backward(actor_loss);
            let ag: Vec<Option<Tensor>> = grads.for_store(&self.actor_params).into_iter().map(|t| t.cloned()).collect();
            self.actor_opt.step(&mut self.actor_params, &ag.iter().map(Option::as_ref).collect::<Vec<_>>());
            extra.push(("actor_loss", actor_value));
            extra.push(("entropy", -log_probs.iter().sum::<f64>() / n as f64));
            if self.cfg.learn_temperature {
                let la = self.log_alpha.values()[0].item();
                let (alpha_loss, grad) = sac_alpha_loss(la, &log_probs, self.target_entropy());
                let gt = Tensor::scalar(grad);
                self.alpha_opt.step(&mut self.log_alpha, &[Some(&gt)]);
                extra.push(("alpha_loss", alpha_loss));
            }
        }
        if self.updates.is_multiple_of(self.cfg.target_update_freq) {
            self.target_critic.ema_update(&self.critic_params)?;
            self.target_enc.ema_update(&self.enc)?;
        }
        if let Some(mlr) = &mut self.mlr {
            mlr.update_momentum(&self.enc)?;
        }
        self.updates += 1;
        Ok(UpdateReport {
            rl_loss,
            mlr_loss,
            total_loss: total_value,
            lr_aux,
            grad_norm: norm,
            extra,
        })
    }

    fn encoder(&self) -> &Encoder {
        &self.encoder
    }

    fn encoder_params(&self) -> &ParamStore {
        &self.enc
    }

    fn encoder_params_mut(&mut self) -> &mut ParamStore {
        &mut self.enc
    }

    fn mlr(&self) -> Option<&MlrObjective> {
        self.mlr.as_ref()
    }

    fn save_state(&self) -> Result<Vec<u8>> {
        to_cbor(self)
    }

    fn load_state(&mut self, bytes: &[u8]) -> Result<()> {
        *self = from_cbor(bytes)?;
        Ok(())
    }

    fn as_any(&self) -> &dyn std::any::Any {
        self
    }
}
