use autograd::nn::fan_in_uniform;
use autograd::optim::clip_grad_norm;
use autograd::{Adam, AdamConfig, Binding, Graph, ParamId, ParamStore, Tensor, Var};
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{build_mlr, crop_each, from_cbor, to_cbor, ActMode, Agent, AgentSpec, UpdateReport};
use crate::error::{check_finite, MlrError, Result};
use crate::mlr::MlrObjective;
use crate::nets::{Encoder, MomentumPair};
use crate::pixelops::{center_crop, AugmentSpec};
use crate::replay::ReplayBuffer;
use crate::rng::{self, Rng};
use crate::types::{batch_tensor, Action, ActionSpace, Observation};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RainbowConfig {
    pub atoms: usize,
    pub v_min: f64,
    pub v_max: f64,
    pub multi_step: usize,
    pub gamma: f64,
    pub double_q: bool,
    pub dueling: bool,
    pub noisy_sigma: f64,
    pub priority_exponent: f64,
    /// Importance-correction exponent at the start of training; annealed to 1.
    pub priority_weight: f64,
    pub lr: f64,
    pub adam_eps: f64,
    pub max_grad_norm: f64,
    pub batch: usize,
    pub hidden_dim: usize,
    pub reward_clip: Option<f64>,
    pub min_replay: usize,
}

impl Default for RainbowConfig {
    fn default() -> Self {
        Self {
            atoms: 51,
            v_min: -10.0,
            v_max: 10.0,
            multi_step: 10,
            gamma: 0.99,
            double_q: true,
            dueling: true,
            noisy_sigma: 0.5,
            priority_exponent: 0.5,
            priority_weight: 0.4,
            lr: 1e-4,
            adam_eps: 1.5e-4,
            max_grad_norm: 10.0,
            batch: 32,
            hidden_dim: 256,
            reward_clip: Some(1.0),
            min_replay: 2000,
        }
    }
}

impl RainbowConfig {
    pub fn validate(&self) -> Result<()> {
        if self.atoms < 2 || self.v_min >= self.v_max || self.multi_step == 0 {
            return Err(MlrError::InvalidSpec(format!(
                "support of {} atoms over [{}, {}] with {}-step returns",
                self.atoms, self.v_min, self.v_max, self.multi_step
            )));
        }
        Ok(())
    }

    pub fn support(&self) -> Vec<f64> {
        let dz = (self.v_max - self.v_min) / (self.atoms - 1) as f64;
        (0..self.atoms).map(|i| self.v_min + i as f64 * dz).collect()
    }
}

/// Project `r + discount * z` distributions back onto the fixed `support`.
pub fn categorical_projection(support: &[f64], rewards: &[f64], discounts: &[f64], next_probs: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = support.len();
    let (v_min, v_max) = (support[0], support[n - 1]);
    let dz = (v_max - v_min) / (n - 1) as f64;
    rewards
        .iter()
        .zip(discounts)
        .zip(next_probs)
        .map(|((&r, &d), p)| {
            let mut m = vec![0.0; n];
            for (z, &pj) in support.iter().zip(p) {
                let tz = (r + d * z).clamp(v_min, v_max);
                let b = ((tz - v_min) / dz).clamp(0.0, (n - 1) as f64);
                let (l, u) = (b.floor() as usize, b.ceil() as usize);
                if l == u {
                    m[l] += pj;
                } else {
                    m[l] += pj * (u as f64 - b);
                    m[u] += pj * (b - l as f64);
                }
            }
            m
        })
        .collect()
}

/// Linear layer with factorised Gaussian parameter noise.
#[derive(Clone, Debug, Serialize, Deserialize)]
struct NoisyLinear {
    mu_w: ParamId,
    sigma_w: ParamId,
    mu_b: ParamId,
    sigma_b: ParamId,
    in_dim: usize,
    out_dim: usize,
}

fn scaled_noise(rng: &mut Rng, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let x: f64 = StandardNormal.sample(rng);
            x.signum() * x.abs().sqrt()
        })
        .collect()
}

impl NoisyLinear {
    fn new(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize, sigma0: f64, rng: &mut Rng) -> Self {
        let s = sigma0 / (in_dim as f64).sqrt();
        Self {
            mu_w: store.add(format!("{name}.mu_w"), fan_in_uniform(&[in_dim, out_dim], in_dim, rng)),
            sigma_w: store.add(format!("{name}.sigma_w"), Tensor::full(&[in_dim, out_dim], s)),
            mu_b: store.add(format!("{name}.mu_b"), fan_in_uniform(&[out_dim], in_dim, rng)),
            sigma_b: store.add(format!("{name}.sigma_b"), Tensor::full(&[out_dim], s)),
            in_dim,
            out_dim,
        }
    }

    fn noise(&self, rng: &mut Rng) -> (Tensor, Tensor) {
        let e_in = scaled_noise(rng, self.in_dim);
        let e_out = scaled_noise(rng, self.out_dim);
        let w = Tensor::from_fn(&[self.in_dim, self.out_dim], |i| e_in[i / self.out_dim] * e_out[i % self.out_dim]);
        (w, Tensor::new(&[self.out_dim], e_out))
    }

    fn forward(&self, g: &mut Graph, p: Binding<'_>, x: Var, noise: Option<&(Tensor, Tensor)>) -> Var {
        let mut w = p.get(g, self.mu_w);
        let mut b = p.get(g, self.mu_b);
        if let Some((ew, eb)) = noise {
            let sw = p.get(g, self.sigma_w);
            let sb = p.get(g, self.sigma_b);
            let ew = g.constant(ew.clone());
            let eb = g.constant(eb.clone());
            let nw = g.mul(sw, ew);
            let nb = g.mul(sb, eb);
            w = g.add(w, nw);
            b = g.add(b, nb);
        }
        let y = g.matmul(x, w);
        g.add_row(y, b)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct DistributionalHead {
    value: Option<[NoisyLinear; 2]>,
    advantage: [NoisyLinear; 2],
    actions: usize,
    atoms: usize,
}

type HeadNoise = Vec<(Tensor, Tensor)>;

impl DistributionalHead {
    fn layers(&self) -> Vec<&NoisyLinear> {
        let mut v: Vec<&NoisyLinear> = self.advantage.iter().collect();
        if let Some(val) = &self.value {
            v.extend(val.iter());
        }
        v
    }

    fn noise(&self, rng: &mut Rng) -> HeadNoise {
        self.layers().iter().map(|l| l.noise(rng)).collect()
    }

    /// Log-probabilities `[B * A, atoms]`.
    fn forward(&self, g: &mut Graph, p: Binding<'_>, h: Var, noise: Option<&HeadNoise>) -> Var {
        let b = g.shape(h)[0];
        let nz = |i: usize| noise.map(|n| &n[i]);
        let x = self.advantage[0].forward(g, p, h, nz(0));
        let x = g.relu(x);
        let adv = self.advantage[1].forward(g, p, x, nz(1));
        let logits = match &self.value {
            None => adv,
            Some(val) => {
                let x = val[0].forward(g, p, h, nz(2));
                let x = g.relu(x);
                let v = val[1].forward(g, p, x, nz(3));
                let (a, n) = (self.actions, self.atoms);
                let repeat = Tensor::from_fn(&[n, a * n], |i| if i / (a * n) == (i % (a * n)) % n { 1.0 } else { 0.0 });
                let center = Tensor::from_fn(&[a * n, a * n], |i| {
                    let (r, c) = (i / (a * n), i % (a * n));
                    let same_atom = if r % n == c % n { 1.0 / a as f64 } else { 0.0 };
                    (if r == c { 1.0 } else { 0.0 }) - same_atom
                });
                let rep = g.constant(repeat);
                let cen = g.constant(center);
                let vr = g.matmul(v, rep);
                let ac = g.matmul(adv, cen);
                g.add(vr, ac)
            }
        };
        let logits = g.reshape(logits, &[b * self.actions, self.atoms]);
        g.log_softmax(logits)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Rainbow {
    cfg: RainbowConfig,
    actions: usize,
    support: Vec<f64>,
    augment: AugmentSpec,
    encoder: Encoder,
    enc: ParamStore,
    head: DistributionalHead,
    head_params: ParamStore,
    target_enc: MomentumPair,
    target_head: MomentumPair,
    enc_opt: Adam,
    head_opt: Adam,
    mlr: Option<MlrObjective>,
    lambda: f64,
    updates: u64,
    policy_rng: Rng,
    sampler_rng: Rng,
    noise_rng: Rng,
    aug_rng: Rng,
}

impl Rainbow {
    pub fn new(spec: &AgentSpec) -> Result<Self> {
        let cfg = spec.rainbow.clone();
        cfg.validate()?;
        let actions = match spec.actions {
            ActionSpace::Discrete { count } => count,
            ActionSpace::Continuous { .. } => {
                return Err(MlrError::InvalidSpec("distributional Q-learning needs discrete actions".into()))
            }
        };
        let mut init = spec.seeds.stream(rng::INIT);
        let mut enc = ParamStore::new();
        let encoder = Encoder::new(spec.encoder.clone(), &mut enc, &mut init)?;
        let d = encoder.latent_dim();
        let (hd, n, s) = (cfg.hidden_dim, cfg.atoms, cfg.noisy_sigma);
        let mut head_params = ParamStore::new();
        let hp = &mut head_params;
        let advantage = [
            NoisyLinear::new(hp, "advantage.0", d, hd, s, &mut init),
            NoisyLinear::new(hp, "advantage.1", hd, actions * n, s, &mut init),
        ];
        let value = cfg.dueling.then(|| {
            [
                NoisyLinear::new(hp, "value.0", d, hd, s, &mut init),
                NoisyLinear::new(hp, "value.1", hd, n, s, &mut init),
            ]
        });
        let head = DistributionalHead { value, advantage, actions, atoms: n };
        let mlr = build_mlr(spec, &encoder, &enc, &mut init)?;
        let adam = AdamConfig::new(cfg.lr).eps(cfg.adam_eps);
        Ok(Self {
            support: cfg.support(),
            enc_opt: Adam::new(&enc, adam),
            head_opt: Adam::new(&head_params, adam),
            target_enc: MomentumPair::new(&enc, 0.0),
            target_head: MomentumPair::new(&head_params, 0.0),
            lambda: spec.mlr.as_ref().map_or(0.0, |m| m.lambda),
            mlr,
            actions,
            augment: spec.augment,
            encoder,
            enc,
            head,
            head_params,
            updates: 0,
            policy_rng: spec.seeds.stream(rng::POLICY),
            sampler_rng: spec.seeds.stream(rng::SAMPLER),
            noise_rng: spec.seeds.stream("noise"),
            aug_rng: spec.seeds.stream(rng::AUGMENT),
            cfg,
        })
    }

    pub fn support(&self) -> &[f64] {
        &self.support
    }

    pub fn config(&self) -> &RainbowConfig {
        &self.cfg
    }

    fn probs(&self, enc: &ParamStore, head: &ParamStore, obs: &[Observation], noise: Option<&HeadNoise>) -> Result<Vec<Vec<Vec<f64>>>> {
        let mut g = Graph::new();
        let x = g.constant(batch_tensor(obs)?);
        let h = self.encoder.forward(&mut g, Binding::frozen(enc), x);
        let lp = self.head.forward(&mut g, Binding::frozen(head), h, noise);
        let v = g.value(lp);
        Ok((0..obs.len())
            .map(|b| {
                (0..self.actions)
                    .map(|a| v.row(b * self.actions + a).iter().map(|l| l.exp()).collect())
                    .collect()
            })
            .collect())
    }

    fn expected(&self, dist: &[f64]) -> f64 {
        dist.iter().zip(&self.support).map(|(p, z)| p * z).sum()
    }

    fn greedy(&self, dists: &[Vec<f64>]) -> usize {
        let mut best = (0, f64::NEG_INFINITY);
        for (a, d) in dists.iter().enumerate() {
            let q = self.expected(d);
            if q > best.1 {
                best = (a, q);
            }
        }
        best.0
    }

    /// Noise-free per-action return distributions for one observation.
    pub fn action_distributions(&self, obs: &Observation) -> Result<Vec<Vec<f64>>> {
        let o = center_crop(std::slice::from_ref(obs), &self.augment)?;
        Ok(self.probs(&self.enc, &self.head_params, &o, None)?.remove(0))
    }

    /// Noise-free expected action values for one observation.
    pub fn q_values(&self, obs: &Observation) -> Result<Vec<f64>> {
        Ok(self.action_distributions(obs)?.iter().map(|d| self.expected(d)).collect())
    }
}

impl Agent for Rainbow {
    fn name(&self) -> &'static str {
        "rainbow"
    }

    fn action_space(&self) -> ActionSpace {
        ActionSpace::Discrete { count: self.actions }
    }

    fn act(&mut self, obs: &Observation, mode: ActMode) -> Result<Action> {
        let o = center_crop(std::slice::from_ref(obs), &self.augment)?;
        let noise = match mode {
            ActMode::Train => Some(self.head.noise(&mut self.policy_rng)),
            ActMode::Eval => None,
        };
        let dists = self.probs(&self.enc, &self.head_params, &o, noise.as_ref())?.remove(0);
        Ok(Action::Discrete(self.greedy(&dists)))
    }

    fn random_action(&mut self) -> Action {
        Action::Discrete(self.policy_rng.random_range(0..self.actions))
    }

    fn min_replay(&self) -> usize {
        self.cfg.min_replay
    }

    fn update(&mut self, buffer: &mut ReplayBuffer, progress: f64) -> Result<UpdateReport> {
        let beta = self.cfg.priority_weight + (1.0 - self.cfg.priority_weight) * progress.clamp(0.0, 1.0);
        let batch = buffer.sample_batch(self.cfg.batch, beta, &mut self.sampler_rng)?;
        let n = batch.transitions.len();
        let returns: Vec<_> = batch
            .indices
            .iter()
            .map(|&s| buffer.n_step(s, self.cfg.multi_step, self.cfg.gamma, self.cfg.reward_clip))
            .collect();
        let obs: Vec<Observation> = batch.transitions.iter().map(|t| t.obs.clone()).collect();
        let next: Vec<Observation> = returns.iter().map(|r| r.next_obs.clone()).collect();
        let obs = crop_each(&obs, &self.augment, &mut self.aug_rng)?;
        let next = crop_each(&next, &self.augment, &mut self.aug_rng)?;

        // Distributional target: online selects, target evaluates.
        let target_noise = self.head.noise(&mut self.noise_rng);
        let target_dists = self.probs(&self.target_enc.momentum, &self.target_head.momentum, &next, Some(&target_noise))?;
        let select = if self.cfg.double_q {
            let online_noise = self.head.noise(&mut self.noise_rng);
            self.probs(&self.enc, &self.head_params, &next, Some(&online_noise))?
        } else {
            target_dists.clone()
        };
        let next_probs: Vec<Vec<f64>> = (0..n).map(|i| target_dists[i][self.greedy(&select[i])].clone()).collect();
        let rewards: Vec<f64> = returns.iter().map(|r| r.reward).collect();
        let discounts: Vec<f64> = returns.iter().map(|r| r.discount).collect();
        let m = categorical_projection(&self.support, &rewards, &discounts, &next_probs);

        let mut actions = Vec::with_capacity(n);
        for (i, t) in batch.transitions.iter().enumerate() {
            let a = t
                .action
                .as_discrete()
                .ok_or_else(|| MlrError::InvalidArgument("continuous action in discrete replay".into()))?;
            actions.push(i * self.actions + a);
        }
        let aux = match &self.mlr {
            Some(mlr) => {
                let (b, k) = (mlr.config.aux_batch, mlr.config.seq_len);
                let r: Result<Vec<_>> = (0..b).map(|_| buffer.sample_trajectory(k, &mut self.sampler_rng)).collect();
                r.ok()
            }
            None => None,
        };

        let noise = self.head.noise(&mut self.noise_rng);
        let mut g = Graph::new();
        let x = g.constant(batch_tensor(&obs)?);
        let h = self.encoder.forward(&mut g, Binding::train(&self.enc), x);
        let lp = self.head.forward(&mut g, Binding::train(&self.head_params), h, Some(&noise));
        let chosen = g.index_rows(lp, &actions);
        let mt = g.constant(Tensor::new(&[n, self.cfg.atoms], m.concat()));
        let ce = g.mul(mt, chosen);
        let ce = g.sum_last(ce);
        let per_item = g.neg(ce);
        let weights = batch.weights.clone().unwrap_or_else(|| vec![1.0; n]);
        let w = g.constant(Tensor::new(&[n], weights));
        let weighted = g.mul(per_item, w);
        let rl = g.mean(weighted);
        let rl_loss = check_finite("distributional loss", g.value(rl).item())?;
        let priorities: Vec<f64> = g.value(per_item).data().iter().map(|l| l.max(1e-6)).collect();
        let mut total = rl;
        let mut mlr_loss = None;
        if let (Some(mlr), Some(traj)) = (self.mlr.as_mut(), aux) {
            match mlr.forward(&mut g, &self.encoder, &self.enc, &traj) {
                Ok(f) => {
                    let scaled = g.scale(f.loss, self.lambda);
                    total = g.add(rl, scaled);
                    mlr_loss = Some(f.value);
                }
                Err(MlrError::NumericalError(e)) => log::warn!("skipping auxiliary gradient: {e}"),
                Err(e) => return Err(e),
            }
        }
        let total_value = g.value(total).item();
        let grads = g.backward(total);
        let mut dense = grads.dense_for_store(&self.enc);
        let n_enc = dense.len();
        dense.extend(grads.dense_for_store(&self.head_params));
        let norm = clip_grad_norm(&mut dense, self.cfg.max_grad_norm);
        let (eg, hg) = dense.split_at(n_enc);
        self.enc_opt.step(&mut self.enc, &eg.iter().map(Some).collect::<Vec<_>>());
        self.head_opt.step(&mut self.head_params, &hg.iter().map(Some).collect::<Vec<_>>());
        let lr_aux = match (&mut self.mlr, mlr_loss) {
            (Some(mlr), Some(_)) => Some(mlr.step(&grads)),
            _ => None,
        };
        drop(grads);
        drop(g);
        if buffer.prioritized() {
            buffer.update_priorities(&batch.indices, &priorities)?;
        }
        self.target_enc.ema_update(&self.enc)?;
        self.target_head.ema_update(&self.head_params)?;
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
            extra: vec![("beta", beta)],
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
