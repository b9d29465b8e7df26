//! Interaction and learning loop with evaluation, metric records and
//! resumable checkpoints.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use autograd::{Adam, AdamConfig, ParamStore};
use mlr::agents::{build_agent, ActMode, Agent};
use mlr::envs::{make_env, PixelEnv};
use mlr::eval::{rollout_returns, EpisodeStats};
use mlr::mlr::{regression_accuracy, MlrObjective};
use mlr::nets::Encoder;
use mlr::replay::ReplayBuffer;
use mlr::rng::{self, SeedStreams};
use mlr::{Action, ActionSpace, Observation, Transition};

use crate::config::ExperimentConfig;
use crate::error::{CliError, Context, Result};
use crate::log::{MetricLog, MetricRecord};

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
struct Counters {
    agent_steps: u64,
    updates: u64,
    episode: u64,
    episode_return: f64,
    next_eval: u64,
    eval_rounds: u64,
    next_checkpoint: u64,
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    config: ExperimentConfig,
    seed: u64,
    agent: Vec<u8>,
    buffer: ReplayBuffer,
    env: Vec<u8>,
    eval_env: Vec<u8>,
    obs: Observation,
    counters: Counters,
    records: Vec<MetricRecord>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunSummary {
    pub seed: u64,
    pub env_steps: u64,
    pub updates: u64,
    /// Mean return of the last evaluation.
    pub final_return: Option<f64>,
    pub regression_accuracy: Option<f64>,
    pub records: Vec<MetricRecord>,
}

pub struct Trainer {
    cfg: ExperimentConfig,
    seed: u64,
    seeds: SeedStreams,
    hash: String,
    env: PixelEnv,
    eval_env: PixelEnv,
    agent: Box<dyn Agent>,
    buffer: ReplayBuffer,
    obs: Observation,
    c: Counters,
    log: MetricLog,
    dir: Option<PathBuf>,
}

pub fn checkpoint_name(env_steps: u64) -> String {
    format!("ckpt-{env_steps:09}.cbor")
}

fn episode_seed(seeds: &SeedStreams, episode: u64) -> u64 {
    seeds.seed(rng::ENV).wrapping_add(episode)
}

impl Trainer {
    /// Fresh run. With a directory, records go to `metrics.jsonl` and
    /// checkpoints next to it.
    pub fn new(cfg: &ExperimentConfig, seed: u64, dir: Option<&Path>) -> Result<Self> {
        cfg.validate()?;
        let seeds = SeedStreams::new(seed);
        let spec = cfg.env_spec();
        let mut env = make_env(&spec)?;
        let eval_env = make_env(&spec)?;
        let shape = env.observation_shape();
        let agent_spec = cfg.agent_spec(shape[0], env.action_space(), seed)?;
        let agent = build_agent(&cfg.agent, &agent_spec).context(|| format!("building agent `{}`", cfg.agent))?;
        let buffer = cfg.replay_buffer(shape, agent.min_replay());
        let obs = env.reset(episode_seed(&seeds, 0));
        let log = match dir {
            Some(d) => {
                std::fs::create_dir_all(d)?;
                std::fs::write(d.join("config.txt"), cfg.to_text()?)?;
                MetricLog::create(&d.join("metrics.jsonl"), Vec::new())?
            }
            None => MetricLog::in_memory(),
        };
        let c = Counters { next_eval: cfg.train.eval_every, next_checkpoint: 0, ..Counters::default() };
        Ok(Self {
            hash: cfg.hash()?,
            cfg: cfg.clone(),
            seed,
            seeds,
            env,
            eval_env,
            agent,
            buffer,
            obs,
            c,
            log,
            dir: dir.map(Path::to_path_buf),
        })
    }

    /// Continue from a checkpoint. Records already in the checkpoint are
    /// rewritten to the new directory's log first.
    pub fn resume(checkpoint: &Path, dir: Option<&Path>) -> Result<Self> {
        let bytes = std::fs::read(checkpoint).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => CliError::FileNotFound(checkpoint.to_path_buf()),
            _ => CliError::Io(e),
        })?;
        let ck: Checkpoint =
            ciborium::from_reader(&bytes[..]).map_err(|e| mlr::MlrError::Serialization(e.to_string()))?;
        let mut t = Self::new(&ck.config, ck.seed, None)?;
        t.agent.load_state(&ck.agent)?;
        t.env.load_state(&ck.env)?;
        t.eval_env.load_state(&ck.eval_env)?;
        t.buffer = ck.buffer;
        t.obs = ck.obs;
        t.c = ck.counters;
        t.log = match dir {
            Some(d) => {
                std::fs::create_dir_all(d)?;
                std::fs::write(d.join("config.txt"), t.cfg.to_text()?)?;
                MetricLog::create(&d.join("metrics.jsonl"), ck.records)?
            }
            None => {
                let mut log = MetricLog::in_memory();
                for r in ck.records {
                    log.push(r)?;
                }
                log
            }
        };
        t.dir = dir.map(Path::to_path_buf);
        Ok(t)
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.cfg
    }

    pub fn agent(&self) -> &dyn Agent {
        self.agent.as_ref()
    }

    pub fn agent_mut(&mut self) -> &mut dyn Agent {
        self.agent.as_mut()
    }

    pub fn buffer(&self) -> &ReplayBuffer {
        &self.buffer
    }

    pub fn env_steps(&self) -> u64 {
        self.env.env_steps()
    }

    pub fn updates(&self) -> u64 {
        self.c.updates
    }

    pub fn records(&self) -> &[MetricRecord] {
        self.log.records()
    }

    fn record(&mut self, split: &str, name: &str, value: f64) -> Result<()> {
        self.log.push(MetricRecord {
            step: self.env.env_steps(),
            split: split.into(),
            name: name.into(),
            value,
            seed: self.seed,
            config_hash: self.hash.clone(),
        })
    }

    pub fn checkpoint_bytes(&self) -> Result<Vec<u8>> {
        let ck = Checkpoint {
            config: self.cfg.clone(),
            seed: self.seed,
            agent: self.agent.save_state()?,
            buffer: self.buffer.clone(),
            env: self.env.save_state()?,
            eval_env: self.eval_env.save_state()?,
            obs: self.obs.clone(),
            counters: self.c,
            records: self.log.records().to_vec(),
        };
        let mut out = Vec::new();
        ciborium::into_writer(&ck, &mut out).map_err(|e| mlr::MlrError::Serialization(e.to_string()))?;
        Ok(out)
    }

    /// Write a checkpoint into the run directory (if any).
    pub fn save_checkpoint(&self) -> Result<Option<PathBuf>> {
        let Some(dir) = &self.dir else { return Ok(None) };
        let path = dir.join(checkpoint_name(self.env.env_steps()));
        std::fs::write(&path, self.checkpoint_bytes()?)?;
        Ok(Some(path))
    }

    /// Mean and standard deviation of deterministic-policy returns.
    pub fn evaluate(&mut self, episodes: usize) -> Result<EpisodeStats> {
        let seed = self.seeds.seed(rng::EVAL).wrapping_add(self.c.eval_rounds.wrapping_mul(1_000_003));
        self.c.eval_rounds += 1;
        let agent = &mut self.agent;
        let returns = rollout_returns(&mut self.eval_env, episodes, seed, |_, o| agent.act(o, ActMode::Eval))?;
        Ok(EpisodeStats::from_returns(&returns))
    }

    /// Masked-vs-clean latent cosine similarity on `n` replay windows.
    pub fn regression_accuracy(&self, n: usize) -> Result<f64> {
        let mut mask = self.cfg.mask_spec();
        if mask.strategy.eq_ignore_ascii_case("feature") {
            mask.strategy = "cube".into();
        }
        let mut rng = self.seeds.stream("regression");
        Ok(regression_accuracy(
            self.agent.encoder(),
            self.agent.encoder_params(),
            &self.buffer,
            n,
            self.cfg.mlr.seq_len,
            &mask,
            &self.cfg.augment_spec()?,
            &mut rng,
        )?)
    }

    fn interact(&mut self) -> Result<()> {
        let action = if (self.c.agent_steps as usize) < self.agent.exploration_steps() {
            self.agent.random_action()
        } else {
            self.agent.act(&self.obs, ActMode::Train)?
        };
        let s = self.env.step(&action)?;
        self.buffer.push(Transition {
            obs: self.obs.clone(),
            action,
            reward: s.reward,
            next_obs: s.obs.clone(),
            done: s.done,
            terminal: s.terminal,
        })?;
        self.c.agent_steps += 1;
        self.c.episode_return += s.reward;
        if s.done {
            let ret = self.c.episode_return;
            self.record("train", "episode_return", ret)?;
            self.c.episode += 1;
            self.c.episode_return = 0.0;
            self.obs = self.env.reset(episode_seed(&self.seeds, self.c.episode));
        } else {
            self.obs = s.obs;
        }
        Ok(())
    }

    fn learn(&mut self) -> Result<()> {
        if (self.c.agent_steps as usize) < self.agent.exploration_steps() || self.buffer.len() < self.agent.min_replay() {
            return Ok(());
        }
        let progress = self.env.env_steps() as f64 / self.cfg.train.env_steps.max(1) as f64;
        for _ in 0..self.cfg.train.updates_per_step {
            let r = self.agent.update(&mut self.buffer, progress).context(|| format!("update {}", self.c.updates))?;
            self.c.updates += 1;
            if self.c.updates.is_multiple_of(self.cfg.train.log_every) {
                self.record("train", "rl_loss", r.rl_loss)?;
                if let Some(m) = r.mlr_loss {
                    self.record("train", "mlr_loss", m)?;
                }
                if let Some(lr) = r.lr_aux {
                    self.record("train", "lr_aux", lr)?;
                }
                self.record("train", "total_loss", r.total_loss)?;
                self.record("train", "grad_norm", r.grad_norm)?;
                for (name, v) in &r.extra {
                    self.record("train", name, *v)?;
                }
            }
        }
        Ok(())
    }

    /// Run to the configured environment-step budget.
    pub fn run(&mut self) -> Result<RunSummary> {
        let budget = self.cfg.train.env_steps;
        let every = self.cfg.output.checkpoint_every;
        if self.env.env_steps() == 0 && self.c.next_checkpoint == 0 {
            self.save_checkpoint()?;
            self.c.next_checkpoint = if every > 0 { every } else { u64::MAX };
        }
        let mut final_return = None;
        while self.env.env_steps() < budget {
            self.interact()?;
            self.learn()?;
            let steps = self.env.env_steps();
            if self.cfg.train.eval_every > 0 && steps >= self.c.next_eval {
                let stats = self.evaluate(self.cfg.train.eval_episodes)?;
                self.record("eval", "return", stats.mean)?;
                self.record("eval", "return_std", stats.std)?;
                final_return = Some(stats.mean);
                while self.c.next_eval <= steps {
                    self.c.next_eval += self.cfg.train.eval_every;
                }
            }
            if steps >= self.c.next_checkpoint && steps < budget {
                self.save_checkpoint()?;
                while self.c.next_checkpoint <= steps {
                    self.c.next_checkpoint = self.c.next_checkpoint.saturating_add(every.max(1));
                }
            }
        }
        let steps = self.env.env_steps();
        let evaluated_here = self.records().iter().rev().any(|r| r.split == "eval" && r.name == "return" && r.step == steps);
        if self.cfg.train.eval_every > 0 && budget > 0 && !evaluated_here {
            let stats = self.evaluate(self.cfg.train.eval_episodes)?;
            self.record("eval", "return", stats.mean)?;
            self.record("eval", "return_std", stats.std)?;
            final_return = Some(stats.mean);
        }
        let mut regression = None;
        if self.cfg.train.regression_samples > 0 && !self.buffer.valid_windows(self.cfg.mlr.seq_len).is_empty() {
            let r = self.regression_accuracy(self.cfg.train.regression_samples)?;
            self.record("eval", "regression_accuracy", r)?;
            regression = Some(r);
        }
        if budget > 0 {
            self.save_checkpoint()?;
        }
        let final_return = final_return.or_else(|| {
            self.records().iter().rev().find(|r| r.split == "eval" && r.name == "return").map(|r| r.value)
        });
        Ok(RunSummary {
            seed: self.seed,
            env_steps: self.env.env_steps(),
            updates: self.c.updates,
            final_return,
            regression_accuracy: regression,
            records: self.log.records().to_vec(),
        })
    }
}

/// Train every configured seed; seed `s` writes to `out/seed-s`.
pub fn run_train(cfg: &ExperimentConfig, out: Option<&Path>) -> Result<Vec<RunSummary>> {
    cfg.seeds
        .iter()
        .map(|&s| {
            let dir = out.map(|o| o.join(format!("seed-{s}")));
            Trainer::new(cfg, s, dir.as_deref())?.run()
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct PretrainSummary {
    pub losses: Vec<f64>,
    pub regression_before: f64,
    pub regression_after: f64,
}

fn random_action(space: ActionSpace, rng: &mut mlr::rng::Rng) -> Action {
    use rand::Rng as _;
    match space {
        ActionSpace::Continuous { dim } => Action::Continuous((0..dim).map(|_| rng.random_range(-1.0..1.0)).collect()),
        ActionSpace::Discrete { count } => Action::Discrete(rng.random_range(0..count)),
    }
}

/// Train an encoder on the MLR objective alone over random-policy data.
pub fn run_pretrain(cfg: &ExperimentConfig, seed: u64) -> Result<PretrainSummary> {
    cfg.validate()?;
    let mcfg = cfg
        .mlr_config()?
        .ok_or_else(|| CliError::InvalidConfig("pretraining needs mlr.lambda > 0".into()))?;
    let seeds = SeedStreams::new(seed);
    let mut env = make_env(&cfg.env_spec())?;
    let shape = env.observation_shape();
    let actions = env.action_space();
    let mut buffer = ReplayBuffer::new(cfg.replay.capacity, shape);
    let mut policy = seeds.stream(rng::POLICY);
    let mut episode = 0;
    let mut obs = env.reset(episode_seed(&seeds, 0));
    while env.env_steps() < cfg.train.env_steps {
        let a = random_action(actions, &mut policy);
        let s = env.step(&a)?;
        buffer.push(Transition { obs, action: a, reward: s.reward, next_obs: s.obs.clone(), done: s.done, terminal: s.terminal })?;
        obs = if s.done {
            episode += 1;
            env.reset(episode_seed(&seeds, episode))
        } else {
            s.obs
        };
    }
    let mut init = seeds.stream(rng::INIT);
    let mut params = ParamStore::new();
    let encoder = Encoder::new(cfg.encoder_config(shape[0])?, &mut params, &mut init)?;
    let augment = cfg.augment_spec()?;
    let mut objective = MlrObjective::new(
        mcfg,
        augment,
        &encoder,
        &params,
        actions,
        &mut init,
        seeds.seed(rng::MASK),
        seeds.seed(rng::AUGMENT),
    )?;
    let mut opt = Adam::new(&params, AdamConfig::new(cfg.sac.lr));
    let mut mask = cfg.mask_spec();
    if mask.strategy.eq_ignore_ascii_case("feature") {
        mask.strategy = "cube".into();
    }
    let probe = |p: &ParamStore| {
        let mut r = seeds.stream("regression");
        regression_accuracy(&encoder, p, &buffer, cfg.train.regression_samples.max(1), cfg.mlr.seq_len, &mask, &augment, &mut r)
    };
    let regression_before = probe(&params)?;
    let mut sampler = seeds.stream(rng::SAMPLER);
    let losses =
        objective.pretrain_only(&encoder, &mut params, &mut opt, &buffer, cfg.train.pretrain_updates, &mut sampler)?;
    let regression_after = probe(&params)?;
    Ok(PretrainSummary { losses, regression_before, regression_after })
}
