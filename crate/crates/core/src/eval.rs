//! Policy evaluation and aggregate score statistics.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::agents::{ActMode, Agent};
use crate::envs::PixelEnv;
use crate::error::{MlrError, Result};
use crate::rng::Rng;
use crate::types::{Action, Observation};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeStats {
    pub mean: f64,
    pub std: f64,
    pub episodes: usize,
}

impl EpisodeStats {
    pub fn from_returns(returns: &[f64]) -> Self {
        let n = returns.len().max(1) as f64;
        let mean = returns.iter().sum::<f64>() / n;
        let var = returns.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n;
        Self { mean, std: var.sqrt(), episodes: returns.len() }
    }
}

/// Run full episodes with `policy` and return the per-episode returns.
/// Episode `i` is reset with `seed + i`.
pub fn rollout_returns<P>(env: &mut PixelEnv, episodes: usize, seed: u64, mut policy: P) -> Result<Vec<f64>>
where
    P: FnMut(&PixelEnv, &Observation) -> Result<Action>,
{
    let mut returns = Vec::with_capacity(episodes);
    for i in 0..episodes {
        let mut obs = env.reset(seed.wrapping_add(i as u64));
        let mut total = 0.0;
        loop {
            let a = policy(env, &obs)?;
            let s = env.step(&a)?;
            total += s.reward;
            obs = s.obs;
            if s.done {
                break;
            }
        }
        returns.push(total);
    }
    Ok(returns)
}

/// Mean and standard deviation of returns under the agent's deterministic
/// policy.
pub fn evaluate_policy(agent: &mut dyn Agent, env: &mut PixelEnv, episodes: usize, seed: u64) -> Result<EpisodeStats> {
    let returns = rollout_returns(env, episodes, seed, |_, o| agent.act(o, ActMode::Eval))?;
    Ok(EpisodeStats::from_returns(&returns))
}

/// Human-normalised score.
pub fn hns(score: f64, random_ref: f64, human_ref: f64) -> Result<f64> {
    if human_ref == random_ref {
        return Err(MlrError::DegenerateReference(human_ref));
    }
    Ok((score - random_ref) / (human_ref - random_ref))
}

/// Mean of the middle half. Values straddling a quartile boundary contribute
/// with the fraction of their unit mass inside it.
pub fn iqm(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len() as f64;
    let (lo, hi) = (0.25 * n, 0.75 * n);
    let mut acc = 0.0;
    for (i, x) in v.iter().enumerate() {
        let w = (hi.min(i as f64 + 1.0) - lo.max(i as f64)).max(0.0);
        acc += w * x;
    }
    acc / (hi - lo)
}

/// Mean shortfall below `threshold`; values above it contribute nothing.
pub fn optimality_gap_at(values: &[f64], threshold: f64) -> f64 {
    values.iter().map(|x| threshold - x.min(threshold)).sum::<f64>() / values.len() as f64
}

pub fn optimality_gap(hns_values: &[f64]) -> f64 {
    optimality_gap_at(hns_values, 1.0)
}

/// Fraction of (run, task) scores strictly above each threshold.
pub fn performance_profile(scores: &[Vec<f64>], taus: &[f64]) -> Vec<f64> {
    let total: usize = scores.iter().map(Vec::len).sum();
    taus.iter()
        .map(|&t| {
            let above: usize = scores.iter().map(|row| row.iter().filter(|&&x| x > t).count()).sum();
            above as f64 / total as f64
        })
        .collect()
}

/// Percentile bootstrap interval of `stat` over runs resampled with
/// replacement.
pub fn bootstrap_ci<F>(runs: &[Vec<f64>], stat: F, resamples: usize, level: f64, rng: &mut Rng) -> (f64, f64)
where
    F: Fn(&[Vec<f64>]) -> f64,
{
    let mut draws: Vec<f64> = (0..resamples)
        .map(|_| {
            let sample: Vec<Vec<f64>> = (0..runs.len()).map(|_| runs[rng.random_range(0..runs.len())].clone()).collect();
            stat(&sample)
        })
        .collect();
    draws.sort_by(f64::total_cmp);
    let q = |p: f64| draws[((p * (draws.len() - 1) as f64).round() as usize).min(draws.len() - 1)];
    let a = (1.0 - level) / 2.0;
    (q(a), q(1.0 - a))
}

/// Raw scores for `M` runs on `N` tasks plus per-task (random, human)
/// references.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreMatrix {
    pub tasks: Vec<String>,
    pub scores: Vec<Vec<f64>>,
    pub references: Vec<(f64, f64)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub task_means: Vec<f64>,
    pub task_medians: Vec<f64>,
    pub hns: Vec<Vec<f64>>,
    pub iqm: f64,
    pub optimality_gap: f64,
    pub profile: Vec<(f64, f64)>,
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

impl ScoreMatrix {
    pub fn new(tasks: Vec<String>, scores: Vec<Vec<f64>>, references: Vec<(f64, f64)>) -> Result<Self> {
        let m = Self { tasks, scores, references };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.tasks.len();
        if n == 0 || self.scores.is_empty() {
            return Err(MlrError::InsufficientData("score matrix needs at least one run and one task".into()));
        }
        if self.references.len() != n {
            return Err(MlrError::LengthMismatch { expected: n, got: self.references.len() });
        }
        if let Some(row) = self.scores.iter().find(|r| r.len() != n) {
            return Err(MlrError::LengthMismatch { expected: n, got: row.len() });
        }
        if let Some(&(r, _)) = self.references.iter().find(|(r, h)| r == h) {
            return Err(MlrError::DegenerateReference(r));
        }
        Ok(())
    }

    pub fn hns_matrix(&self) -> Result<Vec<Vec<f64>>> {
        self.scores
            .iter()
            .map(|row| row.iter().zip(&self.references).map(|(&s, &(r, h))| hns(s, r, h)).collect())
            .collect()
    }

    pub fn report(&self, taus: &[f64]) -> Result<EvalReport> {
        self.validate()?;
        let n = self.tasks.len();
        let column = |j: usize| self.scores.iter().map(|r| r[j]).collect::<Vec<_>>();
        let task_means = (0..n).map(|j| column(j).iter().sum::<f64>() / self.scores.len() as f64).collect();
        let task_medians = (0..n).map(|j| median(&mut column(j))).collect();
        let h = self.hns_matrix()?;
        let flat: Vec<f64> = h.iter().flatten().copied().collect();
        let profile = taus.iter().copied().zip(performance_profile(&h, taus)).collect();
        Ok(EvalReport { task_means, task_medians, iqm: iqm(&flat), optimality_gap: optimality_gap(&flat), hns: h, profile })
    }

    /// Header row of task ids, then one row per run.
    pub fn write_csv<W: std::io::Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(&self.tasks)?;
        for row in &self.scores {
            w.write_record(row.iter().map(|x| x.to_string()))?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: std::io::Read>(input: R, references: Vec<(f64, f64)>) -> Result<Self> {
        let mut r = csv::Reader::from_reader(input);
        let tasks: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
        let mut scores = Vec::new();
        for rec in r.records() {
            let rec = rec?;
            let row = rec
                .iter()
                .map(|s| s.trim().parse::<f64>().map_err(|e| MlrError::Serialization(format!("bad score `{s}`: {e}"))))
                .collect::<Result<Vec<_>>>()?;
            scores.push(row);
        }
        Self::new(tasks, scores, references)
    }
}
