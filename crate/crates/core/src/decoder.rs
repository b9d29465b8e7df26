//! Predictive latent decoder: a bidirectional transformer over interleaved
//! state and action tokens that share one sinusoidal position per timestep.

use autograd::check::relative_error;
use autograd::nn::{Embedding, LayerNorm, Linear};
use autograd::{Binding, Graph, ParamStore, Tensor, Var};
use rand::SeedableRng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{MlrError, Result};
use crate::rng::Rng;
use crate::types::{Action, ActionSpace};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecoderConfig {
    pub layers: usize,
    pub width: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    /// Rows of the positional table (the sequence length `K`).
    pub max_pos: usize,
    pub use_action_tokens: bool,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self { layers: 2, width: 50, heads: 1, mlp_ratio: 2, max_pos: 16, use_action_tokens: true }
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.width == 0 || self.heads == 0 || self.mlp_ratio == 0 || self.max_pos == 0 {
            return Err(MlrError::InvalidSpec(format!("degenerate decoder config {self:?}")));
        }
        if !self.width.is_multiple_of(self.heads) {
            return Err(MlrError::InvalidSpec(format!(
                "width {} not divisible by {} heads",
                self.width, self.heads
            )));
        }
        Ok(())
    }

    /// Parameters in one attention block.
    pub fn block_params(&self) -> usize {
        let w = self.width;
        let hidden = self.mlp_ratio * w;
        2 * (2 * w) + 4 * (w * w + w) + (w * hidden + hidden) + (hidden * w + w)
    }
}

/// `p[pos, 2j] = sin(pos / 10000^(2j/d))`, `p[pos, 2j+1] = cos(pos / 10000^(2j/d))`.
pub fn positional_table(max_pos: usize, width: usize) -> Tensor {
    Tensor::from_fn(&[max_pos, width], |i| {
        let (pos, dim) = (i / width, i % width);
        let two_j = (dim - dim % 2) as f64;
        let angle = pos as f64 / 10000f64.powf(two_j / width as f64);
        if dim % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub enum ActionEmbedder {
    Continuous(Linear),
    Discrete(Embedding),
}

impl ActionEmbedder {
    pub fn new(space: ActionSpace, width: usize, store: &mut ParamStore, rng: &mut Rng) -> Self {
        match space {
            ActionSpace::Continuous { dim } => {
                ActionEmbedder::Continuous(Linear::new(store, "decoder.action", dim, width, true, rng))
            }
            ActionSpace::Discrete { count } => {
                ActionEmbedder::Discrete(Embedding::new(store, "decoder.action", count, width, rng))
            }
        }
    }

    pub fn num_params(&self) -> usize {
        match self {
            ActionEmbedder::Continuous(l) => l.num_params(),
            ActionEmbedder::Discrete(e) => e.count * e.dim,
        }
    }

    /// `[n, width]` embeddings.
    pub fn forward(&self, g: &mut Graph, p: Binding<'_>, actions: &[Action]) -> Result<Var> {
        match self {
            ActionEmbedder::Continuous(l) => {
                let mut data = Vec::with_capacity(actions.len() * l.in_dim);
                for a in actions {
                    let v = a
                        .as_continuous()
                        .ok_or_else(|| MlrError::InvalidArgument("discrete action for continuous embedder".into()))?;
                    if v.len() != l.in_dim {
                        return Err(MlrError::LengthMismatch { expected: l.in_dim, got: v.len() });
                    }
                    data.extend_from_slice(v);
                }
                let x = g.constant(Tensor::new(&[actions.len(), l.in_dim], data));
                Ok(l.forward(g, p, x))
            }
            ActionEmbedder::Discrete(e) => {
                let ids = actions
                    .iter()
                    .map(|a| match a.as_discrete() {
                        Some(i) if i < e.count => Ok(i),
                        _ => Err(MlrError::InvalidArgument(format!("{a:?} for {} discrete actions", e.count))),
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok(e.forward(g, p, &ids))
            }
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Block {
    ln1: LayerNorm,
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    ln2: LayerNorm,
    fc1: Linear,
    fc2: Linear,
}

impl Block {
    fn new(store: &mut ParamStore, name: &str, w: usize, ratio: usize, rng: &mut Rng) -> Self {
        Self {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), w),
            q: Linear::new(store, &format!("{name}.q"), w, w, true, rng),
            k: Linear::new(store, &format!("{name}.k"), w, w, true, rng),
            v: Linear::new(store, &format!("{name}.v"), w, w, true, rng),
            o: Linear::new(store, &format!("{name}.o"), w, w, true, rng),
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), w),
            fc1: Linear::new(store, &format!("{name}.fc1"), w, ratio * w, true, rng),
            fc2: Linear::new(store, &format!("{name}.fc2"), ratio * w, w, true, rng),
        }
    }

    /// `x [B*T, w]`.
    fn forward(&self, g: &mut Graph, p: Binding<'_>, x: Var, b: usize, t: usize, heads: usize) -> Var {
        let w = g.shape(x)[1];
        let dh = w / heads;
        let h = self.ln1.forward(g, p, x);
        let q = self.q.forward(g, p, h);
        let k = self.k.forward(g, p, h);
        let v = self.v.forward(g, p, h);
        let mut outs = Vec::with_capacity(heads);
        for i in 0..heads {
            let split = |g: &mut Graph, z: Var| {
                let part = if heads == 1 { z } else { g.narrow(z, 1, i * dh, dh) };
                g.reshape(part, &[b, t, dh])
            };
            let (qh, kh, vh) = (split(g, q), split(g, k), split(g, v));
            let scores = g.bmm(qh, kh, true);
            let scores = g.scale(scores, 1.0 / (dh as f64).sqrt());
            let att = g.softmax(scores);
            let o = g.bmm(att, vh, false);
            outs.push(g.reshape(o, &[b * t, dh]));
        }
        let cat = if heads == 1 { outs[0] } else { g.concat(&outs, 1) };
        let attn = self.o.forward(g, p, cat);
        let z = g.add(attn, x);
        let h = self.ln2.forward(g, p, z);
        let h = self.fc1.forward(g, p, h);
        let h = g.gelu(h);
        let h = self.fc2.forward(g, p, h);
        g.add(h, z)
    }

    fn zero_weights(&self, store: &mut ParamStore) {
        for l in [&self.q, &self.k, &self.v, &self.o, &self.fc1, &self.fc2] {
            for id in std::iter::once(l.w).chain(l.b) {
                store.get_mut(id).data_mut().fill(0.0);
            }
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LatentDecoder {
    pub config: DecoderConfig,
    positions: Tensor,
    action: Option<ActionEmbedder>,
    blocks: Vec<Block>,
}

impl LatentDecoder {
    pub fn new(config: DecoderConfig, actions: ActionSpace, store: &mut ParamStore, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let positions = positional_table(config.max_pos, config.width);
        let action = config
            .use_action_tokens
            .then(|| ActionEmbedder::new(actions, config.width, store, rng));
        let blocks = (0..config.layers)
            .map(|i| Block::new(store, &format!("decoder.block{i}"), config.width, config.mlp_ratio, rng))
            .collect();
        Ok(Self { config, positions, action, blocks })
    }

    pub fn positions(&self) -> &Tensor {
        &self.positions
    }

    /// Parameters in the attention blocks.
    pub fn block_params(&self) -> usize {
        self.config.layers * self.config.block_params()
    }

    /// Every parameter, including the action embedder.
    pub fn num_params(&self) -> usize {
        self.block_params() + self.action.as_ref().map_or(0, ActionEmbedder::num_params)
    }

    /// Zero every attention and MLP weight so each block is a pure residual.
    pub fn zero_blocks(&self, store: &mut ParamStore) {
        for b in &self.blocks {
            b.zero_weights(store);
        }
    }

    /// Tokens `[B, T, w]` from states `[B*K, w]` (trajectory-major) and
    /// `B*K` actions. The state and action of one timestep get the same
    /// positional row; with action tokens `T = 2K`, interleaved.
    pub fn build_tokens(&self, g: &mut Graph, p: Binding<'_>, states: Var, actions: &[Action], b: usize, k: usize) -> Result<Var> {
        let w = self.config.width;
        if g.shape(states) != [b * k, w] {
            return Err(MlrError::ShapeMismatch(format!(
                "states {:?} for {b} trajectories of {k} x {w}",
                g.shape(states)
            )));
        }
        if k > self.config.max_pos {
            return Err(MlrError::InvalidArgument(format!(
                "sequence of {k} exceeds {} positions",
                self.config.max_pos
            )));
        }
        let rows: Vec<f64> = (0..b).flat_map(|_| self.positions.data()[..k * w].iter().copied()).collect();
        let pos = g.constant(Tensor::new(&[b * k, w], rows));
        let s = g.add(states, pos);
        match &self.action {
            None => Ok(g.reshape(s, &[b, k, w])),
            Some(emb) => {
                if actions.len() != b * k {
                    return Err(MlrError::LengthMismatch { expected: b * k, got: actions.len() });
                }
                let a = emb.forward(g, p, actions)?;
                let a = g.add(a, pos);
                let s = g.reshape(s, &[b, k, 1, w]);
                let a = g.reshape(a, &[b, k, 1, w]);
                let both = g.concat(&[s, a], 2);
                Ok(g.reshape(both, &[b, 2 * k, w]))
            }
        }
    }

    /// Run every block over `[B, T, w]` tokens and return the `[B*K, w]`
    /// outputs at state positions, in temporal order.
    pub fn decode(&self, g: &mut Graph, p: Binding<'_>, tokens: Var) -> Var {
        let (b, t, w) = {
            let s = g.shape(tokens);
            (s[0], s[1], s[2])
        };
        let mut x = g.reshape(tokens, &[b * t, w]);
        for block in &self.blocks {
            x = block.forward(g, p, x, b, t, self.config.heads);
        }
        if self.action.is_some() {
            let k = t / 2;
            let x = g.reshape(x, &[b, k, 2, w]);
            let s = g.narrow(x, 2, 0, 1);
            g.reshape(s, &[b * k, w])
        } else {
            x
        }
    }

    pub fn forward(&self, g: &mut Graph, p: Binding<'_>, states: Var, actions: &[Action], b: usize, k: usize) -> Result<Var> {
        let tokens = self.build_tokens(g, p, states, actions, b, k)?;
        Ok(self.decode(g, p, tokens))
    }
}

/// Inputs for [`gradcheck_decoder`].
#[derive(Clone, Debug)]
pub struct GradcheckSample {
    pub batch: usize,
    pub k: usize,
    pub seed: u64,
    /// Zero every block weight, leaving a function that is linear in each
    /// individual coordinate.
    pub zero_blocks: bool,
    pub step: f64,
}

impl Default for GradcheckSample {
    fn default() -> Self {
        Self { batch: 2, k: 4, seed: 0, zero_blocks: false, step: 1e-5 }
    }
}

/// Largest relative error between analytic and central-difference gradients
/// of a fixed scalar projection of the decoder output, over every input token
/// and every parameter.
pub fn gradcheck_decoder(cfg: &DecoderConfig, sample: &GradcheckSample) -> Result<f64> {
    let mut rng = Rng::seed_from_u64(sample.seed);
    let mut store = ParamStore::new();
    let space = ActionSpace::Continuous { dim: 2 };
    let dec = LatentDecoder::new(cfg.clone(), space, &mut store, &mut rng)?;
    if sample.zero_blocks {
        dec.zero_blocks(&mut store);
    }
    let t = if cfg.use_action_tokens { 2 * sample.k } else { sample.k };
    let w = cfg.width;
    let shape = [sample.batch, t, w];
    let tokens = Tensor::from_fn(&shape, |_| StandardNormal.sample(&mut rng));
    let out_n = sample.batch * sample.k * w;
    let proj: Vec<f64> = (0..out_n).map(|i| (0.37 * i as f64 + 0.1).sin()).collect();

    let eval = |store: &ParamStore, tokens: &Tensor, grad: bool| {
        let mut g = Graph::new();
        let x = if grad { g.input(tokens.clone()) } else { g.constant(tokens.clone()) };
        let p = if grad { Binding::train(store) } else { Binding::frozen(store) };
        let y = dec.decode(&mut g, p, x);
        let c = g.constant(Tensor::new(&[sample.batch * sample.k, w], proj.clone()));
        let prod = g.mul(y, c);
        let loss = g.sum(prod);
        let value = g.value(loss).item();
        let grads = grad.then(|| {
            let gr = g.backward(loss);
            let tok = gr.wrt(x).cloned().unwrap_or_else(|| Tensor::zeros(&shape));
            (tok, gr.dense_for_store(store))
        });
        (value, grads)
    };

    let (_, grads) = eval(&store, &tokens, true);
    let (tok_grad, param_grads) = grads.expect("gradients requested");
    let h = sample.step;
    let floor = 1e-2;
    let mut worst: f64 = 0.0;

    let mut probe = tokens.clone();
    for i in 0..probe.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = eval(&store, &probe, false).0;
        probe.data_mut()[i] = orig - h;
        let down = eval(&store, &probe, false).0;
        probe.data_mut()[i] = orig;
        worst = worst.max(relative_error(tok_grad.data()[i], (up - down) / (2.0 * h), floor));
    }
    let mut probe = store.clone();
    for (pi, pg) in param_grads.iter().enumerate() {
        for i in 0..pg.numel() {
            let orig = probe.values()[pi].data()[i];
            probe.values_mut()[pi].data_mut()[i] = orig + h;
            let up = eval(&probe, &tokens, false).0;
            probe.values_mut()[pi].data_mut()[i] = orig - h;
            let down = eval(&probe, &tokens, false).0;
            probe.values_mut()[pi].data_mut()[i] = orig;
            worst = worst.max(relative_error(pg.data()[i], (up - down) / (2.0 * h), floor));
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(actions: bool) -> (LatentDecoder, ParamStore) {
        let mut rng = Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        let cfg = DecoderConfig { width: 8, max_pos: 4, use_action_tokens: actions, ..DecoderConfig::default() };
        let d = LatentDecoder::new(cfg, ActionSpace::Continuous { dim: 2 }, &mut store, &mut rng).unwrap();
        (d, store)
    }

    #[test]
    fn row_zero_alternates() {
        let t = positional_table(16, 4);
        assert_eq!(t.row(0), &[0.0, 1.0, 0.0, 1.0]);
        assert!(t.data().iter().all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn token_counts() {
        for (actions, expected) in [(true, 2), (false, 1)] {
            let (d, store) = small(actions);
            let mut g = Graph::new();
            let s = g.constant(Tensor::zeros(&[1, 8]));
            let tok = d
                .build_tokens(&mut g, Binding::frozen(&store), s, &[Action::Continuous(vec![0.0, 0.0])], 1, 1)
                .unwrap();
            assert_eq!(g.shape(tok), &[1, expected, 8]);
        }
    }

    #[test]
    fn zero_inputs_give_positional_rows() {
        let (d, mut store) = small(true);
        for v in store.values_mut() {
            v.data_mut().fill(0.0);
        }
        let mut g = Graph::new();
        let s = g.constant(Tensor::zeros(&[3, 8]));
        let acts = vec![Action::Continuous(vec![0.0, 0.0]); 3];
        let tok = d.build_tokens(&mut g, Binding::frozen(&store), s, &acts, 1, 3).unwrap();
        let v = g.value(tok);
        for t in 0..3 {
            for kind in 0..2 {
                let row = &v.data()[(2 * t + kind) * 8..(2 * t + kind + 1) * 8];
                assert_eq!(row, d.positions().row(t));
            }
        }
    }

    #[test]
    fn mismatched_lengths() {
        let (d, store) = small(true);
        let mut g = Graph::new();
        let s = g.constant(Tensor::zeros(&[2, 8]));
        let acts = vec![Action::Continuous(vec![0.0, 0.0]); 3];
        assert!(matches!(
            d.build_tokens(&mut g, Binding::frozen(&store), s, &acts, 1, 2),
            Err(MlrError::LengthMismatch { .. })
        ));
    }

    #[test]
    fn residual_identity_when_blocks_are_zero() {
        let (d, mut store) = small(true);
        d.zero_blocks(&mut store);
        let mut rng = Rng::seed_from_u64(1);
        let tokens = Tensor::from_fn(&[2, 6, 8], |_| StandardNormal.sample(&mut rng));
        let mut g = Graph::new();
        let x = g.constant(tokens.clone());
        let y = d.decode(&mut g, Binding::frozen(&store), x);
        let out = g.value(y);
        assert_eq!(out.shape(), &[6, 8]);
        for bt in 0..6 {
            let (b, t) = (bt / 3, bt % 3);
            let src = &tokens.data()[((b * 6) + 2 * t) * 8..((b * 6) + 2 * t + 1) * 8];
            assert_eq!(out.row(bt), src);
        }
    }

    #[test]
    fn permutation_equivariant_without_positions_or_actions() {
        let (d, store) = small(false);
        let mut rng = Rng::seed_from_u64(2);
        let tokens = Tensor::from_fn(&[1, 4, 8], |_| StandardNormal.sample(&mut rng));
        let perm = [2, 0, 3, 1];
        let permuted = Tensor::from_fn(&[1, 4, 8], |i| tokens.data()[perm[i / 8] * 8 + i % 8]);
        let run = |t: &Tensor| {
            let mut g = Graph::new();
            let x = g.constant(t.clone());
            let y = d.decode(&mut g, Binding::frozen(&store), x);
            g.value(y).clone()
        };
        let (a, b) = (run(&tokens), run(&permuted));
        for (i, &p) in perm.iter().enumerate() {
            for (u, v) in b.row(i).iter().zip(a.row(p)) {
                assert!((u - v).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn every_token_influences_the_mean_output() {
        let (d, store) = small(true);
        let mut rng = Rng::seed_from_u64(3);
        let tokens = Tensor::from_fn(&[1, 8, 8], |_| StandardNormal.sample(&mut rng));
        let mut g = Graph::new();
        let x = g.input(tokens);
        let y = d.decode(&mut g, Binding::frozen(&store), x);
        let m = g.mean(y);
        let grads = g.backward(m);
        let gx = grads.wrt(x).unwrap();
        for t in 0..8 {
            let n: f64 = gx.data()[t * 8..(t + 1) * 8].iter().map(|v| v * v).sum();
            assert!(n > 1e-12, "token {t} has no gradient");
        }
    }

    #[test]
    fn parameter_count_formula() {
        let mut rng = Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let cfg = DecoderConfig { use_action_tokens: false, ..DecoderConfig::default() };
        let d = LatentDecoder::new(cfg, ActionSpace::Continuous { dim: 1 }, &mut store, &mut rng).unwrap();
        assert_eq!(store.numel(), d.block_params());
        assert_eq!(d.block_params(), 2 * 20_550);
    }

    #[test]
    fn gradchecks() {
        let cfg = DecoderConfig { width: 16, max_pos: 4, ..DecoderConfig::default() };
        let s = GradcheckSample { batch: 1, ..GradcheckSample::default() };
        let e = gradcheck_decoder(&cfg, &s).unwrap();
        assert!(e <= 1e-4, "default config error {e}");
        assert_eq!(e, gradcheck_decoder(&cfg, &s).unwrap());
        let lin = GradcheckSample { zero_blocks: true, ..s };
        let e = gradcheck_decoder(&cfg, &lin).unwrap();
        assert!(e <= 1e-9, "linear config error {e}");
    }
}
