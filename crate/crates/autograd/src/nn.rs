//! Layer descriptors. A layer owns only [`ParamId`]s; the values live in a
//! [`ParamStore`] and are bound into a [`Graph`] through a [`Binding`].

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::graph::{Graph, Var};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// How a parameter store enters the tape.
#[derive(Clone, Copy)]
pub struct Binding<'a> {
    pub store: &'a ParamStore,
    pub trainable: bool,
}

impl<'a> Binding<'a> {
    pub fn train(store: &'a ParamStore) -> Self {
        Self { store, trainable: true }
    }

    pub fn frozen(store: &'a ParamStore) -> Self {
        Self { store, trainable: false }
    }

    pub fn get(&self, g: &mut Graph, id: ParamId) -> Var {
        if self.trainable {
            g.param(self.store, id)
        } else {
            g.frozen(self.store, id)
        }
    }
}

/// Fan-in uniform initialisation, `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
pub fn fan_in_uniform<R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    Tensor::from_fn(shape, |_| rng.random_range(-bound..=bound))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize, bias: bool, rng: &mut R) -> Self {
        let w = store.add(format!("{name}.weight"), fan_in_uniform(&[in_dim, out_dim], in_dim, rng));
        let b = bias.then(|| store.add(format!("{name}.bias"), fan_in_uniform(&[out_dim], in_dim, rng)));
        Self { w, b, in_dim, out_dim }
    }

    pub fn num_params(&self) -> usize {
        self.in_dim * self.out_dim + if self.b.is_some() { self.out_dim } else { 0 }
    }

    /// `x [n, in] -> [n, out]`
    pub fn forward(&self, g: &mut Graph, p: Binding<'_>, x: Var) -> Var {
        let w = p.get(g, self.w);
        let y = g.matmul(x, w);
        match self.b {
            Some(b) => {
                let b = p.get(g, b);
                g.add_row(y, b)
            }
            None => y,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
    pub dim: usize,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        let gain = store.add(format!("{name}.gain"), Tensor::full(&[dim], 1.0));
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[dim]));
        Self { gain, bias, dim, eps: 1e-5 }
    }

    pub fn forward(&self, g: &mut Graph, p: Binding<'_>, x: Var) -> Var {
        let gain = p.get(g, self.gain);
        let bias = p.get(g, self.bias);
        g.layer_norm(x, gain, bias, self.eps)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Conv2d {
    pub w: ParamId,
    pub b: ParamId,
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
}

impl Conv2d {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, in_ch: usize, out_ch: usize, kernel: usize, stride: usize, rng: &mut R) -> Self {
        let fan_in = in_ch * kernel * kernel;
        let w = store.add(format!("{name}.weight"), fan_in_uniform(&[out_ch, in_ch, kernel, kernel], fan_in, rng));
        let b = store.add(format!("{name}.bias"), fan_in_uniform(&[out_ch], fan_in, rng));
        Self { w, b, in_ch, out_ch, kernel, stride }
    }

    pub fn out_size(&self, size: usize) -> usize {
        (size - self.kernel) / self.stride + 1
    }

    pub fn forward(&self, g: &mut Graph, p: Binding<'_>, x: Var) -> Var {
        let w = p.get(g, self.w);
        let b = p.get(g, self.b);
        g.conv2d(x, w, Some(b), self.stride)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ConvTranspose2d {
    pub w: ParamId,
    pub b: ParamId,
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
}

impl ConvTranspose2d {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, in_ch: usize, out_ch: usize, kernel: usize, stride: usize, rng: &mut R) -> Self {
        let fan_in = out_ch * kernel * kernel;
        let w = store.add(format!("{name}.weight"), fan_in_uniform(&[in_ch, out_ch, kernel, kernel], fan_in, rng));
        let b = store.add(format!("{name}.bias"), fan_in_uniform(&[out_ch], fan_in, rng));
        Self { w, b, in_ch, out_ch, kernel, stride }
    }

    pub fn out_size(&self, size: usize) -> usize {
        (size - 1) * self.stride + self.kernel
    }

    pub fn forward(&self, g: &mut Graph, p: Binding<'_>, x: Var) -> Var {
        let w = p.get(g, self.w);
        let b = p.get(g, self.b);
        g.conv_transpose2d(x, w, Some(b), self.stride)
    }
}

/// Lookup table `[count, dim]`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Embedding {
    pub table: ParamId,
    pub count: usize,
    pub dim: usize,
}

impl Embedding {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, count: usize, dim: usize, rng: &mut R) -> Self {
        use rand_distr::{Distribution, StandardNormal};
        let table = store.add(
            format!("{name}.table"),
            Tensor::from_fn(&[count, dim], |_| StandardNormal.sample(rng)),
        );
        Self { table, count, dim }
    }

    pub fn forward(&self, g: &mut Graph, p: Binding<'_>, ids: &[usize]) -> Var {
        let t = p.get(g, self.table);
        g.index_rows(t, ids)
    }
}
