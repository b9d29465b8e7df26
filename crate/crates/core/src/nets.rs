//! Encoders, projection/prediction heads and momentum (EMA) parameter copies.

use autograd::nn::{Conv2d, LayerNorm, Linear};
use autograd::{Binding, Graph, ParamStore, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{MlrError, Result};
use crate::rng::Rng;
use crate::types::{batch_tensor, Observation};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum EncoderVariant {
    /// 3x3 convolutions (first with stride 2), fully connected layer, layer norm.
    Continuous,
    /// 8/4/3 convolutions with strides 4/2/1, then a linear token projection.
    Discrete,
    /// Flattened input, no parameters. For tabular checks.
    Tabular,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub variant: EncoderVariant,
    /// `[D, H, W]`.
    pub input: [usize; 3],
    pub latent_dim: usize,
    /// Base channel count (`32` in the reference architectures).
    pub channels: usize,
    /// Number of convolutions for the continuous variant.
    pub conv_layers: usize,
}

impl EncoderConfig {
    pub fn continuous(input: [usize; 3]) -> Self {
        Self { variant: EncoderVariant::Continuous, input, latent_dim: 50, channels: 32, conv_layers: 4 }
    }

    pub fn discrete(input: [usize; 3]) -> Self {
        Self { variant: EncoderVariant::Discrete, input, latent_dim: 256, channels: 32, conv_layers: 3 }
    }

    pub fn tabular(input: [usize; 3]) -> Self {
        Self {
            variant: EncoderVariant::Tabular,
            input,
            latent_dim: input.iter().product(),
            channels: 0,
            conv_layers: 0,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Encoder {
    pub config: EncoderConfig,
    convs: Vec<Conv2d>,
    fc: Option<Linear>,
    norm: Option<LayerNorm>,
    feature_shape: [usize; 3],
}

impl Encoder {
    pub fn new(config: EncoderConfig, store: &mut ParamStore, rng: &mut Rng) -> Result<Self> {
        let [d, h, w] = config.input;
        let layers: Vec<(usize, usize, usize)> = match config.variant {
            EncoderVariant::Continuous => (0..config.conv_layers)
                .map(|i| (config.channels, 3, if i == 0 { 2 } else { 1 }))
                .collect(),
            EncoderVariant::Discrete => {
                let c = config.channels;
                vec![(c, 8, 4), (2 * c, 4, 2), (2 * c, 3, 1)]
            }
            EncoderVariant::Tabular => Vec::new(),
        };
        let (mut ch, mut hh, mut ww) = (d, h, w);
        let mut convs = Vec::new();
        for (i, &(out, k, s)) in layers.iter().enumerate() {
            if hh < k || ww < k {
                return Err(MlrError::InvalidSpec(format!(
                    "encoder input {h}x{w} too small for convolution {i}"
                )));
            }
            let conv = Conv2d::new(store, &format!("encoder.conv{i}"), ch, out, k, s, rng);
            hh = conv.out_size(hh);
            ww = conv.out_size(ww);
            ch = out;
            convs.push(conv);
        }
        let flat = ch * hh * ww;
        let (fc, norm) = match config.variant {
            EncoderVariant::Continuous => (
                Some(Linear::new(store, "encoder.fc", flat, config.latent_dim, true, rng)),
                Some(LayerNorm::new(store, "encoder.norm", config.latent_dim)),
            ),
            EncoderVariant::Discrete => {
                (Some(Linear::new(store, "encoder.fc", flat, config.latent_dim, true, rng)), None)
            }
            EncoderVariant::Tabular => {
                if config.latent_dim != flat {
                    return Err(MlrError::InvalidSpec(format!(
                        "tabular encoder latent {} must equal input size {flat}",
                        config.latent_dim
                    )));
                }
                (None, None)
            }
        };
        Ok(Self { config, convs, fc, norm, feature_shape: [ch, hh, ww] })
    }

    pub fn latent_dim(&self) -> usize {
        self.config.latent_dim
    }

    /// Shape `[C, Hf, Wf]` of the convolutional feature map.
    pub fn feature_shape(&self) -> [usize; 3] {
        self.feature_shape
    }

    pub fn check_input(&self, x: &Tensor) -> Result<()> {
        if x.shape().len() != 4 || x.shape()[1..] != self.config.input {
            return Err(MlrError::ShapeMismatch(format!(
                "encoder expects [B, {:?}], got {:?}",
                self.config.input,
                x.shape()
            )));
        }
        Ok(())
    }

    /// Convolutional trunk, `[B, D, H, W] -> [B, C, Hf, Wf]`.
    pub fn trunk(&self, g: &mut Graph, p: Binding<'_>, x: Var) -> Var {
        let mut h = x;
        for conv in &self.convs {
            let y = conv.forward(g, p, h);
            h = g.relu(y);
        }
        h
    }

    /// `[B, C, Hf, Wf] -> [B, d]`.
    pub fn head(&self, g: &mut Graph, p: Binding<'_>, features: Var) -> Var {
        let b = g.shape(features)[0];
        let flat: usize = self.feature_shape.iter().product();
        let mut h = g.reshape(features, &[b, flat]);
        if let Some(fc) = &self.fc {
            h = fc.forward(g, p, h);
        }
        if let Some(norm) = &self.norm {
            h = norm.forward(g, p, h);
        }
        h
    }

    pub fn forward(&self, g: &mut Graph, p: Binding<'_>, x: Var) -> Var {
        let f = self.trunk(g, p, x);
        self.head(g, p, f)
    }

    /// Latent states for a batch of observations, without recording gradients.
    pub fn encode(&self, store: &ParamStore, obs: &[Observation]) -> Result<Tensor> {
        let x = batch_tensor(obs)?;
        self.check_input(&x)?;
        let mut g = Graph::new();
        let xv = g.constant(x);
        let z = self.forward(&mut g, Binding::frozen(store), xv);
        Ok(g.value(z).clone())
    }
}

/// Plain multilayer perceptron with ReLU between layers.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    pub fn new(store: &mut ParamStore, name: &str, dims: &[usize], rng: &mut Rng) -> Self {
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(store, &format!("{name}.{i}"), w[0], w[1], true, rng))
            .collect();
        Self { layers }
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(Linear::num_params).sum()
    }

    pub fn forward(&self, g: &mut Graph, p: Binding<'_>, x: Var) -> Var {
        let mut h = x;
        for (i, l) in self.layers.iter().enumerate() {
            h = l.forward(g, p, h);
            if i + 1 < self.layers.len() {
                h = g.relu(h);
            }
        }
        h
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadConfig {
    pub projection: bool,
    pub prediction: bool,
    pub hidden_dim: usize,
    pub projection_dim: usize,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self { projection: true, prediction: true, hidden_dim: 256, projection_dim: 128 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Branch {
    Online,
    Target,
}

/// Projection `g` (two layers) and prediction `q` (one layer). A disabled head
/// is the identity. Parameters live in two stores so the target branch can
/// hold a momentum copy of the projection alone.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Heads {
    pub config: HeadConfig,
    projection: Option<Mlp>,
    prediction: Option<Linear>,
    in_dim: usize,
}

impl Heads {
    /// Returns the heads plus fresh (projection, prediction) stores.
    pub fn new(config: HeadConfig, in_dim: usize, rng: &mut Rng) -> (Self, ParamStore, ParamStore) {
        let mut proj = ParamStore::new();
        let mut pred = ParamStore::new();
        let projection = config.projection.then(|| {
            Mlp::new(&mut proj, "projection", &[in_dim, config.hidden_dim, config.projection_dim], rng)
        });
        let width = if config.projection { config.projection_dim } else { in_dim };
        let prediction = config
            .prediction
            .then(|| Linear::new(&mut pred, "prediction", width, width, true, rng));
        (Self { config, projection, prediction, in_dim }, proj, pred)
    }

    pub fn out_dim(&self) -> usize {
        if self.projection.is_some() {
            self.config.projection_dim
        } else {
            self.in_dim
        }
    }

    pub fn project(&self, g: &mut Graph, p: Binding<'_>, s: Var) -> Var {
        match &self.projection {
            Some(mlp) => mlp.forward(g, p, s),
            None => s,
        }
    }

    pub fn predict(&self, g: &mut Graph, p: Binding<'_>, y: Var) -> Var {
        match &self.prediction {
            Some(l) => l.forward(g, p, y),
            None => y,
        }
    }

    /// Online: `q(g(s))`. Target: `g_bar(s)` with no gradient path, where
    /// `projection` must then be the momentum projection store.
    pub fn project_predict(
        &self,
        g: &mut Graph,
        projection: &ParamStore,
        prediction: &ParamStore,
        s: Var,
        branch: Branch,
    ) -> Var {
        match branch {
            Branch::Online => {
                let y = self.project(g, Binding::train(projection), s);
                self.predict(g, Binding::train(prediction), y)
            }
            Branch::Target => {
                let s = g.detach(s);
                let y = self.project(g, Binding::frozen(projection), s);
                g.detach(y)
            }
        }
    }
}

/// EMA-tracked copy of an online parameter set. The copy is never handed to
/// an optimiser; it changes only through [`MomentumPair::ema_update`].
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MomentumPair {
    pub momentum: ParamStore,
    pub m: f64,
}

impl MomentumPair {
    /// Momentum parameters start as an exact copy of `online`.
    pub fn new(online: &ParamStore, m: f64) -> Self {
        assert!((0.0..=1.0).contains(&m), "EMA coefficient {m} outside [0, 1]");
        Self { momentum: online.clone(), m }
    }

    /// `momentum <- m * momentum + (1 - m) * online`.
    pub fn ema_update(&mut self, online: &ParamStore) -> Result<()> {
        if !self.momentum.same_layout(online) {
            return Err(MlrError::ShapeMismatch("momentum and online layouts differ".into()));
        }
        if self.m == 0.0 {
            self.momentum.copy_from(online);
        } else {
            self.momentum.ema_from(online, self.m);
        }
        Ok(())
    }

    pub fn sync(&mut self, online: &ParamStore) -> Result<()> {
        if !self.momentum.same_layout(online) {
            return Err(MlrError::ShapeMismatch("momentum and online layouts differ".into()));
        }
        self.momentum.copy_from(online);
        Ok(())
    }
}
