//! The masked latent reconstruction objective: mask, augment, encode, decode,
//! project/predict and compare against momentum targets.

use autograd::nn::{ConvTranspose2d, Linear};
use autograd::optim::grad_norm;
use autograd::{Adam, AdamConfig, Binding, Grads, Graph, ParamStore, Tensor, Var};
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::decoder::{DecoderConfig, LatentDecoder};
use crate::error::{check_finite, MlrError, Result};
use crate::nets::{Branch, Encoder, HeadConfig, Heads, MomentumPair};
use crate::pixelops::{
    apply_intensity, apply_mask, apply_mask_to_features, center_crop, random_crop, sample_intensity_multiplier,
    sample_mask, AugmentSpec, CubeMaskSpec, MaskSpace,
};
use crate::replay::ReplayBuffer;
use crate::rng::Rng;
use crate::types::{batch_tensor, ActionSpace, Observation, Trajectory};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum TargetSpace {
    Latent,
    Pixel,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum LossMetric {
    Cosine,
    Mse,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlrConfig {
    pub lambda: f64,
    /// Sequence length `K`.
    pub seq_len: usize,
    pub mask: CubeMaskSpec,
    pub target_space: TargetSpace,
    pub loss_metric: LossMetric,
    pub use_action_tokens: bool,
    pub momentum_decoder: bool,
    pub heads: HeadConfig,
    pub decoder_layers: usize,
    pub decoder_heads: usize,
    pub mlp_ratio: usize,
    /// Zero disables the schedule.
    pub warmup_steps: usize,
    pub aux_batch: usize,
    pub lr: f64,
    /// EMA coefficient of the momentum branch.
    pub momentum: f64,
}

impl Default for MlrConfig {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            seq_len: 16,
            mask: CubeMaskSpec::default(),
            target_space: TargetSpace::Latent,
            loss_metric: LossMetric::Cosine,
            use_action_tokens: true,
            momentum_decoder: false,
            heads: HeadConfig::default(),
            decoder_layers: 2,
            decoder_heads: 1,
            mlp_ratio: 2,
            warmup_steps: 6000,
            aux_batch: 128,
            lr: 5e-4,
            momentum: 0.95,
        }
    }
}

impl MlrConfig {
    pub fn mask_space(&self) -> MaskSpace {
        if self.mask.strategy.eq_ignore_ascii_case("feature") {
            MaskSpace::Feature
        } else {
            MaskSpace::Pixel
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(MlrError::InvalidSpec(format!("lambda {}", self.lambda)));
        }
        if self.seq_len == 0 || self.aux_batch == 0 {
            return Err(MlrError::InvalidSpec("sequence length and batch must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.momentum) {
            return Err(MlrError::InvalidSpec(format!("momentum {}", self.momentum)));
        }
        crate::pixelops::mask_strategy(&self.mask.strategy)?;
        Ok(())
    }

    pub fn decoder_config(&self, width: usize) -> DecoderConfig {
        DecoderConfig {
            layers: self.decoder_layers,
            width,
            heads: self.decoder_heads,
            mlp_ratio: self.mlp_ratio,
            max_pos: self.seq_len,
            use_action_tokens: self.use_action_tokens,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MlrLossReport {
    pub loss: f64,
    pub per_step_similarities: Vec<f64>,
    pub grad_norm: f64,
}

/// Graph handles for one evaluation of the objective.
pub struct MlrForward {
    pub loss: Var,
    pub value: f64,
    pub per_step_similarities: Vec<f64>,
}

/// `lr0 * min(step^-0.5, step * warmup^-1.5)`.
pub fn warmup_lr(lr0: f64, step: u64, warmup_steps: u64) -> Result<f64> {
    if step == 0 || warmup_steps == 0 {
        return Err(MlrError::InvalidArgument("warmup step and length start at 1".into()));
    }
    let s = step as f64;
    Ok(lr0 * s.powf(-0.5).min(s * (warmup_steps as f64).powf(-1.5)))
}

pub fn total_loss(rl_loss: f64, mlr_loss: f64, lambda: f64) -> Result<f64> {
    check_finite("rl loss", rl_loss)?;
    check_finite("mlr loss", mlr_loss)?;
    check_finite("lambda", lambda)?;
    check_finite("total loss", rl_loss + lambda * mlr_loss)
}

/// Transposed-convolution head mapping a latent state back to pixels.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PixelHead {
    fc: Linear,
    start: [usize; 3],
    deconvs: Vec<ConvTranspose2d>,
    out: [usize; 3],
}

impl PixelHead {
    pub fn new(latent: usize, out: [usize; 3], channels: usize, store: &mut ParamStore, rng: &mut Rng) -> Result<Self> {
        let [d, h, w] = out;
        if h != w || h < 12 {
            return Err(MlrError::InvalidSpec(format!("pixel head needs square output of at least 12, got {h}x{w}")));
        }
        let last_k = if h % 2 == 0 { 4 } else { 3 };
        let h0 = (h - 6 - last_k) / 2;
        let fc = Linear::new(store, "pixel.fc", latent, channels * h0 * h0, true, rng);
        let deconvs = vec![
            ConvTranspose2d::new(store, "pixel.deconv0", channels, channels, 3, 1, rng),
            ConvTranspose2d::new(store, "pixel.deconv1", channels, channels, 3, 1, rng),
            ConvTranspose2d::new(store, "pixel.deconv2", channels, d, last_k, 2, rng),
        ];
        Ok(Self { fc, start: [channels, h0, h0], deconvs, out })
    }

    /// `[n, latent] -> [n, D, H, W]` in `(0, 1)`.
    pub fn forward(&self, g: &mut Graph, p: Binding<'_>, s: Var) -> Var {
        let n = g.shape(s)[0];
        let x = self.fc.forward(g, p, s);
        let x = g.relu(x);
        let mut x = g.reshape(x, &[n, self.start[0], self.start[1], self.start[2]]);
        for (i, dc) in self.deconvs.iter().enumerate() {
            x = dc.forward(g, p, x);
            if i + 1 < self.deconvs.len() {
                x = g.relu(x);
            }
        }
        debug_assert_eq!(&g.shape(x)[1..], &self.out);
        g.sigmoid(x)
    }
}

/// Online-only MLR parameters, the momentum copies and their optimisers.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MlrObjective {
    pub config: MlrConfig,
    augment: AugmentSpec,
    decoder: LatentDecoder,
    pub decoder_params: ParamStore,
    heads: Heads,
    pub projection_params: ParamStore,
    pub prediction_params: ParamStore,
    pixel_head: Option<PixelHead>,
    pub pixel_params: ParamStore,
    pub momentum_encoder: MomentumPair,
    pub momentum_projection: MomentumPair,
    pub momentum_decoder: Option<MomentumPair>,
    optimizers: Vec<Adam>,
    step: u64,
    mask_rng: Rng,
    aug_rng: Rng,
}

impl MlrObjective {
    /// `mask_seed` and `aug_seed` feed the masking and augmentation streams.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        config: MlrConfig,
        augment: AugmentSpec,
        encoder: &Encoder,
        encoder_params: &ParamStore,
        actions: ActionSpace,
        init: &mut Rng,
        mask_seed: u64,
        aug_seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        let d = encoder.latent_dim();
        let mut decoder_params = ParamStore::new();
        let decoder = LatentDecoder::new(config.decoder_config(d), actions, &mut decoder_params, init)?;
        let (heads, projection_params, prediction_params) = Heads::new(config.heads.clone(), d, init);
        let mut pixel_params = ParamStore::new();
        let pixel_head = match config.target_space {
            TargetSpace::Latent => None,
            TargetSpace::Pixel => {
                let [c, _, _] = encoder.config.input;
                let (h, w) = augment.crop.out_size;
                let ch = encoder.config.channels.max(8);
                Some(PixelHead::new(d, [c, h, w], ch, &mut pixel_params, init)?)
            }
        };
        let adam = |s: &ParamStore| Adam::new(s, AdamConfig::new(config.lr));
        let optimizers = vec![
            adam(&decoder_params),
            adam(&projection_params),
            adam(&prediction_params),
            adam(&pixel_params),
        ];
        Ok(Self {
            momentum_encoder: MomentumPair::new(encoder_params, config.momentum),
            momentum_projection: MomentumPair::new(&projection_params, config.momentum),
            momentum_decoder: config
                .momentum_decoder
                .then(|| MomentumPair::new(&decoder_params, config.momentum)),
            config,
            augment,
            decoder,
            decoder_params,
            heads,
            projection_params,
            prediction_params,
            pixel_head,
            pixel_params,
            optimizers,
            step: 0,
            mask_rng: Rng::seed_from_u64(mask_seed),
            aug_rng: Rng::seed_from_u64(aug_seed),
        })
    }

    pub fn decoder(&self) -> &LatentDecoder {
        &self.decoder
    }

    pub fn heads(&self) -> &Heads {
        &self.heads
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Learning rate the next [`MlrObjective::step`] will use.
    pub fn current_lr(&self) -> f64 {
        if self.config.warmup_steps == 0 {
            self.config.lr
        } else {
            warmup_lr(self.config.lr, self.step + 1, self.config.warmup_steps as u64).expect("step >= 1")
        }
    }

    fn view(&mut self, seq: &[Observation]) -> Result<Vec<Observation>> {
        let cropped = random_crop(seq, &self.augment, &mut self.aug_rng)?;
        let m = sample_intensity_multiplier(&self.augment.intensity, &mut self.aug_rng);
        Ok(if self.augment.intensity.scale == 0.0 { cropped } else { apply_intensity(&cropped, m) })
    }

    /// Build the objective on `g`. Encoder parameters are bound trainable, so a
    /// caller adding another loss on the same graph gets summed gradients.
    pub fn forward(&mut self, g: &mut Graph, encoder: &Encoder, encoder_params: &ParamStore, batch: &[Trajectory]) -> Result<MlrForward> {
        let k = self.config.seq_len;
        let b = batch.len();
        if b == 0 {
            return Err(MlrError::InsufficientData("empty trajectory batch".into()));
        }
        let space = self.config.mask_space();
        let mut online = Vec::with_capacity(b * k);
        let mut target = Vec::with_capacity(b * k);
        let mut originals = Vec::new();
        let mut actions = Vec::with_capacity(b * k);
        let mut feature_masks = Vec::new();
        for traj in batch {
            if traj.len() != k || traj.actions.len() != k {
                return Err(MlrError::LengthMismatch { expected: k, got: traj.len() });
            }
            let seq = &traj.observations;
            let masked = match space {
                MaskSpace::Pixel => {
                    let extents = [k, seq[0].height, seq[0].width];
                    let plan = sample_mask(&self.config.mask, extents, &mut self.mask_rng)?;
                    apply_mask(seq, &plan, self.config.mask.fill_value)?
                }
                MaskSpace::Feature => {
                    let [c, hf, wf] = encoder.feature_shape();
                    let (h, w) = self.augment.crop.out_size;
                    let scaled = CubeMaskSpec {
                        h: ((self.config.mask.h * hf) as f64 / h as f64).round().clamp(1.0, hf as f64) as usize,
                        w: ((self.config.mask.w * wf) as f64 / w as f64).round().clamp(1.0, wf as f64) as usize,
                        ..self.config.mask.clone()
                    };
                    let plan = sample_mask(&scaled, [k, hf, wf], &mut self.mask_rng)?;
                    feature_masks.extend(apply_mask_to_features(&plan, c));
                    seq.clone()
                }
            };
            online.extend(self.view(&masked)?);
            match self.config.target_space {
                TargetSpace::Latent => target.extend(self.view(seq)?),
                TargetSpace::Pixel => originals.extend(center_crop(seq, &self.augment)?),
            }
            actions.extend(traj.actions.iter().cloned());
        }

        let x = g.constant(batch_tensor(&online)?);
        let enc = Binding::train(encoder_params);
        let features = encoder.trunk(g, enc, x);
        let features = if feature_masks.is_empty() {
            features
        } else {
            let shape = g.shape(features).to_vec();
            let m = g.constant(Tensor::new(&shape, feature_masks));
            g.mul(features, m)
        };
        let states = encoder.head(g, enc, features);
        let decoded = self
            .decoder
            .forward(g, Binding::train(&self.decoder_params), states, &actions, b, k)?;

        let (loss, sims) = match self.config.target_space {
            TargetSpace::Latent => {
                let y_hat = self.heads.project_predict(
                    g,
                    &self.projection_params,
                    &self.prediction_params,
                    decoded,
                    Branch::Online,
                );
                let tx = g.constant(batch_tensor(&target)?);
                let s_bar = encoder.forward(g, Binding::frozen(&self.momentum_encoder.momentum), tx);
                let s_bar = match &self.momentum_decoder {
                    Some(md) => self.decoder.forward(g, Binding::frozen(&md.momentum), s_bar, &actions, b, k)?,
                    None => s_bar,
                };
                let y_bar = self.heads.project_predict(
                    g,
                    &self.momentum_projection.momentum,
                    &self.prediction_params,
                    s_bar,
                    Branch::Target,
                );
                let a = g.l2_normalize(y_hat, 1e-12);
                let c = g.l2_normalize(y_bar, 1e-12);
                let prod = g.mul(a, c);
                let cos = g.sum_last(prod);
                let per_row = g.value(cos).data().to_vec();
                let loss = match self.config.loss_metric {
                    LossMetric::Cosine => {
                        let m = g.mean(cos);
                        let m = g.neg(m);
                        g.add_scalar(m, 1.0)
                    }
                    LossMetric::Mse => {
                        let diff = g.sub(a, c);
                        let sq = g.square(diff);
                        let per = g.sum_last(sq);
                        g.mean(per)
                    }
                };
                (loss, per_row)
            }
            TargetSpace::Pixel => {
                let head = self.pixel_head.as_ref().expect("pixel head exists for pixel targets");
                let recon = head.forward(g, Binding::train(&self.pixel_params), decoded);
                let tgt = g.constant(batch_tensor(&originals)?);
                let per_row = row_cosines(g.value(recon), g.value(tgt));
                let diff = g.sub(recon, tgt);
                let sq = g.square(diff);
                (g.mean(sq), per_row)
            }
        };
        let value = g.value(loss).item();
        check_finite("mlr loss", value)?;
        let mut per_step = vec![0.0; k];
        for (i, s) in sims.iter().enumerate() {
            per_step[i % k] += s / b as f64;
        }
        Ok(MlrForward { loss, value, per_step_similarities: per_step })
    }

    /// Gradients of the MLR-only parameter groups, in a fixed order.
    fn aux_stores(&self) -> [&ParamStore; 4] {
        [&self.decoder_params, &self.projection_params, &self.prediction_params, &self.pixel_params]
    }

    /// One optimiser step on the decoder and heads with the scheduled rate.
    /// Returns the rate used.
    pub fn step(&mut self, grads: &Grads) -> f64 {
        let lr = self.current_lr();
        let owned: Vec<Vec<Option<Tensor>>> = self
            .aux_stores()
            .iter()
            .map(|s| grads.for_store(s).into_iter().map(|g| g.cloned()).collect())
            .collect();
        let stores = [
            &mut self.decoder_params,
            &mut self.projection_params,
            &mut self.prediction_params,
            &mut self.pixel_params,
        ];
        for ((store, opt), gs) in stores.into_iter().zip(self.optimizers.iter_mut()).zip(&owned) {
            let refs: Vec<Option<&Tensor>> = gs.iter().map(Option::as_ref).collect();
            opt.step_with_lr(store, &refs, lr);
        }
        self.step += 1;
        lr
    }

    /// EMA update of every momentum copy.
    pub fn update_momentum(&mut self, encoder_params: &ParamStore) -> Result<()> {
        self.momentum_encoder.ema_update(encoder_params)?;
        self.momentum_projection.ema_update(&self.projection_params)?;
        if let Some(md) = &mut self.momentum_decoder {
            md.ema_update(&self.decoder_params)?;
        }
        Ok(())
    }

    /// Loss, per-step similarities and the gradient norm over every online
    /// parameter, without updating anything but the random streams.
    pub fn mlr_loss(&mut self, encoder: &Encoder, encoder_params: &ParamStore, batch: &[Trajectory]) -> Result<MlrLossReport> {
        let mut g = Graph::new();
        let f = self.forward(&mut g, encoder, encoder_params, batch)?;
        let grads = g.backward(f.loss);
        let mut all = grads.for_store(encoder_params);
        for s in self.aux_stores() {
            all.extend(grads.for_store(s));
        }
        Ok(MlrLossReport { loss: f.value, per_step_similarities: f.per_step_similarities, grad_norm: grad_norm(&all) })
    }

    /// Train the encoder on the MLR loss alone for `steps` updates. Returns
    /// the loss of every update.
    pub fn pretrain_only(
        &mut self,
        encoder: &Encoder,
        encoder_params: &mut ParamStore,
        encoder_opt: &mut Adam,
        buffer: &ReplayBuffer,
        steps: usize,
        sampler: &mut Rng,
    ) -> Result<Vec<f64>> {
        let mut losses = Vec::with_capacity(steps);
        for _ in 0..steps {
            let batch = (0..self.config.aux_batch)
                .map(|_| buffer.sample_trajectory(self.config.seq_len, sampler))
                .collect::<Result<Vec<_>>>()?;
            let mut g = Graph::new();
            let f = self.forward(&mut g, encoder, encoder_params, &batch)?;
            let grads = g.backward(f.loss);
            let eg: Vec<Option<Tensor>> = grads.for_store(encoder_params).into_iter().map(|t| t.cloned()).collect();
            let refs: Vec<Option<&Tensor>> = eg.iter().map(Option::as_ref).collect();
            encoder_opt.step(encoder_params, &refs);
            self.step(&grads);
            self.update_momentum(encoder_params)?;
            losses.push(f.value);
        }
        Ok(losses)
    }
}

fn row_cosines(a: &Tensor, b: &Tensor) -> Vec<f64> {
    let n = a.shape()[0];
    let w = a.numel() / n;
    (0..n)
        .map(|i| {
            let (x, y) = (&a.data()[i * w..(i + 1) * w], &b.data()[i * w..(i + 1) * w]);
            let dot: f64 = x.iter().zip(y).map(|(p, q)| p * q).sum();
            let nx: f64 = x.iter().map(|p| p * p).sum::<f64>().sqrt();
            let ny: f64 = y.iter().map(|q| q * q).sum::<f64>().sqrt();
            dot / (nx.max(1e-12) * ny.max(1e-12))
        })
        .collect()
}

/// Mean cosine similarity between online-encoder latents of masked and
/// unmasked (centre-cropped) observations from `n` sampled windows.
#[allow(clippy::too_many_arguments)]
pub fn regression_accuracy(
    encoder: &Encoder,
    encoder_params: &ParamStore,
    buffer: &ReplayBuffer,
    n: usize,
    k: usize,
    mask: &CubeMaskSpec,
    augment: &AugmentSpec,
    rng: &mut Rng,
) -> Result<f64> {
    if n == 0 {
        return Err(MlrError::InsufficientData("no samples requested".into()));
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for _ in 0..n {
        let traj = buffer.sample_trajectory(k, rng)?;
        let seq = &traj.observations;
        let plan = sample_mask(mask, [k, seq[0].height, seq[0].width], rng)?;
        let masked = center_crop(&apply_mask(seq, &plan, mask.fill_value)?, augment)?;
        let clean = center_crop(seq, augment)?;
        let a = encoder.encode(encoder_params, &masked)?;
        let b = encoder.encode(encoder_params, &clean)?;
        for s in row_cosines(&a, &b) {
            total += s;
            count += 1;
        }
    }
    Ok(total / count as f64)
}
