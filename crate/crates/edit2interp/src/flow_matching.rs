//! Rectified flow-matching objective, LoRA training loop, Euler sampler,
//! and the end-to-end interpolation pipeline.
//!
//! The noising path is the straight line `z_t = (1-t)·z_target + t·ε` with
//! velocity target `v = ε - z_target`; sampling integrates the learned field
//! from pure noise at `t = 1` down to `t = 0` with left-endpoint Euler steps
//! on a uniform grid.

use ndarray::{Array3, Dimension};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{backward, forward, forward_with_cache, AdapterMap, BackboneParams, Grads};
use crate::conditioning::{
    build_conditioning, decode_latent, CodecConfig, ConditioningSet, Image, Latent, SemanticConfig,
};
use crate::error::{Error, Result};
use crate::lora::{lora_grads_only, with_trainable_mut, AdaptedModel};

#[derive(Debug, Clone)]
pub struct TrainingPair {
    pub z_t: Latent,
    pub t: f64,
    pub v_target: Latent,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TimestepDist {
    Uniform,
    LogitNormal,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub eps: f64,
    pub timestep_dist: TimestepDist,
    pub grad_seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-4,
            epochs: 10,
            batch_size: 4,
            beta1: 0.9,
            beta2: 0.999,
            weight_decay: 0.01,
            eps: 1e-8,
            timestep_dist: TimestepDist::Uniform,
            grad_seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub steps: usize,
    pub guidance_scale: f64,
    pub noise_seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            steps: 40,
            guidance_scale: 1.0,
            noise_seed: 0,
        }
    }
}

/// One training sample: midpoint latent plus its conditioning set.
#[derive(Debug, Clone)]
pub struct FmSample {
    pub z_target: Latent,
    pub cond: ConditioningSet,
}

/// Noise the target along the straight path and record the velocity target.
pub fn make_training_pair(z_target: &Latent, eps: &Latent, t: f64) -> Result<TrainingPair> {
    if z_target.values.shape() != eps.values.shape() {
        return Err(Error::DimMismatch(format!(
            "target {:?} vs noise {:?}",
            z_target.values.shape(),
            eps.values.shape()
        )));
    }
    let z_t = Latent::new(&z_target.values * (1.0 - t) + &eps.values * t);
    let v_target = Latent::new(&eps.values - &z_target.values);
    Ok(TrainingPair { z_t, t, v_target })
}

pub fn sample_timestep(dist: TimestepDist, rng: &mut ChaCha8Rng) -> f64 {
    match dist {
        TimestepDist::Uniform => rng.gen::<f64>(),
        TimestepDist::LogitNormal => {
            let x: f64 = rng.sample(rand_distr::StandardNormal);
            1.0 / (1.0 + (-x).exp())
        }
    }
}

pub fn random_latent_like(shape: (usize, usize, usize), rng: &mut ChaCha8Rng) -> Latent {
    Latent::new(Array3::from_shape_fn(shape, |_| {
        rng.sample::<f64, _>(rand_distr::StandardNormal)
    }))
}

/// Mean-squared velocity error over a batch, with gradients for the
/// trainable adapter arrays only. Timesteps and noise are drawn from `rng`
/// per sample, so re-running with an identically seeded rng reproduces the
/// same stochastic loss estimate.
pub fn fm_loss(
    model: &AdaptedModel,
    batch: &[FmSample],
    dist: TimestepDist,
    rng: &mut ChaCha8Rng,
) -> Result<(f64, Grads)> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let mut total = 0.0;
    let mut grads: Grads = Grads::new();
    let bsz = batch.len() as f64;
    for sample in batch {
        let shape = sample.z_target.values.dim();
        let t = sample_timestep(dist, rng);
        let eps = random_latent_like(shape, rng);
        let pair = make_training_pair(&sample.z_target, &eps, t)?;
        let (out, cache) = forward_with_cache(
            &model.base,
            Some(&model.adapters),
            &pair.z_t,
            t,
            &sample.cond,
        )?;
        let diff = &out.values - &pair.v_target.values;
        let n_el = diff.len() as f64;
        total += diff.iter().map(|v| v * v).sum::<f64>() / n_el;
        let d_out = Latent::new(&diff * (2.0 / (n_el * bsz)));
        let g = backward(&model.base, Some(&model.adapters), &cache, &d_out, false);
        for (k, v) in lora_grads_only(g) {
            match grads.get_mut(&k) {
                Some(acc) => *acc += &v,
                None => {
                    grads.insert(k, v);
                }
            }
        }
    }
    Ok((total / bsz, grads))
}

/// Decoupled-weight-decay adaptive-moments optimizer state.
struct AdamW {
    lr: f64,
    beta1: f64,
    beta2: f64,
    weight_decay: f64,
    eps: f64,
    step: usize,
    m: Grads,
    v: Grads,
}

impl AdamW {
    fn new(cfg: &TrainConfig) -> Self {
        AdamW {
            lr: cfg.learning_rate,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            weight_decay: cfg.weight_decay,
            eps: cfg.eps,
            step: 0,
            m: Grads::new(),
            v: Grads::new(),
        }
    }

    fn update(&mut self, model: &mut AdaptedModel, grads: &Grads) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        with_trainable_mut(model, |name, param| {
            let Some(g) = grads.get(name) else { return };
            let g = g.view().into_dimensionality::<ndarray::Ix2>().unwrap();
            let m = self
                .m
                .entry(name.to_string())
                .or_insert_with(|| ndarray::ArrayD::zeros(g.raw_dim().into_dyn()));
            *m *= self.beta1;
            *m += &(&g * (1.0 - self.beta1)).into_dyn();
            let m_snapshot = m.clone();
            let v = self
                .v
                .entry(name.to_string())
                .or_insert_with(|| ndarray::ArrayD::zeros(g.raw_dim().into_dyn()));
            *v *= self.beta2;
            *v += &g.mapv(|x| x * x * (1.0 - self.beta2)).into_dyn();
            let mhat = &m_snapshot / bc1;
            let vhat = v.mapv(|x| (x / bc2).sqrt() + self.eps);
            let upd = &mhat / &vhat;
            let upd2 = upd.into_dimensionality::<ndarray::Ix2>().unwrap();
            param.zip_mut_with(&upd2, |p, u| {
                *p = *p * (1.0 - self.lr * self.weight_decay) - self.lr * u;
            });
        });
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LossHistory {
    pub per_step: Vec<f64>,
    pub per_epoch_mean: Vec<f64>,
}

/// Run `epochs × ceil(N / batch)` optimizer steps on the adapter arrays.
/// The base is never written; loss per step is recorded.
pub fn train(
    model: &mut AdaptedModel,
    dataset: &[FmSample],
    cfg: &TrainConfig,
) -> Result<LossHistory> {
    if dataset.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let mut opt = AdamW::new(cfg);
    let mut per_step = Vec::new();
    let mut per_epoch_mean = Vec::new();
    let mut loss_rng = ChaCha8Rng::seed_from_u64(cfg.grad_seed ^ 0xf10f);
    let mut step_idx = 0usize;
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..dataset.len()).collect();
        let mut shuf_rng = ChaCha8Rng::seed_from_u64(cfg.grad_seed.wrapping_add(epoch as u64));
        for i in (1..order.len()).rev() {
            let j = (shuf_rng.gen::<u64>() as usize) % (i + 1);
            order.swap(i, j);
        }
        let mut epoch_losses = Vec::new();
        for chunk in order.chunks(cfg.batch_size.max(1)) {
            let batch: Vec<FmSample> = chunk.iter().map(|&i| dataset[i].clone()).collect();
            let (loss, grads) = fm_loss(model, &batch, cfg.timestep_dist, &mut loss_rng)?;
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss {
                    step: step_idx,
                    loss,
                });
            }
            opt.update(model, &grads);
            per_step.push(loss);
            epoch_losses.push(loss);
            step_idx += 1;
        }
        per_epoch_mean.push(epoch_losses.iter().sum::<f64>() / epoch_losses.len() as f64);
    }
    Ok(LossHistory {
        per_step,
        per_epoch_mean,
    })
}

/// Integrate a velocity field from seeded Gaussian noise at `t = 1` down to
/// `t = 0` on a uniform grid. With guidance ≠ 1 the null-branch field is
/// blended as `v_null + g·(v_cond - v_null)`.
pub fn euler_sample<F, G>(
    mut v_cond: F,
    mut v_null: Option<G>,
    shape: (usize, usize, usize),
    cfg: &SamplerConfig,
) -> Result<Latent>
where
    F: FnMut(&Latent, f64) -> Result<Latent>,
    G: FnMut(&Latent, f64) -> Result<Latent>,
{
    if cfg.steps == 0 {
        return Err(Error::Config("sampler steps must be >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.noise_seed ^ 0xe01e);
    let mut z = random_latent_like(shape, &mut rng);
    let dt = 1.0 / cfg.steps as f64;
    for k in 0..cfg.steps {
        let t = 1.0 - k as f64 * dt;
        let vc = v_cond(&z, t)?;
        let v = if (cfg.guidance_scale - 1.0).abs() > 1e-12 {
            match v_null.as_mut() {
                Some(f) => {
                    let vn = f(&z, t)?;
                    Latent::new(&vn.values + &((&vc.values - &vn.values) * cfg.guidance_scale))
                }
                None => vc,
            }
        } else {
            vc
        };
        z = Latent::new(&z.values - &(&v.values * dt));
    }
    Ok(z)
}

/// Null conditioning for classifier-free guidance: zeroed semantic tokens
/// and zeroed boundary latents with the same shapes.
pub fn null_conditioning(c: &ConditioningSet) -> ConditioningSet {
    ConditioningSet {
        h: crate::conditioning::SemanticTokens {
            tokens: ndarray::Array2::zeros(c.h.tokens.raw_dim()),
        },
        z0: c.z0.zeros_like(),
        z1: c.z1.zeros_like(),
    }
}

/// End-to-end frame interpolation: condition on the boundary frames, sample
/// the midpoint latent from noise, decode, clamp.
#[allow(clippy::too_many_arguments)]
pub fn interpolate(
    base: &BackboneParams,
    adapters: Option<&AdapterMap>,
    i0: &Image,
    i1: &Image,
    prompt: &str,
    codec: &CodecConfig,
    sem: &SemanticConfig,
    sem_seed: u64,
    cfg: &SamplerConfig,
) -> Result<Image> {
    let cond = build_conditioning(i0, i1, prompt, codec, sem, sem_seed)?;
    let shape = cond.z0.values.dim();
    let null = null_conditioning(&cond);
    let z = euler_sample(
        |z, t| forward(base, adapters, z, t, &cond),
        Some(|z: &Latent, t: f64| forward(base, adapters, z, t, &null)),
        shape,
        cfg,
    )?;
    Ok(decode_latent(&z, codec)?.clamped())
}
