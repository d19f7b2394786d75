//! Low-rank adapters over named backbone weights; the only trainable state.

use std::collections::BTreeMap;

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{forward, AdapterMap, BackboneParams, Grads};
use crate::conditioning::{ConditioningSet, Latent};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoRAConfig {
    pub rank: usize,
    pub alpha: f64,
    pub target_patterns: Vec<String>,
    pub init_seed: u64,
}

impl Default for LoRAConfig {
    fn default() -> Self {
        LoRAConfig {
            rank: 8,
            alpha: 8.0,
            target_patterns: default_targets(),
            init_seed: 0,
        }
    }
}

/// Attention q/k/v, attention output, and both modulation MLP layers.
pub fn default_targets() -> Vec<String> {
    ["attn.q", "attn.k", "attn.v", "attn.out", "mod.fc1", "mod.fc2"]
        .iter()
        .map(|s| s.to_string())
        .collect()
}

/// Trainable pair `(A, B)` with scale `alpha / rank` over a frozen weight.
/// `B` starts at zero so the adapted model equals the frozen one at init.
#[derive(Debug, Clone)]
pub struct LoRAAdapter {
    pub a: Array2<f64>,
    pub b: Array2<f64>,
    pub alpha: f64,
    pub rank: usize,
    pub frozen_ref: String,
}

impl LoRAAdapter {
    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }
}

/// Frozen base plus adapters. The base is never written after injection.
#[derive(Debug, Clone)]
pub struct AdaptedModel {
    pub base: BackboneParams,
    pub adapters: AdapterMap,
    pub lora_config: LoRAConfig,
}

fn matches_target(name: &str, patterns: &[String], ndim: usize) -> bool {
    ndim == 2 && name.ends_with(".weight") && patterns.iter().any(|p| name.contains(p.as_str()))
}

/// Attach adapters to every weight matched by the config's target patterns.
pub fn inject(params: &BackboneParams, cfg: &LoRAConfig) -> Result<AdaptedModel> {
    if cfg.rank == 0 {
        return Err(Error::Config("LoRA rank must be >= 1".into()));
    }
    for pat in &cfg.target_patterns {
        let hit = params
            .arrays
            .iter()
            .any(|(n, a)| matches_target(n, std::slice::from_ref(pat), a.ndim()));
        if !hit {
            return Err(Error::Config(format!(
                "LoRA target pattern '{pat}' matches no weight"
            )));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.init_seed ^ 0x6c6f_7261);
    let std = (1.0 / cfg.rank as f64).sqrt();
    let mut adapters: AdapterMap = BTreeMap::new();
    for (name, arr) in &params.arrays {
        if !matches_target(name, &cfg.target_patterns, arr.ndim()) {
            continue;
        }
        let d_out = arr.shape()[0];
        let d_in = arr.shape()[1];
        let a = Array2::from_shape_fn((cfg.rank, d_in), |_| {
            rng.sample::<f64, _>(rand_distr::StandardNormal) * std
        });
        let b = Array2::zeros((d_out, cfg.rank));
        adapters.insert(
            name.clone(),
            LoRAAdapter {
                a,
                b,
                alpha: cfg.alpha,
                rank: cfg.rank,
                frozen_ref: name.clone(),
            },
        );
    }
    Ok(AdaptedModel {
        base: params.clone(),
        adapters,
        lora_config: cfg.clone(),
    })
}

/// Single adapted linear map: `W0 x + (alpha/r) B (A x)`.
pub fn lora_forward(adapter: &LoRAAdapter, w0: &Array2<f64>, x: &Array1<f64>) -> Result<Array1<f64>> {
    if w0.ncols() != x.len() || adapter.a.ncols() != x.len() || adapter.b.nrows() != w0.nrows() {
        return Err(Error::DimMismatch(format!(
            "lora_forward: W0 {:?}, A {:?}, B {:?}, x len {}",
            w0.shape(),
            adapter.a.shape(),
            adapter.b.shape(),
            x.len()
        )));
    }
    let base = w0.dot(x);
    let low = adapter.b.dot(&adapter.a.dot(x)) * adapter.scale();
    Ok(base + low)
}

/// Fold every adapter into a copy of the base: `W = W0 + (alpha/r) B A`.
pub fn merge(model: &AdaptedModel) -> BackboneParams {
    let mut merged = model.base.clone();
    for (name, adapter) in &model.adapters {
        let delta = adapter.b.dot(&adapter.a) * adapter.scale();
        let w = merged
            .arrays
            .get_mut(name)
            .expect("adapter refers to existing weight");
        *w += &delta.into_dyn();
    }
    merged
}

/// Names of every trainable array, in stable order:
/// `<weight>.lora_A`, `<weight>.lora_B` per adapter.
pub fn trainable_names(model: &AdaptedModel) -> Vec<String> {
    let mut out = Vec::with_capacity(model.adapters.len() * 2);
    for name in model.adapters.keys() {
        out.push(format!("{name}.lora_A"));
        out.push(format!("{name}.lora_B"));
    }
    out
}

/// Total trainable scalar count: Σ r·(d_in + d_out) over adapters.
pub fn trainable_count(model: &AdaptedModel) -> usize {
    model
        .adapters
        .values()
        .map(|ad| ad.a.len() + ad.b.len())
        .sum()
}

/// Snapshot of `(name, flattened values)` for every trainable array.
pub fn trainable_parameters(model: &AdaptedModel) -> Vec<(String, Vec<f64>)> {
    let mut out = Vec::with_capacity(model.adapters.len() * 2);
    for (name, ad) in &model.adapters {
        out.push((format!("{name}.lora_A"), ad.a.iter().copied().collect()));
        out.push((format!("{name}.lora_B"), ad.b.iter().copied().collect()));
    }
    out
}

/// Apply a gradient-keyed update in place: `param -= f(grad)` is the caller's
/// business; this just resolves `<weight>.lora_A/B` names to adapter arrays.
pub fn with_trainable_mut<F>(model: &mut AdaptedModel, mut f: F)
where
    F: FnMut(&str, &mut Array2<f64>),
{
    for (name, ad) in model.adapters.iter_mut() {
        f(&format!("{name}.lora_A"), &mut ad.a);
        f(&format!("{name}.lora_B"), &mut ad.b);
    }
}

/// Forward pass through the frozen base with adapters attached.
pub fn adapted_forward(
    model: &AdaptedModel,
    z_t: &Latent,
    t: f64,
    c: &ConditioningSet,
) -> Result<Latent> {
    forward(&model.base, Some(&model.adapters), z_t, t, c)
}

/// Keep only the `.lora_A` / `.lora_B` entries of a gradient map.
pub fn lora_grads_only(grads: Grads) -> Grads {
    grads
        .into_iter()
        .filter(|(k, _)| k.ends_with(".lora_A") || k.ends_with(".lora_B"))
        .collect()
}
