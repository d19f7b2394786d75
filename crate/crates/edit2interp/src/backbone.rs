//! Toy multimodal diffusion transformer predicting the rectified-flow
//! velocity from a noisy latent, a timestep, and a conditioning set.
//!
//! Latent cells from the noisy stream and both boundary streams become
//! in-sequence tokens with role and position embeddings; the frozen semantic
//! tokens are appended with their own positions. Each block applies
//! adaptively modulated self-attention and an adaptively modulated MLP, with
//! (scale, shift, gate) triples produced per sub-layer by a timestep-driven
//! modulation MLP whose final layer is zero-initialized.
//!
//! Forward and backward are both written by hand over named weight arrays so
//! gradients are available for every weight as well as for any attached
//! low-rank adapters.

use std::collections::BTreeMap;

use ndarray::{s, Array1, Array2, ArrayD, Axis, Ix1, Ix2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::conditioning::{ConditioningSet, Latent};
use crate::error::{Error, Result};
use crate::lora::LoRAAdapter;

pub type AdapterMap = BTreeMap<String, LoRAAdapter>;
pub type Grads = BTreeMap<String, ArrayD<f64>>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub d_model: usize,
    pub n_blocks: usize,
    pub n_heads: usize,
    pub mlp_ratio: usize,
    pub k_semantic: usize,
    pub d_semantic: usize,
    pub latent_channels: usize,
    pub grid_h: usize,
    pub grid_w: usize,
    pub init_seed: u64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            d_model: 64,
            n_blocks: 4,
            n_heads: 4,
            mlp_ratio: 4,
            k_semantic: 8,
            d_semantic: 64,
            latent_channels: 12,
            grid_h: 16,
            grid_w: 16,
            init_seed: 0,
        }
    }
}

impl BackboneConfig {
    pub fn n_cells(&self) -> usize {
        self.grid_h * self.grid_w
    }

    pub fn n_tokens(&self) -> usize {
        3 * self.n_cells() + self.k_semantic
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_blocks == 0 || self.n_heads == 0 {
            return Err(Error::Config("zero-sized backbone dimension".into()));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }
}

/// Named weight arrays of the frozen backbone. `BTreeMap` keeps iteration
/// order stable for checksums and serialization.
#[derive(Debug, Clone)]
pub struct BackboneParams {
    pub config: BackboneConfig,
    pub arrays: BTreeMap<String, ArrayD<f64>>,
}

impl BackboneParams {
    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.arrays.keys().map(|s| s.as_str())
    }

    pub fn get2(&self, name: &str) -> &ArrayD<f64> {
        self.arrays
            .get(name)
            .unwrap_or_else(|| panic!("missing weight {name}"))
    }

    /// SHA-256 over names and little-endian f64 bytes, in map order.
    pub fn checksum(&self) -> String {
        let mut hasher = Sha256::new();
        for (name, arr) in &self.arrays {
            hasher.update(name.as_bytes());
            for v in arr.iter() {
                hasher.update(v.to_le_bytes());
            }
        }
        hex_string(&hasher.finalize())
    }
}

pub fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn gaussian(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> ArrayD<f64> {
    ArrayD::from_shape_fn(ndarray::IxDyn(shape), |_| {
        rng.sample::<f64, _>(rand_distr::StandardNormal) * std
    })
}

/// Deterministic seeded initialization. Projection weights use a 1/sqrt(fan_in)
/// scale, biases start at zero, and the final modulation layer is zeroed so
/// every gate (and scale/shift) is 0 at init regardless of timestep.
pub fn init_backbone(cfg: &BackboneConfig) -> Result<BackboneParams> {
    cfg.validate()?;
    let d = cfg.d_model;
    let c = cfg.latent_channels;
    let hidden = d * cfg.mlp_ratio;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.init_seed);
    let mut arrays: BTreeMap<String, ArrayD<f64>> = BTreeMap::new();
    let put = |a: &mut BTreeMap<String, ArrayD<f64>>,
                   rng: &mut ChaCha8Rng,
                   name: &str,
                   shape: &[usize],
                   std: f64| {
        let arr = if std == 0.0 {
            ArrayD::zeros(ndarray::IxDyn(shape))
        } else {
            gaussian(rng, shape, std)
        };
        a.insert(name.to_string(), arr);
    };

    let proj = 1.0 / (d as f64).sqrt();
    put(&mut arrays, &mut rng, "embed.weight", &[d, c], 1.0 / (c as f64).sqrt());
    put(&mut arrays, &mut rng, "embed.bias", &[d], 0.0);
    put(&mut arrays, &mut rng, "sem.proj.weight", &[d, cfg.d_semantic], 1.0 / (cfg.d_semantic as f64).sqrt());
    put(&mut arrays, &mut rng, "sem.proj.bias", &[d], 0.0);
    put(&mut arrays, &mut rng, "role.embed", &[3, d], 0.02);
    put(&mut arrays, &mut rng, "pos.embed", &[cfg.n_cells(), d], 0.02);
    put(&mut arrays, &mut rng, "sem.pos", &[cfg.k_semantic, d], 0.02);
    for b in 0..cfg.n_blocks {
        for nm in ["q", "k", "v", "out"] {
            put(&mut arrays, &mut rng, &format!("block{b}.attn.{nm}.weight"), &[d, d], proj);
            put(&mut arrays, &mut rng, &format!("block{b}.attn.{nm}.bias"), &[d], 0.0);
        }
        put(&mut arrays, &mut rng, &format!("block{b}.mlp.fc1.weight"), &[hidden, d], proj);
        put(&mut arrays, &mut rng, &format!("block{b}.mlp.fc1.bias"), &[hidden], 0.0);
        put(&mut arrays, &mut rng, &format!("block{b}.mlp.fc2.weight"), &[d, hidden], 1.0 / (hidden as f64).sqrt());
        put(&mut arrays, &mut rng, &format!("block{b}.mlp.fc2.bias"), &[d], 0.0);
        put(&mut arrays, &mut rng, &format!("block{b}.mod.fc1.weight"), &[d, d], proj);
        put(&mut arrays, &mut rng, &format!("block{b}.mod.fc1.bias"), &[d], 0.0);
        // zero-init: identity-like modulation at the start of training
        put(&mut arrays, &mut rng, &format!("block{b}.mod.fc2.weight"), &[6 * d, d], 0.0);
        put(&mut arrays, &mut rng, &format!("block{b}.mod.fc2.bias"), &[6 * d], 0.0);
    }
    put(&mut arrays, &mut rng, "head.weight", &[c, d], proj);
    put(&mut arrays, &mut rng, "head.bias", &[c], 0.0);
    Ok(BackboneParams {
        config: *cfg,
        arrays,
    })
}

/// Sinusoidal timestep features: d/2 geometrically spaced frequencies in
/// [1, 100], sin components first, then cos.
pub fn timestep_embedding(t: f64, d_model: usize) -> Array1<f64> {
    let half = d_model / 2;
    let mut e = Array1::zeros(d_model);
    for i in 0..half {
        let frac = if half > 1 { i as f64 / (half - 1) as f64 } else { 0.0 };
        let freq = MAX_TIME_FREQ.powf(frac);
        e[i] = (freq * t).sin();
        e[half + i] = (freq * t).cos();
    }
    e
}

pub const MAX_TIME_FREQ: f64 = 100.0;

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

fn silu_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

const LN_EPS: f64 = 1e-6;

struct LnCache {
    xhat: Array2<f64>,
    inv_std: Array1<f64>,
}

fn layer_norm(x: &Array2<f64>) -> (Array2<f64>, LnCache) {
    let n = x.nrows();
    let d = x.ncols() as f64;
    let mut xhat = Array2::zeros(x.raw_dim());
    let mut inv_std = Array1::zeros(n);
    for i in 0..n {
        let row = x.row(i);
        let mu = row.sum() / d;
        let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d;
        let is = 1.0 / (var + LN_EPS).sqrt();
        inv_std[i] = is;
        for (j, v) in row.iter().enumerate() {
            xhat[[i, j]] = (v - mu) * is;
        }
    }
    (
        xhat.clone(),
        LnCache { xhat, inv_std },
    )
}

fn layer_norm_backward(cache: &LnCache, dy: &Array2<f64>) -> Array2<f64> {
    let n = dy.nrows();
    let d = dy.ncols() as f64;
    let mut dx = Array2::zeros(dy.raw_dim());
    for i in 0..n {
        let y = cache.xhat.row(i);
        let g = dy.row(i);
        let mean_g = g.sum() / d;
        let mean_gy = g.iter().zip(y.iter()).map(|(a, b)| a * b).sum::<f64>() / d;
        let is = cache.inv_std[i];
        for j in 0..dy.ncols() {
            dx[[i, j]] = is * (g[j] - mean_g - y[j] * mean_gy);
        }
    }
    dx
}

struct LinCache {
    x: Array2<f64>,
    /// x · Aᵀ when an adapter is attached
    u: Option<Array2<f64>>,
}

fn weight2<'a>(params: &'a BackboneParams, name: &str) -> ndarray::ArrayView2<'a, f64> {
    params
        .get2(name)
        .view()
        .into_dimensionality::<Ix2>()
        .expect("2-d weight")
}

fn bias1<'a>(params: &'a BackboneParams, name: &str) -> ndarray::ArrayView1<'a, f64> {
    params
        .get2(name)
        .view()
        .into_dimensionality::<Ix1>()
        .expect("1-d bias")
}

fn linear_fwd(
    params: &BackboneParams,
    adapters: Option<&AdapterMap>,
    name: &str,
    x: &Array2<f64>,
) -> (Array2<f64>, LinCache) {
    let wname = format!("{name}.weight");
    let w = weight2(params, &wname);
    let b = bias1(params, &format!("{name}.bias"));
    let mut y = x.dot(&w.t());
    y += &b;
    let adapter = adapters.and_then(|m| m.get(&wname));
    let u = adapter.map(|a| {
        let u = x.dot(&a.a.t());
        y = &y + &(u.dot(&a.b.t()) * a.scale());
        u
    });
    (
        y,
        LinCache {
            x: x.clone(),
            u,
        },
    )
}

fn acc(grads: &mut Grads, key: &str, val: ArrayD<f64>) {
    match grads.get_mut(key) {
        Some(g) => *g += &val,
        None => {
            grads.insert(key.to_string(), val);
        }
    }
}

fn linear_bwd(
    params: &BackboneParams,
    adapters: Option<&AdapterMap>,
    name: &str,
    cache: &LinCache,
    dy: &Array2<f64>,
    grads: &mut Grads,
    want_base: bool,
) -> Array2<f64> {
    let wname = format!("{name}.weight");
    let w = weight2(params, &wname);
    let mut dx = dy.dot(&w);
    if want_base {
        acc(grads, &wname, dy.t().dot(&cache.x).into_dyn());
        acc(
            grads,
            &format!("{name}.bias"),
            dy.sum_axis(Axis(0)).into_dyn(),
        );
    }
    if let Some(a) = adapters.and_then(|m| m.get(&wname)) {
        let u = cache.u.as_ref().expect("adapter cache");
        let s = a.scale();
        // y_lora = s · U Bᵀ with U = X Aᵀ
        let du = dy.dot(&a.b) * s;
        acc(grads, &format!("{wname}.lora_B"), (dy.t().dot(u) * s).into_dyn());
        acc(grads, &format!("{wname}.lora_A"), du.t().dot(&cache.x).into_dyn());
        dx += &du.dot(&a.a);
    }
    dx
}

struct AttnCache {
    lin_q: LinCache,
    lin_k: LinCache,
    lin_v: LinCache,
    lin_out: LinCache,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    /// softmax rows per head
    p: Vec<Array2<f64>>,
}

struct BlockCache {
    ln1: LnCache,
    ln2: LnCache,
    mod_cache: ModCache,
    attn: AttnCache,
    attn_out: Array2<f64>,
    f1_pre: Array2<f64>,
    lin_fc1: LinCache,
    lin_fc2: LinCache,
    f2: Array2<f64>,
}

struct ModCache {
    lin1: LinCache,
    lin2: LinCache,
    pre1: Array2<f64>,
    /// (sa, ha, ga, sm, hm, gm)
    parts: [Array1<f64>; 6],
}

pub struct ForwardCache {
    cells: [Array2<f64>; 3],
    sem_lin: LinCache,
    blocks: Vec<BlockCache>,
    lin_head: LinCache,
    n_cells: usize,
}

fn latent_cells(z: &Latent) -> Array2<f64> {
    let (c, h, w) = (z.channels(), z.height(), z.width());
    let mut out = Array2::zeros((h * w, c));
    for i in 0..h {
        for j in 0..w {
            for ch in 0..c {
                out[[i * w + j, ch]] = z.values[[ch, i, j]];
            }
        }
    }
    out
}

fn cells_to_latent(cells: &Array2<f64>, c: usize, h: usize, w: usize) -> Latent {
    let mut out = ndarray::Array3::zeros((c, h, w));
    for i in 0..h {
        for j in 0..w {
            for ch in 0..c {
                out[[ch, i, j]] = cells[[i * w + j, ch]];
            }
        }
    }
    Latent::new(out)
}

fn check_dims(cfg: &BackboneConfig, z_t: &Latent, c: &ConditioningSet) -> Result<()> {
    let want = (cfg.latent_channels, cfg.grid_h, cfg.grid_w);
    for (what, z) in [("z_t", z_t), ("z0", &c.z0), ("z1", &c.z1)] {
        let got = (z.channels(), z.height(), z.width());
        if got != want {
            return Err(Error::DimMismatch(format!(
                "{what} has shape {got:?}, backbone expects {want:?}"
            )));
        }
    }
    let hs = c.h.tokens.shape();
    if hs != [cfg.k_semantic, cfg.d_semantic] {
        return Err(Error::DimMismatch(format!(
            "semantic tokens {hs:?}, backbone expects [{}, {}]",
            cfg.k_semantic, cfg.d_semantic
        )));
    }
    Ok(())
}

fn modulation(
    params: &BackboneParams,
    adapters: Option<&AdapterMap>,
    block: usize,
    t_emb: &Array1<f64>,
) -> (ModCache, [Array1<f64>; 6]) {
    let d = params.config.d_model;
    let e = t_emb
        .clone()
        .insert_axis(Axis(0));
    let (pre1, lin1) = linear_fwd(params, adapters, &format!("block{block}.mod.fc1"), &e);
    let h = pre1.mapv(silu);
    let (m, lin2) = linear_fwd(params, adapters, &format!("block{block}.mod.fc2"), &h);
    let m = m.row(0).to_owned();
    let part = |i: usize| m.slice(s![i * d..(i + 1) * d]).to_owned();
    let parts = [part(0), part(1), part(2), part(3), part(4), part(5)];
    (
        ModCache {
            lin1,
            lin2,
            pre1,
            parts: parts.clone(),
        },
        parts,
    )
}

fn attention(
    params: &BackboneParams,
    adapters: Option<&AdapterMap>,
    block: usize,
    a_in: &Array2<f64>,
) -> (Array2<f64>, AttnCache) {
    let cfg = &params.config;
    let d = cfg.d_model;
    let nh = cfg.n_heads;
    let dh = d / nh;
    let scale = 1.0 / (dh as f64).sqrt();
    let (q, lin_q) = linear_fwd(params, adapters, &format!("block{block}.attn.q"), a_in);
    let (k, lin_k) = linear_fwd(params, adapters, &format!("block{block}.attn.k"), a_in);
    let (v, lin_v) = linear_fwd(params, adapters, &format!("block{block}.attn.v"), a_in);
    let n = a_in.nrows();
    let mut o = Array2::zeros((n, d));
    let mut p_heads = Vec::with_capacity(nh);
    for h in 0..nh {
        let cols = s![.., h * dh..(h + 1) * dh];
        let qh = q.slice(cols).to_owned();
        let kh = k.slice(cols).to_owned();
        let vh = v.slice(cols).to_owned();
        let mut sc = qh.dot(&kh.t()) * scale;
        // row-wise softmax, max-shifted
        for mut row in sc.rows_mut() {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for val in row.iter_mut() {
                *val = (*val - m).exp();
                sum += *val;
            }
            for val in row.iter_mut() {
                *val /= sum;
            }
        }
        let oh = sc.dot(&vh);
        o.slice_mut(cols).assign(&oh);
        p_heads.push(sc);
    }
    let (out, lin_out) = linear_fwd(params, adapters, &format!("block{block}.attn.out"), &o);
    (
        out,
        AttnCache {
            lin_q,
            lin_k,
            lin_v,
            lin_out,
            q,
            k,
            v,
            p: p_heads,
        },
    )
}

fn attention_bwd(
    params: &BackboneParams,
    adapters: Option<&AdapterMap>,
    block: usize,
    cache: &AttnCache,
    d_out: &Array2<f64>,
    grads: &mut Grads,
    want_base: bool,
) -> Array2<f64> {
    let cfg = &params.config;
    let d = cfg.d_model;
    let nh = cfg.n_heads;
    let dh = d / nh;
    let scale = 1.0 / (dh as f64).sqrt();
    let d_o = linear_bwd(
        params,
        adapters,
        &format!("block{block}.attn.out"),
        &cache.lin_out,
        d_out,
        grads,
        want_base,
    );
    let n = d_o.nrows();
    let mut dq = Array2::zeros((n, d));
    let mut dk = Array2::zeros((n, d));
    let mut dv = Array2::zeros((n, d));
    for h in 0..nh {
        let cols = s![.., h * dh..(h + 1) * dh];
        let d_oh = d_o.slice(cols).to_owned();
        let p = &cache.p[h];
        let vh = cache.v.slice(cols).to_owned();
        let qh = cache.q.slice(cols).to_owned();
        let kh = cache.k.slice(cols).to_owned();
        let dvh = p.t().dot(&d_oh);
        let dp = d_oh.dot(&vh.t());
        // softmax backward per row
        let mut ds = Array2::zeros(dp.raw_dim());
        for i in 0..n {
            let pi = p.row(i);
            let gi = dp.row(i);
            let dot = pi.iter().zip(gi.iter()).map(|(a, b)| a * b).sum::<f64>();
            for j in 0..n {
                ds[[i, j]] = pi[j] * (gi[j] - dot);
            }
        }
        let dqh = ds.dot(&kh) * scale;
        let dkh = ds.t().dot(&qh) * scale;
        dq.slice_mut(cols).assign(&dqh);
        dk.slice_mut(cols).assign(&dkh);
        dv.slice_mut(cols).assign(&dvh);
    }
    let mut da = linear_bwd(params, adapters, &format!("block{block}.attn.q"), &cache.lin_q, &dq, grads, want_base);
    da += &linear_bwd(params, adapters, &format!("block{block}.attn.k"), &cache.lin_k, &dk, grads, want_base);
    da += &linear_bwd(params, adapters, &format!("block{block}.attn.v"), &cache.lin_v, &dv, grads, want_base);
    da
}

/// Forward pass; returns the predicted velocity with the same shape as `z_t`.
pub fn forward(
    params: &BackboneParams,
    adapters: Option<&AdapterMap>,
    z_t: &Latent,
    t: f64,
    c: &ConditioningSet,
) -> Result<Latent> {
    forward_with_cache(params, adapters, z_t, t, c).map(|(v, _)| v)
}

pub fn forward_with_cache(
    params: &BackboneParams,
    adapters: Option<&AdapterMap>,
    z_t: &Latent,
    t: f64,
    c: &ConditioningSet,
) -> Result<(Latent, ForwardCache)> {
    let cfg = &params.config;
    check_dims(cfg, z_t, c)?;
    let d = cfg.d_model;
    let n_cells = cfg.n_cells();
    let n_tokens = cfg.n_tokens();

    let cells = [latent_cells(z_t), latent_cells(&c.z0), latent_cells(&c.z1)];
    let role = weight2(params, "role.embed");
    let pos = weight2(params, "pos.embed");
    let mut x = Array2::zeros((n_tokens, d));
    let w_embed = weight2(params, "embed.weight");
    let b_embed = bias1(params, "embed.bias");
    for (sidx, stream) in cells.iter().enumerate() {
        let mut e = stream.dot(&w_embed.t());
        e += &b_embed;
        e += &role.row(sidx);
        e += &pos;
        x.slice_mut(s![sidx * n_cells..(sidx + 1) * n_cells, ..])
            .assign(&e);
    }
    let (mut sem, sem_lin) = linear_fwd(params, adapters, "sem.proj", &c.h.tokens);
    sem += &weight2(params, "sem.pos");
    x.slice_mut(s![3 * n_cells.., ..]).assign(&sem);

    let t_emb = timestep_embedding(t, d);
    let mut blocks = Vec::with_capacity(cfg.n_blocks);
    for b in 0..cfg.n_blocks {
        let (mod_cache, [sa, ha, ga, sm, hm, gm]) = modulation(params, adapters, b, &t_emb);
        let (xhat1, ln1) = layer_norm(&x);
        let mut a_in = xhat1;
        for mut row in a_in.rows_mut() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = *v * (1.0 + sa[j]) + ha[j];
            }
        }
        let (attn_out, attn) = attention(params, adapters, b, &a_in);
        for i in 0..n_tokens {
            for j in 0..d {
                x[[i, j]] += ga[j] * attn_out[[i, j]];
            }
        }
        let (xhat2, ln2) = layer_norm(&x);
        let mut m_in = xhat2;
        for mut row in m_in.rows_mut() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = *v * (1.0 + sm[j]) + hm[j];
            }
        }
        let (f1_pre, lin_fc1) = linear_fwd(params, adapters, &format!("block{b}.mlp.fc1"), &m_in);
        let g = f1_pre.mapv(silu);
        let (f2, lin_fc2) = linear_fwd(params, adapters, &format!("block{b}.mlp.fc2"), &g);
        for i in 0..n_tokens {
            for j in 0..d {
                x[[i, j]] += gm[j] * f2[[i, j]];
            }
        }
        blocks.push(BlockCache {
            ln1,
            ln2,
            mod_cache,
            attn,
            attn_out,
            f1_pre,
            lin_fc1,
            lin_fc2,
            f2,
        });
    }

    let noisy = x.slice(s![0..n_cells, ..]).to_owned();
    let (out_cells, lin_head) = linear_fwd(params, adapters, "head", &noisy);
    let velocity = cells_to_latent(&out_cells, cfg.latent_channels, cfg.grid_h, cfg.grid_w);
    Ok((
        velocity,
        ForwardCache {
            cells,
            sem_lin,
            blocks,
            lin_head,
            n_cells,
        },
    ))
}

/// Reverse pass. `d_velocity` is the loss gradient with respect to the
/// forward output. Returns gradients keyed by weight name, with adapter
/// gradients under `<weight>.lora_A` / `<weight>.lora_B`. Base-weight
/// gradients are skipped when `want_base` is false (LoRA-only training).
pub fn backward(
    params: &BackboneParams,
    adapters: Option<&AdapterMap>,
    cache: &ForwardCache,
    d_velocity: &Latent,
    want_base: bool,
) -> Grads {
    let cfg = &params.config;
    let d = cfg.d_model;
    let n_cells = cache.n_cells;
    let n_tokens = cfg.n_tokens();
    let mut grads: Grads = BTreeMap::new();

    let d_out_cells = latent_cells(d_velocity);
    let d_noisy = linear_bwd(
        params,
        adapters,
        "head",
        &cache.lin_head,
        &d_out_cells,
        &mut grads,
        want_base,
    );
    let mut dx = Array2::zeros((n_tokens, d));
    dx.slice_mut(s![0..n_cells, ..]).assign(&d_noisy);

    for b in (0..cfg.n_blocks).rev() {
        let bc = &cache.blocks[b];
        let [sa, _ha, ga, sm, _hm, gm] = &bc.mod_cache.parts;
        let mut dmod = Array1::<f64>::zeros(6 * d);

        // MLP branch: x += gm ⊙ f2
        let mut d_f2 = Array2::zeros((n_tokens, d));
        for i in 0..n_tokens {
            for j in 0..d {
                d_f2[[i, j]] = dx[[i, j]] * gm[j];
                dmod[5 * d + j] += dx[[i, j]] * bc.f2[[i, j]];
            }
        }
        let d_g = linear_bwd(params, adapters, &format!("block{b}.mlp.fc2"), &bc.lin_fc2, &d_f2, &mut grads, want_base);
        let d_f1 = &d_g * &bc.f1_pre.mapv(silu_grad);
        let d_m_in = linear_bwd(params, adapters, &format!("block{b}.mlp.fc1"), &bc.lin_fc1, &d_f1, &mut grads, want_base);
        let mut d_xhat2 = Array2::zeros((n_tokens, d));
        for i in 0..n_tokens {
            for j in 0..d {
                d_xhat2[[i, j]] = d_m_in[[i, j]] * (1.0 + sm[j]);
                dmod[3 * d + j] += d_m_in[[i, j]] * bc.ln2.xhat[[i, j]];
                dmod[4 * d + j] += d_m_in[[i, j]];
            }
        }
        dx += &layer_norm_backward(&bc.ln2, &d_xhat2);

        // attention branch: x += ga ⊙ attn_out
        let mut d_attn = Array2::zeros((n_tokens, d));
        for i in 0..n_tokens {
            for j in 0..d {
                d_attn[[i, j]] = dx[[i, j]] * ga[j];
                dmod[2 * d + j] += dx[[i, j]] * bc.attn_out[[i, j]];
            }
        }
        let d_a_in = attention_bwd(params, adapters, b, &bc.attn, &d_attn, &mut grads, want_base);
        let mut d_xhat1 = Array2::zeros((n_tokens, d));
        for i in 0..n_tokens {
            for j in 0..d {
                d_xhat1[[i, j]] = d_a_in[[i, j]] * (1.0 + sa[j]);
                dmod[j] += d_a_in[[i, j]] * bc.ln1.xhat[[i, j]];
                dmod[d + j] += d_a_in[[i, j]];
            }
        }
        dx += &layer_norm_backward(&bc.ln1, &d_xhat1);

        // modulation MLP
        let dmod_row = dmod.insert_axis(Axis(0));
        let d_h = linear_bwd(params, adapters, &format!("block{b}.mod.fc2"), &bc.mod_cache.lin2, &dmod_row, &mut grads, want_base);
        let d_pre1 = &d_h * &bc.mod_cache.pre1.mapv(silu_grad);
        // gradient stops at the (parameter-free) timestep embedding
        let _ = linear_bwd(params, adapters, &format!("block{b}.mod.fc1"), &bc.mod_cache.lin1, &d_pre1, &mut grads, want_base);
    }

    // embeddings
    let d_sem = dx.slice(s![3 * n_cells.., ..]).to_owned();
    if want_base {
        acc(&mut grads, "sem.pos", d_sem.clone().into_dyn());
    }
    let _ = linear_bwd(params, adapters, "sem.proj", &cache.sem_lin, &d_sem, &mut grads, want_base);
    if want_base {
        let mut d_role = Array2::zeros((3, d));
        let mut d_pos = Array2::zeros((n_cells, d));
        let mut d_w_embed = Array2::zeros((d, cfg.latent_channels));
        let mut d_b_embed = Array1::zeros(d);
        for sidx in 0..3 {
            let de = dx.slice(s![sidx * n_cells..(sidx + 1) * n_cells, ..]);
            d_role.row_mut(sidx).assign(&de.sum_axis(Axis(0)));
            d_pos += &de;
            d_w_embed += &de.t().dot(&cache.cells[sidx]);
            d_b_embed += &de.sum_axis(Axis(0));
        }
        acc(&mut grads, "role.embed", d_role.into_dyn());
        acc(&mut grads, "pos.embed", d_pos.into_dyn());
        acc(&mut grads, "embed.weight", d_w_embed.into_dyn());
        acc(&mut grads, "embed.bias", d_b_embed.into_dyn());
    }
    grads
}
