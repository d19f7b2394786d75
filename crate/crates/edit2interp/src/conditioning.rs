//! Frozen encoders: an invertible latent codec (VAE stand-in), a
//! deterministic semantic encoder, and the conditioning-set builder.
//!
//! The codec is a space-to-depth transform followed by a per-cell orthogonal
//! channel mix, so `decode(encode(img))` recovers the image exactly up to
//! floating point. The semantic encoder pools both boundary frames to a small
//! grid, hashes the prompt into a bag-of-words vector, and projects through a
//! fixed seeded matrix. Neither encoder has trainable state.

use ndarray::{Array1, Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Pixel-space frame, values in `[0,1]`, shape `(H, W, 3)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub pixels: Array3<f64>,
}

impl Image {
    pub fn new(pixels: Array3<f64>) -> Self {
        Image { pixels }
    }

    pub fn height(&self) -> usize {
        self.pixels.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.pixels.shape()[1]
    }

    /// Clamp every channel into `[0,1]`. Used only at export boundaries.
    pub fn clamped(&self) -> Image {
        Image {
            pixels: self.pixels.mapv(|v| v.clamp(0.0, 1.0)),
        }
    }

    pub fn same_dims(&self, other: &Image) -> bool {
        self.pixels.shape() == other.pixels.shape()
    }
}

/// Channel-mixed latent, shape `(3·p², H/p, W/p)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Latent {
    pub values: Array3<f64>,
}

impl Latent {
    pub fn new(values: Array3<f64>) -> Self {
        Latent { values }
    }

    pub fn channels(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.values.shape()[2]
    }

    pub fn zeros_like(&self) -> Latent {
        Latent {
            values: Array3::zeros(self.values.raw_dim()),
        }
    }
}

/// Frozen semantic tokens, shape `(K, d_model)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SemanticTokens {
    pub tokens: Array2<f64>,
}

/// Conditioning set: semantic tokens plus the two boundary latents.
/// `z0` is the initial spatial canvas, `z1` the temporal destination.
#[derive(Debug, Clone)]
pub struct ConditioningSet {
    pub h: SemanticTokens,
    pub z0: Latent,
    pub z1: Latent,
}

/// Latent codec configuration. The mixing matrix `Q` is a seeded orthogonal
/// `3p² × 3p²` matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CodecConfig {
    pub patch_factor: usize,
    pub mix_seed: u64,
}

impl Default for CodecConfig {
    fn default() -> Self {
        CodecConfig {
            patch_factor: 2,
            mix_seed: 7,
        }
    }
}

impl CodecConfig {
    pub fn latent_channels(&self) -> usize {
        3 * self.patch_factor * self.patch_factor
    }

    /// The orthogonal channel-mixing matrix, derived from `mix_seed` via QR of
    /// a Gaussian matrix with the R diagonal sign fixed for determinism.
    pub fn mixing_matrix(&self) -> Array2<f64> {
        let n = self.latent_channels();
        let mut rng = ChaCha8Rng::seed_from_u64(self.mix_seed);
        let g = nalgebra::DMatrix::<f64>::from_fn(n, n, |_, _| {
            rng.sample::<f64, _>(rand_distr::StandardNormal)
        });
        let qr = g.qr();
        let mut q = qr.q();
        let r = qr.r();
        for j in 0..n {
            if r[(j, j)] < 0.0 {
                for i in 0..n {
                    q[(i, j)] = -q[(i, j)];
                }
            }
        }
        Array2::from_shape_fn((n, n), |(i, j)| q[(i, j)])
    }
}

/// Semantic encoder configuration. Frozen; never trained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SemanticConfig {
    pub k_tokens: usize,
    pub d_model: usize,
    pub pool_grid: usize,
}

impl Default for SemanticConfig {
    fn default() -> Self {
        SemanticConfig {
            k_tokens: 8,
            d_model: 64,
            pool_grid: 4,
        }
    }
}

/// Default instruction prompt used when none is configured.
pub const DEFAULT_PROMPT: &str =
    "generate the intermediate frame between the two input frames";

fn check_divisible(img: &Image, p: usize) -> Result<()> {
    if img.height() % p != 0 || img.width() % p != 0 {
        return Err(Error::DimMismatch(format!(
            "image {}x{} not divisible by patch factor {}",
            img.height(),
            img.width(),
            p
        )));
    }
    Ok(())
}

/// Space-to-depth by `p`, then per-cell channel mix by the orthogonal `Q`.
pub fn encode_image(img: &Image, cfg: &CodecConfig) -> Result<Latent> {
    let p = cfg.patch_factor;
    check_divisible(img, p)?;
    let (h, w) = (img.height() / p, img.width() / p);
    let c = cfg.latent_channels();
    let q = cfg.mixing_matrix();
    let mut out = Array3::zeros((c, h, w));
    let mut cell = Array1::zeros(c);
    for i in 0..h {
        for j in 0..w {
            let mut k = 0;
            for dy in 0..p {
                for dx in 0..p {
                    for ch in 0..3 {
                        cell[k] = img.pixels[[i * p + dy, j * p + dx, ch]];
                        k += 1;
                    }
                }
            }
            let mixed = q.dot(&cell);
            for (ci, v) in mixed.iter().enumerate() {
                out[[ci, i, j]] = *v;
            }
        }
    }
    Ok(Latent::new(out))
}

/// Exact inverse of [`encode_image`]. Output is not clamped; clamping happens
/// only at pixel export.
pub fn decode_latent(z: &Latent, cfg: &CodecConfig) -> Result<Image> {
    let p = cfg.patch_factor;
    let c = cfg.latent_channels();
    if z.channels() != c {
        return Err(Error::DimMismatch(format!(
            "latent has {} channels, codec expects {}",
            z.channels(),
            c
        )));
    }
    let (h, w) = (z.height(), z.width());
    let q = cfg.mixing_matrix();
    let qt = q.t().to_owned();
    let mut out = Array3::zeros((h * p, w * p, 3));
    let mut cell = Array1::zeros(c);
    for i in 0..h {
        for j in 0..w {
            for ci in 0..c {
                cell[ci] = z.values[[ci, i, j]];
            }
            let unmixed = qt.dot(&cell);
            let mut k = 0;
            for dy in 0..p {
                for dx in 0..p {
                    for ch in 0..3 {
                        out[[i * p + dy, j * p + dx, ch]] = unmixed[k];
                        k += 1;
                    }
                }
            }
        }
    }
    Ok(Image::new(out))
}

/// FNV-1a, fixed here so prompt hashing is stable across platforms.
fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in bytes {
        h ^= *b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

const PROMPT_DIM: usize = 32;

fn prompt_embedding(prompt: &str) -> Array1<f64> {
    let mut e = Array1::zeros(PROMPT_DIM);
    for word in prompt.split_whitespace() {
        let h = fnv1a(word.as_bytes());
        let idx = (h % PROMPT_DIM as u64) as usize;
        let sign = if (h >> 32) & 1 == 0 { 1.0 } else { -1.0 };
        e[idx] += sign;
    }
    e
}

fn pool_image(img: &Image, grid: usize) -> Array1<f64> {
    let (h, w) = (img.height(), img.width());
    let mut out = Array1::zeros(grid * grid * 3);
    for gi in 0..grid {
        for gj in 0..grid {
            let y0 = gi * h / grid;
            let y1 = ((gi + 1) * h / grid).max(y0 + 1);
            let x0 = gj * w / grid;
            let x1 = ((gj + 1) * w / grid).max(x0 + 1);
            let count = ((y1 - y0) * (x1 - x0)) as f64;
            for ch in 0..3 {
                let mut s = 0.0;
                for y in y0..y1 {
                    for x in x0..x1 {
                        s += img.pixels[[y, x, ch]];
                    }
                }
                out[(gi * grid + gj) * 3 + ch] = s / count;
            }
        }
    }
    out
}

/// Deterministic frozen semantic encoder: pooled boundary frames plus a
/// hashed prompt embedding, projected through a fixed seeded matrix into
/// `K` tokens of width `d_model`.
pub fn encode_semantics(
    prompt: &str,
    i0: &Image,
    i1: &Image,
    seed: u64,
    cfg: &SemanticConfig,
) -> Result<SemanticTokens> {
    if !i0.same_dims(i1) {
        return Err(Error::DimMismatch(format!(
            "semantic encoder inputs differ: {}x{} vs {}x{}",
            i0.height(),
            i0.width(),
            i1.height(),
            i1.width()
        )));
    }
    let g = cfg.pool_grid;
    let p0 = pool_image(i0, g);
    let p1 = pool_image(i1, g);
    let pe = prompt_embedding(prompt);
    let in_dim = p0.len() + p1.len() + PROMPT_DIM;
    let mut features = Array1::zeros(in_dim);
    features.slice_mut(ndarray::s![0..p0.len()]).assign(&p0);
    features
        .slice_mut(ndarray::s![p0.len()..p0.len() + p1.len()])
        .assign(&p1);
    features
        .slice_mut(ndarray::s![p0.len() + p1.len()..])
        .assign(&pe);

    let out_dim = cfg.k_tokens * cfg.d_model;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5e3a_11c0);
    let scale = 1.0 / (in_dim as f64).sqrt();
    let proj = Array2::from_shape_fn((out_dim, in_dim), |_| {
        rng.sample::<f64, _>(rand_distr::StandardNormal) * scale
    });
    let flat = proj.dot(&features);
    let tokens = flat
        .into_shape_with_order((cfg.k_tokens, cfg.d_model))
        .expect("token reshape");
    Ok(SemanticTokens { tokens })
}

/// Build the full conditioning set from two boundary frames.
pub fn build_conditioning(
    i0: &Image,
    i1: &Image,
    prompt: &str,
    codec: &CodecConfig,
    sem: &SemanticConfig,
    seed: u64,
) -> Result<ConditioningSet> {
    if !i0.same_dims(i1) {
        return Err(Error::DimMismatch(
            "boundary frames differ in size".to_string(),
        ));
    }
    Ok(ConditioningSet {
        h: encode_semantics(prompt, i0, i1, seed, sem)?,
        z0: encode_image(i0, codec)?,
        z1: encode_image(i1, codec)?,
    })
}

/// Seeded random image, used widely in tests.
pub fn random_image(h: usize, w: usize, seed: u64) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Image::new(Array3::from_shape_fn((h, w, 3), |_| rng.gen::<f64>()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_exact() {
        let cfg = CodecConfig::default();
        for seed in 0..10 {
            let img = random_image(8, 12, seed);
            let z = encode_image(&img, &cfg).unwrap();
            let back = decode_latent(&z, &cfg).unwrap();
            let max_err = (&back.pixels - &img.pixels)
                .iter()
                .fold(0.0f64, |m, v| m.max(v.abs()));
            assert!(max_err <= 1e-5, "round trip error {max_err}");
        }
    }

    #[test]
    fn round_trip_preserves_quantized_checksum() {
        let cfg = CodecConfig::default();
        for seed in 0..10 {
            let img = random_image(16, 16, 100 + seed);
            let quant = |im: &Image| -> u64 {
                let mut acc: u64 = 0;
                for v in im.pixels.iter() {
                    acc = acc
                        .wrapping_mul(31)
                        .wrapping_add((v * 255.0).round() as u64);
                }
                acc
            };
            let back = decode_latent(&encode_image(&img, &cfg).unwrap(), &cfg).unwrap();
            assert_eq!(quant(&img), quant(&back));
        }
    }

    #[test]
    fn constant_image_matches_matrix_oracle() {
        let cfg = CodecConfig::default();
        let img = Image::new(Array3::from_elem((4, 4, 3), 0.5));
        let z = encode_image(&img, &cfg).unwrap();
        // Oracle: each latent cell is Q · (0.5 · ones(12)).
        let q = cfg.mixing_matrix();
        let expected = q.dot(&Array1::from_elem(12, 0.5));
        for i in 0..z.height() {
            for j in 0..z.width() {
                for c in 0..12 {
                    assert!((z.values[[c, i, j]] - expected[c]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn tiny_image_shapes() {
        let cfg = CodecConfig::default();
        let img = random_image(2, 2, 1);
        let z = encode_image(&img, &cfg).unwrap();
        assert_eq!(z.values.shape(), &[12, 1, 1]);
    }

    #[test]
    fn zero_latent_decodes_to_zero_image() {
        let cfg = CodecConfig::default();
        let z = Latent::new(Array3::zeros((12, 3, 3)));
        let img = decode_latent(&z, &cfg).unwrap();
        assert!(img.pixels.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn indivisible_dims_rejected() {
        let cfg = CodecConfig::default();
        let img = random_image(5, 4, 1);
        assert!(matches!(
            encode_image(&img, &cfg),
            Err(Error::DimMismatch(_))
        ));
    }

    #[test]
    fn mixing_matrix_orthogonal() {
        for seed in [0u64, 1, 42, 9999] {
            let cfg = CodecConfig {
                patch_factor: 2,
                mix_seed: seed,
            };
            let q = cfg.mixing_matrix();
            let qtq = q.t().dot(&q);
            for i in 0..12 {
                for j in 0..12 {
                    let expect = if i == j { 1.0 } else { 0.0 };
                    assert!((qtq[[i, j]] - expect).abs() <= 1e-6);
                }
            }
        }
    }

    #[test]
    fn semantics_deterministic_and_order_sensitive() {
        let cfg = SemanticConfig::default();
        let a = random_image(8, 8, 1);
        let b = random_image(8, 8, 2);
        let t1 = encode_semantics("move", &a, &b, 3, &cfg).unwrap();
        let t2 = encode_semantics("move", &a, &b, 3, &cfg).unwrap();
        assert_eq!(t1.tokens, t2.tokens);
        let swapped = encode_semantics("move", &b, &a, 3, &cfg).unwrap();
        let max_diff = (&t1.tokens - &swapped.tokens)
            .iter()
            .fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(max_diff > 1e-8, "swapping inputs should change tokens");
    }

    #[test]
    fn empty_prompt_is_valid() {
        let cfg = SemanticConfig::default();
        let a = random_image(8, 8, 1);
        let t = encode_semantics("", &a, &a, 3, &cfg).unwrap();
        assert!(t.tokens.iter().all(|v| v.is_finite()));
        assert_eq!(t.tokens.shape(), &[8, 64]);
    }

    #[test]
    fn conditioning_same_inputs_share_latent() {
        let codec = CodecConfig::default();
        let sem = SemanticConfig::default();
        let img = random_image(8, 8, 5);
        let c = build_conditioning(&img, &img, DEFAULT_PROMPT, &codec, &sem, 1).unwrap();
        assert_eq!(c.z0.values, c.z1.values);
        assert_eq!(c.z0.values.shape(), &[12, 4, 4]);
    }

    #[test]
    fn mismatched_frames_rejected() {
        let codec = CodecConfig::default();
        let sem = SemanticConfig::default();
        let a = random_image(8, 8, 1);
        let b = random_image(16, 16, 1);
        assert!(build_conditioning(&a, &b, "", &codec, &sem, 1).is_err());
    }
}
