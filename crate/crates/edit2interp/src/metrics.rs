//! Evaluation suite: PSNR, FID, perceptual distance, flow-weighted
//! perceptual distance, perceptual straightness, and the small optical-flow
//! estimator the temporal metrics rely on.
//!
//! Pretrained feature networks are out of scope; the default extractor is a
//! frozen bank of seeded random 3x3 convolutions at scales {1, 1/2, 1/4}
//! with per-pixel channel normalization, behind the [`FeatureExtractor`]
//! trait so real features can be substituted.

use ndarray::{Array1, Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::conditioning::Image;
use crate::data::DatasetManifest;
use crate::error::{Error, Result};

pub const PSNR_CAP_DB: f64 = 99.0;

/// 10·log10(1 / MSE) with MAX = 1, capped at 99 dB for near-zero error.
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    if !a.same_dims(b) {
        return Err(Error::DimMismatch("psnr inputs differ in shape".into()));
    }
    let n = a.pixels.len() as f64;
    let mse = a
        .pixels
        .iter()
        .zip(b.pixels.iter())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / n;
    if mse < 1e-10 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP_DB))
}

/// Pluggable frozen feature map. `feature_maps` yields one channel-normalized
/// spatial map per scale (finest first, same spatial size as the input at
/// scale 1); `global_features` yields one vector per image for FID and PS.
pub trait FeatureExtractor: Sync {
    fn feature_maps(&self, img: &Image) -> Vec<Array3<f64>>;
    fn global_features(&self, img: &Image) -> Array1<f64>;
}

const FEAT_CHANNELS: usize = 8;
const KERNEL: usize = 3;
const NORM_EPS: f64 = 1e-10;

/// Seeded random convolutional projections at scales {1, 1/2, 1/4}.
pub struct RandomProjExtractor {
    // one (out, in, ky, kx) kernel bank per scale, flattened
    kernels: Vec<Vec<f64>>,
}

impl RandomProjExtractor {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xfea7);
        let n = FEAT_CHANNELS * 3 * KERNEL * KERNEL;
        let std = 1.0 / ((3 * KERNEL * KERNEL) as f64).sqrt();
        let kernels = (0..3)
            .map(|_| {
                (0..n)
                    .map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal) * std)
                    .collect()
            })
            .collect();
        RandomProjExtractor { kernels }
    }
}

impl Default for RandomProjExtractor {
    fn default() -> Self {
        RandomProjExtractor::new(0)
    }
}

fn downsample2(img: &Image) -> Image {
    let (h, w) = (img.height() / 2, img.width() / 2);
    let mut out = Array3::zeros((h.max(1), w.max(1), 3));
    for i in 0..h.max(1) {
        for j in 0..w.max(1) {
            for c in 0..3 {
                let mut s = 0.0;
                let mut cnt = 0.0;
                for dy in 0..2 {
                    for dx in 0..2 {
                        let y = (i * 2 + dy).min(img.height() - 1);
                        let x = (j * 2 + dx).min(img.width() - 1);
                        s += img.pixels[[y, x, c]];
                        cnt += 1.0;
                    }
                }
                out[[i, j, c]] = s / cnt;
            }
        }
    }
    Image::new(out)
}

fn conv_and_normalize(img: &Image, kernel: &[f64]) -> Array3<f64> {
    let (h, w) = (img.height(), img.width());
    let r = KERNEL / 2;
    let mut out = Array3::zeros((FEAT_CHANNELS, h, w));
    for oc in 0..FEAT_CHANNELS {
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for ic in 0..3 {
                    for ky in 0..KERNEL {
                        for kx in 0..KERNEL {
                            let yy = y as isize + ky as isize - r as isize;
                            let xx = x as isize + kx as isize - r as isize;
                            if yy < 0 || xx < 0 || yy >= h as isize || xx >= w as isize {
                                continue; // zero padding
                            }
                            let kidx = ((oc * 3 + ic) * KERNEL + ky) * KERNEL + kx;
                            acc += kernel[kidx] * img.pixels[[yy as usize, xx as usize, ic]];
                        }
                    }
                }
                out[[oc, y, x]] = acc;
            }
        }
    }
    // unit-normalize across channels per pixel
    for y in 0..h {
        for x in 0..w {
            let mut norm = 0.0;
            for c in 0..FEAT_CHANNELS {
                norm += out[[c, y, x]] * out[[c, y, x]];
            }
            let inv = 1.0 / (norm.sqrt() + NORM_EPS);
            for c in 0..FEAT_CHANNELS {
                out[[c, y, x]] *= inv;
            }
        }
    }
    out
}

impl FeatureExtractor for RandomProjExtractor {
    fn feature_maps(&self, img: &Image) -> Vec<Array3<f64>> {
        let half = downsample2(img);
        let quarter = downsample2(&half);
        vec![
            conv_and_normalize(img, &self.kernels[0]),
            conv_and_normalize(&half, &self.kernels[1]),
            conv_and_normalize(&quarter, &self.kernels[2]),
        ]
    }

    fn global_features(&self, img: &Image) -> Array1<f64> {
        let maps = self.feature_maps(img);
        let mut out = Array1::zeros(3 * FEAT_CHANNELS);
        for (s, map) in maps.iter().enumerate() {
            let (c, h, w) = map.dim();
            for ch in 0..c {
                let mut acc = 0.0;
                for y in 0..h {
                    for x in 0..w {
                        acc += map[[ch, y, x]];
                    }
                }
                out[s * FEAT_CHANNELS + ch] = acc / (h * w) as f64;
            }
        }
        out
    }
}

/// Mean over scales of the mean squared distance between channel-normalized
/// feature maps. A pseudo-metric: non-negative, symmetric, zero on identity.
pub fn perceptual_distance(a: &Image, b: &Image, fx: &dyn FeatureExtractor) -> Result<f64> {
    if !a.same_dims(b) {
        return Err(Error::DimMismatch(
            "perceptual_distance inputs differ in shape".into(),
        ));
    }
    let fa = fx.feature_maps(a);
    let fb = fx.feature_maps(b);
    let mut total = 0.0;
    for (ma, mb) in fa.iter().zip(fb.iter()) {
        let n = ma.len() as f64;
        total += ma
            .iter()
            .zip(mb.iter())
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            / n;
    }
    Ok(total / fa.len() as f64)
}

fn mean_and_cov(features: &[Array1<f64>]) -> (Array1<f64>, Array2<f64>) {
    let n = features.len();
    let d = features[0].len();
    let mut mu = Array1::zeros(d);
    for f in features {
        mu += f;
    }
    mu /= n as f64;
    let mut cov = Array2::zeros((d, d));
    for f in features {
        let c = f - &mu;
        for i in 0..d {
            for j in 0..d {
                cov[[i, j]] += c[i] * c[j];
            }
        }
    }
    cov /= (n - 1) as f64; // unbiased
    (mu, cov)
}

fn sym_sqrt(m: &Array2<f64>) -> Array2<f64> {
    let d = m.nrows();
    let sym = nalgebra::DMatrix::from_fn(d, d, |i, j| 0.5 * (m[[i, j]] + m[[j, i]]));
    let eig = nalgebra::SymmetricEigen::new(sym);
    let mut out = Array2::zeros((d, d));
    for k in 0..d {
        let lam = eig.eigenvalues[k].max(0.0).sqrt(); // clamp rank deficiency
        for i in 0..d {
            for j in 0..d {
                out[[i, j]] += lam * eig.eigenvectors[(i, k)] * eig.eigenvectors[(j, k)];
            }
        }
    }
    out
}

/// Fréchet distance between Gaussian fits of two feature sets:
/// ‖μ₁-μ₂‖² + Tr(Σ₁ + Σ₂ - 2·(Σ₁^½ Σ₂ Σ₁^½)^½).
pub fn fid(features_a: &[Array1<f64>], features_b: &[Array1<f64>]) -> Result<f64> {
    if features_a.len() < 2 || features_b.len() < 2 {
        return Err(Error::Dataset(
            "fid requires at least 2 feature vectors per set".into(),
        ));
    }
    let d = features_a[0].len();
    if features_a.iter().chain(features_b.iter()).any(|f| f.len() != d) {
        return Err(Error::DimMismatch("fid feature dims differ".into()));
    }
    let (mu1, cov1) = mean_and_cov(features_a);
    let (mu2, cov2) = mean_and_cov(features_b);
    let dmu = &mu1 - &mu2;
    let mean_term = dmu.iter().map(|v| v * v).sum::<f64>();
    let s1 = sym_sqrt(&cov1);
    let inner = s1.dot(&cov2).dot(&s1);
    let cross = sym_sqrt(&inner);
    let mut trace = 0.0;
    for i in 0..d {
        trace += cov1[[i, i]] + cov2[[i, i]] - 2.0 * cross[[i, i]];
    }
    Ok((mean_term + trace).max(0.0))
}

/// Dense displacement field in pixels.
#[derive(Debug, Clone)]
pub struct FlowField {
    pub u: Array2<f64>,
    pub v: Array2<f64>,
}

fn luma(img: &Image) -> Array2<f64> {
    let (h, w) = (img.height(), img.width());
    Array2::from_shape_fn((h, w), |(y, x)| {
        0.299 * img.pixels[[y, x, 0]] + 0.587 * img.pixels[[y, x, 1]] + 0.114 * img.pixels[[y, x, 2]]
    })
}

const HS_LAMBDA: f64 = 0.1;
const HS_ITERS: usize = 100;

/// Horn–Schunck with central-difference gradients, zero-flow init, and 100
/// Jacobi iterations.
pub fn estimate_flow(a: &Image, b: &Image) -> Result<FlowField> {
    if !a.same_dims(b) {
        return Err(Error::DimMismatch("flow inputs differ in shape".into()));
    }
    let ga = luma(a);
    let gb = luma(b);
    let (h, w) = ga.dim();
    let avg = (&ga + &gb) * 0.5;
    let at = |m: &Array2<f64>, y: isize, x: isize| -> f64 {
        let y = y.clamp(0, h as isize - 1) as usize;
        let x = x.clamp(0, w as isize - 1) as usize;
        m[[y, x]]
    };
    let mut ix = Array2::zeros((h, w));
    let mut iy = Array2::zeros((h, w));
    let it = &gb - &ga;
    for y in 0..h {
        for x in 0..w {
            let (yi, xi) = (y as isize, x as isize);
            ix[[y, x]] = 0.5 * (at(&avg, yi, xi + 1) - at(&avg, yi, xi - 1));
            iy[[y, x]] = 0.5 * (at(&avg, yi + 1, xi) - at(&avg, yi - 1, xi));
        }
    }
    let mut u = Array2::<f64>::zeros((h, w));
    let mut v = Array2::<f64>::zeros((h, w));
    for _ in 0..HS_ITERS {
        let mut un = Array2::zeros((h, w));
        let mut vn = Array2::zeros((h, w));
        for y in 0..h {
            for x in 0..w {
                let (yi, xi) = (y as isize, x as isize);
                let ubar = 0.25
                    * (at(&u, yi - 1, xi) + at(&u, yi + 1, xi) + at(&u, yi, xi - 1)
                        + at(&u, yi, xi + 1));
                let vbar = 0.25
                    * (at(&v, yi - 1, xi) + at(&v, yi + 1, xi) + at(&v, yi, xi - 1)
                        + at(&v, yi, xi + 1));
                let gx = ix[[y, x]];
                let gy = iy[[y, x]];
                let common = (gx * ubar + gy * vbar + it[[y, x]])
                    / (HS_LAMBDA + gx * gx + gy * gy);
                un[[y, x]] = ubar - gx * common;
                vn[[y, x]] = vbar - gy * common;
            }
        }
        u = un;
        v = vn;
    }
    Ok(FlowField { u, v })
}

/// Spatial perceptual-distance map between ground truth and prediction,
/// reweighted by the flow-distortion magnitude between `prev -> pred_mid`
/// and `prev -> gt_mid`. Weights normalize to sum 1 (uniform when all-zero).
pub fn flolpips(
    prev: &Image,
    _next: &Image,
    gt_mid: &Image,
    pred_mid: &Image,
    fx: &dyn FeatureExtractor,
) -> Result<f64> {
    if !prev.same_dims(gt_mid) || !gt_mid.same_dims(pred_mid) {
        return Err(Error::DimMismatch("flolpips inputs differ in shape".into()));
    }
    let flow_pred = estimate_flow(prev, pred_mid)?;
    let flow_gt = estimate_flow(prev, gt_mid)?;
    let (h, w) = flow_gt.u.dim();
    let mut weight = Array2::zeros((h, w));
    let mut wsum = 0.0;
    for y in 0..h {
        for x in 0..w {
            let du = flow_pred.u[[y, x]] - flow_gt.u[[y, x]];
            let dv = flow_pred.v[[y, x]] - flow_gt.v[[y, x]];
            let m = (du * du + dv * dv).sqrt();
            weight[[y, x]] = m;
            wsum += m;
        }
    }
    if wsum < 1e-12 {
        weight.fill(1.0 / (h * w) as f64);
    } else {
        weight /= wsum;
    }
    // full-scale per-pixel distance map
    let fa = &fx.feature_maps(gt_mid)[0];
    let fb = &fx.feature_maps(pred_mid)[0];
    let c = fa.dim().0;
    let mut out = 0.0;
    for y in 0..h {
        for x in 0..w {
            let mut d = 0.0;
            for ch in 0..c {
                let diff = fa[[ch, y, x]] - fb[[ch, y, x]];
                d += diff * diff;
            }
            out += weight[[y, x]] * d;
        }
    }
    Ok(out)
}

/// Mean over interior frames of (180° - angle between successive embedding
/// displacements); straighter perceptual trajectories score higher.
pub fn perceptual_straightness(frames: &[Image], fx: &dyn FeatureExtractor) -> Result<f64> {
    if frames.len() < 3 {
        return Err(Error::Dataset(
            "perceptual_straightness needs at least 3 frames".into(),
        ));
    }
    let embeddings: Vec<Array1<f64>> = frames.iter().map(|f| fx.global_features(f)).collect();
    let displacements: Vec<Array1<f64>> = embeddings
        .windows(2)
        .map(|w| &w[1] - &w[0])
        .collect();
    let mut acc = 0.0;
    let mut count = 0;
    for pair in displacements.windows(2) {
        let theta = angle_degrees(&pair[0], &pair[1]);
        acc += 180.0 - theta;
        count += 1;
    }
    Ok(acc / count as f64)
}

fn angle_degrees(a: &Array1<f64>, b: &Array1<f64>) -> f64 {
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na < 1e-12 || nb < 1e-12 {
        return 0.0;
    }
    let cos = (a.dot(b) / (na * nb)).clamp(-1.0, 1.0);
    cos.acos().to_degrees()
}

/// One Table-1-style row of aggregated metrics.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricReport {
    pub psnr_db: f64,
    pub lpips: f64,
    pub fid: f64,
    pub flolpips: f64,
    pub ps: f64,
    pub n_samples: usize,
    pub config: serde_json::Value,
}

fn threads_from_env() -> usize {
    std::env::var("E2I_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .unwrap_or(0)
}

/// Evaluate an interpolator over every triplet in a manifest. Per-triplet
/// work may run on `E2I_THREADS` threads; aggregation always happens in id
/// order, so results do not depend on the thread count.
pub fn evaluate_dataset<F>(
    interpolate_fn: F,
    manifest: &DatasetManifest,
    fx: &dyn FeatureExtractor,
    config_echo: serde_json::Value,
) -> Result<MetricReport>
where
    F: Fn(&Image, &Image) -> Result<Image> + Sync,
{
    if manifest.is_empty() {
        return Err(Error::Dataset("cannot evaluate an empty manifest".into()));
    }
    let mut entries = manifest.entries.clone();
    entries.sort_by(|a, b| a.id.cmp(&b.id));

    struct Row {
        psnr: f64,
        lpips: f64,
        flolpips: f64,
        ps: f64,
        feat_pred: Array1<f64>,
        feat_gt: Array1<f64>,
    }

    let eval_one = |entry: &crate::data::ManifestEntry| -> Result<Row> {
        let t = manifest.load_triplet(entry)?;
        let pred = interpolate_fn(&t.prev, &t.next)?;
        Ok(Row {
            psnr: psnr(&pred, &t.mid)?,
            lpips: perceptual_distance(&pred, &t.mid, fx)?,
            flolpips: flolpips(&t.prev, &t.next, &t.mid, &pred, fx)?,
            ps: perceptual_straightness(
                &[t.prev.clone(), pred.clone(), t.next.clone()],
                fx,
            )?,
            feat_pred: fx.global_features(&pred),
            feat_gt: fx.global_features(&t.mid),
        })
    };

    let n_threads = threads_from_env();
    let rows: Vec<Result<Row>> = if n_threads > 1 && entries.len() > 1 {
        let mut rows: Vec<Option<Result<Row>>> = (0..entries.len()).map(|_| None).collect();
        let chunk = entries.len().div_ceil(n_threads);
        std::thread::scope(|scope| {
            let mut handles = Vec::new();
            for (ci, slice) in entries.chunks(chunk).enumerate() {
                let eval = &eval_one;
                handles.push((ci, scope.spawn(move || {
                    slice.iter().map(eval).collect::<Vec<_>>()
                })));
            }
            for (ci, handle) in handles {
                for (i, r) in handle.join().expect("metric worker").into_iter().enumerate() {
                    rows[ci * chunk + i] = Some(r);
                }
            }
        });
        rows.into_iter().map(|r| r.expect("all rows filled")).collect()
    } else {
        entries.iter().map(&eval_one).collect()
    };

    let mut psnr_sum = 0.0;
    let mut lpips_sum = 0.0;
    let mut flo_sum = 0.0;
    let mut ps_sum = 0.0;
    let mut feats_pred = Vec::with_capacity(entries.len());
    let mut feats_gt = Vec::with_capacity(entries.len());
    for row in rows {
        let row = row?;
        psnr_sum += row.psnr;
        lpips_sum += row.lpips;
        flo_sum += row.flolpips;
        ps_sum += row.ps;
        feats_pred.push(row.feat_pred);
        feats_gt.push(row.feat_gt);
    }
    let n = entries.len() as f64;
    Ok(MetricReport {
        psnr_db: psnr_sum / n,
        lpips: lpips_sum / n,
        fid: fid(&feats_pred, &feats_gt)?,
        flolpips: flo_sum / n,
        ps: ps_sum / n,
        n_samples: entries.len(),
        config: config_echo,
    })
}
