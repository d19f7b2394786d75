//! Synthetic triplet generation, manifest bookkeeping, and few-shot subset
//! sampling.
//!
//! Scenes are rendered time-parametrically: shapes move at constant velocity
//! between frames at times -1, 0, +1, so the middle frame is exactly the
//! scene at the average shape positions. Directory layout is
//! `triplets/<id>/{prev,mid,next}.ppm` plus `manifest.json`.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::conditioning::Image;
use crate::error::{Error, Result};
use crate::ppm;

#[derive(Debug, Clone)]
pub struct Triplet {
    pub prev: Image,
    pub mid: Image,
    pub next: Image,
    pub id: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GenConfig {
    pub image_size: usize,
    pub n_triplets: usize,
    pub max_shapes: usize,
    pub vel_min: f64,
    pub vel_max: f64,
    pub pan_mode: bool,
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            image_size: 64,
            n_triplets: 64,
            max_shapes: 4,
            vel_min: 1.0,
            vel_max: 4.0,
            pan_mode: false,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct ManifestEntry {
    pub id: String,
    pub prev: String,
    pub mid: String,
    pub next: String,
    pub source: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub root: String,
    pub entries: Vec<ManifestEntry>,
    pub gen_config: Option<GenConfig>,
    /// directory the relative paths resolve against; set on load/save
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl DatasetManifest {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn load_triplet(&self, entry: &ManifestEntry) -> Result<Triplet> {
        Ok(Triplet {
            prev: ppm::read_image(&self.base_dir.join(&entry.prev))?,
            mid: ppm::read_image(&self.base_dir.join(&entry.mid))?,
            next: ppm::read_image(&self.base_dir.join(&entry.next))?,
            id: entry.id.clone(),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum ShapeKind {
    Rectangle,
    Disc,
}

#[derive(Debug, Clone)]
struct Shape {
    kind: ShapeKind,
    cx: f64,
    cy: f64,
    half: f64,
    vx: f64,
    vy: f64,
    color: [f64; 3],
}

impl Shape {
    fn covers(&self, x: f64, y: f64, t: f64) -> bool {
        let dx = x - (self.cx + self.vx * t);
        let dy = y - (self.cy + self.vy * t);
        match self.kind {
            ShapeKind::Rectangle => dx.abs() <= self.half && dy.abs() <= self.half,
            ShapeKind::Disc => dx * dx + dy * dy <= self.half * self.half,
        }
    }
}

const BG_GRID: usize = 5;

#[derive(Debug, Clone)]
pub(crate) struct Scene {
    shapes: Vec<Shape>,
    bg: Array3<f64>, // (BG_GRID, BG_GRID, 3) control points
    bg_vx: f64,
    bg_vy: f64,
    size: usize,
}

fn bg_value(scene: &Scene, x: f64, y: f64, t: f64) -> [f64; 3] {
    let n = BG_GRID as f64;
    let size = scene.size as f64;
    // pan offsets wrap around the frame
    let fx = ((x + scene.bg_vx * t).rem_euclid(size)) / size * (n - 1.0);
    let fy = ((y + scene.bg_vy * t).rem_euclid(size)) / size * (n - 1.0);
    let x0 = fx.floor() as usize;
    let y0 = fy.floor() as usize;
    let x1 = (x0 + 1).min(BG_GRID - 1);
    let y1 = (y0 + 1).min(BG_GRID - 1);
    let tx = fx - x0 as f64;
    let ty = fy - y0 as f64;
    let mut out = [0.0; 3];
    for (c, o) in out.iter_mut().enumerate() {
        let a = scene.bg[[y0, x0, c]] * (1.0 - tx) + scene.bg[[y0, x1, c]] * tx;
        let b = scene.bg[[y1, x0, c]] * (1.0 - tx) + scene.bg[[y1, x1, c]] * tx;
        *o = a * (1.0 - ty) + b * ty;
    }
    out
}

const SUPERSAMPLE: usize = 4;

pub(crate) fn render_scene(scene: &Scene, t: f64) -> Image {
    let s = scene.size;
    let mut pixels = Array3::zeros((s, s, 3));
    let step = 1.0 / SUPERSAMPLE as f64;
    for py in 0..s {
        for px in 0..s {
            let mut acc = [0.0f64; 3];
            for sy in 0..SUPERSAMPLE {
                for sx in 0..SUPERSAMPLE {
                    let x = px as f64 + (sx as f64 + 0.5) * step;
                    let y = py as f64 + (sy as f64 + 0.5) * step;
                    let mut col = bg_value(scene, x, y, t);
                    for shape in &scene.shapes {
                        if shape.covers(x, y, t) {
                            col = shape.color;
                        }
                    }
                    for c in 0..3 {
                        acc[c] += col[c];
                    }
                }
            }
            let inv = 1.0 / (SUPERSAMPLE * SUPERSAMPLE) as f64;
            for c in 0..3 {
                pixels[[py, px, c]] = acc[c] * inv;
            }
        }
    }
    Image::new(pixels)
}

pub(crate) fn make_scene(cfg: &GenConfig, triplet_idx: usize) -> Scene {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_mul(0x9e37_79b9).wrapping_add(triplet_idx as u64));
    let size = cfg.image_size as f64;
    let bg = Array3::from_shape_fn((BG_GRID, BG_GRID, 3), |_| rng.gen::<f64>() * 0.5);
    let (bg_vx, bg_vy) = if cfg.pan_mode {
        (
            rng.gen_range(cfg.vel_min..=cfg.vel_max) * if rng.gen::<bool>() { 1.0 } else { -1.0 },
            rng.gen_range(cfg.vel_min..=cfg.vel_max) * if rng.gen::<bool>() { 1.0 } else { -1.0 },
        )
    } else {
        (0.0, 0.0)
    };
    let n_shapes = rng.gen_range(1..=cfg.max_shapes.clamp(1, 4));
    let mut shapes = Vec::with_capacity(n_shapes);
    for _ in 0..n_shapes {
        let kind = if rng.gen::<bool>() {
            ShapeKind::Rectangle
        } else {
            ShapeKind::Disc
        };
        let half = rng.gen_range(size * 0.08..=size * 0.18);
        let vx = rng.gen_range(cfg.vel_min..=cfg.vel_max) * if rng.gen::<bool>() { 1.0 } else { -1.0 };
        let vy = rng.gen_range(cfg.vel_min..=cfg.vel_max) * if rng.gen::<bool>() { 1.0 } else { -1.0 };
        // center stays inside the frame (with margin) at t = -1, 0, +1
        let margin = half + 1.0;
        let lo_x = margin + vx.abs();
        let hi_x = size - margin - vx.abs();
        let lo_y = margin + vy.abs();
        let hi_y = size - margin - vy.abs();
        let cx = if lo_x < hi_x { rng.gen_range(lo_x..hi_x) } else { size / 2.0 };
        let cy = if lo_y < hi_y { rng.gen_range(lo_y..hi_y) } else { size / 2.0 };
        let color = [
            0.3 + 0.7 * rng.gen::<f64>(),
            0.3 + 0.7 * rng.gen::<f64>(),
            0.3 + 0.7 * rng.gen::<f64>(),
        ];
        shapes.push(Shape {
            kind,
            cx,
            cy,
            half,
            vx,
            vy,
            color,
        });
    }
    Scene {
        shapes,
        bg,
        bg_vx,
        bg_vy,
        size: cfg.image_size,
    }
}

pub fn render_triplet(cfg: &GenConfig, idx: usize) -> Triplet {
    let scene = make_scene(cfg, idx);
    Triplet {
        prev: render_scene(&scene, -1.0),
        mid: render_scene(&scene, 0.0),
        next: render_scene(&scene, 1.0),
        id: format!("t{idx:05}"),
    }
}

/// Render every triplet to `out_dir` and write `manifest.json`.
pub fn generate_synthetic(cfg: &GenConfig, out_dir: &Path) -> Result<DatasetManifest> {
    fs::create_dir_all(out_dir)?;
    let mut entries = Vec::with_capacity(cfg.n_triplets);
    for idx in 0..cfg.n_triplets {
        let triplet = render_triplet(cfg, idx);
        let rel = format!("triplets/{}", triplet.id);
        let dir = out_dir.join(&rel);
        fs::create_dir_all(&dir)?;
        ppm::write_image(&triplet.prev, &dir.join("prev.ppm"))?;
        ppm::write_image(&triplet.mid, &dir.join("mid.ppm"))?;
        ppm::write_image(&triplet.next, &dir.join("next.ppm"))?;
        entries.push(ManifestEntry {
            id: triplet.id,
            prev: format!("{rel}/prev.ppm"),
            mid: format!("{rel}/mid.ppm"),
            next: format!("{rel}/next.ppm"),
            source: "synthetic".to_string(),
        });
    }
    let manifest = DatasetManifest {
        format_version: 1,
        root: ".".to_string(),
        entries,
        gen_config: Some(*cfg),
        base_dir: out_dir.to_path_buf(),
    };
    save_manifest(&manifest, &out_dir.join("manifest.json"))?;
    Ok(manifest)
}

pub fn save_manifest(manifest: &DatasetManifest, path: &Path) -> Result<()> {
    fs::write(path, serde_json::to_vec_pretty(manifest)?)?;
    Ok(())
}

/// Load and validate a manifest: ids unique, every referenced file present.
pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let mut manifest: DatasetManifest = serde_json::from_slice(&fs::read(path)?)?;
    if manifest.format_version != 1 {
        return Err(Error::Dataset(format!(
            "unsupported manifest format_version {}",
            manifest.format_version
        )));
    }
    manifest.base_dir = path
        .parent()
        .map(|p| p.to_path_buf())
        .unwrap_or_else(|| PathBuf::from("."));
    let mut seen = std::collections::BTreeSet::new();
    for e in &manifest.entries {
        if !seen.insert(e.id.clone()) {
            return Err(Error::Dataset(format!("duplicate triplet id '{}'", e.id)));
        }
        for rel in [&e.prev, &e.mid, &e.next] {
            let p = manifest.base_dir.join(rel);
            if !p.exists() {
                return Err(Error::Dataset(format!(
                    "manifest references missing file {}",
                    p.display()
                )));
            }
        }
    }
    Ok(manifest)
}

fn seeded_permutation(n: usize, seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    for i in (1..n).rev() {
        let j = (rng.gen::<u64>() as usize) % (i + 1);
        order.swap(i, j);
    }
    order
}

/// Uniform sample without replacement via a single seeded permutation
/// prefix, so subsets drawn with the same seed are nested across sizes.
pub fn few_shot_sample(manifest: &DatasetManifest, n: usize, seed: u64) -> Result<DatasetManifest> {
    if n > manifest.len() {
        return Err(Error::Dataset(format!(
            "requested {n} triplets but dataset has {}",
            manifest.len()
        )));
    }
    let order = seeded_permutation(manifest.len(), seed);
    let entries = order[..n]
        .iter()
        .map(|&i| manifest.entries[i].clone())
        .collect();
    Ok(DatasetManifest {
        format_version: 1,
        root: manifest.root.clone(),
        entries,
        gen_config: manifest.gen_config,
        base_dir: manifest.base_dir.clone(),
    })
}

/// Proportional round-robin draw across sources, then a seeded shuffle.
/// Entry ids are prefixed with their source tag.
pub fn mix_manifests(
    manifests: &[DatasetManifest],
    n: usize,
    seed: u64,
) -> Result<DatasetManifest> {
    let total: usize = manifests.iter().map(|m| m.len()).sum();
    if total < n {
        return Err(Error::Dataset(format!(
            "requested {n} triplets but sources hold only {total}"
        )));
    }
    let mut cursors: Vec<(Vec<usize>, usize)> = manifests
        .iter()
        .enumerate()
        .map(|(i, m)| (seeded_permutation(m.len(), seed.wrapping_add(i as u64)), 0))
        .collect();
    let mut picked: Vec<ManifestEntry> = Vec::with_capacity(n);
    'outer: loop {
        let mut progressed = false;
        for (src_idx, m) in manifests.iter().enumerate() {
            let (perm, cursor) = &mut cursors[src_idx];
            if *cursor < perm.len() {
                let entry = &m.entries[perm[*cursor]];
                *cursor += 1;
                let tag = if entry.source.is_empty() {
                    format!("src{src_idx}")
                } else {
                    entry.source.clone()
                };
                let mut e = entry.clone();
                e.id = format!("{tag}:{src_idx}:{}", entry.id);
                e.prev = m.base_dir.join(&entry.prev).to_string_lossy().into_owned();
                e.mid = m.base_dir.join(&entry.mid).to_string_lossy().into_owned();
                e.next = m.base_dir.join(&entry.next).to_string_lossy().into_owned();
                picked.push(e);
                progressed = true;
                if picked.len() == n {
                    break 'outer;
                }
            }
        }
        if !progressed {
            break;
        }
    }
    let order = seeded_permutation(picked.len(), seed ^ 0xa11);
    let entries = order.iter().map(|&i| picked[i].clone()).collect();
    Ok(DatasetManifest {
        format_version: 1,
        root: String::new(),
        entries,
        gen_config: None,
        // mixed entries carry absolute paths
        base_dir: PathBuf::new(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    fn small_cfg() -> GenConfig {
        GenConfig {
            image_size: 16,
            n_triplets: 6,
            max_shapes: 2,
            vel_min: 1.0,
            vel_max: 2.0,
            pan_mode: false,
            seed: 9,
        }
    }

    #[test]
    fn linear_motion_midpoint() {
        // one shape at x=2 in prev and x=6 in next must sit at x=4 in mid
        let scene = Scene {
            shapes: vec![Shape {
                kind: ShapeKind::Disc,
                cx: 4.0,
                cy: 8.0,
                half: 2.0,
                vx: 2.0,
                vy: 0.0,
                color: [1.0, 1.0, 1.0],
            }],
            bg: Array3::zeros((BG_GRID, BG_GRID, 3)),
            bg_vx: 0.0,
            bg_vy: 0.0,
            size: 16,
        };
        let centroid = |img: &Image| -> f64 {
            let mut sx = 0.0;
            let mut mass = 0.0;
            for y in 0..16 {
                for x in 0..16 {
                    let v = img.pixels[[y, x, 0]];
                    sx += v * (x as f64 + 0.5);
                    mass += v;
                }
            }
            sx / mass
        };
        let prev = render_scene(&scene, -1.0);
        let mid = render_scene(&scene, 0.0);
        let next = render_scene(&scene, 1.0);
        assert!((centroid(&prev) - 2.0).abs() < 0.1);
        assert!((centroid(&next) - 6.0).abs() < 0.1);
        assert!((centroid(&mid) - 4.0).abs() < 0.1);
        // exact midpoint of the two boundary centroids
        let avg = (centroid(&prev) + centroid(&next)) / 2.0;
        assert!((centroid(&mid) - avg).abs() < 0.05);
    }

    #[test]
    fn generator_is_byte_deterministic() {
        let cfg = small_cfg();
        let d1 = tempdir().unwrap();
        let d2 = tempdir().unwrap();
        generate_synthetic(&cfg, d1.path()).unwrap();
        generate_synthetic(&cfg, d2.path()).unwrap();
        for entry in ["triplets/t00000/prev.ppm", "triplets/t00003/mid.ppm"] {
            let a = fs::read(d1.path().join(entry)).unwrap();
            let b = fs::read(d2.path().join(entry)).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn manifest_counts_and_load() {
        let cfg = small_cfg();
        let dir = tempdir().unwrap();
        let manifest = generate_synthetic(&cfg, dir.path()).unwrap();
        assert_eq!(manifest.len(), 6);
        let ids: std::collections::BTreeSet<_> =
            manifest.entries.iter().map(|e| e.id.clone()).collect();
        assert_eq!(ids.len(), 6);
        let loaded = load_manifest(&dir.path().join("manifest.json")).unwrap();
        assert_eq!(loaded.len(), 6);
        let t = loaded.load_triplet(&loaded.entries[0]).unwrap();
        assert_eq!(t.prev.height(), 16);
    }

    #[test]
    fn manifest_rejects_missing_files() {
        let cfg = small_cfg();
        let dir = tempdir().unwrap();
        generate_synthetic(&cfg, dir.path()).unwrap();
        fs::remove_file(dir.path().join("triplets/t00002/mid.ppm")).unwrap();
        assert!(matches!(
            load_manifest(&dir.path().join("manifest.json")),
            Err(Error::Dataset(_))
        ));
    }

    #[test]
    fn few_shot_nesting_and_edges() {
        let cfg = GenConfig {
            n_triplets: 12,
            ..small_cfg()
        };
        let dir = tempdir().unwrap();
        let manifest = generate_synthetic(&cfg, dir.path()).unwrap();
        let s4 = few_shot_sample(&manifest, 4, 7).unwrap();
        let s8 = few_shot_sample(&manifest, 8, 7).unwrap();
        let ids8: std::collections::BTreeSet<_> = s8.entries.iter().map(|e| &e.id).collect();
        for e in &s4.entries {
            assert!(ids8.contains(&e.id), "prefix nesting violated");
        }
        // N = full size → same set
        let sfull = few_shot_sample(&manifest, 12, 7).unwrap();
        let all: std::collections::BTreeSet<_> = manifest.entries.iter().map(|e| &e.id).collect();
        let got: std::collections::BTreeSet<_> = sfull.entries.iter().map(|e| &e.id).collect();
        assert_eq!(all, got);
        // N = 0 → empty
        assert!(few_shot_sample(&manifest, 0, 7).unwrap().is_empty());
        // N too large → error
        assert!(few_shot_sample(&manifest, 13, 7).is_err());
    }

    #[test]
    fn mix_balances_equal_sources() {
        let cfg_a = GenConfig { n_triplets: 6, seed: 1, ..small_cfg() };
        let cfg_b = GenConfig { n_triplets: 6, seed: 2, ..small_cfg() };
        let da = tempdir().unwrap();
        let db = tempdir().unwrap();
        let ma = generate_synthetic(&cfg_a, da.path()).unwrap();
        let mb = generate_synthetic(&cfg_b, db.path()).unwrap();
        let mixed = mix_manifests(&[ma, mb], 8, 3).unwrap();
        assert_eq!(mixed.len(), 8);
        let from_a = mixed
            .entries
            .iter()
            .filter(|e| e.id.contains(":0:"))
            .count();
        let from_b = mixed.len() - from_a;
        assert!(from_a.abs_diff(from_b) <= 1, "{from_a} vs {from_b}");
        // source tags preserved in ids
        assert!(mixed.entries.iter().all(|e| e.id.starts_with("synthetic:")));
        // entries resolve
        let t = mixed.load_triplet(&mixed.entries[0]).unwrap();
        assert_eq!(t.mid.width(), 16);
    }

    #[test]
    fn mix_single_source_matches_few_shot_set() {
        let cfg = GenConfig { n_triplets: 10, ..small_cfg() };
        let dir = tempdir().unwrap();
        let m = generate_synthetic(&cfg, dir.path()).unwrap();
        let mixed = mix_manifests(std::slice::from_ref(&m), 5, 4).unwrap();
        let fs5 = few_shot_sample(&m, 5, 4 /* same base seed */).unwrap();
        let set_a: std::collections::BTreeSet<String> = mixed
            .entries
            .iter()
            .map(|e| e.id.rsplit(':').next().unwrap().to_string())
            .collect();
        let set_b: std::collections::BTreeSet<String> =
            fs5.entries.iter().map(|e| e.id.clone()).collect();
        assert_eq!(set_a, set_b);
    }

    #[test]
    fn mix_insufficient_data_rejected() {
        let cfg = small_cfg();
        let dir = tempdir().unwrap();
        let m = generate_synthetic(&cfg, dir.path()).unwrap();
        assert!(mix_manifests(std::slice::from_ref(&m), 7, 1).is_err());
    }
}
