//! Run configuration: flat INI-style sections with explicit seeds.
//! Unknown sections or keys are rejected. CLI flags override file values.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backbone::BackboneConfig;
use crate::conditioning::{CodecConfig, SemanticConfig, DEFAULT_PROMPT};
use crate::data::GenConfig;
use crate::error::{Error, Result};
use crate::flow_matching::{SamplerConfig, TimestepDist, TrainConfig};
use crate::lora::LoRAConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Seeds {
    pub init: u64,
    pub data: u64,
    pub noise: u64,
    pub train: u64,
}

impl Default for Seeds {
    fn default() -> Self {
        Seeds {
            init: 0,
            data: 1,
            noise: 2,
            train: 3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneSection {
    pub d_model: usize,
    pub n_blocks: usize,
    pub n_heads: usize,
    pub mlp_ratio: usize,
    pub k_semantic: usize,
}

impl Default for BackboneSection {
    fn default() -> Self {
        BackboneSection {
            d_model: 64,
            n_blocks: 4,
            n_heads: 4,
            mlp_ratio: 4,
            k_semantic: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub codec: CodecConfig,
    pub backbone: BackboneSection,
    pub lora: LoRAConfig,
    pub train: TrainConfig,
    pub sampler: SamplerConfig,
    pub data: GenConfig,
    pub prompt: String,
    pub seeds: Seeds,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            codec: CodecConfig::default(),
            backbone: BackboneSection::default(),
            lora: LoRAConfig::default(),
            train: TrainConfig::default(),
            sampler: SamplerConfig::default(),
            data: GenConfig::default(),
            prompt: DEFAULT_PROMPT.to_string(),
            seeds: Seeds::default(),
        }
    }
}

impl RunConfig {
    /// Backbone dims follow the image size through the codec.
    pub fn backbone_config(&self, image_h: usize, image_w: usize) -> Result<BackboneConfig> {
        let p = self.codec.patch_factor;
        if image_h % p != 0 || image_w % p != 0 {
            return Err(Error::Config(format!(
                "image {image_h}x{image_w} not divisible by patch factor {p}"
            )));
        }
        Ok(BackboneConfig {
            d_model: self.backbone.d_model,
            n_blocks: self.backbone.n_blocks,
            n_heads: self.backbone.n_heads,
            mlp_ratio: self.backbone.mlp_ratio,
            k_semantic: self.backbone.k_semantic,
            d_semantic: self.backbone.d_model,
            latent_channels: self.codec.latent_channels(),
            grid_h: image_h / p,
            grid_w: image_w / p,
            init_seed: self.seeds.init,
        })
    }

    pub fn semantic_config(&self) -> SemanticConfig {
        SemanticConfig {
            k_tokens: self.backbone.k_semantic,
            d_model: self.backbone.d_model,
            pool_grid: 4,
        }
    }

    pub fn gen_config(&self) -> GenConfig {
        GenConfig {
            seed: self.seeds.data,
            ..self.data
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            grad_seed: self.seeds.train,
            ..self.train
        }
    }

    pub fn sampler_config(&self) -> SamplerConfig {
        SamplerConfig {
            noise_seed: self.seeds.noise,
            ..self.sampler
        }
    }
}

fn parse_u(v: &str, key: &str) -> Result<u64> {
    v.parse()
        .map_err(|_| Error::Config(format!("key '{key}': expected integer, got '{v}'")))
}

fn parse_f(v: &str, key: &str) -> Result<f64> {
    v.parse()
        .map_err(|_| Error::Config(format!("key '{key}': expected number, got '{v}'")))
}

fn parse_b(v: &str, key: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!(
            "key '{key}': expected boolean, got '{v}'"
        ))),
    }
}

/// Parse INI-style text over the defaults. `#` and `;` start comments.
pub fn parse_run_config(text: &str) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    let mut section = String::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw
            .split(['#', ';'])
            .next()
            .unwrap_or("")
            .trim();
        if line.is_empty() {
            continue;
        }
        if let Some(name) = line.strip_prefix('[').and_then(|s| s.strip_suffix(']')) {
            section = name.trim().to_string();
            match section.as_str() {
                "codec" | "backbone" | "lora" | "train" | "sampler" | "data" | "run"
                | "seeds" => {}
                other => {
                    return Err(Error::Config(format!(
                        "line {}: unknown section '[{other}]'",
                        lineno + 1
                    )))
                }
            }
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(Error::Config(format!(
                "line {}: expected 'key = value', got '{line}'",
                lineno + 1
            )));
        };
        let key = key.trim();
        let value = value.trim();
        apply_key(&mut cfg, &section, key, value)?;
    }
    Ok(cfg)
}

fn apply_key(cfg: &mut RunConfig, section: &str, key: &str, value: &str) -> Result<()> {
    let full = format!("{section}.{key}");
    match (section, key) {
        ("codec", "patch_factor") => cfg.codec.patch_factor = parse_u(value, &full)? as usize,
        ("codec", "mix_seed") => cfg.codec.mix_seed = parse_u(value, &full)?,
        ("backbone", "d_model") => cfg.backbone.d_model = parse_u(value, &full)? as usize,
        ("backbone", "n_blocks") => cfg.backbone.n_blocks = parse_u(value, &full)? as usize,
        ("backbone", "n_heads") => cfg.backbone.n_heads = parse_u(value, &full)? as usize,
        ("backbone", "mlp_ratio") => cfg.backbone.mlp_ratio = parse_u(value, &full)? as usize,
        ("backbone", "k_semantic") => cfg.backbone.k_semantic = parse_u(value, &full)? as usize,
        ("lora", "rank") => cfg.lora.rank = parse_u(value, &full)? as usize,
        ("lora", "alpha") => cfg.lora.alpha = parse_f(value, &full)?,
        ("lora", "targets") => {
            cfg.lora.target_patterns = value
                .split(',')
                .map(|s| s.trim().to_string())
                .filter(|s| !s.is_empty())
                .collect();
        }
        ("train", "learning_rate") => cfg.train.learning_rate = parse_f(value, &full)?,
        ("train", "epochs") => cfg.train.epochs = parse_u(value, &full)? as usize,
        ("train", "batch_size") => cfg.train.batch_size = parse_u(value, &full)? as usize,
        ("train", "beta1") => cfg.train.beta1 = parse_f(value, &full)?,
        ("train", "beta2") => cfg.train.beta2 = parse_f(value, &full)?,
        ("train", "weight_decay") => cfg.train.weight_decay = parse_f(value, &full)?,
        ("train", "eps") => cfg.train.eps = parse_f(value, &full)?,
        ("train", "timestep_dist") => {
            cfg.train.timestep_dist = match value {
                "uniform" => TimestepDist::Uniform,
                "logit-normal" => TimestepDist::LogitNormal,
                other => {
                    return Err(Error::Config(format!(
                        "key '{full}': unknown timestep distribution '{other}'"
                    )))
                }
            }
        }
        ("sampler", "steps") => cfg.sampler.steps = parse_u(value, &full)? as usize,
        ("sampler", "guidance_scale") => cfg.sampler.guidance_scale = parse_f(value, &full)?,
        ("data", "image_size") => cfg.data.image_size = parse_u(value, &full)? as usize,
        ("data", "n_triplets") => cfg.data.n_triplets = parse_u(value, &full)? as usize,
        ("data", "max_shapes") => cfg.data.max_shapes = parse_u(value, &full)? as usize,
        ("data", "vel_min") => cfg.data.vel_min = parse_f(value, &full)?,
        ("data", "vel_max") => cfg.data.vel_max = parse_f(value, &full)?,
        ("data", "pan_mode") => cfg.data.pan_mode = parse_b(value, &full)?,
        ("run", "prompt") => cfg.prompt = value.to_string(),
        ("seeds", "init") => cfg.seeds.init = parse_u(value, &full)?,
        ("seeds", "data") => cfg.seeds.data = parse_u(value, &full)?,
        ("seeds", "noise") => cfg.seeds.noise = parse_u(value, &full)?,
        ("seeds", "train") => cfg.seeds.train = parse_u(value, &full)?,
        _ => {
            return Err(Error::Config(format!(
                "unknown configuration key '{full}'"
            )))
        }
    }
    Ok(())
}

pub fn load_run_config(path: &Path) -> Result<RunConfig> {
    parse_run_config(&std::fs::read_to_string(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_parse_and_override() {
        let cfg = parse_run_config(
            "[lora]\nrank = 4\nalpha = 8\n[train]\nepochs = 2 # quick\n[seeds]\nnoise = 42\n",
        )
        .unwrap();
        assert_eq!(cfg.lora.rank, 4);
        assert_eq!(cfg.lora.alpha, 8.0);
        assert_eq!(cfg.train.epochs, 2);
        assert_eq!(cfg.seeds.noise, 42);
        assert_eq!(cfg.sampler.steps, 40);
        assert_eq!(cfg.train.learning_rate, 1e-4);
    }

    #[test]
    fn unknown_key_rejected() {
        assert!(matches!(
            parse_run_config("[lora]\nranks = 4\n"),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            parse_run_config("[nope]\nx = 1\n"),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn backbone_follows_image_size() {
        let cfg = RunConfig::default();
        let b = cfg.backbone_config(32, 32).unwrap();
        assert_eq!(b.grid_h, 16);
        assert_eq!(b.latent_channels, 12);
        assert!(cfg.backbone_config(33, 32).is_err());
    }
}
