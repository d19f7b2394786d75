//! Command-line front end: dataset generation, few-shot LoRA training,
//! single-pair interpolation, metric evaluation, and the ablation grid.

use std::path::PathBuf;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};

use edit2interp::ablate::{evaluate_model, run_ablation, train_few_shot};
use edit2interp::backbone::{init_backbone, BackboneParams};
use edit2interp::checkpoint::{apply_checkpoint, load_checkpoint, save_checkpoint};
use edit2interp::config::{load_run_config, RunConfig};
use edit2interp::data::{few_shot_sample, generate_synthetic, load_manifest, DatasetManifest, GenConfig};
use edit2interp::flow_matching::interpolate;
use edit2interp::lora::LoRAConfig;
use edit2interp::ppm;

#[derive(Parser)]
#[command(name = "edit2interp", version, about = "Few-shot LoRA frame interpolation on a frozen toy diffusion transformer")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArg {
    /// INI-style run configuration; flags override file values.
    #[arg(long)]
    config: Option<PathBuf>,
}

impl ConfigArg {
    fn load(&self) -> anyhow::Result<RunConfig> {
        match &self.config {
            Some(path) => load_run_config(path)
                .with_context(|| format!("reading config {}", path.display())),
            None => Ok(RunConfig::default()),
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic triplet dataset with a manifest.
    GenData {
        #[arg(long)]
        out: PathBuf,
        /// Number of triplets.
        #[arg(long)]
        n: usize,
        /// Square frame size in pixels.
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Maximum moving shapes per scene.
        #[arg(long, default_value_t = 4)]
        shapes: usize,
        /// Add a global background pan.
        #[arg(long)]
        pan: bool,
    },
    /// Train LoRA adapters on a few-shot subset and save a checkpoint.
    Train {
        /// Path to a dataset manifest.json.
        #[arg(long)]
        data: PathBuf,
        /// Number of training triplets (nested subsets across sizes).
        #[arg(long)]
        n_train: usize,
        #[arg(long, default_value_t = 8)]
        rank: usize,
        /// LoRA alpha; defaults to the rank.
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        batch: Option<usize>,
        #[command(flatten)]
        config: ConfigArg,
        /// Checkpoint output path.
        #[arg(long)]
        out: PathBuf,
        /// Loss-history JSON path (default: <out>.loss.json).
        #[arg(long)]
        history: Option<PathBuf>,
    },
    /// Interpolate the frame between two PPM images.
    Interpolate {
        /// LoRA checkpoint; omit to run the frozen baseline.
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        frame0: PathBuf,
        #[arg(long)]
        frame1: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 40)]
        steps: usize,
        #[arg(long, default_value_t = 0)]
        noise_seed: u64,
        #[command(flatten)]
        config: ConfigArg,
    },
    /// Evaluate a model over a dataset and write a metric report.
    Evaluate {
        /// LoRA checkpoint; omit to evaluate only the frozen baseline.
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        /// Report JSON output path.
        #[arg(long)]
        report: PathBuf,
        /// Comma-separated subset of {psnr,lpips,fid,flolpips,ps}.
        #[arg(long, value_delimiter = ',')]
        metrics: Option<Vec<String>>,
        /// Also evaluate the frozen baseline as a second row.
        #[arg(long)]
        with_baseline: bool,
        #[command(flatten)]
        config: ConfigArg,
    },
    /// Run the rank × data-size ablation grid.
    Ablate {
        #[arg(long, value_delimiter = ',', required = true)]
        ranks: Vec<usize>,
        #[arg(long, value_delimiter = ',', required = true)]
        sizes: Vec<usize>,
        #[arg(long)]
        data: PathBuf,
        /// Output directory for ablation.json / ablation.md.
        #[arg(long)]
        out: PathBuf,
        /// Held-out triplets taken from the end of the manifest.
        #[arg(long, default_value_t = 16)]
        eval_n: usize,
        #[command(flatten)]
        config: ConfigArg,
    },
}

/// Frame dimensions of a manifest, from the first prev frame.
fn manifest_dims(manifest: &DatasetManifest) -> anyhow::Result<(usize, usize)> {
    let entry = manifest
        .entries
        .first()
        .context("dataset manifest is empty")?;
    let triplet = manifest.load_triplet(entry)?;
    Ok((triplet.prev.height(), triplet.prev.width()))
}

fn base_for(run: &RunConfig, h: usize, w: usize) -> anyhow::Result<BackboneParams> {
    Ok(init_backbone(&run.backbone_config(h, w)?)?)
}

fn restrict_report(report: serde_json::Value, metrics: &[String]) -> anyhow::Result<serde_json::Value> {
    let serde_json::Value::Object(map) = report else {
        bail!("report row is not a JSON object");
    };
    let mut keep = vec!["n_samples".to_string()];
    for m in metrics {
        keep.push(match m.as_str() {
            "psnr" => "psnr_db".to_string(),
            "lpips" | "fid" | "flolpips" | "ps" => m.clone(),
            other => bail!("unknown metric '{other}' (expected psnr, lpips, fid, flolpips, ps)"),
        });
    }
    Ok(serde_json::Value::Object(
        map.into_iter().filter(|(k, _)| keep.contains(k)).collect(),
    ))
}

/// Split off the last `eval_n` entries as the held-out set.
fn split_manifest(
    manifest: &DatasetManifest,
    eval_n: usize,
) -> anyhow::Result<(DatasetManifest, DatasetManifest)> {
    if eval_n == 0 || eval_n >= manifest.len() {
        bail!(
            "eval-n must be in 1..{} for a dataset of {} triplets",
            manifest.len(),
            manifest.len()
        );
    }
    let cut = manifest.len() - eval_n;
    let mut train = manifest.clone();
    let mut eval = manifest.clone();
    eval.entries = train.entries.split_off(cut);
    Ok((train, eval))
}

fn main() -> anyhow::Result<()> {
    match Cli::parse().command {
        Command::GenData {
            out,
            n,
            size,
            seed,
            shapes,
            pan,
        } => {
            if n == 0 {
                bail!("n must be ≥ 1");
            }
            let cfg = GenConfig {
                image_size: size,
                n_triplets: n,
                max_shapes: shapes,
                pan_mode: pan,
                seed,
                ..GenConfig::default()
            };
            let manifest = generate_synthetic(&cfg, &out)?;
            println!(
                "wrote {} triplets to {}",
                manifest.len(),
                out.join("manifest.json").display()
            );
        }
        Command::Train {
            data,
            n_train,
            rank,
            alpha,
            epochs,
            batch,
            config,
            out,
            history,
        } => {
            let mut run = config.load()?;
            if let Some(e) = epochs {
                run.train.epochs = e;
            }
            if let Some(b) = batch {
                run.train.batch_size = b;
            }
            let manifest = load_manifest(&data)?;
            let subset = few_shot_sample(&manifest, n_train, run.seeds.data)?;
            let (h, w) = manifest_dims(&subset)?;
            let base = base_for(&run, h, w)?;
            let lora = LoRAConfig {
                rank,
                alpha: alpha.unwrap_or(rank as f64),
                init_seed: run.seeds.init,
                ..run.lora.clone()
            };
            let (model, loss) = train_few_shot(&base, &subset, &lora, &run)?;
            save_checkpoint(&model, &out)?;
            let history_path =
                history.unwrap_or_else(|| out.with_extension("loss.json"));
            std::fs::write(&history_path, serde_json::to_vec_pretty(&loss)?)?;
            println!(
                "trained rank-{rank} on {} triplets; final epoch loss {:.6}; checkpoint {}",
                subset.len(),
                loss.per_epoch_mean.last().copied().unwrap_or(f64::NAN),
                out.display()
            );
        }
        Command::Interpolate {
            ckpt,
            frame0,
            frame1,
            out,
            steps,
            noise_seed,
            config,
        } => {
            let mut run = config.load()?;
            run.sampler.steps = steps;
            run.seeds.noise = noise_seed;
            let i0 = ppm::read_image(&frame0)?;
            let i1 = ppm::read_image(&frame1)?;
            let (base, adapters) = match ckpt {
                Some(path) => {
                    let ckpt = load_checkpoint(&path)?;
                    run.lora = ckpt.header.lora.clone();
                    let base = init_backbone(&ckpt.header.backbone)?;
                    let model = apply_checkpoint(&base, &ckpt)?;
                    (base, Some(model.adapters))
                }
                None => (base_for(&run, i0.height(), i0.width())?, None),
            };
            let mid = interpolate(
                &base,
                adapters.as_ref(),
                &i0,
                &i1,
                &run.prompt,
                &run.codec,
                &run.semantic_config(),
                run.seeds.init,
                &run.sampler_config(),
            )?;
            ppm::write_image(&mid, &out)?;
            println!("wrote {}", out.display());
        }
        Command::Evaluate {
            ckpt,
            data,
            report,
            metrics,
            with_baseline,
            config,
        } => {
            let run = config.load()?;
            let manifest = load_manifest(&data)?;
            let (h, w) = manifest_dims(&manifest)?;
            let mut rows = Vec::new();
            match ckpt {
                Some(path) => {
                    let ckpt = load_checkpoint(&path)?;
                    let base = init_backbone(&ckpt.header.backbone)?;
                    let model = apply_checkpoint(&base, &ckpt)?;
                    let echo = serde_json::json!({
                        "model": "lora",
                        "rank": ckpt.header.lora.rank,
                        "sampler_steps": run.sampler.steps,
                    });
                    rows.push(serde_json::to_value(evaluate_model(
                        &base,
                        Some(&model.adapters),
                        &manifest,
                        &run,
                        echo,
                    )?)?);
                    if with_baseline {
                        let echo = serde_json::json!({ "model": "frozen-baseline" });
                        rows.push(serde_json::to_value(evaluate_model(
                            &base, None, &manifest, &run, echo,
                        )?)?);
                    }
                }
                None => {
                    let base = base_for(&run, h, w)?;
                    let echo = serde_json::json!({ "model": "frozen-baseline" });
                    rows.push(serde_json::to_value(evaluate_model(
                        &base, None, &manifest, &run, echo,
                    )?)?);
                }
            }
            if let Some(metrics) = &metrics {
                rows = rows
                    .into_iter()
                    .map(|r| restrict_report(r, metrics))
                    .collect::<anyhow::Result<_>>()?;
            }
            std::fs::write(&report, serde_json::to_vec_pretty(&rows)?)?;
            println!("wrote {} row(s) to {}", rows.len(), report.display());
        }
        Command::Ablate {
            ranks,
            sizes,
            data,
            out,
            eval_n,
            config,
        } => {
            let run = config.load()?;
            let manifest = load_manifest(&data)?;
            let (train_set, eval_set) = split_manifest(&manifest, eval_n)?;
            let (h, w) = manifest_dims(&train_set)?;
            let base = base_for(&run, h, w)?;
            let result = run_ablation(&base, &train_set, &eval_set, &ranks, &sizes, &run)?;
            std::fs::create_dir_all(&out)?;
            std::fs::write(out.join("ablation.json"), serde_json::to_vec_pretty(&result)?)?;
            std::fs::write(out.join("ablation.md"), result.to_markdown())?;
            for w in &result.warnings {
                eprintln!("WARNING: {w}");
            }
            println!(
                "wrote {} rows to {}",
                result.rows.len(),
                out.join("ablation.md").display()
            );
        }
    }
    Ok(())
}
