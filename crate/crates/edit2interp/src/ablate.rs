//! Shared train/evaluate pipeline and the rank × data-size ablation grid.
//!
//! Cells share one permutation of the training manifest, so smaller subsets
//! are strict prefixes of larger ones and rows differ only in what the extra
//! data buys. Trend violations are reported as warnings, never failures.

use serde::{Deserialize, Serialize};

use crate::backbone::{AdapterMap, BackboneParams};
use crate::conditioning::encode_image;
use crate::config::RunConfig;
use crate::data::{few_shot_sample, DatasetManifest};
use crate::error::{Error, Result};
use crate::flow_matching::{interpolate, FmSample, LossHistory};
use crate::lora::{inject, AdaptedModel, LoRAConfig};
use crate::metrics::{evaluate_dataset, MetricReport, RandomProjExtractor};

/// Encode every triplet of a manifest into a flow-matching sample:
/// the mid frame is the latent target, the outer frames condition it.
pub fn build_samples(manifest: &DatasetManifest, run: &RunConfig) -> Result<Vec<FmSample>> {
    let sem = run.semantic_config();
    let mut out = Vec::with_capacity(manifest.len());
    for entry in &manifest.entries {
        let triplet = manifest.load_triplet(entry)?;
        let z_target = encode_image(&triplet.mid, &run.codec)?;
        let cond = crate::conditioning::build_conditioning(
            &triplet.prev,
            &triplet.next,
            &run.prompt,
            &run.codec,
            &sem,
            run.seeds.init,
        )?;
        out.push(FmSample { z_target, cond });
    }
    Ok(out)
}

/// Inject adapters into a frozen base and train them on a manifest.
pub fn train_few_shot(
    base: &BackboneParams,
    manifest: &DatasetManifest,
    lora: &LoRAConfig,
    run: &RunConfig,
) -> Result<(AdaptedModel, LossHistory)> {
    let samples = build_samples(manifest, run)?;
    let mut model = inject(base, lora)?;
    let history = crate::flow_matching::train(&mut model, &samples, &run.train_config())?;
    Ok((model, history))
}

/// Evaluate a (possibly adapted) model over a held-out manifest.
pub fn evaluate_model(
    base: &BackboneParams,
    adapters: Option<&AdapterMap>,
    manifest: &DatasetManifest,
    run: &RunConfig,
    config_echo: serde_json::Value,
) -> Result<MetricReport> {
    let sem = run.semantic_config();
    let sampler = run.sampler_config();
    let fx = RandomProjExtractor::new(run.seeds.init);
    evaluate_dataset(
        |prev, next| {
            interpolate(
                base,
                adapters,
                prev,
                next,
                &run.prompt,
                &run.codec,
                &sem,
                run.seeds.init,
                &sampler,
            )
        },
        manifest,
        &fx,
        config_echo,
    )
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationRow {
    pub label: String,
    /// `None` marks the frozen-baseline row.
    pub rank: Option<usize>,
    pub n_train: usize,
    pub report: MetricReport,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationResult {
    pub rows: Vec<AblationRow>,
    pub warnings: Vec<String>,
}

impl AblationResult {
    pub fn to_markdown(&self) -> String {
        let mut s = String::from(
            "| model | rank | N | PSNR (dB) | LPIPS | FID | FloLPIPS | PS |\n\
             |---|---|---|---|---|---|---|---|\n",
        );
        for row in &self.rows {
            let rank = row
                .rank
                .map(|r| r.to_string())
                .unwrap_or_else(|| "-".into());
            let n = if row.rank.is_some() {
                row.n_train.to_string()
            } else {
                "-".into()
            };
            s.push_str(&format!(
                "| {} | {} | {} | {:.2} | {:.4} | {:.4} | {:.4} | {:.2} |\n",
                row.label,
                rank,
                n,
                row.report.psnr_db,
                row.report.lpips,
                row.report.fid,
                row.report.flolpips,
                row.report.ps
            ));
        }
        if !self.warnings.is_empty() {
            s.push('\n');
            for w in &self.warnings {
                s.push_str(&format!("WARNING: {w}\n"));
            }
        }
        s
    }
}

/// PSNR is expected to be (nearly) non-decreasing in N at fixed rank.
/// A drop of more than this tolerance emits a warning.
const TREND_TOLERANCE_DB: f64 = 0.1;

fn trend_warnings(rows: &[AblationRow]) -> Vec<String> {
    let mut warnings = Vec::new();
    let mut ranks: Vec<usize> = rows.iter().filter_map(|r| r.rank).collect();
    ranks.sort_unstable();
    ranks.dedup();
    for rank in ranks {
        let mut cells: Vec<&AblationRow> =
            rows.iter().filter(|r| r.rank == Some(rank)).collect();
        cells.sort_by_key(|r| r.n_train);
        for pair in cells.windows(2) {
            let (lo, hi) = (pair[0], pair[1]);
            if hi.report.psnr_db < lo.report.psnr_db - TREND_TOLERANCE_DB {
                warnings.push(format!(
                    "rank {rank}: PSNR fell from {:.2} dB (N={}) to {:.2} dB (N={})",
                    lo.report.psnr_db, lo.n_train, hi.report.psnr_db, hi.n_train
                ));
            }
        }
    }
    warnings
}

/// Train and evaluate every (rank, N) cell plus a frozen-baseline row.
/// Subsets of the training manifest are nested across N. Any cell failure
/// aborts the whole grid with the cell id in the error.
pub fn run_ablation(
    base: &BackboneParams,
    train_manifest: &DatasetManifest,
    eval_manifest: &DatasetManifest,
    ranks: &[usize],
    sizes: &[usize],
    run: &RunConfig,
) -> Result<AblationResult> {
    if ranks.is_empty() || sizes.is_empty() {
        return Err(Error::Config("ablation grid must be non-empty".into()));
    }
    let mut rows = Vec::with_capacity(ranks.len() * sizes.len() + 1);

    let echo = |rank: Option<usize>, n: usize| {
        serde_json::json!({
            "rank": rank,
            "n_train": n,
            "epochs": run.train.epochs,
            "sampler_steps": run.sampler.steps,
        })
    };
    let baseline = evaluate_model(base, None, eval_manifest, run, echo(None, 0))
        .map_err(|e| Error::Config(format!("ablation cell baseline: {e}")))?;
    rows.push(AblationRow {
        label: "frozen-baseline".into(),
        rank: None,
        n_train: 0,
        report: baseline,
    });

    for &rank in ranks {
        for &n in sizes {
            let cell = format!("r{rank}-N{n}");
            let subset = few_shot_sample(train_manifest, n, run.seeds.data)
                .map_err(|e| Error::Config(format!("ablation cell {cell}: {e}")))?;
            let lora = LoRAConfig {
                rank,
                alpha: rank as f64,
                init_seed: run.seeds.init,
                ..run.lora.clone()
            };
            let (model, _history) = train_few_shot(base, &subset, &lora, run)
                .map_err(|e| Error::Config(format!("ablation cell {cell}: {e}")))?;
            let report = evaluate_model(
                base,
                Some(&model.adapters),
                eval_manifest,
                run,
                echo(Some(rank), n),
            )
            .map_err(|e| Error::Config(format!("ablation cell {cell}: {e}")))?;
            rows.push(AblationRow {
                label: format!("LoRA-{cell}"),
                rank: Some(rank),
                n_train: n,
                report,
            });
        }
    }

    let warnings = trend_warnings(&rows);
    Ok(AblationResult { rows, warnings })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::MetricReport;

    fn row(rank: Option<usize>, n: usize, psnr: f64) -> AblationRow {
        AblationRow {
            label: "x".into(),
            rank,
            n_train: n,
            report: MetricReport {
                psnr_db: psnr,
                lpips: 0.0,
                fid: 0.0,
                flolpips: 0.0,
                ps: 0.0,
                n_samples: 1,
                config: serde_json::Value::Null,
            },
        }
    }

    #[test]
    fn trend_warns_only_on_real_drops() {
        let rows = vec![
            row(None, 0, 10.0),
            row(Some(4), 16, 20.0),
            row(Some(4), 32, 19.95), // within tolerance
            row(Some(4), 64, 18.0),  // real drop
            row(Some(8), 16, 21.0),
            row(Some(8), 32, 22.0),
        ];
        let warnings = trend_warnings(&rows);
        assert_eq!(warnings.len(), 1);
        assert!(warnings[0].contains("rank 4"));
        assert!(warnings[0].contains("N=64"));
    }

    #[test]
    fn markdown_has_one_row_per_cell() {
        let result = AblationResult {
            rows: vec![row(None, 0, 10.0), row(Some(8), 16, 20.0)],
            warnings: vec!["w".into()],
        };
        let md = result.to_markdown();
        assert_eq!(md.lines().filter(|l| l.starts_with("| ")).count(), 3); // header + 2 rows
        assert!(md.contains("WARNING: w"));
    }
}
