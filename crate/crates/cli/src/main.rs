mod config;
mod output;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use gradrep::eval::{
    ablation_variants, auroc, few_shot, kfold, pixel_auroc, record_mask, render_table,
    run_pipeline, EvalReport, FEW_SHOT_KS, FEW_SHOT_SEEDS,
};
use gradrep::learner::Mapping;
use gradrep::manifest::{load_manifest, SampleRecord};
use gradrep::scorer::{ImageScoreMode, ScoreConfig, Scorer};
use gradrep::snapshot::{load_model, load_repository};
use gradrep::synth::{write_dataset, SynthConfig};
use serde::Serialize;

use config::PipelineArgs;
use output::{create_dir, report_text, write_attention, write_json, write_run, write_scores_csv, write_text};

const EXIT_INPUT: u8 = 2;
const EXIT_TRAINING: u8 = 3;

/// Anomaly detection on pre-extracted feature tensors.
#[derive(Debug, Parser)]
#[command(name = "gradrep", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Build the repository, train the mapping, score the test split and
    /// write every artifact.
    Run {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        pipeline: PipelineArgs,
    },
    /// Run the full pipeline and its component-ablated variants.
    Ablate {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        pipeline: PipelineArgs,
    },
    /// Train on k randomly drawn normal images, over several seeds.
    Fewshot {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Shot counts to evaluate (repeatable); defaults to 1, 2, 4, 8, 16.
        #[arg(long = "fewshot-k")]
        fewshot_k: Vec<usize>,
        /// Seeds per shot count, starting at --seed.
        #[arg(long, default_value_t = FEW_SHOT_SEEDS)]
        seeds: usize,
        #[command(flatten)]
        pipeline: PipelineArgs,
    },
    /// Cross-validate over the normal samples of both splits.
    Kfold {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 5)]
        folds: usize,
        #[command(flatten)]
        pipeline: PipelineArgs,
    },
    /// Score the test split with the repository and model saved by `run`.
    ScoreOnly {
        #[arg(long)]
        manifest: PathBuf,
        /// Output directory of an earlier `run`.
        #[arg(long)]
        from: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_name = "max|mean-topk")]
        image_score: Option<ImageScoreMode>,
        #[arg(long)]
        sigma: Option<f64>,
    },
    /// Write a synthetic dataset with planted anomalies.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Patch shift in standard deviations.
        #[arg(long, default_value_t = 3.0)]
        offset: f64,
        #[arg(long, default_value_t = 32)]
        channels: usize,
        #[arg(long, default_value_t = 28)]
        size: usize,
        #[arg(long, default_value_t = 40)]
        train: usize,
        #[arg(long, default_value_t = 20)]
        test_normal: usize,
        #[arg(long, default_value_t = 20)]
        test_anomalous: usize,
    },
}

fn configure_threads() -> Result<()> {
    let Ok(value) = std::env::var("GRADREP_THREADS") else {
        return Ok(());
    };
    let threads: usize = value
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .with_context(|| format!("GRADREP_THREADS must be a positive integer, got {value:?}"))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .context("configuring the thread pool")
}

fn cmd_run(manifest: &Path, out: &Path, pipeline: &PipelineArgs) -> Result<()> {
    let config = pipeline.resolve()?;
    let manifest = load_manifest(manifest)?;
    let run = run_pipeline(&manifest, &config)?;
    write_run(out, &run, &config)?;
    print!("{}", report_text(&run.report));
    Ok(())
}

#[derive(Serialize)]
struct AblationRow<'a> {
    variant: &'a str,
    report: &'a EvalReport,
}

fn cmd_ablate(manifest: &Path, out: &Path, pipeline: &PipelineArgs) -> Result<()> {
    let config = pipeline.resolve()?;
    let manifest = load_manifest(manifest)?;
    let mut reports = Vec::new();
    for (name, variant) in ablation_variants(&config) {
        reports.push((name.to_string(), run_pipeline(&manifest, &variant)?.report));
    }
    create_dir(out)?;
    let rows: Vec<AblationRow> = reports
        .iter()
        .map(|(variant, report)| AblationRow { variant, report })
        .collect();
    write_json(&out.join("ablation.json"), &rows)?;
    let table = render_table(&reports.iter().map(|(n, r)| (n.clone(), r)).collect::<Vec<_>>());
    write_text(&out.join("ablation.txt"), &table)?;
    print!("{table}");
    Ok(())
}

fn cmd_fewshot(
    manifest: &Path,
    out: &Path,
    ks: &[usize],
    seeds: usize,
    pipeline: &PipelineArgs,
) -> Result<()> {
    let config = pipeline.resolve()?;
    let manifest = load_manifest(manifest)?;
    let ks = if ks.is_empty() { FEW_SHOT_KS.to_vec() } else { ks.to_vec() };
    let seeds: Vec<u64> = (0..seeds as u64).map(|i| config.seed.wrapping_add(i)).collect();
    let mut reports = Vec::new();
    let mut table = format!("{:>4}  {:>9}  {:>9}  per-seed image\n", "k", "image", "pixel");
    for k in ks {
        let report = few_shot(&manifest, &config, k, &seeds)?;
        let per_seed: Vec<String> = report
            .runs
            .iter()
            .map(|r| format!("{:.1}", 100.0 * r.image_auroc))
            .collect();
        table += &format!(
            "{:>4}  {:>9.1}  {:>9}  {}\n",
            k,
            100.0 * report.mean_image_auroc,
            report
                .mean_pixel_auroc
                .map(|v| format!("{:.1}", 100.0 * v))
                .unwrap_or_else(|| "-".into()),
            per_seed.join(" ")
        );
        reports.push(report);
    }
    create_dir(out)?;
    write_json(&out.join("fewshot.json"), &reports)?;
    let mut curve = String::from("k,seed,image_auroc,pixel_auroc\n");
    for report in &reports {
        for run in &report.runs {
            let pixel = run.pixel_auroc.map(|p| p.to_string()).unwrap_or_default();
            curve += &format!("{},{},{},{pixel}\n", report.k, run.seed, run.image_auroc);
        }
    }
    write_text(&out.join("fewshot.csv"), &curve)?;
    write_text(&out.join("fewshot.txt"), &table)?;
    print!("{table}");
    Ok(())
}

fn cmd_kfold(manifest: &Path, out: &Path, folds: usize, pipeline: &PipelineArgs) -> Result<()> {
    let config = pipeline.resolve()?;
    let manifest = load_manifest(manifest)?;
    let report = kfold(&manifest, &config, folds)?;
    create_dir(out)?;
    write_json(&out.join("kfold.json"), &report)?;
    let rows: Vec<(String, &EvalReport)> = report
        .runs
        .iter()
        .enumerate()
        .map(|(i, r)| (format!("fold {}", i + 1), r))
        .collect();
    let mut table = render_table(&rows);
    table += &format!("mean image AUROC {:.1}", 100.0 * report.mean_image_auroc);
    if let Some(p) = report.mean_pixel_auroc {
        table += &format!(", mean pixel AUROC {:.1}", 100.0 * p);
    }
    table.push('\n');
    write_text(&out.join("kfold.txt"), &table)?;
    print!("{table}");
    Ok(())
}

#[derive(Serialize)]
struct ScoreOnlyMetrics {
    test_samples: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    image_auroc: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pixel_auroc: Option<f64>,
}

fn cmd_score_only(
    manifest_path: &Path,
    from: &Path,
    out: &Path,
    image_score: Option<ImageScoreMode>,
    sigma: Option<f64>,
) -> Result<()> {
    let manifest = load_manifest(manifest_path)?;
    let repository = load_repository(from.join("repository"))?;
    let mapping = if from.join("model").join("model.json").exists() {
        Mapping::Mlp(load_model(from.join("model"))?.0)
    } else {
        Mapping::Identity
    };
    let defaults = ScoreConfig::default();
    let config = ScoreConfig {
        image_score: image_score.unwrap_or(defaults.image_score),
        sigma: sigma.unwrap_or(defaults.sigma),
    };
    let scorer = Scorer::new(mapping, &repository, config)?;
    let test: Vec<&SampleRecord> = manifest.test().collect();
    if test.is_empty() {
        bail!("manifest {} has no test samples", manifest_path.display());
    }
    let results = scorer.score_all(&test, &manifest)?;

    // Metrics only when both classes are present.
    let labels: Vec<bool> = results.iter().map(|r| r.label.is_anomalous()).collect();
    let both = labels.contains(&true) && labels.contains(&false);
    let image_auroc = if both {
        let scores: Vec<f64> = results.iter().map(|r| r.image_score).collect();
        Some(auroc(&scores, &labels)?)
    } else {
        None
    };
    let pixel = if both && manifest.has_masks() {
        let masks = test
            .iter()
            .map(|r| record_mask(r, &manifest))
            .collect::<gradrep::Result<Vec<_>>>()?;
        Some(pixel_auroc(&results, &masks)?)
    } else {
        None
    };

    create_dir(out)?;
    write_scores_csv(&out.join("scores.csv"), &results)?;
    write_attention(&out.join("attention"), &results)?;
    let metrics = ScoreOnlyMetrics {
        test_samples: results.len(),
        image_auroc,
        pixel_auroc: pixel,
    };
    write_json(&out.join("metrics.json"), &metrics)?;
    println!("scored {} test samples", results.len());
    if let Some(a) = image_auroc {
        println!("image AUROC {a:.4}");
    }
    if let Some(p) = pixel {
        println!("pixel AUROC {p:.4}");
    }
    Ok(())
}

fn execute(cli: Cli) -> Result<()> {
    configure_threads()?;
    match cli.command {
        Command::Run { manifest, out, pipeline } => cmd_run(&manifest, &out, &pipeline),
        Command::Ablate { manifest, out, pipeline } => cmd_ablate(&manifest, &out, &pipeline),
        Command::Fewshot { manifest, out, fewshot_k, seeds, pipeline } => {
            cmd_fewshot(&manifest, &out, &fewshot_k, seeds, &pipeline)
        }
        Command::Kfold { manifest, out, folds, pipeline } => cmd_kfold(&manifest, &out, folds, &pipeline),
        Command::ScoreOnly { manifest, from, out, image_score, sigma } => {
            cmd_score_only(&manifest, &from, &out, image_score, sigma)
        }
        Command::Synth { out, seed, offset, channels, size, train, test_normal, test_anomalous } => {
            let config = SynthConfig {
                seed,
                offset,
                channels,
                size,
                train,
                test_normal,
                test_anomalous,
                ..SynthConfig::default()
            };
            let (path, manifest) = write_dataset(&config, &out)?;
            println!("wrote {} samples, manifest {}", manifest.samples.len(), path.display());
            Ok(())
        }
    }
}

/// `error[module]: cause` on one line, and the exit code for the failure.
fn diagnose(err: &anyhow::Error) -> (String, u8) {
    let core = err.chain().find_map(|e| e.downcast_ref::<gradrep::Error>());
    let module = core.map_or("cli", |e| e.module());
    let code = if core.is_some_and(|e| e.is_training()) {
        EXIT_TRAINING
    } else {
        EXIT_INPUT
    };
    let message = format!("{err:#}").replace(['\n', '\r'], " ");
    (format!("error[{module}]: {message}"), code)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let (line, code) = diagnose(&err);
            eprintln!("{line}");
            ExitCode::from(code)
        }
    }
}
