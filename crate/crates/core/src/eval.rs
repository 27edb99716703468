//! Metrics and evaluation protocols.

use std::fmt::Write as _;

use rand::seq::{index, SliceRandom};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::ingest::load_features;
use crate::learner::{self, Mapping, StopReason, TrainConfig, TrainHistory};
use crate::manifest::{load_mask, DatasetManifest, Label, SampleRecord, Split};
use crate::rng;
use crate::scorer::{AnomalyResult, ImageScoreMode, ScoreConfig, Scorer};
use crate::selector::{build_repository, Repository, SelectionMode};

/// Area under the ROC curve via the Mann-Whitney statistic with average ranks
/// for ties. `labels[i]` is true for positives (anomalies).
pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Metric(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Metric("NaN score".into()));
    }
    let positives = labels.iter().filter(|l| **l).count() as u64;
    let negatives = labels.len() as u64 - positives;
    if positives == 0 || negatives == 0 {
        return Err(Error::Metric(
            "AUROC needs at least one positive and one negative".into(),
        ));
    }

    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_unstable_by(|&a, &b| scores[a].total_cmp(&scores[b]));

    // Twice the positive rank sum, kept integral: a tie group occupying sorted
    // positions [start, end) shares the rank (start + 1 + end) / 2.
    let mut doubled_rank_sum: u128 = 0;
    let mut start = 0;
    while start < order.len() {
        let value = scores[order[start]];
        let mut end = start + 1;
        while end < order.len() && scores[order[end]] == value {
            end += 1;
        }
        let group_positives = order[start..end].iter().filter(|&&i| labels[i]).count() as u128;
        doubled_rank_sum += group_positives * (start as u128 + 1 + end as u128);
        start = end;
    }
    let doubled_u = doubled_rank_sum - (positives as u128) * (positives as u128 + 1);
    Ok(doubled_u as f64 / (2 * positives as u128 * negatives as u128) as f64)
}

/// Ground-truth mask of a test record at image resolution. Normal records
/// without a mask count as all-normal.
pub fn record_mask(record: &SampleRecord, manifest: &DatasetManifest) -> Result<Vec<bool>> {
    match (&record.mask_path, record.label) {
        (Some(path), _) => load_mask(path, manifest.image_height, manifest.image_width),
        (None, Label::Normal) => Ok(vec![false; manifest.image_height * manifest.image_width]),
        (None, Label::Anomalous) => Err(Error::Metric(format!(
            "anomalous test sample {:?} has no ground-truth mask",
            record.id
        ))),
    }
}

/// AUROC over all attention-map pixels of all results, pooled.
pub fn pixel_auroc(results: &[AnomalyResult], masks: &[Vec<bool>]) -> Result<f64> {
    if results.len() != masks.len() {
        return Err(Error::Metric(format!(
            "{} results but {} masks",
            results.len(),
            masks.len()
        )));
    }
    let total: usize = masks.iter().map(Vec::len).sum();
    let mut scores = Vec::with_capacity(total);
    let mut labels = Vec::with_capacity(total);
    for (r, m) in results.iter().zip(masks) {
        if r.attention_map.values().len() != m.len() {
            return Err(Error::Metric(format!(
                "mask of {:?} has {} pixels, attention map {}",
                r.id,
                m.len(),
                r.attention_map.values().len()
            )));
        }
        scores.extend_from_slice(r.attention_map.values());
        labels.extend_from_slice(m);
    }
    auroc(&scores, &labels)
}

/// Everything that influences a run's results.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub selection: SelectionMode,
    /// Train the mapping network; when false the identity mapping is used.
    pub discriminative: bool,
    pub image_score: ImageScoreMode,
    pub sigma: f64,
    pub learning_rate: f64,
    pub eta: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub hidden: usize,
    pub out_dim: usize,
    pub detach_center: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let train = TrainConfig::default();
        let score = ScoreConfig::default();
        Self {
            seed: 0,
            selection: SelectionMode::Gradient,
            discriminative: true,
            image_score: score.image_score,
            sigma: score.sigma,
            learning_rate: train.learning_rate,
            eta: train.eta,
            batch_size: train.batch_size,
            max_epochs: train.max_epochs,
            hidden: train.hidden,
            out_dim: train.out_dim,
            detach_center: train.detach_center,
        }
    }
}

impl PipelineConfig {
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            learning_rate: self.learning_rate,
            eta: self.eta,
            batch_size: self.batch_size,
            max_epochs: self.max_epochs,
            hidden: self.hidden,
            out_dim: self.out_dim,
            detach_center: self.detach_center,
            seed: self.seed,
        }
    }

    pub fn score_config(&self) -> ScoreConfig {
        ScoreConfig {
            image_score: self.image_score,
            sigma: self.sigma,
        }
    }

    /// SHA-256 of the canonical JSON encoding, hex.
    pub fn fingerprint(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(json))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleScore {
    pub id: String,
    pub label: Label,
    pub image_score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub epochs: usize,
    pub l_start: f64,
    pub final_loss: f64,
    pub stop_reason: StopReason,
}

impl From<&TrainHistory> for TrainSummary {
    fn from(h: &TrainHistory) -> Self {
        Self {
            epochs: h.stopped_epoch,
            l_start: h.l_start,
            final_loss: *h.losses.last().expect("at least one epoch"),
            stop_reason: h.stop_reason,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub category: String,
    pub image_auroc: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub pixel_auroc: Option<f64>,
    pub train_samples: usize,
    pub test_samples: usize,
    pub repository_size: usize,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub training: Option<TrainSummary>,
    pub seed: u64,
    pub fingerprint: String,
    pub config: PipelineConfig,
    pub scores: Vec<SampleScore>,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }
}

/// Intermediate products of a full run, for callers that persist them.
#[derive(Debug, Clone)]
pub struct PipelineRun {
    pub report: EvalReport,
    pub repository: Repository,
    pub mapping: Mapping,
    pub history: Option<TrainHistory>,
    pub results: Vec<AnomalyResult>,
}

/// Builds the repository, trains the mapping, scores the test split and
/// computes metrics, all from `config.seed`.
pub fn run_pipeline(manifest: &DatasetManifest, config: &PipelineConfig) -> Result<PipelineRun> {
    let train: Vec<&SampleRecord> = manifest.train().collect();
    let test: Vec<&SampleRecord> = manifest.test().collect();
    if train.is_empty() || test.is_empty() {
        return Err(Error::argument(
            "eval",
            format!(
                "category {:?} needs train and test samples ({} train, {} test)",
                manifest.category,
                train.len(),
                test.len()
            ),
        ));
    }
    let train_config = config.train_config();
    train_config.validate()?;

    let ids: Vec<String> = train.iter().map(|r| r.id.clone()).collect();
    let repository = build_repository(&ids, |i| load_features(train[i]), config.selection, config.seed)?;

    let (mapping, history) = if config.discriminative {
        let (params, history) = learner::train(&repository, &train_config)?;
        (Mapping::Mlp(params), Some(history))
    } else {
        (Mapping::Identity, None)
    };

    let scorer = Scorer::new(mapping, &repository, config.score_config())?;
    let results = scorer.score_all(&test, manifest)?;

    let scores: Vec<f64> = results.iter().map(|r| r.image_score).collect();
    let labels: Vec<bool> = results.iter().map(|r| r.label.is_anomalous()).collect();
    let image_auroc = auroc(&scores, &labels)?;
    let pixel_auroc = if manifest.has_masks() {
        let masks = test
            .iter()
            .map(|r| record_mask(r, manifest))
            .collect::<Result<Vec<_>>>()?;
        Some(pixel_auroc(&results, &masks)?)
    } else {
        None
    };

    let report = EvalReport {
        category: manifest.category.clone(),
        image_auroc,
        pixel_auroc,
        train_samples: train.len(),
        test_samples: test.len(),
        repository_size: repository.len(),
        training: history.as_ref().map(TrainSummary::from),
        seed: config.seed,
        fingerprint: config.fingerprint(),
        config: *config,
        scores: results
            .iter()
            .map(|r| SampleScore {
                id: r.id.clone(),
                label: r.label,
                image_score: r.image_score,
            })
            .collect(),
    };
    Ok(PipelineRun {
        report,
        repository,
        mapping: scorer.mapping().clone(),
        history,
        results,
    })
}

pub fn run_category(manifest: &DatasetManifest, config: &PipelineConfig) -> Result<EvalReport> {
    run_pipeline(manifest, config).map(|run| run.report)
}

fn mean(values: impl IntoIterator<Item = f64>) -> f64 {
    let (sum, n) = values.into_iter().fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    sum / n as f64
}

fn mean_pixel(reports: &[EvalReport]) -> Option<f64> {
    let values: Option<Vec<f64>> = reports.iter().map(|r| r.pixel_auroc).collect();
    values.filter(|v| !v.is_empty()).map(mean)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FewShotReport {
    pub k: usize,
    pub seeds: Vec<u64>,
    pub mean_image_auroc: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub mean_pixel_auroc: Option<f64>,
    pub runs: Vec<EvalReport>,
}

/// Default shot counts.
pub const FEW_SHOT_KS: [usize; 5] = [1, 2, 4, 8, 16];
/// Default number of seeds per shot count.
pub const FEW_SHOT_SEEDS: usize = 5;

/// Manifest order positions of the `k` training samples used for `seed`.
pub fn few_shot_subset(train_len: usize, k: usize, seed: u64) -> Vec<usize> {
    let mut picked = index::sample(&mut rng::stream(seed, rng::FEW_SHOT), train_len, k).into_vec();
    picked.sort_unstable();
    picked
}

/// For every seed, trains on `k` training images drawn without replacement
/// and evaluates on the full test split.
pub fn few_shot(
    manifest: &DatasetManifest,
    config: &PipelineConfig,
    k: usize,
    seeds: &[u64],
) -> Result<FewShotReport> {
    let train: Vec<&SampleRecord> = manifest.train().collect();
    if k == 0 {
        return Err(Error::argument("eval", "few-shot k must be at least 1"));
    }
    if k > train.len() {
        return Err(Error::argument(
            "eval",
            format!("few-shot k = {k} exceeds the {} training samples", train.len()),
        ));
    }
    if seeds.is_empty() {
        return Err(Error::argument("eval", "few-shot needs at least one seed"));
    }
    let mut runs = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let keep: Vec<&SampleRecord> = few_shot_subset(train.len(), k, seed)
            .into_iter()
            .map(|i| train[i])
            .collect();
        let samples = keep
            .into_iter()
            .chain(manifest.test())
            .cloned()
            .collect();
        let subset = manifest.with_samples(samples);
        runs.push(run_category(&subset, &PipelineConfig { seed, ..*config })?);
    }
    Ok(FewShotReport {
        k,
        seeds: seeds.to_vec(),
        mean_image_auroc: mean(runs.iter().map(|r| r.image_auroc)),
        mean_pixel_auroc: mean_pixel(&runs),
        runs,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KFoldReport {
    pub folds: usize,
    pub seed: u64,
    pub mean_image_auroc: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub mean_pixel_auroc: Option<f64>,
    /// Held-out normal sample ids of every fold.
    pub held_out: Vec<Vec<String>>,
    pub runs: Vec<EvalReport>,
}

/// Splits `0..n` into `folds` disjoint groups after a seeded shuffle; group
/// sizes differ by at most one.
pub fn kfold_partition(n: usize, folds: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if folds < 2 {
        return Err(Error::argument("eval", "k-fold needs at least 2 folds"));
    }
    if n < folds {
        return Err(Error::argument(
            "eval",
            format!("{n} normal samples cannot fill {folds} folds"),
        ));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::stream(seed, rng::KFOLD));
    Ok((0..folds)
        .map(|f| {
            let mut fold = order[f * n / folds..(f + 1) * n / folds].to_vec();
            fold.sort_unstable();
            fold
        })
        .collect())
}

/// Cross-validation over the normal samples of both splits: each fold trains
/// on the other folds' normals and tests on its own normals plus every
/// anomalous sample.
pub fn kfold(manifest: &DatasetManifest, config: &PipelineConfig, folds: usize) -> Result<KFoldReport> {
    let normals: Vec<&SampleRecord> = manifest
        .samples
        .iter()
        .filter(|s| s.label == Label::Normal)
        .collect();
    let anomalies: Vec<&SampleRecord> = manifest
        .samples
        .iter()
        .filter(|s| s.label == Label::Anomalous)
        .collect();
    let partition = kfold_partition(normals.len(), folds, config.seed)?;

    let mut runs = Vec::with_capacity(folds);
    let mut held_out = Vec::with_capacity(folds);
    for fold in &partition {
        let mut in_fold = vec![false; normals.len()];
        fold.iter().for_each(|&i| in_fold[i] = true);
        let mut samples = Vec::with_capacity(normals.len() + anomalies.len());
        for (i, r) in normals.iter().enumerate() {
            if !in_fold[i] {
                samples.push(SampleRecord {
                    split: Split::Train,
                    mask_path: None,
                    ..(*r).clone()
                });
            }
        }
        for &i in fold {
            samples.push(SampleRecord {
                split: Split::Test,
                ..normals[i].clone()
            });
        }
        samples.extend(anomalies.iter().map(|r| SampleRecord {
            split: Split::Test,
            ..(*r).clone()
        }));
        held_out.push(fold.iter().map(|&i| normals[i].id.clone()).collect());
        runs.push(run_category(&manifest.with_samples(samples), config)?);
    }
    Ok(KFoldReport {
        folds,
        seed: config.seed,
        mean_image_auroc: mean(runs.iter().map(|r| r.image_auroc)),
        mean_pixel_auroc: mean_pixel(&runs),
        held_out,
        runs,
    })
}

/// Named configuration variants mirroring the component ablation.
pub fn ablation_variants(config: &PipelineConfig) -> Vec<(&'static str, PipelineConfig)> {
    vec![
        ("full", *config),
        (
            "no-gradient-selection",
            PipelineConfig {
                selection: SelectionMode::Random,
                ..*config
            },
        ),
        (
            "no-discriminative",
            PipelineConfig {
                discriminative: false,
                ..*config
            },
        ),
        (
            "baseline",
            PipelineConfig {
                selection: SelectionMode::All,
                discriminative: false,
                ..*config
            },
        ),
    ]
}

fn pct(v: f64) -> String {
    format!("{:.1}", 100.0 * v)
}

/// Fixed-width text table of labelled reports.
pub fn render_table(rows: &[(String, &EvalReport)]) -> String {
    let name_w = rows.iter().map(|(n, _)| n.len()).max().unwrap_or(0).max(7);
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<name_w$}  {:>9}  {:>9}  {:>10}  {:>6}",
        "variant", "image", "pixel", "repository", "epochs"
    );
    for (name, r) in rows {
        let _ = writeln!(
            out,
            "{:<name_w$}  {:>9}  {:>9}  {:>10}  {:>6}",
            name,
            pct(r.image_auroc),
            r.pixel_auroc.map(pct).unwrap_or_else(|| "-".into()),
            r.repository_size,
            r.training
                .as_ref()
                .map(|t| t.epochs.to_string())
                .unwrap_or_else(|| "-".into()),
        );
    }
    out
}
