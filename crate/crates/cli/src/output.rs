//! Artifact writers. All files are written sequentially from the calling
//! thread, in a fixed order.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use gradrep::eval::{EvalReport, PipelineConfig, PipelineRun};
use gradrep::learner::Mapping;
use gradrep::scorer::AnomalyResult;
use gradrep::snapshot::{save_model, save_repository};
use gradrep::tensor::write_array;
use serde::Serialize;

pub fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("cannot write {}", path.display()))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let json = serde_json::to_string_pretty(value).context("serializing results")? + "\n";
    write_text(path, &json)
}

/// File-name stem for a sample id: anything outside `[A-Za-z0-9._-]` becomes
/// `_`, so nested ids such as `test/crack_001` stay inside the directory.
pub fn file_stem(id: &str) -> String {
    id.chars()
        .map(|c| if c.is_ascii_alphanumeric() || "._-".contains(c) { c } else { '_' })
        .collect()
}

pub fn write_scores_csv(path: &Path, results: &[AnomalyResult]) -> Result<()> {
    let mut writer =
        csv::Writer::from_path(path).with_context(|| format!("cannot write {}", path.display()))?;
    writer.write_record(["id", "label", "image_score"])?;
    for r in results {
        writer.write_record([r.id.as_str(), &r.label.to_string(), &r.image_score.to_string()])?;
    }
    writer.flush()?;
    Ok(())
}

/// One `1 x H x W` tensor per test sample plus an 8-bit PNG scaled by the
/// minimum and maximum over all maps, so that images are comparable.
pub fn write_attention(dir: &Path, results: &[AnomalyResult]) -> Result<()> {
    create_dir(dir)?;
    let (lo, hi) = results
        .iter()
        .flat_map(|r| r.attention_map.values())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let range = hi - lo;
    let mut seen = HashSet::new();
    for r in results {
        let stem = file_stem(&r.id);
        if !seen.insert(stem.clone()) {
            bail!("sample ids collide in attention file name {stem:?}");
        }
        let map = &r.attention_map;
        let (h, w) = (map.height(), map.width());
        let values: Vec<f32> = map.values().iter().map(|&v| v as f32).collect();
        write_array(dir.join(format!("{stem}.npy")), &[1, h, w], &values)?;

        let pixels = map
            .values()
            .iter()
            .map(|&v| {
                if range > 0.0 {
                    ((v - lo) / range * 255.0).round() as u8
                } else {
                    0
                }
            })
            .collect();
        let image = image::GrayImage::from_raw(w as u32, h as u32, pixels)
            .expect("buffer matches dimensions");
        let path = dir.join(format!("{stem}.png"));
        image
            .save(&path)
            .with_context(|| format!("cannot write {}", path.display()))?;
    }
    Ok(())
}

pub fn report_text(report: &EvalReport) -> String {
    let mut lines = vec![
        format!("category          {}", report.category),
        format!("image AUROC       {:.4}", report.image_auroc),
        format!(
            "pixel AUROC       {}",
            report
                .pixel_auroc
                .map(|v| format!("{v:.4}"))
                .unwrap_or_else(|| "n/a (no masks)".into())
        ),
        format!("train samples     {}", report.train_samples),
        format!("test samples      {}", report.test_samples),
        format!("repository rows   {}", report.repository_size),
    ];
    match &report.training {
        Some(t) => lines.push(format!(
            "training          {} epochs ({}), loss {:.4} -> {:.4}",
            t.epochs, t.stop_reason, t.l_start, t.final_loss
        )),
        None => lines.push("training          none (identity mapping)".into()),
    }
    lines.push(format!("seed              {}", report.seed));
    lines.push(format!("fingerprint       {}", report.fingerprint));
    lines.join("\n") + "\n"
}

/// Everything `run` leaves behind.
pub fn write_run(out: &Path, run: &PipelineRun, config: &PipelineConfig) -> Result<()> {
    create_dir(out)?;
    save_repository(out.join("repository"), &run.repository)?;
    if let Mapping::Mlp(params) = &run.mapping {
        save_model(out.join("model"), params, &config.train_config(), run.history.as_ref())?;
    }
    write_scores_csv(&out.join("scores.csv"), &run.results)?;
    write_attention(&out.join("attention"), &run.results)?;
    write_text(&out.join("report.json"), &run.report.to_json())?;
    write_text(&out.join("report.txt"), &report_text(&run.report))
}
