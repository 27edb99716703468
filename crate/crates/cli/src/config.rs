//! Pipeline configuration from defaults, an optional TOML file and flags,
//! in increasing order of precedence.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::Args;
use gradrep::eval::PipelineConfig;
use gradrep::scorer::ImageScoreMode;
use gradrep::selector::SelectionMode;
use serde::Deserialize;

/// Every field optional; unknown keys are rejected.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub seed: Option<u64>,
    pub selection: Option<SelectionMode>,
    pub discriminative: Option<bool>,
    pub image_score: Option<ImageScoreMode>,
    pub sigma: Option<f64>,
    pub learning_rate: Option<f64>,
    pub eta: Option<f64>,
    pub batch_size: Option<usize>,
    pub max_epochs: Option<usize>,
    pub hidden: Option<usize>,
    pub out_dim: Option<usize>,
    pub detach_center: Option<bool>,
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("cannot read config {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("invalid config {}", path.display()))
    }
}

#[derive(Debug, Clone, Args)]
pub struct PipelineArgs {
    /// TOML file with pipeline settings; flags take precedence.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Master seed for selection, initialization and shuffling.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_name = "gradient|random|all")]
    pub selection: Option<SelectionMode>,
    /// Score with raw features instead of training the mapping network.
    #[arg(long)]
    pub no_discriminative: bool,
    #[arg(long, value_name = "max|mean-topk")]
    pub image_score: Option<ImageScoreMode>,
    /// Early-stop ratio.
    #[arg(long)]
    pub eta: Option<f64>,
    /// Adam learning rate.
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub max_epochs: Option<usize>,
    /// Hidden width of the mapping network.
    #[arg(long)]
    pub hidden: Option<usize>,
    /// Output width of the mapping network.
    #[arg(long)]
    pub cf: Option<usize>,
    /// Gaussian smoothing of attention maps, in image pixels.
    #[arg(long)]
    pub sigma: Option<f64>,
    /// Treat the center of the loss as a constant during backpropagation.
    #[arg(long)]
    pub detach_center: bool,
}

impl PipelineArgs {
    pub fn resolve(&self) -> Result<PipelineConfig> {
        let file = match &self.config {
            Some(path) => FileConfig::load(path)?,
            None => FileConfig::default(),
        };
        let d = PipelineConfig::default();
        Ok(PipelineConfig {
            seed: self.seed.or(file.seed).unwrap_or(d.seed),
            selection: self.selection.or(file.selection).unwrap_or(d.selection),
            discriminative: if self.no_discriminative {
                false
            } else {
                file.discriminative.unwrap_or(d.discriminative)
            },
            image_score: self.image_score.or(file.image_score).unwrap_or(d.image_score),
            sigma: self.sigma.or(file.sigma).unwrap_or(d.sigma),
            learning_rate: self.lr.or(file.learning_rate).unwrap_or(d.learning_rate),
            eta: self.eta.or(file.eta).unwrap_or(d.eta),
            batch_size: self.batch.or(file.batch_size).unwrap_or(d.batch_size),
            max_epochs: self.max_epochs.or(file.max_epochs).unwrap_or(d.max_epochs),
            hidden: self.hidden.or(file.hidden).unwrap_or(d.hidden),
            out_dim: self.cf.or(file.out_dim).unwrap_or(d.out_dim),
            detach_center: self.detach_center || file.detach_center.unwrap_or(d.detach_center),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::Parser;

    #[derive(Parser)]
    struct Cli {
        #[command(flatten)]
        args: PipelineArgs,
    }

    fn resolve(argv: &[&str]) -> Result<PipelineConfig> {
        Cli::try_parse_from(std::iter::once("t").chain(argv.iter().copied()))?
            .args
            .resolve()
    }

    #[test]
    fn defaults_pass_through() {
        assert_eq!(resolve(&[]).unwrap(), PipelineConfig::default());
    }

    #[test]
    fn flags_override_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        std::fs::write(&path, "seed = 3\nhidden = 64\nselection = \"random\"\nimage_score = \"mean-topk\"\n").unwrap();
        let c = resolve(&["--config", path.to_str().unwrap(), "--seed", "9", "--cf", "8"]).unwrap();
        assert_eq!((c.seed, c.hidden, c.out_dim), (9, 64, 8));
        assert_eq!(c.selection, SelectionMode::Random);
        assert_eq!(c.image_score, ImageScoreMode::MeanTopK);
    }

    #[test]
    fn unknown_file_keys_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        std::fs::write(&path, "seeed = 3\n").unwrap();
        assert!(resolve(&["--config", path.to_str().unwrap()]).is_err());
    }
}
