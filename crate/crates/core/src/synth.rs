//! Synthetic feature datasets with known anomalies.
//!
//! Normal feature maps are smooth random fields: every channel is white
//! Gaussian noise blurred with a Gaussian and rescaled to unit variance.
//! Anomalous maps are normal maps with a square patch shifted by a multiple of
//! the field's standard deviation in a random subset of channels. Masks mark
//! the patch at image resolution.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::manifest::{save_manifest, DatasetManifest, Label, SampleRecord, Split};
use crate::rng;
use crate::scorer::gaussian_kernel;
use crate::tensor::{write_array, write_tensor_file, FeatureMap};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub channels: usize,
    /// Feature maps are `size x size`.
    pub size: usize,
    /// Image resolution is `size * image_scale`.
    pub image_scale: usize,
    pub train: usize,
    pub test_normal: usize,
    pub test_anomalous: usize,
    pub patch: usize,
    /// Patch shift in units of the field standard deviation.
    pub offset: f64,
    /// Probability that a channel is shifted inside the patch.
    pub channel_fraction: f64,
    /// Spatial blur of the white noise, in feature pixels.
    pub smoothness: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            channels: 32,
            size: 28,
            image_scale: 4,
            train: 40,
            test_normal: 20,
            test_anomalous: 20,
            patch: 4,
            offset: 3.0,
            channel_fraction: 0.5,
            smoothness: 1.5,
            seed: 0,
        }
    }
}

// Stream ids of the generator (independent of the pipeline streams).
const NORMAL_FIELD: u64 = 101;
const ANOMALY_PLACEMENT: u64 = 102;

/// Valid-mode blur along one axis: `src` is `rows x cols`, the output loses
/// `kernel.len() - 1` entries along the blurred axis.
fn blur_axis(src: &[f64], rows: usize, cols: usize, kernel: &[f64], horizontal: bool) -> Vec<f64> {
    let taps = kernel.len();
    let (out_rows, out_cols) = if horizontal {
        (rows, cols - taps + 1)
    } else {
        (rows - taps + 1, cols)
    };
    let mut out = vec![0.0; out_rows * out_cols];
    for y in 0..out_rows {
        for x in 0..out_cols {
            out[y * out_cols + x] = kernel
                .iter()
                .enumerate()
                .map(|(k, &w)| {
                    let (yy, xx) = if horizontal { (y, x + k) } else { (y + k, x) };
                    w * src[yy * cols + xx]
                })
                .sum();
        }
    }
    out
}

/// One smooth random field per channel; sample `index` of the normal family.
pub fn normal_features(config: &SynthConfig, index: u64) -> Result<FeatureMap> {
    let kernel = gaussian_kernel(config.smoothness)?;
    // Blurring white noise scales its variance by (sum k^2)^2 in 2-D.
    let gain = 1.0 / kernel.iter().map(|k| k * k).sum::<f64>();
    let mut rng = rng::StreamRng::seed_from_u64(rng::derive(
        rng::derive(config.seed, NORMAL_FIELD),
        index,
    ));
    // Noise is drawn on a padded grid so every output pixel sees a full
    // kernel; the field is stationary up to the borders.
    let side = config.size + kernel.len() - 1;
    let mut data = Vec::with_capacity(config.channels * config.size * config.size);
    for _ in 0..config.channels {
        let noise: Vec<f64> = (0..side * side).map(|_| rng.sample(StandardNormal)).collect();
        let rows = blur_axis(&noise, side, side, &kernel, true);
        let field = blur_axis(&rows, side, config.size, &kernel, false);
        data.extend(field.into_iter().map(|v| (v * gain) as f32));
    }
    FeatureMap::new(config.channels, config.size, config.size, data)
}

/// A planted anomaly: the patch origin and the shifted channels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Defect {
    pub row: usize,
    pub col: usize,
    pub channels: Vec<usize>,
}

pub fn plant_defect(config: &SynthConfig, features: &FeatureMap, index: u64) -> Result<(FeatureMap, Defect)> {
    if config.patch == 0 || config.patch > config.size {
        return Err(Error::argument("synth", "patch must fit inside the feature map"));
    }
    let mut rng = rng::StreamRng::seed_from_u64(rng::derive(
        rng::derive(config.seed, ANOMALY_PLACEMENT),
        index,
    ));
    let row = rng.gen_range(0..=config.size - config.patch);
    let col = rng.gen_range(0..=config.size - config.patch);
    let mut channels: Vec<usize> = (0..config.channels)
        .filter(|_| rng.gen_bool(config.channel_fraction))
        .collect();
    if channels.is_empty() {
        channels.push(rng.gen_range(0..config.channels));
    }
    let mut data = features.data().to_vec();
    let (h, w) = (features.height(), features.width());
    for &c in &channels {
        for y in row..row + config.patch {
            for x in col..col + config.patch {
                data[(c * h + y) * w + x] += config.offset as f32;
            }
        }
    }
    let map = FeatureMap::new(features.channels(), h, w, data)?;
    Ok((map, Defect { row, col, channels }))
}

fn defect_mask(config: &SynthConfig, defect: &Defect) -> Vec<f32> {
    let s = config.image_scale;
    let side = config.size * s;
    let mut mask = vec![0.0f32; side * side];
    for y in defect.row * s..(defect.row + config.patch) * s {
        for x in defect.col * s..(defect.col + config.patch) * s {
            mask[y * side + x] = 1.0;
        }
    }
    mask
}

/// Writes tensors, masks and `manifest.json` under `dir`; returns the manifest
/// path and the loaded manifest.
pub fn write_dataset(config: &SynthConfig, dir: impl AsRef<Path>) -> Result<(PathBuf, DatasetManifest)> {
    let dir = dir.as_ref();
    for sub in ["train", "test", "masks"] {
        let p = dir.join(sub);
        std::fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    let side = config.size * config.image_scale;
    let mut samples = Vec::new();
    let mut next = 0u64;
    let mut emit = |split: Split, label: Label, name: String| -> Result<()> {
        let features = normal_features(config, next)?;
        let index = next;
        next += 1;
        let tensor = dir.join(format!("{name}.npy"));
        let mut mask_path = None;
        if label == Label::Anomalous {
            let (map, defect) = plant_defect(config, &features, index)?;
            write_tensor_file(&tensor, &map)?;
            let mask = dir.join("masks").join(format!("{}.npy", name.replace('/', "_")));
            write_array(&mask, &[side, side], &defect_mask(config, &defect))?;
            mask_path = Some(mask);
        } else {
            write_tensor_file(&tensor, &features)?;
        }
        samples.push(SampleRecord {
            id: name,
            split,
            label,
            tensor_paths: vec![tensor],
            mask_path,
        });
        Ok(())
    };
    for i in 0..config.train {
        emit(Split::Train, Label::Normal, format!("train/{i:03}"))?;
    }
    for i in 0..config.test_normal {
        emit(Split::Test, Label::Normal, format!("test/good_{i:03}"))?;
    }
    for i in 0..config.test_anomalous {
        emit(Split::Test, Label::Anomalous, format!("test/defect_{i:03}"))?;
    }

    let manifest = DatasetManifest {
        category: "synthetic".into(),
        image_height: side,
        image_width: side,
        levels: vec!["1".into()],
        samples,
    };
    manifest.validate_structure()?;
    let path = dir.join("manifest.json");
    save_manifest(&path, &manifest.to_document(dir))?;
    Ok((path, manifest))
}
