//! Test-time scoring and localization.
//!
//! Every position of a test image is mapped like the repository rows and
//! scored by its Euclidean distance to the nearest mapped repository row. The
//! image score is taken from the raw pixel map; the localization map is the
//! pixel map resized to image resolution (bilinear) and Gaussian-smoothed.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::load_features;
use crate::learner::Mapping;
use crate::manifest::{DatasetManifest, Label, SampleRecord};
use crate::selector::{MappedRepository, Repository, ScoreMap};
use crate::tensor::FeatureMap;

/// Number of pixels averaged by [`ImageScoreMode::MeanTopK`].
pub const TOP_K: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum ImageScoreMode {
    /// Largest pixel score.
    #[default]
    #[serde(rename = "max")]
    Max,
    /// Mean of the [`TOP_K`] largest pixel scores.
    #[serde(rename = "mean-topk")]
    MeanTopK,
}

impl std::str::FromStr for ImageScoreMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "max" => Ok(ImageScoreMode::Max),
            "mean-topk" => Ok(ImageScoreMode::MeanTopK),
            other => Err(format!("unknown image score mode {other:?}")),
        }
    }
}

#[inline]
fn squared_distance(a: &[f32], b: &[f32]) -> f32 {
    let mut sum = 0.0f32;
    for (x, y) in a.iter().zip(b) {
        let d = x - y;
        sum += d * d;
    }
    sum
}

/// Exact Euclidean distance from `query` to its nearest repository row.
///
/// Squared distances accumulate in `f32` in dimension order; this is the
/// reference that [`NeighborIndex`] reproduces bit-for-bit.
pub fn nearest_distance(query: &[f32], repo: &MappedRepository) -> Result<f32> {
    if repo.is_empty() {
        return Err(Error::argument("scorer", "empty repository"));
    }
    if query.len() != repo.dim() {
        return Err(Error::argument(
            "scorer",
            format!("query has {} dims, repository {}", query.len(), repo.dim()),
        ));
    }
    let best = repo
        .rows()
        .map(|row| squared_distance(query, row))
        .fold(f32::INFINITY, f32::min);
    Ok(best.sqrt())
}

const LANES: usize = 8;
const ABANDON_EVERY: usize = 16;
const QUERY_GROUP: usize = 4;

/// Repository rows stored in blocks of eight, dimension-major within a block,
/// so eight distances accumulate side by side.
///
/// Each lane sums exactly like [`nearest_distance`]; blocks whose partial sums
/// all exceed the best distance so far are abandoned early, which cannot change
/// the minimum because partial sums never decrease.
#[derive(Debug, Clone)]
pub struct NeighborIndex {
    dim: usize,
    len: usize,
    blocks: Vec<f32>,
}

impl NeighborIndex {
    pub fn new(repo: &MappedRepository) -> Self {
        let dim = repo.dim();
        let n_blocks = repo.len().div_ceil(LANES);
        let mut blocks = vec![0.0f32; n_blocks * dim * LANES];
        for (i, row) in repo.rows().enumerate() {
            let (b, lane) = (i / LANES, i % LANES);
            let block = &mut blocks[b * dim * LANES..(b + 1) * dim * LANES];
            for (d, &v) in row.iter().enumerate() {
                block[d * LANES + lane] = v;
            }
        }
        Self {
            dim,
            len: repo.len(),
            blocks,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Squared distance to the nearest row.
    pub fn nearest_squared(&self, query: &[f32]) -> f32 {
        debug_assert_eq!(query.len(), self.dim);
        let mut best = f32::INFINITY;
        let stride = self.dim * LANES;
        for (b, block) in self.blocks.chunks_exact(stride).enumerate() {
            let valid = (self.len - b * LANES).min(LANES);
            let mut acc = [0.0f32; LANES];
            let mut abandoned = false;
            for (d0, (q_chunk, block_chunk)) in query
                .chunks(ABANDON_EVERY)
                .zip(block.chunks(ABANDON_EVERY * LANES))
                .enumerate()
            {
                for (&q, column) in q_chunk.iter().zip(block_chunk.chunks_exact(LANES)) {
                    for l in 0..LANES {
                        let diff = q - column[l];
                        acc[l] += diff * diff;
                    }
                }
                if (d0 + 1) * ABANDON_EVERY < self.dim && acc[..valid].iter().all(|&a| a > best) {
                    abandoned = true;
                    break;
                }
            }
            if !abandoned {
                for &a in &acc[..valid] {
                    best = best.min(a);
                }
            }
        }
        best
    }

    /// Squared nearest distances of many row-major queries, bit-identical to
    /// calling [`Self::nearest_squared`] on each.
    pub fn nearest_squared_many(&self, queries: &[f32]) -> Vec<f32> {
        debug_assert_eq!(queries.len() % self.dim.max(1), 0);
        #[cfg(target_arch = "x86_64")]
        if std::arch::is_x86_feature_detected!("avx2") {
            // SAFETY: the CPU supports AVX2, checked just above.
            return unsafe { nearest_many_avx2(&self.blocks, self.len, self.dim, queries) };
        }
        nearest_many(&self.blocks, self.len, self.dim, queries)
    }

    pub fn nearest(&self, query: &[f32]) -> f32 {
        self.nearest_squared(query).sqrt()
    }
}

/// Queries walk each block in groups of four, which gives the CPU
/// independent accumulation chains. Every distance is still accumulated in
/// dimension order with separate multiply and add, so wider vector units
/// change speed but not results.
#[inline(always)]
fn nearest_many(blocks: &[f32], len: usize, dim: usize, queries: &[f32]) -> Vec<f32> {
    let stride = dim * LANES;
    let mut out = Vec::with_capacity(queries.len() / dim.max(1));
    for group in queries.chunks(QUERY_GROUP * dim) {
        let n = group.len() / dim;
        // Missing queries of a short group repeat the first one.
        let q: [&[f32]; QUERY_GROUP] =
            std::array::from_fn(|i| &group[(if i < n { i } else { 0 }) * dim..][..dim]);
        let mut best = [f32::INFINITY; QUERY_GROUP];
        for (b, block) in blocks.chunks_exact(stride).enumerate() {
            let valid = (len - b * LANES).min(LANES);
            let mut acc = [[0.0f32; LANES]; QUERY_GROUP];
            for (d, column) in block.chunks_exact(LANES).enumerate() {
                for (qi, acc) in acc.iter_mut().enumerate() {
                    let v = q[qi][d];
                    for l in 0..LANES {
                        let diff = v - column[l];
                        acc[l] += diff * diff;
                    }
                }
            }
            for (qi, acc) in acc.iter().enumerate() {
                for &a in &acc[..valid] {
                    best[qi] = best[qi].min(a);
                }
            }
        }
        out.extend_from_slice(&best[..n]);
    }
    out
}

// FMA stays disabled so that products are rounded before the add.
#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn nearest_many_avx2(blocks: &[f32], len: usize, dim: usize, queries: &[f32]) -> Vec<f32> {
    nearest_many(blocks, len, dim, queries)
}

/// Nearest-repository distance at every position of a test feature map.
pub fn pixel_score_map(
    features: &FeatureMap,
    mapping: &Mapping,
    index: &NeighborIndex,
) -> Result<ScoreMap> {
    let dim = features.channels();
    let mapped = mapping.apply(features.to_rows(), dim)?;
    let out_dim = mapping.output_dim(dim);
    if out_dim != index.dim() {
        return Err(Error::argument(
            "scorer",
            format!(
                "mapped features have {out_dim} dims, repository {}",
                index.dim()
            ),
        ));
    }
    if index.is_empty() {
        return Err(Error::argument("scorer", "empty repository"));
    }
    let values = index
        .nearest_squared_many(&mapped)
        .into_iter()
        .map(|d| d.sqrt() as f64)
        .collect();
    ScoreMap::new(features.height(), features.width(), values)
}

/// Image-level anomaly score from the (unsmoothed) pixel map.
pub fn image_score(map: &ScoreMap, mode: ImageScoreMode) -> f64 {
    match mode {
        ImageScoreMode::Max => map.max(),
        ImageScoreMode::MeanTopK => {
            let mut values = map.values().to_vec();
            let k = TOP_K.min(values.len());
            values.sort_unstable_by(|a, b| b.total_cmp(a));
            values[..k].iter().sum::<f64>() / k as f64
        }
    }
}

/// Source sample positions and weights along one axis, half-pixel aligned.
fn bilinear_taps(input: usize, output: usize) -> Vec<(usize, usize, f64)> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|t| {
            let src = ((t as f64 + 0.5) * scale - 0.5).clamp(0.0, (input - 1) as f64);
            let lo = src.floor() as usize;
            let hi = (lo + 1).min(input - 1);
            (lo, hi, src - lo as f64)
        })
        .collect()
}

/// Bilinear resize with half-pixel centers (`src = (t + 0.5) * in/out - 0.5`,
/// clamped to the valid range).
pub fn upsample_bilinear(map: &ScoreMap, height: usize, width: usize) -> Result<ScoreMap> {
    if height == 0 || width == 0 {
        return Err(Error::argument("scorer", "resize target must be positive"));
    }
    if (height, width) == (map.height(), map.width()) {
        return Ok(map.clone());
    }
    let (in_h, in_w) = (map.height(), map.width());
    let xs = bilinear_taps(in_w, width);
    let ys = bilinear_taps(in_h, height);

    let src = map.values();
    let mut rows = vec![0.0f64; in_h * width];
    for y in 0..in_h {
        let line = &src[y * in_w..(y + 1) * in_w];
        for (x, &(lo, hi, f)) in xs.iter().enumerate() {
            rows[y * width + x] = line[lo] * (1.0 - f) + line[hi] * f;
        }
    }
    let mut out = vec![0.0f64; height * width];
    for (y, &(lo, hi, f)) in ys.iter().enumerate() {
        let (a, b) = (&rows[lo * width..(lo + 1) * width], &rows[hi * width..(hi + 1) * width]);
        for x in 0..width {
            out[y * width + x] = a[x] * (1.0 - f) + b[x] * f;
        }
    }
    ScoreMap::new(height, width, out)
}

/// Normalized 1-D Gaussian of radius `ceil(4 sigma)`.
pub fn gaussian_kernel(sigma: f64) -> Result<Vec<f64>> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::argument(
            "scorer",
            format!("Gaussian sigma must be positive, got {sigma}"),
        ));
    }
    let radius = (4.0 * sigma).ceil() as isize;
    let mut kernel: Vec<f64> = (-radius..=radius)
        .map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= total);
    Ok(kernel)
}

fn convolve_axis(
    src: &[f64],
    dst: &mut [f64],
    len: usize,
    lines: usize,
    stride: usize,
    line_stride: usize,
    kernel: &[f64],
) {
    let radius = (kernel.len() / 2) as isize;
    let last = len as isize - 1;
    for line in 0..lines {
        let base = line * line_stride;
        for i in 0..len {
            let mut sum = 0.0;
            for (k, &w) in kernel.iter().enumerate() {
                let j = (i as isize + k as isize - radius).clamp(0, last) as usize;
                sum += w * src[base + j * stride];
            }
            dst[base + i * stride] = sum;
        }
    }
}

/// Separable Gaussian blur with edge-clamped borders.
pub fn gaussian_smooth(map: &ScoreMap, sigma: f64) -> Result<ScoreMap> {
    let kernel = gaussian_kernel(sigma)?;
    let (h, w) = (map.height(), map.width());
    let mut tmp = vec![0.0; h * w];
    convolve_axis(map.values(), &mut tmp, w, h, 1, w, &kernel);
    let mut out = vec![0.0; h * w];
    convolve_axis(&tmp, &mut out, h, w, w, 1, &kernel);
    ScoreMap::new(h, w, out)
}

/// Scores of one test image.
#[derive(Debug, Clone, PartialEq)]
pub struct AnomalyResult {
    pub id: String,
    pub label: Label,
    pub image_score: f64,
    /// Distances at feature resolution.
    pub pixel_map: ScoreMap,
    /// Localization map at image resolution.
    pub attention_map: ScoreMap,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreConfig {
    pub image_score: ImageScoreMode,
    pub sigma: f64,
}

impl Default for ScoreConfig {
    fn default() -> Self {
        Self {
            image_score: ImageScoreMode::Max,
            sigma: 4.0,
        }
    }
}

/// A mapping plus the indexed mapped repository, ready to score test images.
#[derive(Debug, Clone)]
pub struct Scorer {
    mapping: Mapping,
    index: NeighborIndex,
    input_dim: usize,
    config: ScoreConfig,
}

impl Scorer {
    /// Maps `repo` (raw features) with `mapping` and indexes the result.
    pub fn new(mapping: Mapping, repo: &Repository, config: ScoreConfig) -> Result<Self> {
        gaussian_kernel(config.sigma)?;
        let mapped = match &mapping {
            Mapping::Identity => repo.clone(),
            Mapping::Mlp(p) => crate::learner::map_repository(p, repo)?,
        };
        Ok(Self::from_mapped(mapping, repo.dim(), &mapped, config))
    }

    pub fn from_mapped(
        mapping: Mapping,
        input_dim: usize,
        mapped: &MappedRepository,
        config: ScoreConfig,
    ) -> Self {
        Self {
            mapping,
            index: NeighborIndex::new(mapped),
            input_dim,
            config,
        }
    }

    pub fn mapping(&self) -> &Mapping {
        &self.mapping
    }

    pub fn config(&self) -> &ScoreConfig {
        &self.config
    }

    /// Scores already-fused features; `image_size` is `(height, width)`.
    pub fn score_features(
        &self,
        id: &str,
        label: Label,
        features: &FeatureMap,
        image_size: (usize, usize),
    ) -> Result<AnomalyResult> {
        if features.channels() != self.input_dim {
            return Err(Error::argument(
                "scorer",
                format!(
                    "sample {id:?} has {} channels, repository {}",
                    features.channels(),
                    self.input_dim
                ),
            ));
        }
        let pixel_map = pixel_score_map(features, &self.mapping, &self.index)?;
        let image_score = image_score(&pixel_map, self.config.image_score);
        let resized = upsample_bilinear(&pixel_map, image_size.0, image_size.1)?;
        let attention_map = gaussian_smooth(&resized, self.config.sigma)?;
        Ok(AnomalyResult {
            id: id.to_string(),
            label,
            image_score,
            pixel_map,
            attention_map,
        })
    }

    /// Loads, fuses and scores one record.
    pub fn score_sample(
        &self,
        record: &SampleRecord,
        manifest: &DatasetManifest,
    ) -> Result<AnomalyResult> {
        let features = load_features(record)?;
        self.score_features(
            &record.id,
            record.label,
            &features,
            (manifest.image_height, manifest.image_width),
        )
    }

    /// Scores records in parallel; results keep the input order.
    pub fn score_all(
        &self,
        records: &[&SampleRecord],
        manifest: &DatasetManifest,
    ) -> Result<Vec<AnomalyResult>> {
        records
            .par_iter()
            .map(|r| self.score_sample(r, manifest))
            .collect()
    }
}
