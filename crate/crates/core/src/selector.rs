//! Gradient-preference feature selection and the feature repository.
//!
//! Every training image contributes the feature vectors at positions whose
//! normalized Laplacian magnitude beats a uniform draw, so high-gradient
//! positions are favoured without excluding flat ones.

use rand::{Rng, SeedableRng};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::FeatureMap;

/// 3x3 Laplacian kernel (8 at the center, -1 around it), applied per channel.
pub const LAPLACIAN: [[f64; 3]; 3] = [[-1.0, -1.0, -1.0], [-1.0, 8.0, -1.0], [-1.0, -1.0, -1.0]];

/// Percentage of positions kept per image when no position is selected at all.
pub const FALLBACK_PERCENT: usize = 1;

/// Rank-2 map of non-negative scores, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMap {
    height: usize,
    width: usize,
    values: Vec<f64>,
}

impl ScoreMap {
    pub fn new(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || values.len() != height * width {
            return Err(Error::argument(
                "selector",
                format!(
                    "score map {height}x{width} cannot hold {} values",
                    values.len()
                ),
            ));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::argument("selector", "score map values must be finite"));
        }
        Ok(Self {
            height,
            width,
            values,
        })
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Result<Self> {
        Self::new(height, width, vec![value; height * width])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.values[y * self.width + x]
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SelectionMask {
    height: usize,
    width: usize,
    bits: Vec<bool>,
}

impl SelectionMask {
    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }

    /// Selected positions as `(row, col)`, row-major.
    pub fn positions(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.bits
            .iter()
            .enumerate()
            .filter(|(_, b)| **b)
            .map(|(i, _)| (i / self.width, i % self.width))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SelectionMode {
    /// Probability proportional to the normalized Laplacian magnitude.
    #[default]
    Gradient,
    /// Constant probability equal to the image's mean gradient score.
    Random,
    /// Keep every position.
    All,
}

impl std::str::FromStr for SelectionMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "gradient" => Ok(SelectionMode::Gradient),
            "random" => Ok(SelectionMode::Random),
            "all" => Ok(SelectionMode::All),
            other => Err(format!("unknown selection mode {other:?}")),
        }
    }
}

/// Absolute channel-summed Laplacian response with edge-clamped borders.
pub fn laplacian_response(features: &FeatureMap) -> ScoreMap {
    let (h, w) = (features.height(), features.width());
    let mut acc = vec![0.0f64; h * w];
    for c in 0..features.channels() {
        let plane = features.channel(c);
        for y in 0..h {
            let rows = [y.saturating_sub(1), y, (y + 1).min(h - 1)];
            for x in 0..w {
                let cols = [x.saturating_sub(1), x, (x + 1).min(w - 1)];
                let mut sum = 0.0f64;
                for (ky, &yy) in rows.iter().enumerate() {
                    for (kx, &xx) in cols.iter().enumerate() {
                        sum += LAPLACIAN[ky][kx] * plane[yy * w + xx] as f64;
                    }
                }
                acc[y * w + x] += sum;
            }
        }
    }
    acc.iter_mut().for_each(|v| *v = v.abs());
    ScoreMap {
        height: h,
        width: w,
        values: acc,
    }
}

/// Per-map min-max scaling onto `[0, 1]`; constant maps become all zeros.
pub fn normalize_scores(raw: &ScoreMap) -> ScoreMap {
    let (min, max) = (raw.min(), raw.max());
    let values = if max > min {
        let range = max - min;
        raw.values.iter().map(|v| ((v - min) / range).clamp(0.0, 1.0)).collect()
    } else {
        vec![0.0; raw.values.len()]
    };
    ScoreMap {
        height: raw.height,
        width: raw.width,
        values,
    }
}

/// Sets bit `(j, k)` iff `S(j, k) > u` with one uniform `u` in `[0, 1)` drawn
/// per position in row-major order.
pub fn sample_selection_mask<R: Rng + ?Sized>(scores: &ScoreMap, rng: &mut R) -> SelectionMask {
    let bits = scores
        .values
        .iter()
        .map(|&s| s > rng.gen::<f64>())
        .collect();
    SelectionMask {
        height: scores.height,
        width: scores.width,
        bits,
    }
}

/// Selection probabilities for one image under `mode`.
pub fn selection_scores(features: &FeatureMap, mode: SelectionMode) -> ScoreMap {
    let (h, w) = (features.height(), features.width());
    match mode {
        SelectionMode::Gradient => normalize_scores(&laplacian_response(features)),
        SelectionMode::Random => {
            let mean = normalize_scores(&laplacian_response(features)).mean();
            ScoreMap {
                height: h,
                width: w,
                values: vec![mean; h * w],
            }
        }
        SelectionMode::All => ScoreMap {
            height: h,
            width: w,
            values: vec![1.0; h * w],
        },
    }
}

/// Row-major indices of the `ceil(percent * H * W / 100)` highest scores;
/// ties keep row-major order.
pub fn top_positions(scores: &ScoreMap, percent: usize) -> Vec<usize> {
    let n = scores.values.len();
    let k = (n * percent).div_ceil(100).clamp(1, n);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| scores.values[b].total_cmp(&scores.values[a]).then(a.cmp(&b)));
    order.truncate(k);
    order.sort_unstable();
    order
}

/// Origin of a repository row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    /// Index into [`Repository::sample_ids`].
    pub sample: usize,
    pub row: usize,
    pub col: usize,
}

/// Row-major bank of feature vectors with per-row origin.
#[derive(Debug, Clone, PartialEq)]
pub struct Repository {
    dim: usize,
    data: Vec<f32>,
    provenance: Vec<Provenance>,
    sample_ids: Vec<String>,
}

/// A repository whose rows have been passed through the mapping network.
pub type MappedRepository = Repository;

impl Repository {
    pub fn new(
        dim: usize,
        data: Vec<f32>,
        provenance: Vec<Provenance>,
        sample_ids: Vec<String>,
    ) -> Result<Self> {
        if dim == 0 || provenance.is_empty() {
            return Err(Error::argument("selector", "repository must be non-empty"));
        }
        if data.len() != dim * provenance.len() {
            return Err(Error::argument(
                "selector",
                format!(
                    "{} provenance entries but {} values of dimension {dim}",
                    provenance.len(),
                    data.len()
                ),
            ));
        }
        if let Some(p) = provenance.iter().find(|p| p.sample >= sample_ids.len()) {
            return Err(Error::argument(
                "selector",
                format!("provenance refers to unknown sample index {}", p.sample),
            ));
        }
        Ok(Self {
            dim,
            data,
            provenance,
            sample_ids,
        })
    }

    pub fn len(&self) -> usize {
        self.provenance.len()
    }

    pub fn is_empty(&self) -> bool {
        self.provenance.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> std::slice::ChunksExact<'_, f32> {
        self.data.chunks_exact(self.dim)
    }

    pub fn provenance(&self) -> &[Provenance] {
        &self.provenance
    }

    pub fn sample_ids(&self) -> &[String] {
        &self.sample_ids
    }

    /// Same provenance, new row contents.
    pub fn with_rows(&self, dim: usize, data: Vec<f32>) -> Result<Self> {
        Self::new(dim, data, self.provenance.clone(), self.sample_ids.clone())
    }
}

/// What one image contributes to the repository.
#[derive(Debug, Clone)]
struct ImageSelection {
    channels: usize,
    selected: Vec<(usize, usize)>,
    fallback: Vec<(usize, usize)>,
    rows: Vec<f32>,
    fallback_rows: Vec<f32>,
}

fn select_image(features: &FeatureMap, mode: SelectionMode, seed: u64) -> ImageSelection {
    let scores = selection_scores(features, mode);
    let mask = match mode {
        SelectionMode::All => SelectionMask {
            height: scores.height,
            width: scores.width,
            bits: vec![true; scores.values.len()],
        },
        _ => sample_selection_mask(&scores, &mut rng::StreamRng::seed_from_u64(seed)),
    };
    let w = features.width();
    let fallback: Vec<_> = top_positions(&scores, FALLBACK_PERCENT)
        .into_iter()
        .map(|i| (i / w, i % w))
        .collect();
    let selected: Vec<_> = mask.positions().collect();
    let gather = |positions: &[(usize, usize)]| {
        let mut rows = Vec::with_capacity(positions.len() * features.channels());
        for &(y, x) in positions {
            features.vector_into(y, x, &mut rows);
        }
        rows
    };
    ImageSelection {
        channels: features.channels(),
        rows: gather(&selected),
        fallback_rows: gather(&fallback),
        selected,
        fallback,
    }
}

/// Builds the repository from the training images.
///
/// `load(i)` returns the fused features of training image `i`. Image `i`
/// draws its mask from stream `derive(derive(seed, SELECTION), i)`, so the
/// result does not depend on how images are scheduled across threads. If no
/// image selects anything, each image instead contributes its top 1% of
/// positions by score.
pub fn build_repository<F>(
    sample_ids: &[String],
    load: F,
    mode: SelectionMode,
    seed: u64,
) -> Result<Repository>
where
    F: Fn(usize) -> Result<FeatureMap> + Sync,
{
    if sample_ids.is_empty() {
        return Err(Error::argument(
            "selector",
            "at least one training sample is required",
        ));
    }
    let base = rng::derive(seed, rng::SELECTION);
    let selections = (0..sample_ids.len())
        .into_par_iter()
        .map(|i| Ok(select_image(&load(i)?, mode, rng::derive(base, i as u64))))
        .collect::<Result<Vec<_>>>()?;

    let dim = selections[0].channels;
    if let Some(i) = selections.iter().position(|s| s.channels != dim) {
        return Err(Error::argument(
            "selector",
            format!(
                "sample {:?} has {} channels, expected {dim}",
                sample_ids[i], selections[i].channels
            ),
        ));
    }

    let use_fallback = selections.iter().all(|s| s.selected.is_empty());
    let mut data = Vec::new();
    let mut provenance = Vec::new();
    for (sample, s) in selections.into_iter().enumerate() {
        let (positions, rows) = if use_fallback {
            (s.fallback, s.fallback_rows)
        } else {
            (s.selected, s.rows)
        };
        provenance.extend(positions.into_iter().map(|(row, col)| Provenance { sample, row, col }));
        data.extend(rows);
    }
    Repository::new(dim, data, provenance, sample_ids.to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{any, prop_assert, proptest};

    fn sliding_window_oracle(f: &FeatureMap) -> Vec<f64> {
        let (h, w) = (f.height() as isize, f.width() as isize);
        let mut out = Vec::new();
        for y in 0..h {
            for x in 0..w {
                let mut total = 0.0f64;
                for dy in -1isize..=1 {
                    for dx in -1isize..=1 {
                        let yy = (y + dy).clamp(0, h - 1) as usize;
                        let xx = (x + dx).clamp(0, w - 1) as usize;
                        let weight = if dy == 0 && dx == 0 { 8.0 } else { -1.0 };
                        for c in 0..f.channels() {
                            total += weight * f.get(c, yy, xx) as f64;
                        }
                    }
                }
                out.push(total.abs());
            }
        }
        out
    }

    fn impulse(channels: usize) -> FeatureMap {
        let mut data = vec![0.0; channels * 9];
        for c in 0..channels {
            data[c * 9 + 4] = 1.0;
        }
        FeatureMap::new(channels, 3, 3, data).unwrap()
    }

    #[test]
    fn constant_map_has_no_gradient() {
        let f = FeatureMap::filled(3, 5, 4, 2.5).unwrap();
        assert!(laplacian_response(&f).values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn impulse_response() {
        let r = laplacian_response(&impulse(1));
        assert_eq!(r.values(), &[1.0, 1.0, 1.0, 1.0, 8.0, 1.0, 1.0, 1.0, 1.0]);
        assert_eq!(r.values(), sliding_window_oracle(&impulse(1)).as_slice());
        let doubled = laplacian_response(&impulse(2));
        for (a, b) in doubled.values().iter().zip(r.values()) {
            assert_eq!(*a, 2.0 * b);
        }
    }

    #[test]
    fn normalization_examples() {
        let raw = ScoreMap::new(2, 2, vec![0.0, 8.0, 4.0, 8.0]).unwrap();
        assert_eq!(normalize_scores(&raw).values(), &[0.0, 1.0, 0.5, 1.0]);
        let flat = ScoreMap::filled(3, 3, 4.2).unwrap();
        assert!(normalize_scores(&flat).values().iter().all(|&v| v == 0.0));
        let binary = ScoreMap::new(1, 3, vec![0.0, 1.0, 1.0]).unwrap();
        assert_eq!(normalize_scores(&binary), binary);
    }

    #[test]
    fn extreme_scores_select_deterministically() {
        let mut rng = rng::StreamRng::seed_from_u64(3);
        let ones = ScoreMap::filled(10, 10, 1.0).unwrap();
        assert_eq!(sample_selection_mask(&ones, &mut rng).count(), 100);
        let zeros = ScoreMap::filled(10, 10, 0.0).unwrap();
        assert_eq!(sample_selection_mask(&zeros, &mut rng).count(), 0);
    }

    #[test]
    fn half_probability_concentrates() {
        let half = ScoreMap::filled(100, 100, 0.5).unwrap();
        for seed in 0..10 {
            let mut rng = rng::StreamRng::seed_from_u64(seed);
            let frac = sample_selection_mask(&half, &mut rng).count() as f64 / 10_000.0;
            assert!((0.47..=0.53).contains(&frac), "seed {seed}: {frac}");
        }
    }

    fn random_map(c: usize, h: usize, w: usize, seed: u64) -> FeatureMap {
        let mut rng = rng::StreamRng::seed_from_u64(seed);
        FeatureMap::new(c, h, w, (0..c * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn repository_is_union_of_masks() {
        let maps: Vec<_> = (0..2).map(|s| random_map(4, 6, 6, s)).collect();
        let ids = vec!["a".to_string(), "b".to_string()];
        let repo = build_repository(&ids, |i| Ok(maps[i].clone()), SelectionMode::Gradient, 11).unwrap();

        let base = rng::derive(11, rng::SELECTION);
        let mut expected = 0;
        for (i, map) in maps.iter().enumerate() {
            let scores = selection_scores(map, SelectionMode::Gradient);
            let mut r = rng::StreamRng::seed_from_u64(rng::derive(base, i as u64));
            expected += sample_selection_mask(&scores, &mut r).count();
        }
        assert_eq!(repo.len(), expected);
        assert_eq!(repo.dim(), 4);
        for (row, p) in repo.rows().zip(repo.provenance()) {
            let v = maps[p.sample].vector_at(p.row, p.col);
            assert_eq!(
                row.iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
                v.iter().map(|x| x.to_bits()).collect::<Vec<_>>()
            );
        }
    }

    #[test]
    fn constant_images_trigger_fallback() {
        let map = FeatureMap::filled(3, 10, 15, 1.0).unwrap();
        let ids: Vec<String> = (0..3).map(|i| i.to_string()).collect();
        let repo = build_repository(&ids, |_| Ok(map.clone()), SelectionMode::Gradient, 5).unwrap();
        // ceil(0.01 * 150) = 2 rows per image, the first two in row-major order.
        assert_eq!(repo.len(), 6);
        for (i, p) in repo.provenance().iter().enumerate() {
            assert_eq!(p.sample, i / 2);
            assert_eq!((p.row, p.col), (0, i % 2));
        }
    }

    #[test]
    fn single_peak_always_selected() {
        let mut data = vec![0.0; 25];
        data[12] = 1.0;
        let map = FeatureMap::new(1, 5, 5, data).unwrap();
        let scores = selection_scores(&map, SelectionMode::Gradient);
        assert_eq!(scores.get(2, 2), 1.0);
        let ids = vec!["x".to_string()];
        for seed in 0..100 {
            let repo = build_repository(&ids, |_| Ok(map.clone()), SelectionMode::Gradient, seed).unwrap();
            assert!(repo.provenance().iter().any(|p| (p.row, p.col) == (2, 2)), "seed {seed}");
        }
    }

    #[test]
    fn all_mode_keeps_every_position() {
        let map = random_map(2, 3, 4, 9);
        let ids = vec!["x".to_string()];
        let repo = build_repository(&ids, |_| Ok(map.clone()), SelectionMode::All, 0).unwrap();
        assert_eq!(repo.len(), 12);
        assert_eq!(repo.data(), map.to_rows().as_slice());
    }

    #[test]
    fn random_mode_uses_mean_gradient() {
        let map = random_map(2, 6, 6, 1);
        let g = selection_scores(&map, SelectionMode::Gradient);
        let r = selection_scores(&map, SelectionMode::Random);
        assert!(r.values().iter().all(|&v| v == g.mean()));
    }

    #[test]
    fn mismatched_channels_and_empty_input_fail() {
        let maps = [random_map(2, 3, 3, 0), random_map(3, 3, 3, 1)];
        let ids = vec!["a".to_string(), "b".to_string()];
        assert!(build_repository(&ids, |i| Ok(maps[i].clone()), SelectionMode::All, 0).is_err());
        assert!(build_repository(&[], |i| Ok(maps[i].clone()), SelectionMode::All, 0).is_err());
    }

    #[test]
    fn top_positions_break_ties_row_major() {
        let s = ScoreMap::new(2, 3, vec![0.2, 0.9, 0.2, 0.9, 0.1, 0.0]).unwrap();
        assert_eq!(top_positions(&s, 50), vec![0, 1, 3]);
        let flat = ScoreMap::filled(3, 100, 0.0).unwrap();
        assert_eq!(top_positions(&flat, 1), vec![0, 1, 2]);
    }

    proptest! {
        #[test]
        fn laplacian_matches_sliding_window(
            c in 1usize..5, h in 1usize..9, w in 1usize..9, seed in any::<u64>()
        ) {
            let f = random_map(c, h, w, seed);
            let fast = laplacian_response(&f);
            for (a, b) in fast.values().iter().zip(sliding_window_oracle(&f)) {
                prop_assert!((a - b).abs() <= 1e-9);
            }
        }

        #[test]
        fn normalized_range(values in proptest::collection::vec(0f64..1e6, 1..50)) {
            let n = values.len();
            let s = normalize_scores(&ScoreMap::new(1, n, values).unwrap());
            prop_assert!(s.values().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }
}
