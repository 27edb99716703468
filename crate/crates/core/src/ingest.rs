//! Multi-level feature fusion.

use crate::error::{Error, Result};
use crate::manifest::SampleRecord;
use crate::tensor::{read_tensor_file, FeatureMap};

/// Input index range `[start, end)` averaged into output cell `i`.
#[inline]
fn bin(i: usize, input: usize, output: usize) -> (usize, usize) {
    let start = i * input / output;
    let end = ((i + 1) * input).div_ceil(output);
    (start, end)
}

/// Adaptive average resize of every channel to `height x width`.
///
/// Each output cell averages the input cells of its bin; when enlarging, bins
/// cover a single input cell and the map is block-replicated.
pub fn adaptive_resize(map: &FeatureMap, height: usize, width: usize) -> Result<FeatureMap> {
    if height == 0 || width == 0 {
        return Err(Error::argument("ingest", "resize target must be positive"));
    }
    if height == map.height() && width == map.width() {
        return Ok(map.clone());
    }
    let (in_h, in_w) = (map.height(), map.width());
    let rows: Vec<_> = (0..height).map(|i| bin(i, in_h, height)).collect();
    let cols: Vec<_> = (0..width).map(|i| bin(i, in_w, width)).collect();

    let mut out = Vec::with_capacity(map.channels() * height * width);
    for c in 0..map.channels() {
        let plane = map.channel(c);
        for &(y0, y1) in &rows {
            for &(x0, x1) in &cols {
                let mut sum = 0.0f64;
                for y in y0..y1 {
                    for x in x0..x1 {
                        sum += plane[y * in_w + x] as f64;
                    }
                }
                out.push((sum / ((y1 - y0) * (x1 - x0)) as f64) as f32);
            }
        }
    }
    FeatureMap::new(map.channels(), height, width, out)
}

/// Resizes every level to the largest spatial size present and concatenates
/// them along channels in list order.
pub fn fuse_levels(levels: &[FeatureMap]) -> Result<FeatureMap> {
    if levels.is_empty() {
        return Err(Error::argument("ingest", "cannot fuse an empty list of levels"));
    }
    if levels.len() == 1 {
        return Ok(levels[0].clone());
    }
    let height = levels.iter().map(FeatureMap::height).max().unwrap();
    let width = levels.iter().map(FeatureMap::width).max().unwrap();
    let channels: usize = levels.iter().map(FeatureMap::channels).sum();

    let mut data = Vec::with_capacity(channels * height * width);
    for level in levels {
        data.extend(adaptive_resize(level, height, width)?.into_data());
    }
    FeatureMap::new(channels, height, width, data)
}

/// Loads every level tensor of a record and fuses them.
pub fn load_features(record: &SampleRecord) -> Result<FeatureMap> {
    let levels = record
        .tensor_paths
        .iter()
        .map(read_tensor_file)
        .collect::<Result<Vec<_>>>()?;
    fuse_levels(&levels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Brute force: averages every input cell whose unit interval overlaps the
    /// output cell's interval `[i*I/O, (i+1)*I/O)` with positive length.
    fn oracle_resize(map: &FeatureMap, height: usize, width: usize) -> Vec<f32> {
        let overlaps = |cell: usize, i: usize, input: usize, output: usize| {
            cell * output < (i + 1) * input && (cell + 1) * output > i * input
        };
        let mut out = Vec::new();
        for c in 0..map.channels() {
            for i in 0..height {
                for j in 0..width {
                    let (mut sum, mut n) = (0.0f64, 0usize);
                    for y in 0..map.height() {
                        for x in 0..map.width() {
                            if overlaps(y, i, map.height(), height) && overlaps(x, j, map.width(), width) {
                                sum += map.get(c, y, x) as f64;
                                n += 1;
                            }
                        }
                    }
                    out.push((sum / n as f64) as f32);
                }
            }
        }
        out
    }

    #[test]
    fn single_level_is_identity() {
        let data: Vec<f32> = (0..128).map(|v| v as f32 * 0.5).collect();
        let map = FeatureMap::new(8, 4, 4, data).unwrap();
        assert_eq!(fuse_levels(std::slice::from_ref(&map)).unwrap(), map);
    }

    #[test]
    fn upsizing_replicates_blocks() {
        let a = FeatureMap::filled(2, 4, 4, 0.0).unwrap();
        let mut b = vec![0.0; 12];
        b[..4].copy_from_slice(&[1.0, 2.0, 3.0, 4.0]);
        let b = FeatureMap::new(3, 2, 2, b).unwrap();
        let fused = fuse_levels(&[a, b.clone()]).unwrap();
        assert_eq!((fused.channels(), fused.height(), fused.width()), (5, 4, 4));
        let expected = [
            1.0, 1.0, 2.0, 2.0, //
            1.0, 1.0, 2.0, 2.0, //
            3.0, 3.0, 4.0, 4.0, //
            3.0, 3.0, 4.0, 4.0,
        ];
        assert_eq!(fused.channel(2), &expected);
        assert_eq!(oracle_resize(&b, 4, 4)[..16], expected);
    }

    #[test]
    fn constants_survive_fusion() {
        let a = FeatureMap::filled(1, 2, 2, 5.0).unwrap();
        let b = FeatureMap::filled(1, 4, 4, 7.0).unwrap();
        let fused = fuse_levels(&[a, b]).unwrap();
        assert!(fused.channel(0).iter().all(|&v| v == 5.0));
        assert!(fused.channel(1).iter().all(|&v| v == 7.0));
    }

    #[test]
    fn downsizing_averages() {
        let map = FeatureMap::new(1, 2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let out = adaptive_resize(&map, 1, 1).unwrap();
        assert_eq!(out.data(), &[2.5]);
    }

    #[test]
    fn empty_list_is_an_argument_error() {
        assert!(matches!(fuse_levels(&[]), Err(Error::Argument { .. })));
    }

    proptest! {
        #[test]
        fn resize_matches_bin_oracle(
            (h, w, th, tw, data) in (1usize..7, 1usize..7, 1usize..9, 1usize..9).prop_flat_map(|(h, w, th, tw)| {
                (Just(h), Just(w), Just(th), Just(tw), proptest::collection::vec(-10f32..10.0, 2 * h * w))
            })
        ) {
            let map = FeatureMap::new(2, h, w, data).unwrap();
            let out = adaptive_resize(&map, th, tw).unwrap();
            let oracle = oracle_resize(&map, th, tw);
            for (a, b) in out.data().iter().zip(&oracle) {
                prop_assert!((a - b).abs() <= 1e-5, "{} vs {}", a, b);
            }
        }

        #[test]
        fn fused_shape_is_max_and_sum(
            shapes in proptest::collection::vec((1usize..4, 1usize..9, 1usize..9), 1..4),
            value in -3f32..3.0,
        ) {
            let levels: Vec<_> = shapes
                .iter()
                .map(|&(c, h, w)| FeatureMap::filled(c, h, w, value).unwrap())
                .collect();
            let fused = fuse_levels(&levels).unwrap();
            prop_assert_eq!(fused.channels(), shapes.iter().map(|s| s.0).sum::<usize>());
            prop_assert_eq!(fused.height(), shapes.iter().map(|s| s.1).max().unwrap());
            prop_assert_eq!(fused.width(), shapes.iter().map(|s| s.2).max().unwrap());
            prop_assert!(fused.data().iter().all(|&v| (v - value).abs() <= 1e-6 * value.abs().max(1.0)));
        }
    }
}
