//! Search-region cropping and fixed-budget point resampling.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use crate::data::{Box3D, PointFrame};
use crate::error::{CoreError, Result};

/// Keep points within an axis-aligned cube around the previous box center:
/// `|p - c|_inf <= max(w,l,h)/2 + margin`, boundary inclusive. Coordinates
/// of the result are re-centered on `prev_box.center`.
pub fn crop_search_region(frame: &PointFrame, prev_box: &Box3D, margin: f64) -> PointFrame {
    let (cropped, _) = crop_search_region_indices(frame, prev_box, margin);
    cropped
}

/// [`crop_search_region`] plus the kept input row indices, for callers that
/// must carry per-point labels through the crop.
pub fn crop_search_region_indices(
    frame: &PointFrame,
    prev_box: &Box3D,
    margin: f64,
) -> (PointFrame, Vec<usize>) {
    assert!(margin >= 0.0, "crop margin must be >= 0");
    let half = prev_box.size.iter().cloned().fold(f64::MIN, f64::max) / 2.0 + margin;
    let c = prev_box.center;
    let mut kept = Vec::new();
    for (i, row) in frame.coords.rows().into_iter().enumerate() {
        let inside = (row[0] - c[0]).abs() <= half
            && (row[1] - c[1]).abs() <= half
            && (row[2] - c[2]).abs() <= half;
        if inside {
            kept.push(i);
        }
    }
    let mut coords = Array2::zeros((kept.len(), 3));
    for (r, &i) in kept.iter().enumerate() {
        for d in 0..3 {
            coords[(r, d)] = frame.coords[(i, d)] - c[d];
        }
    }
    let feats = frame.feats.as_ref().map(|f| {
        let mut out = Array2::zeros((kept.len(), f.ncols()));
        for (r, &i) in kept.iter().enumerate() {
            out.row_mut(r).assign(&f.row(i));
        }
        out
    });
    (
        PointFrame {
            coords,
            feats,
            t: frame.t,
        },
        kept,
    )
}

/// Resample a frame to exactly `n` points and append a validity-flag channel
/// (1 for points drawn from the input, 0 for origin fillers).
///
/// Input of size >= n: uniform sampling without replacement. Size in (0, n):
/// every input point kept, deficit filled by sampling with replacement.
/// Empty input: n origin points with flag 0 so downstream shapes never
/// degenerate.
pub fn resample_points(frame: &PointFrame, n: usize, seed: u64) -> Result<PointFrame> {
    Ok(resample_points_indices(frame, n, seed)?.0)
}

/// [`resample_points`] plus the source row of each output point
/// (`None` for origin fillers).
pub fn resample_points_indices(
    frame: &PointFrame,
    n: usize,
    seed: u64,
) -> Result<(PointFrame, Vec<Option<usize>>)> {
    if n == 0 {
        return Err(CoreError::Argument("resample budget must be >= 1".into()));
    }
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let size = frame.len();
    let base_channels = frame.channels();

    let picks: Vec<Option<usize>> = if size == 0 {
        vec![None; n]
    } else if size >= n {
        // Partial Fisher-Yates: first n entries of a seeded permutation.
        let mut idx: Vec<usize> = (0..size).collect();
        for i in 0..n {
            let j = rng.gen_range(i..size);
            idx.swap(i, j);
        }
        idx[..n].iter().map(|&i| Some(i)).collect()
    } else {
        let mut picks: Vec<Option<usize>> = (0..size).map(Some).collect();
        for _ in size..n {
            picks.push(Some(rng.gen_range(0..size)));
        }
        picks
    };

    let mut coords = Array2::zeros((n, 3));
    let mut feats = Array2::zeros((n, base_channels + 1));
    for (r, pick) in picks.iter().enumerate() {
        if let Some(i) = pick {
            for d in 0..3 {
                coords[(r, d)] = frame.coords[(*i, d)];
            }
            if let Some(f) = &frame.feats {
                for c in 0..base_channels {
                    feats[(r, c)] = f[(*i, c)];
                }
            }
            feats[(r, base_channels)] = 1.0;
        }
    }
    Ok((
        PointFrame {
            coords,
            feats: Some(feats),
            t: frame.t,
        },
        picks,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::Rng;

    fn frame(coords: Array2<f64>) -> PointFrame {
        PointFrame::new(coords, None, 0).unwrap()
    }

    #[test]
    fn crop_excludes_far_point_includes_boundary() {
        let f = frame(array![[10.0, 0.0, 0.0], [3.0, 0.0, 0.0], [0.0, 0.0, 0.0]]);
        let b = Box3D::new([0.0; 3], [2.0, 2.0, 2.0], 0.0).unwrap();
        let out = crop_search_region(&f, &b, 2.0);
        // Half-extent is 1 + 2 = 3: (10,0,0) out, (3,0,0) exactly on boundary in.
        assert_eq!(out.len(), 2);
        assert_eq!(out.coords.row(0).to_vec(), vec![3.0, 0.0, 0.0]);
    }

    #[test]
    fn crop_matches_brute_force_predicate() {
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(42);
        let coords = Array2::from_shape_fn((200, 3), |_| rng.gen_range(-8.0..8.0));
        let f = frame(coords.clone());
        let b = Box3D::new([1.0, -0.5, 0.25], [2.0, 3.0, 1.5], 0.7).unwrap();
        let margin = 1.5;
        let half = 3.0 / 2.0 + margin;
        let (out, kept) = crop_search_region_indices(&f, &b, margin);
        let expect: Vec<usize> = (0..200)
            .filter(|&i| {
                (0..3).all(|d| (coords[(i, d)] - b.center[d]).abs() <= half)
            })
            .collect();
        assert_eq!(kept, expect);
        assert_eq!(out.len(), expect.len());
        // Re-centered output plus center restores the input points.
        for (r, &i) in kept.iter().enumerate() {
            for d in 0..3 {
                assert!((out.coords[(r, d)] + b.center[d] - coords[(i, d)]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn resample_with_replacement_keeps_members() {
        let f = frame(array![[1.0, 0.0, 0.0], [2.0, 0.0, 0.0]]);
        let (out, picks) = resample_points_indices(&f, 4, 9).unwrap();
        assert_eq!(out.len(), 4);
        for (r, p) in picks.iter().enumerate() {
            let i = p.unwrap();
            assert!(i < 2);
            assert_eq!(out.coords[(r, 0)], f.coords[(i, 0)]);
            assert_eq!(out.feats.as_ref().unwrap()[(r, 0)], 1.0);
        }
    }

    #[test]
    fn resample_without_replacement_is_distinct() {
        let coords = Array2::from_shape_fn((10, 3), |(i, d)| (i * 3 + d) as f64);
        let f = frame(coords);
        let (out, picks) = resample_points_indices(&f, 4, 3).unwrap();
        assert_eq!(out.len(), 4);
        let mut seen: Vec<usize> = picks.iter().map(|p| p.unwrap()).collect();
        seen.sort_unstable();
        seen.dedup();
        assert_eq!(seen.len(), 4, "indices must be distinct");
    }

    #[test]
    fn resample_empty_gives_origin_and_zero_flag() {
        let f = frame(Array2::zeros((0, 3)));
        let (out, picks) = resample_points_indices(&f, 4, 0).unwrap();
        assert_eq!(out.len(), 4);
        assert!(picks.iter().all(|p| p.is_none()));
        assert!(out.coords.iter().all(|&v| v == 0.0));
        let feats = out.feats.unwrap();
        assert_eq!(feats.ncols(), 1);
        assert!(feats.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn resample_zero_budget_is_an_error() {
        let f = frame(array![[0.0, 0.0, 0.0]]);
        assert!(resample_points(&f, 0, 0).is_err());
    }

    #[test]
    fn resample_is_deterministic_per_seed() {
        let coords = Array2::from_shape_fn((50, 3), |(i, d)| ((i + d) % 7) as f64);
        let f = frame(coords);
        let a = resample_points(&f, 16, 5).unwrap();
        let b = resample_points(&f, 16, 5).unwrap();
        let c = resample_points(&f, 16, 6).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }
}
