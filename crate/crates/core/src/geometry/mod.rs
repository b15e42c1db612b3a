//! Pixel geometry: click distance maps, per-instance channel normalization,
//! mask boundaries and the IoU family of metrics.
//!
//! Grids are row-major `(y, x)` ndarrays throughout the crate.

mod edt;
mod metrics;
mod resize;

use ndarray::{Array2, ArrayView2, Zip};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{Click, DataError};

pub use edt::squared_edt;
pub use resize::{bilinear_matrix, resize_bilinear, resize_nearest, Letterbox};
pub use metrics::{
    boundary_band, boundary_iou, default_boundary_width, iou, mask_boundary, mask_boundary_iou,
    mask_iou,
};

/// Default truncation distance for click maps, in pixels.
pub const DEFAULT_EDT_CAP: f64 = 255.0;

#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("click at (y={y}, x={x}) is outside the {height}x{width} grid")]
    ClickOutOfBounds { y: usize, x: usize, height: usize, width: usize },
    #[error("grid shapes differ: {0:?} vs {1:?}")]
    ShapeMismatch((usize, usize), (usize, usize)),
    #[error("grid shape must be positive, got {0:?}")]
    EmptyShape((usize, usize)),
    #[error("distance cap must be positive and finite, got {0}")]
    InvalidCap(f64),
    #[error("non-finite value {value} at (y={y}, x={x})")]
    NonFinite { y: usize, x: usize, value: f64 },
    #[error("mask has no foreground pixels")]
    EmptyMask,
    #[error("boundary band width must be at least 1 pixel, got {0}")]
    InvalidBandWidth(usize),
    #[error(transparent)]
    Data(#[from] DataError),
}

/// A pixel coordinate.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Pixel {
    pub y: usize,
    pub x: usize,
}

impl Pixel {
    pub fn new(y: usize, x: usize) -> Self {
        Pixel { y, x }
    }

    pub fn distance(&self, other: &Pixel) -> f64 {
        let dy = self.y as f64 - other.y as f64;
        let dx = self.x as f64 - other.x as f64;
        (dy * dy + dx * dx).sqrt()
    }
}

impl From<&Click> for Pixel {
    fn from(c: &Click) -> Self {
        Pixel { y: c.y as usize, x: c.x as usize }
    }
}

/// Distance in pixels to the nearest click, truncated at `cap`.
#[derive(Clone, Debug, PartialEq)]
pub struct DistanceMap {
    pub values: Array2<f64>,
    pub cap: f64,
}

impl DistanceMap {
    pub fn dim(&self) -> (usize, usize) {
        self.values.dim()
    }

    /// `cap - distance`: largest at the clicks, zero far away.
    pub fn proximity(&self) -> Array2<f64> {
        self.values.mapv(|d| self.cap - d)
    }
}

pub fn euclidean_distance_map(
    clicks: &[Pixel],
    shape: (usize, usize),
    cap: f64,
) -> Result<DistanceMap, GeometryError> {
    let (height, width) = shape;
    if height == 0 || width == 0 {
        return Err(GeometryError::EmptyShape(shape));
    }
    if !(cap.is_finite() && cap > 0.0) {
        return Err(GeometryError::InvalidCap(cap));
    }
    let mut seeds = Array2::from_elem(shape, false);
    for p in clicks {
        if p.y >= height || p.x >= width {
            return Err(GeometryError::ClickOutOfBounds { y: p.y, x: p.x, height, width });
        }
        seeds[[p.y, p.x]] = true;
    }
    let values = squared_edt(seeds.view()).mapv(|d2| d2.sqrt().min(cap));
    Ok(DistanceMap { values, cap })
}

/// Positive proximity minus negative proximity, so any mix of clicks fits in
/// a single channel.
pub fn merge_polarity_maps(
    pos: &DistanceMap,
    neg: Option<&DistanceMap>,
) -> Result<Array2<f64>, GeometryError> {
    let mut out = pos.proximity();
    if let Some(neg) = neg {
        if neg.dim() != pos.dim() {
            return Err(GeometryError::ShapeMismatch(pos.dim(), neg.dim()));
        }
        Zip::from(&mut out).and(&neg.values).for_each(|o, &d| *o -= neg.cap - d);
    }
    Ok(out)
}

/// Target interval of [`normalize_channel`].
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormalizeRange {
    /// `[-1, 1]`
    #[default]
    Signed,
    /// `[0, 1]`
    Unit,
}

impl NormalizeRange {
    pub fn bounds(self) -> (f64, f64) {
        match self {
            NormalizeRange::Signed => (-1.0, 1.0),
            NormalizeRange::Unit => (0.0, 1.0),
        }
    }
}

/// A channel min-max scaled into a fixed interval.
#[derive(Clone, Debug, PartialEq)]
pub struct NormalizedChannel {
    pub values: Array2<f64>,
}

/// Affine min-max map onto `[-1, 1]`. Constant input becomes all zeros.
pub fn normalize_channel(values: ArrayView2<'_, f64>) -> Result<NormalizedChannel, GeometryError> {
    normalize_channel_in(values, None, NormalizeRange::Signed)
}

/// Like [`normalize_channel`], with the min/max taken only over pixels where
/// `valid` is set. Invalid pixels are mapped by the same affine transform
/// and then clamped into range.
pub fn normalize_channel_in(
    values: ArrayView2<'_, f64>,
    valid: Option<ArrayView2<'_, bool>>,
    range: NormalizeRange,
) -> Result<NormalizedChannel, GeometryError> {
    if let Some(v) = &valid {
        if v.dim() != values.dim() {
            return Err(GeometryError::ShapeMismatch(values.dim(), v.dim()));
        }
    }
    if let Some(((y, x), &value)) = values.indexed_iter().find(|(_, v)| !v.is_finite()) {
        return Err(GeometryError::NonFinite { y, x, value });
    }
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for (idx, &v) in values.indexed_iter() {
        if valid.as_ref().is_none_or(|m| m[idx]) {
            lo = lo.min(v);
            hi = hi.max(v);
        }
    }
    let (a, b) = range.bounds();
    let span = hi - lo;
    let out = if !(span > 0.0) {
        Array2::zeros(values.dim())
    } else {
        values.mapv(|v| (a + (v - lo) / span * (b - a)).clamp(a, b))
    };
    Ok(NormalizedChannel { values: out })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    #[test]
    fn single_click_distances() {
        let m = euclidean_distance_map(&[Pixel::new(0, 0)], (3, 3), 255.0).unwrap();
        assert_eq!(m.values[[0, 0]], 0.0);
        assert!((m.values[[2, 2]] - 8f64.sqrt()).abs() < 1e-12);
        assert!((m.values[[2, 2]] - 2.8284).abs() < 1e-4);
    }

    #[test]
    fn no_clicks_is_cap() {
        let m = euclidean_distance_map(&[], (4, 4), 255.0).unwrap();
        assert!(m.values.iter().all(|&v| v == 255.0));
    }

    #[test]
    fn cap_truncates() {
        let m = euclidean_distance_map(&[Pixel::new(0, 0)], (1, 40), 10.0).unwrap();
        assert_eq!(m.values[[0, 10]], 10.0);
        assert_eq!(m.values[[0, 39]], 10.0);
        assert_eq!(m.values[[0, 9]], 9.0);
    }

    #[test]
    fn out_of_bounds_click_is_reported() {
        let err = euclidean_distance_map(&[Pixel::new(1, 5)], (4, 4), 255.0).unwrap_err();
        assert!(matches!(err, GeometryError::ClickOutOfBounds { y: 1, x: 5, .. }));
        assert!(euclidean_distance_map(&[], (0, 4), 255.0).is_err());
        assert!(euclidean_distance_map(&[], (4, 4), 0.0).is_err());
    }

    #[test]
    fn merge_positive_only_peaks_at_click() {
        let pos = euclidean_distance_map(&[Pixel::new(3, 4)], (8, 8), 255.0).unwrap();
        let m = merge_polarity_maps(&pos, None).unwrap();
        assert_eq!(m[[3, 4]], 255.0);
        assert!(m[[3, 5]] < m[[3, 4]] && m[[3, 6]] < m[[3, 5]]);
    }

    #[test]
    fn merge_identical_sets_cancel() {
        let clicks = [Pixel::new(1, 1), Pixel::new(5, 2)];
        let pos = euclidean_distance_map(&clicks, (7, 7), 255.0).unwrap();
        let neg = euclidean_distance_map(&clicks, (7, 7), 255.0).unwrap();
        assert!(merge_polarity_maps(&pos, Some(&neg)).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn merge_one_positive_one_negative() {
        let pos = euclidean_distance_map(&[Pixel::new(0, 0)], (1, 32), 255.0).unwrap();
        let neg = euclidean_distance_map(&[Pixel::new(0, 31)], (1, 32), 255.0).unwrap();
        let m = merge_polarity_maps(&pos, Some(&neg)).unwrap();
        // (255 - 0) - (255 - 31)
        assert_eq!(m[[0, 0]], 31.0);
        assert_eq!(m[[0, 31]], -31.0);
        for x in 0..32 {
            assert_eq!(m[[0, x]], -m[[0, 31 - x]]);
        }
        // brute-force distances
        for x in 0..32 {
            let expected = (255.0 - x as f64) - (255.0 - (31 - x) as f64);
            assert_eq!(m[[0, x]], expected);
        }
    }

    #[test]
    fn merge_shape_mismatch() {
        let pos = euclidean_distance_map(&[], (2, 2), 255.0).unwrap();
        let neg = euclidean_distance_map(&[], (2, 3), 255.0).unwrap();
        assert!(merge_polarity_maps(&pos, Some(&neg)).is_err());
    }

    #[test]
    fn normalize_endpoints() {
        let n = normalize_channel(array![[0.0, 5.0, 10.0]].view()).unwrap();
        assert_eq!(n.values, array![[-1.0, 0.0, 1.0]]);
        let c = normalize_channel(Array2::from_elem((3, 3), 7.0).view()).unwrap();
        assert!(c.values.iter().all(|&v| v == 0.0));
        assert!(normalize_channel(array![[0.0, f64::NAN]].view()).is_err());
        assert!(normalize_channel(array![[0.0, f64::INFINITY]].view()).is_err());
    }

    #[test]
    fn normalize_unit_range() {
        let n = normalize_channel_in(array![[2.0, 4.0, 6.0]].view(), None, NormalizeRange::Unit).unwrap();
        assert_eq!(n.values, array![[0.0, 0.5, 1.0]]);
    }

    #[test]
    fn normalize_over_valid_region() {
        let v = array![[0.0, 10.0, 100.0]];
        let valid = array![[true, true, false]];
        let n = normalize_channel_in(v.view(), Some(valid.view()), NormalizeRange::Signed).unwrap();
        assert_eq!(n.values, array![[-1.0, 1.0, 1.0]]);
    }

    proptest! {
        #[test]
        fn normalize_is_affine_and_idempotent(
            vals in proptest::collection::vec(-1e3f64..1e3, 2..200)
        ) {
            let n = vals.len();
            let grid = Array2::from_shape_vec((1, n), vals.clone()).unwrap();
            let out = normalize_channel(grid.view()).unwrap().values;
            let lo = vals.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            if hi > lo {
                prop_assert_eq!(out.iter().cloned().fold(f64::INFINITY, f64::min), -1.0);
                prop_assert_eq!(out.iter().cloned().fold(f64::NEG_INFINITY, f64::max), 1.0);
                for i in 0..n {
                    let expected = 2.0 * (vals[i] - lo) / (hi - lo) - 1.0;
                    prop_assert!((out[[0, i]] - expected).abs() < 1e-9);
                    for j in 0..n {
                        if vals[i] < vals[j] {
                            prop_assert!(out[[0, i]] <= out[[0, j]]);
                        }
                    }
                }
                let again = normalize_channel(out.view()).unwrap().values;
                for (a, b) in again.iter().zip(out.iter()) {
                    prop_assert!((a - b).abs() < 1e-6);
                }
            } else {
                prop_assert!(out.iter().all(|&v| v == 0.0));
            }
        }
    }
}
