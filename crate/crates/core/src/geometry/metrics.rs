use ndarray::{s, Array2, ArrayView2, Zip};

use super::{squared_edt, GeometryError, Pixel};
use crate::data::InstanceMask;

fn check_shapes(a: (usize, usize), b: (usize, usize)) -> Result<(), GeometryError> {
    if a == b {
        Ok(())
    } else {
        Err(GeometryError::ShapeMismatch(a, b))
    }
}

/// `|a ∩ b| / |a ∪ b|`, with two empty masks scoring 1.
pub fn mask_iou(a: ArrayView2<'_, bool>, b: ArrayView2<'_, bool>) -> Result<f64, GeometryError> {
    check_shapes(a.dim(), b.dim())?;
    let (mut inter, mut union) = (0usize, 0usize);
    Zip::from(&a).and(&b).for_each(|&p, &q| {
        inter += (p && q) as usize;
        union += (p || q) as usize;
    });
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

pub fn iou(pred: &InstanceMask, gt: &InstanceMask) -> Result<f64, GeometryError> {
    check_shapes(pred.shape(), gt.shape())?;
    mask_iou(pred.decode()?.view(), gt.decode()?.view())
}

/// Foreground pixels 4-adjacent to background or to the image frame, in
/// row-major order.
pub fn mask_boundary(mask: ArrayView2<'_, bool>) -> Result<Vec<Pixel>, GeometryError> {
    let (h, w) = mask.dim();
    let mut out = Vec::new();
    let mut any = false;
    for ((y, x), &v) in mask.indexed_iter() {
        if !v {
            continue;
        }
        any = true;
        let edge = y == 0
            || x == 0
            || y + 1 == h
            || x + 1 == w
            || !mask[[y - 1, x]]
            || !mask[[y + 1, x]]
            || !mask[[y, x - 1]]
            || !mask[[y, x + 1]];
        if edge {
            out.push(Pixel { y, x });
        }
    }
    if any {
        Ok(out)
    } else {
        Err(GeometryError::EmptyMask)
    }
}

/// Foreground pixels whose Euclidean distance to the nearest background
/// pixel is at most `d`. Pixels outside the frame count as background.
pub fn boundary_band(mask: ArrayView2<'_, bool>, d: usize) -> Array2<bool> {
    let (h, w) = mask.dim();
    let mut background = Array2::from_elem((h + 2, w + 2), true);
    Zip::from(background.slice_mut(s![1..h + 1, 1..w + 1]))
        .and(&mask)
        .for_each(|b, &m| *b = !m);
    let dist2 = squared_edt(background.view());
    let limit = (d * d) as f64;
    let mut band = Array2::from_elem((h, w), false);
    Zip::from(&mut band)
        .and(&mask)
        .and(dist2.slice(s![1..h + 1, 1..w + 1]))
        .for_each(|b, &m, &d2| *b = m && d2 <= limit);
    band
}

/// IoU restricted to each mask's inner contour band of width `d`.
pub fn mask_boundary_iou(
    pred: ArrayView2<'_, bool>,
    gt: ArrayView2<'_, bool>,
    d: usize,
) -> Result<f64, GeometryError> {
    check_shapes(pred.dim(), gt.dim())?;
    if d == 0 {
        return Err(GeometryError::InvalidBandWidth(d));
    }
    mask_iou(boundary_band(pred, d).view(), boundary_band(gt, d).view())
}

pub fn boundary_iou(pred: &InstanceMask, gt: &InstanceMask, d: usize) -> Result<f64, GeometryError> {
    check_shapes(pred.shape(), gt.shape())?;
    mask_boundary_iou(pred.decode()?.view(), gt.decode()?.view(), d)
}

/// Band width of 2% of the image diagonal, at least one pixel.
pub fn default_boundary_width(height: usize, width: usize) -> usize {
    let diag = ((height * height + width * width) as f64).sqrt();
    ((0.02 * diag).round() as usize).max(1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    fn rect(h: usize, w: usize, y0: usize, y1: usize, x0: usize, x1: usize) -> Array2<bool> {
        Array2::from_shape_fn((h, w), |(y, x)| y >= y0 && y < y1 && x >= x0 && x < x1)
    }

    #[test]
    fn iou_basic_cases() {
        let a = rect(8, 8, 1, 5, 1, 5);
        assert_eq!(mask_iou(a.view(), a.view()).unwrap(), 1.0);
        let b = rect(8, 8, 6, 8, 6, 8);
        assert_eq!(mask_iou(a.view(), b.view()).unwrap(), 0.0);
        let empty = Array2::from_elem((8, 8), false);
        assert_eq!(mask_iou(empty.view(), empty.view()).unwrap(), 1.0);
        assert_eq!(mask_iou(empty.view(), a.view()).unwrap(), 0.0);
    }

    #[test]
    fn iou_one_third() {
        // pred = {A, B}, gt = {B, C}
        let mut pred = Array2::from_elem((5, 7), false);
        let mut gt = Array2::from_elem((5, 7), false);
        pred[[0, 0]] = true;
        pred[[2, 3]] = true;
        gt[[2, 3]] = true;
        gt[[4, 6]] = true;
        assert!((mask_iou(pred.view(), gt.view()).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        let p = InstanceMask::from_mask("i", "p", "c", &pred);
        let g = InstanceMask::from_mask("i", "g", "c", &gt);
        assert!((iou(&p, &g).unwrap() - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn iou_shape_mismatch() {
        let a = Array2::from_elem((3, 3), true);
        let b = Array2::from_elem((3, 4), true);
        assert!(mask_iou(a.view(), b.view()).is_err());
        assert!(mask_boundary_iou(a.view(), b.view(), 1).is_err());
    }

    #[test]
    fn boundary_of_full_frame_is_perimeter() {
        let m = Array2::from_elem((4, 5), true);
        let b = mask_boundary(m.view()).unwrap();
        assert_eq!(b.len(), 2 * 5 + 2 * 2);
        assert!(b.iter().all(|p| p.y == 0 || p.y == 3 || p.x == 0 || p.x == 4));
    }

    #[test]
    fn boundary_of_single_pixel() {
        let mut m = Array2::from_elem((5, 5), false);
        m[[2, 2]] = true;
        assert_eq!(mask_boundary(m.view()).unwrap(), vec![Pixel::new(2, 2)]);
        assert!(matches!(
            mask_boundary(Array2::from_elem((3, 3), false).view()),
            Err(GeometryError::EmptyMask)
        ));
    }

    #[test]
    fn band_width_one_is_the_boundary() {
        let m = rect(10, 10, 2, 8, 1, 9);
        let band = boundary_band(m.view(), 1);
        let boundary = mask_boundary(m.view()).unwrap();
        assert_eq!(band.iter().filter(|&&v| v).count(), boundary.len());
        assert!(boundary.iter().all(|p| band[[p.y, p.x]]));
    }

    #[test]
    fn boundary_iou_basics() {
        let a = rect(16, 16, 2, 12, 3, 14);
        assert_eq!(mask_boundary_iou(a.view(), a.view(), 2).unwrap(), 1.0);
        let b = rect(16, 16, 13, 16, 0, 2);
        assert_eq!(mask_boundary_iou(a.view(), b.view(), 2).unwrap(), 0.0);
        assert!(mask_boundary_iou(a.view(), a.view(), 0).is_err());
    }

    #[test]
    fn boundary_iou_equals_iou_when_band_covers_masks() {
        let a = rect(16, 16, 2, 5, 3, 14);
        let b = rect(16, 16, 3, 6, 1, 10);
        let d = 4;
        assert_eq!(boundary_band(a.view(), d), a);
        assert_eq!(
            mask_boundary_iou(a.view(), b.view(), d).unwrap(),
            mask_iou(a.view(), b.view()).unwrap()
        );
    }

    #[test]
    fn default_width() {
        assert_eq!(default_boundary_width(480, 640), 16);
        assert_eq!(default_boundary_width(10, 10), 1);
    }
}
