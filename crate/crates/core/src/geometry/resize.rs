use ndarray::{s, Array2, ArrayView2};

/// Aspect-preserving fit of an `height`×`width` grid into a `side`×`side`
/// square, content anchored at the top-left corner.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Letterbox {
    pub src: (usize, usize),
    pub side: usize,
    pub scale: f64,
    /// Size of the resized content inside the square.
    pub content: (usize, usize),
}

impl Letterbox {
    pub fn new(height: usize, width: usize, side: usize) -> Self {
        let scale = side as f64 / height.max(width) as f64;
        let fit = |v: usize| (((v as f64) * scale).round() as usize).clamp(1, side);
        Letterbox { src: (height, width), side, scale, content: (fit(height), fit(width)) }
    }

    /// Source pixel center mapped into the square's pixel grid.
    pub fn forward_point(&self, y: usize, x: usize) -> (usize, usize) {
        let map = |v: usize, src: usize, dst: usize| {
            let c = (v as f64 + 0.5) * dst as f64 / src as f64 - 0.5;
            (c.round().max(0.0) as usize).min(dst - 1)
        };
        (map(y, self.src.0, self.content.0), map(x, self.src.1, self.content.1))
    }

    /// `side`×`side` mask of pixels covered by content.
    pub fn valid_mask(&self) -> Array2<bool> {
        let mut m = Array2::from_elem((self.side, self.side), false);
        m.slice_mut(s![..self.content.0, ..self.content.1]).fill(true);
        m
    }

    /// Resize a full-frame grid into the square, padding with `pad`.
    pub fn apply_f32(&self, values: ArrayView2<'_, f32>, pad: f32) -> Array2<f32> {
        let mut out = Array2::from_elem((self.side, self.side), pad);
        out.slice_mut(s![..self.content.0, ..self.content.1])
            .assign(&resize_bilinear(values, self.content));
        out
    }

    pub fn apply_mask(&self, mask: ArrayView2<'_, bool>) -> Array2<bool> {
        let mut out = Array2::from_elem((self.side, self.side), false);
        out.slice_mut(s![..self.content.0, ..self.content.1])
            .assign(&resize_nearest(mask, self.content));
        out
    }

    /// Crop the content region of a square grid and resize it back to the source size.
    pub fn invert_f32(&self, values: ArrayView2<'_, f32>) -> Array2<f32> {
        resize_bilinear(values.slice(s![..self.content.0, ..self.content.1]), self.src)
    }

    /// Inverse of [`Letterbox::apply_mask`]: bilinear upsampling of the 0/1
    /// grid thresholded at 0.5, which keeps blob outlines smoother than
    /// nearest-neighbour.
    pub fn invert_mask(&self, mask: ArrayView2<'_, bool>) -> Array2<bool> {
        let soft = mask.slice(s![..self.content.0, ..self.content.1]).mapv(|m| m as u8 as f32);
        resize_bilinear(soft.view(), self.src).mapv(|v| v >= 0.5)
    }
}

/// Half-pixel-center sample coordinates and weights along one axis.
fn taps(src: usize, dst: usize) -> Vec<(usize, usize, f32)> {
    let ratio = src as f64 / dst as f64;
    (0..dst)
        .map(|i| {
            let c = ((i as f64 + 0.5) * ratio - 0.5).clamp(0.0, (src - 1) as f64);
            let i0 = c.floor() as usize;
            let i1 = (i0 + 1).min(src - 1);
            (i0, i1, (c - i0 as f64) as f32)
        })
        .collect()
}

/// Bilinear resize with half-pixel centers and edge clamping.
pub fn resize_bilinear(values: ArrayView2<'_, f32>, (h, w): (usize, usize)) -> Array2<f32> {
    let (sh, sw) = values.dim();
    if (sh, sw) == (h, w) {
        return values.to_owned();
    }
    let ty = taps(sh, h);
    let tx = taps(sw, w);
    Array2::from_shape_fn((h, w), |(y, x)| {
        let (y0, y1, fy) = ty[y];
        let (x0, x1, fx) = tx[x];
        let top = values[[y0, x0]] * (1.0 - fx) + values[[y0, x1]] * fx;
        let bottom = values[[y1, x0]] * (1.0 - fx) + values[[y1, x1]] * fx;
        top * (1.0 - fy) + bottom * fy
    })
}

pub fn resize_nearest<T: Clone>(values: ArrayView2<'_, T>, (h, w): (usize, usize)) -> Array2<T> {
    let (sh, sw) = values.dim();
    let pick = |i: usize, src: usize, dst: usize| (((i as f64 + 0.5) * src as f64 / dst as f64) as usize).min(src - 1);
    Array2::from_shape_fn((h, w), |(y, x)| values[[pick(y, sh, h), pick(x, sw, w)]].clone())
}

/// Row-interpolation matrix `(dst, src)` of [`resize_bilinear`] along one axis.
pub fn bilinear_matrix(src: usize, dst: usize) -> Array2<f32> {
    let mut m = Array2::zeros((dst, src));
    for (i, (i0, i1, f)) in taps(src, dst).into_iter().enumerate() {
        m[[i, i0]] += 1.0 - f;
        m[[i, i1]] += f;
    }
    m
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::mask_iou;

    #[test]
    fn letterbox_geometry() {
        let lb = Letterbox::new(480, 640, 512);
        assert_eq!(lb.content, (384, 512));
        assert_eq!(lb.forward_point(0, 0), (0, 0));
        assert_eq!(lb.forward_point(479, 639), (383, 511));
        let v = lb.valid_mask();
        assert!(v[[383, 511]] && !v[[384, 0]]);
    }

    #[test]
    fn bilinear_identity_and_constant() {
        let a = Array2::from_shape_fn((5, 7), |(y, x)| (y * 7 + x) as f32);
        assert_eq!(resize_bilinear(a.view(), (5, 7)), a);
        let c = Array2::from_elem((3, 4), 2.5f32);
        assert!(resize_bilinear(c.view(), (9, 13)).iter().all(|&v| (v - 2.5).abs() < 1e-6));
    }

    #[test]
    fn bilinear_matches_matrix_form() {
        let a = Array2::from_shape_fn((6, 5), |(y, x)| ((y * 31 + x * 7) % 11) as f32);
        let direct = resize_bilinear(a.view(), (13, 9));
        let via = bilinear_matrix(6, 13).dot(&a).dot(&bilinear_matrix(5, 9).t());
        for (p, q) in direct.iter().zip(via.iter()) {
            assert!((p - q).abs() < 1e-5);
        }
    }

    proptest::proptest! {
        /// Disks of at least 100 px survive a letterbox at scale >= 0.75 and back.
        #[test]
        fn mask_round_trip_keeps_blobs(
            r in 5.7f64..20.0, cy in 0.2f64..0.8, cx in 0.2f64..0.8, h in 60usize..140, w in 60usize..140,
            scale in 0.75f64..2.0,
        ) {
            let (cy, cx) = (cy * h as f64, cx * w as f64);
            let mask = Array2::from_shape_fn((h, w), |(y, x)| {
                let (dy, dx) = (y as f64 - cy, x as f64 - cx);
                dy * dy + dx * dx <= r * r
            });
            proptest::prop_assume!(mask.iter().filter(|&&m| m).count() >= 100);
            let lb = Letterbox::new(h, w, (h.max(w) as f64 * scale).round() as usize);
            let back = lb.invert_mask(lb.apply_mask(mask.view()).view());
            let iou = mask_iou(mask.view(), back.view()).unwrap();
            proptest::prop_assert!(iou >= 0.85, "iou {iou}");
        }
    }
}
