use std::collections::BTreeMap;
use std::path::Path;

use image::{Rgb, RgbImage};

use super::{Bucket, EvalError};

// 3x5 bitmaps for 0-9, '.' and '+', one row per u8 (low 3 bits, MSB left).
const GLYPHS: [(char, [u8; 5]); 12] = [
    ('0', [7, 5, 5, 5, 7]),
    ('1', [2, 6, 2, 2, 7]),
    ('2', [7, 1, 7, 4, 7]),
    ('3', [7, 1, 7, 1, 7]),
    ('4', [5, 5, 7, 1, 1]),
    ('5', [7, 4, 7, 1, 7]),
    ('6', [7, 4, 7, 5, 7]),
    ('7', [7, 1, 1, 1, 1]),
    ('8', [7, 5, 7, 5, 7]),
    ('9', [7, 5, 7, 1, 7]),
    ('.', [0, 0, 0, 0, 2]),
    ('+', [0, 2, 7, 2, 0]),
];

const SCALE: u32 = 2;

fn draw_text(img: &mut RgbImage, x0: u32, y0: u32, text: &str, color: Rgb<u8>) {
    for (k, ch) in text.chars().enumerate() {
        let Some((_, rows)) = GLYPHS.iter().find(|(c, _)| *c == ch) else { continue };
        for (r, bits) in rows.iter().enumerate() {
            for c in 0..3u32 {
                if bits >> (2 - c) & 1 == 1 {
                    for dy in 0..SCALE {
                        for dx in 0..SCALE {
                            let x = x0 + (k as u32 * 4 + c) * SCALE + dx;
                            let y = y0 + r as u32 * SCALE + dy;
                            if x < img.width() && y < img.height() {
                                img.put_pixel(x, y, color);
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Bar chart of mean IoU per distractor bucket: bar height is the IoU, the
/// label under each bar is the same-class count and the one above is the IoU
/// to two decimals. Buckets at or above `cap` are merged into a `cap+` bar.
pub fn plot_distractor_buckets(buckets: &BTreeMap<usize, Bucket>, cap: usize, path: &Path) -> Result<(), EvalError> {
    let mut bars: Vec<(String, usize, f64)> = Vec::new();
    let mut tail = (0usize, 0.0f64);
    for (&k, b) in buckets {
        if k >= cap {
            tail.0 += b.instances;
            tail.1 += b.mean_iou * b.instances as f64;
        } else {
            bars.push((k.to_string(), b.instances, b.mean_iou));
        }
    }
    if tail.0 > 0 {
        bars.push((format!("{cap}+"), tail.0, tail.1 / tail.0 as f64));
    }
    let (bar_w, gap, plot_h, margin) = (40u32, 16u32, 200u32, 24u32);
    let width = margin * 2 + bars.len().max(1) as u32 * (bar_w + gap);
    let height = plot_h + margin * 3;
    let mut img = RgbImage::from_pixel(width, height, Rgb([255, 255, 255]));
    let base = margin + plot_h;
    for x in margin / 2..width - margin / 2 {
        img.put_pixel(x, base, Rgb([0, 0, 0]));
    }
    for (i, (label, _, iou)) in bars.iter().enumerate() {
        let x0 = margin + i as u32 * (bar_w + gap) + gap / 2;
        let h = (iou.clamp(0.0, 1.0) * plot_h as f64).round() as u32;
        for y in base - h..base {
            for x in x0..x0 + bar_w {
                img.put_pixel(x, y, Rgb([66, 110, 180]));
            }
        }
        draw_text(&mut img, x0 + 4, base + 6, label, Rgb([0, 0, 0]));
        draw_text(&mut img, x0 + 2, (base - h).saturating_sub(14), &format!("{iou:.2}"), Rgb([0, 0, 0]));
    }
    img.save(path).map_err(|e| EvalError::Plot(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn writes_png_with_bar_heights() {
        let mut b = BTreeMap::new();
        b.insert(1, Bucket { instances: 3, mean_iou: 0.5 });
        b.insert(2, Bucket { instances: 1, mean_iou: 1.0 });
        b.insert(7, Bucket { instances: 1, mean_iou: 0.0 });
        b.insert(9, Bucket { instances: 1, mean_iou: 1.0 });
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("b.png");
        plot_distractor_buckets(&b, 5, &path).unwrap();
        let img = image::open(&path).unwrap().to_rgb8();
        assert_eq!(img.width(), 24 * 2 + 3 * 56);
        let bar = Rgb([66, 110, 180]);
        // First bar (0.5) is 100 px tall, the merged 5+ bar averages to 0.5 too.
        let column = |x: u32| (0..img.height()).filter(|&y| *img.get_pixel(x, y) == bar).count();
        assert_eq!(column(24 + 8 + 20), 100);
        assert_eq!(column(24 + 56 + 8 + 20), 200);
        assert_eq!(column(24 + 112 + 8 + 20), 100);
    }
}
