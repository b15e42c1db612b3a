//! Click distance maps, the signed click channel, and mask metrics.
//!
//! cargo run --example geometry_basics

use clickseg::geometry::{
    default_boundary_width, euclidean_distance_map, mask_boundary, mask_boundary_iou, mask_iou, merge_polarity_maps,
    normalize_channel, Pixel,
};
use ndarray::Array2;

fn disk(h: usize, w: usize, cy: f64, cx: f64, r: f64) -> Array2<bool> {
    Array2::from_shape_fn((h, w), |(y, x)| (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2) <= r * r)
}

fn main() -> anyhow::Result<()> {
    let (h, w) = (48, 64);
    let gt = disk(h, w, 24.0, 30.0, 14.0);
    let pred = disk(h, w, 25.0, 33.0, 13.0);

    let pos = euclidean_distance_map(&[Pixel::new(24, 30)], (h, w), 255.0)?;
    let neg = euclidean_distance_map(&[Pixel::new(5, 60)], (h, w), 255.0)?;
    let merged = merge_polarity_maps(&pos, Some(&neg))?;
    let channel = normalize_channel(merged.view())?;
    println!("distance at the far corner: {:.2}px", pos.values[[h - 1, w - 1]]);
    println!("signed click channel at the positive click: {:.3}", channel.values[[24, 30]]);
    println!("signed click channel at the negative click: {:.3}", channel.values[[5, 60]]);

    let d = default_boundary_width(h, w);
    println!("boundary pixels of the ground truth: {}", mask_boundary(gt.view())?.len());
    println!("IoU {:.4}", mask_iou(pred.view(), gt.view())?);
    println!("boundary IoU (d = {d}) {:.4}", mask_boundary_iou(pred.view(), gt.view(), d)?);
    Ok(())
}
