//! Procedural two-shape scenes for experiments that must run without real
//! data or pretrained weights.
//!
//! Each scene holds flat-colored squares and disks on a noisy background.
//! One object per scene is compound: a large "whole" of one class carrying a
//! small "part" of the other class on top of it. The whole's mask includes
//! the part, so a click on the part is ambiguous without text. Text saliency
//! comes from [`StubBackend`] aliases that place a Gaussian at every instance
//! of the named class, with a spread proportional to the instance size.

use std::sync::Arc;

use image::{Rgb, RgbImage};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{ClassSplit, DatasetName, ImageSample, InstanceMask};
use crate::dataset::DatasetManifest;
use crate::saliency::StubBackend;

pub const SQUARE: &str = "square";
pub const DISK: &str = "disk";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneConfig {
    pub images: usize,
    /// Square scene side, pixels.
    pub size: usize,
    pub seed: u64,
    /// Half-size range of whole objects and simple objects.
    pub whole_radius: (f64, f64),
    /// Half-size range of parts.
    pub part_radius: (f64, f64),
    /// Simple objects per scene besides the compound one.
    pub extra_objects: (usize, usize),
    /// Gaussian spread of a saliency blob per unit of sqrt(area).
    pub saliency_spread: f64,
    /// Background noise amplitude in 8-bit levels.
    pub noise: u8,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            images: 64,
            size: 64,
            seed: 0,
            whole_radius: (9.0, 14.0),
            part_radius: (3.5, 5.5),
            extra_objects: (1, 2),
            saliency_spread: 0.35,
            noise: 24,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct Shape {
    square: bool,
    cy: f64,
    cx: f64,
    r: f64,
}

impl Shape {
    fn contains(&self, y: usize, x: usize) -> bool {
        let (dy, dx) = (y as f64 + 0.5 - self.cy, x as f64 + 0.5 - self.cx);
        if self.square {
            dy.abs() <= self.r && dx.abs() <= self.r
        } else {
            dy * dy + dx * dx <= self.r * self.r
        }
    }

    fn class(&self) -> &'static str {
        if self.square {
            SQUARE
        } else {
            DISK
        }
    }

    /// Conservative bounding radius for overlap rejection.
    fn extent(&self) -> f64 {
        if self.square {
            self.r * std::f64::consts::SQRT_2
        } else {
            self.r
        }
    }
}

/// A generated dataset plus the matching split and saliency backend.
pub struct SyntheticSet {
    pub dataset: DatasetManifest,
    pub split: ClassSplit,
    pub saliency: Arc<StubBackend>,
}

/// Squares seen, disks unseen.
pub fn shape_split() -> ClassSplit {
    ClassSplit::new(DatasetName::Custom, [SQUARE], [DISK]).expect("disjoint literal split")
}

/// Both shapes seen: the fully supervised setting.
pub fn full_shape_split() -> ClassSplit {
    ClassSplit::all_seen(DatasetName::Custom, [SQUARE, DISK])
}

fn color(rng: &mut ChaCha8Rng) -> [u8; 3] {
    // Saturated colors well away from the mid-grey background.
    let mut c = [0u8; 3];
    for v in &mut c {
        *v = if rng.random_bool(0.5) { rng.random_range(0..70) } else { rng.random_range(185..=255) };
    }
    c
}

fn distinct(a: [u8; 3], b: [u8; 3]) -> bool {
    a.iter().zip(&b).map(|(&p, &q)| (p as i32 - q as i32).abs()).sum::<i32>() > 150
}

/// Generate `cfg.images` scenes, deterministically from `cfg.seed`.
pub fn generate(cfg: &SceneConfig) -> SyntheticSet {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let size = cfg.size;
    let backend = StubBackend::new();
    let mut images = Vec::with_capacity(cfg.images);
    let mut instances = Vec::new();

    for i in 0..cfg.images {
        // The seed keeps ids of differently seeded sets apart.
        let image_id = format!("s{}-scene{i:04}", cfg.seed);
        // Top-level objects: the compound whole first, then simple ones.
        let n_extra = rng.random_range(cfg.extra_objects.0..=cfg.extra_objects.1);
        let mut tops: Vec<Shape> = Vec::new();
        let mut attempts = 0;
        while tops.len() < 1 + n_extra && attempts < 500 {
            attempts += 1;
            let r = rng.random_range(cfg.whole_radius.0..cfg.whole_radius.1);
            let cand = Shape {
                square: rng.random_bool(0.5),
                cy: rng.random_range(r + 1.0..size as f64 - r - 1.0),
                cx: rng.random_range(r + 1.0..size as f64 - r - 1.0),
                r,
            };
            if tops.iter().all(|t| {
                let d = ((t.cy - cand.cy).powi(2) + (t.cx - cand.cx).powi(2)).sqrt();
                d > t.extent() + cand.extent() + 2.0
            }) {
                tops.push(cand);
            }
        }
        let whole = tops[0];
        let pr = rng.random_range(cfg.part_radius.0..cfg.part_radius.1);
        // Keep the part's full extent inside the whole's inscribed disk.
        let room = (whole.r - pr * std::f64::consts::SQRT_2 - 1.0).max(0.0);
        let (ang, rad) = (rng.random_range(0.0..std::f64::consts::TAU), rng.random_range(0.0..=room));
        let part = Shape { square: !whole.square, cy: whole.cy + rad * ang.sin(), cx: whole.cx + rad * ang.cos(), r: pr };

        let bg = [rng.random_range(100..156u8), rng.random_range(100..156u8), rng.random_range(100..156u8)];
        let mut img = RgbImage::from_fn(size as u32, size as u32, |_, _| {
            let n = rng.random_range(0..=cfg.noise) as i32 - cfg.noise as i32 / 2;
            Rgb(bg.map(|c| (c as i32 + n).clamp(0, 255) as u8))
        });
        let mut colors: Vec<[u8; 3]> = Vec::new();
        for k in 0..tops.len() + 1 {
            let mut c = color(&mut rng);
            // The part must also stand out from its whole.
            while colors.last().is_some_and(|&p| !distinct(p, c)) || (k == tops.len() && !distinct(colors[0], c)) {
                c = color(&mut rng);
            }
            colors.push(c);
        }
        // The part is painted last so it sits on top of its whole.
        let painted: Vec<(Shape, [u8; 3])> =
            tops.iter().copied().zip(colors.iter().copied()).chain([(part, colors[tops.len()])]).collect();
        for (shape, c) in &painted {
            for y in 0..size {
                for x in 0..size {
                    if shape.contains(y, x) {
                        img.put_pixel(x as u32, y as u32, Rgb(*c));
                    }
                }
            }
        }

        let mut blobs: Vec<(&'static str, String)> = Vec::new();
        for (k, shape) in tops.iter().chain([&part]).enumerate() {
            let mask = Array2::from_shape_fn((size, size), |(y, x)| shape.contains(y, x));
            let inst = InstanceMask::from_mask(image_id.clone(), format!("{image_id}/{k}"), shape.class(), &mask);
            let area = inst.area.max(1) as f64;
            let (sy, sx) = mask.indexed_iter().filter(|(_, &v)| v).fold((0.0, 0.0), |(a, b), ((y, x), _)| (a + y as f64, b + x as f64));
            let spec = format!(
                "cx={},cy={},s={:.3}",
                (sx / area).round() as i64,
                (sy / area).round() as i64,
                cfg.saliency_spread * area.sqrt()
            );
            blobs.push((shape.class(), spec));
            instances.push(inst);
        }
        for class in [SQUARE, DISK] {
            let specs: Vec<&str> = blobs.iter().filter(|(c, _)| *c == class).map(|(_, s)| s.as_str()).collect();
            if !specs.is_empty() {
                backend.add_image_alias(&image_id, class, &format!("blob:{}", specs.join(";"))).expect("generated specs parse");
            }
        }
        let sample = ImageSample { image_id: image_id.clone(), width: size, height: size, uri_or_path: format!("{image_id}.png") };
        images.push((sample, img));
    }

    let mut dataset = DatasetManifest::in_memory(images, instances);
    dataset.dataset_name = Some(DatasetName::Custom);
    dataset.split = Some("shapes".into());
    SyntheticSet { dataset, split: shape_split(), saliency: Arc::new(backend) }
}

/// Large single-blob masks for click-constraint checks: disks and rounded
/// squares big enough that `d_border = 15` and `d_between = 150` are
/// satisfiable for two clicks.
pub fn large_blobs(count: usize, seed: u64) -> Vec<InstanceMask> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|i| {
            let (h, w) = (rng.random_range(220..270usize), rng.random_range(220..270usize));
            let square = rng.random_bool(0.5);
            let (cy, cx) = (h as f64 / 2.0 + rng.random_range(-4.0..4.0), w as f64 / 2.0 + rng.random_range(-4.0..4.0));
            let r = rng.random_range(96.0..104.0);
            let mask = Array2::from_shape_fn((h, w), |(y, x)| {
                let (dy, dx) = (y as f64 - cy, x as f64 - cx);
                if square {
                    dy.abs() <= r && dx.abs() <= r
                } else {
                    dy * dy + dx * dx <= r * r
                }
            });
            InstanceMask::from_mask(format!("blob{i}"), format!("blob{i}"), if square { SQUARE } else { DISK }, &mask)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::saliency::SaliencyBackend;

    #[test]
    fn scenes_are_deterministic() {
        let cfg = SceneConfig { images: 4, ..Default::default() };
        let a = generate(&cfg);
        let b = generate(&cfg);
        assert_eq!(a.dataset.instances, b.dataset.instances);
        for s in &a.dataset.images {
            assert_eq!(a.dataset.memory[&s.image_id], b.dataset.memory[&s.image_id]);
        }
        let c = generate(&SceneConfig { seed: 1, ..cfg });
        assert_ne!(a.dataset.instances, c.dataset.instances);
    }

    #[test]
    fn part_lies_inside_whole_and_classes_differ() {
        let set = generate(&SceneConfig { images: 16, ..Default::default() });
        for img in &set.dataset.images {
            let insts: Vec<_> = set.dataset.instances.iter().filter(|i| i.image_id == img.image_id).collect();
            let whole = insts[0].decode().unwrap();
            let part = insts.last().unwrap().decode().unwrap();
            assert_ne!(insts[0].class_name, insts.last().unwrap().class_name);
            assert!(part.iter().zip(whole.iter()).all(|(&p, &w)| !p || w), "part escapes whole in {}", img.image_id);
            assert!(insts.last().unwrap().area >= 25);
        }
        set.split.check_covers(set.dataset.counts_per_class.keys().map(String::as_str)).unwrap();
    }

    #[test]
    fn saliency_peaks_on_named_class() {
        let set = generate(&SceneConfig { images: 8, ..Default::default() });
        for inst in set.dataset.instances.iter().filter(|i| i.class_name == DISK) {
            let image = set.dataset.load_image(&inst.image_id).unwrap();
            let map = set.saliency.compute(&image, DISK).unwrap();
            let mask = inst.decode().unwrap();
            let best = mask.indexed_iter().filter(|(_, &m)| m).map(|(p, _)| map.values[p]).fold(f32::MIN, f32::max);
            assert!(best > 0.5);
        }
    }

    #[test]
    fn large_blobs_are_large() {
        for b in large_blobs(5, 3) {
            assert!(b.area > 20_000);
        }
    }
}
