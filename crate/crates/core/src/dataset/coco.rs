//! COCO-format annotation ingest.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{DatasetError, DatasetManifest};
use crate::data::{DatasetName, ImageSample, InstanceMask, Rle};

#[derive(Clone, Debug, Default)]
pub struct IngestOptions {
    /// Abort on the first validation issue instead of dropping bad records.
    pub strict: bool,
    /// Read every image header to confirm it exists and matches its record.
    pub check_files: bool,
    pub dataset_name: Option<DatasetName>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ValidationIssue {
    MissingImageFile { image_id: String, path: PathBuf },
    UndecodableImage { image_id: String, path: PathBuf, reason: String },
    ImageSizeMismatch { image_id: String, record: (usize, usize), file: (usize, usize) },
    DuplicateImage { image_id: String },
    DanglingImage { annotation_id: String, image_id: String },
    DanglingCategory { annotation_id: String, category_id: String },
    ZeroArea { annotation_id: String },
    BadSegmentation { annotation_id: String, reason: String },
}

impl fmt::Display for ValidationIssue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ValidationIssue::MissingImageFile { image_id, path } => write!(f, "image {image_id}: file {} not found", path.display()),
            ValidationIssue::UndecodableImage { image_id, path, reason } => {
                write!(f, "image {image_id}: cannot decode {}: {reason}", path.display())
            }
            ValidationIssue::ImageSizeMismatch { image_id, record, file } => {
                write!(f, "image {image_id}: record says {record:?} (h, w) but file is {file:?}")
            }
            ValidationIssue::DuplicateImage { image_id } => write!(f, "image id {image_id} appears twice"),
            ValidationIssue::DanglingImage { annotation_id, image_id } => {
                write!(f, "annotation {annotation_id} references unknown image {image_id}")
            }
            ValidationIssue::DanglingCategory { annotation_id, category_id } => {
                write!(f, "annotation {annotation_id} references unknown category {category_id}")
            }
            ValidationIssue::ZeroArea { annotation_id } => write!(f, "annotation {annotation_id} has an empty mask"),
            ValidationIssue::BadSegmentation { annotation_id, reason } => {
                write!(f, "annotation {annotation_id}: bad segmentation: {reason}")
            }
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub issues: Vec<ValidationIssue>,
    pub images: usize,
    pub instances: usize,
    /// Kept instances below [`crate::data::SMALL_INSTANCE_AREA`].
    pub small_instances: usize,
}

impl ValidationReport {
    pub fn is_clean(&self) -> bool {
        self.issues.is_empty()
    }
}

#[derive(Deserialize)]
struct CocoFile {
    images: Vec<CocoImage>,
    #[serde(default)]
    annotations: Vec<CocoAnnotation>,
    categories: Vec<CocoCategory>,
}

#[derive(Deserialize)]
struct CocoImage {
    id: Value,
    file_name: String,
    width: usize,
    height: usize,
}

#[derive(Deserialize)]
struct CocoAnnotation {
    id: Value,
    image_id: Value,
    category_id: Value,
    segmentation: Value,
}

#[derive(Deserialize)]
struct CocoCategory {
    id: Value,
    name: String,
}

fn id_string(v: &Value) -> String {
    match v {
        Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

/// Polygon area by the shoelace formula. `poly` is `[x0, y0, x1, y1, ...]`.
pub fn shoelace_area(poly: &[f64]) -> f64 {
    let n = poly.len() / 2;
    let mut acc = 0.0;
    for i in 0..n {
        let j = (i + 1) % n;
        acc += poly[2 * i] * poly[2 * j + 1] - poly[2 * j] * poly[2 * i + 1];
    }
    acc.abs() / 2.0
}

/// Union of polygons, each filled with the even-odd rule at pixel centres.
/// Coordinates are continuous, with pixel `(y, x)` covering `[x, x+1) × [y, y+1)`.
pub fn rasterize_polygons(polys: &[Vec<f64>], height: usize, width: usize) -> Array2<bool> {
    let mut mask = Array2::from_elem((height, width), false);
    let mut xs = Vec::new();
    for poly in polys {
        let n = poly.len() / 2;
        if n < 3 {
            continue;
        }
        for y in 0..height {
            let yc = y as f64 + 0.5;
            xs.clear();
            for i in 0..n {
                let j = (i + 1) % n;
                let (x0, y0, x1, y1) = (poly[2 * i], poly[2 * i + 1], poly[2 * j], poly[2 * j + 1]);
                if (y0 <= yc) != (y1 <= yc) {
                    xs.push(x0 + (yc - y0) / (y1 - y0) * (x1 - x0));
                }
            }
            xs.sort_by(f64::total_cmp);
            for pair in xs.chunks_exact(2) {
                // Pixel centres x + 0.5 in [pair[0], pair[1]).
                let start = (pair[0] - 0.5).ceil().max(0.0) as usize;
                let end = ((pair[1] - 0.5).ceil().max(0.0) as usize).min(width);
                for x in start..end {
                    mask[[y, x]] = true;
                }
            }
        }
    }
    mask
}

fn decode_segmentation(seg: &Value, height: usize, width: usize) -> Result<Rle, String> {
    match seg {
        Value::Array(polys) => {
            let polys: Vec<Vec<f64>> = polys
                .iter()
                .map(|p| serde_json::from_value::<Vec<f64>>(p.clone()).map_err(|e| e.to_string()))
                .collect::<Result<_, _>>()?;
            if polys.iter().any(|p| p.len() % 2 != 0) {
                return Err("polygon with an odd number of coordinates".into());
            }
            Ok(Rle::encode(rasterize_polygons(&polys, height, width).view()))
        }
        Value::Object(obj) => {
            let size: [usize; 2] = obj
                .get("size")
                .ok_or("RLE without size")
                .and_then(|s| serde_json::from_value(s.clone()).map_err(|_| "bad RLE size"))?;
            if size != [height, width] {
                return Err(format!("RLE size {size:?} differs from image size {:?}", [height, width]));
            }
            let rle = match obj.get("counts") {
                Some(Value::String(s)) => Rle::from_coco_string(height, width, s),
                Some(c @ Value::Array(_)) => {
                    let counts: Vec<u32> = serde_json::from_value(c.clone()).map_err(|e| e.to_string())?;
                    Rle::from_coco_counts(height, width, &counts)
                }
                _ => return Err("RLE without counts".into()),
            };
            rle.map_err(|e| e.to_string())
        }
        _ => Err("segmentation is neither polygons nor RLE".into()),
    }
}

/// Read a COCO annotation file, rasterize polygons to RLE and cross-check
/// references. Bad records are dropped and reported, or abort in strict mode.
pub fn ingest(
    annotation_path: impl AsRef<Path>,
    image_root: impl AsRef<Path>,
    opts: &IngestOptions,
) -> Result<(DatasetManifest, ValidationReport), DatasetError> {
    let annotation_path = annotation_path.as_ref();
    let image_root = image_root.as_ref();
    let file: CocoFile = serde_json::from_reader(std::io::BufReader::new(std::fs::File::open(annotation_path)?))?;
    let mut report = ValidationReport::default();

    let categories: HashMap<String, String> = file.categories.iter().map(|c| (id_string(&c.id), c.name.clone())).collect();
    let mut images = Vec::new();
    let mut seen_ids = HashSet::new();
    for img in &file.images {
        let image_id = id_string(&img.id);
        if !seen_ids.insert(image_id.clone()) {
            report.issues.push(ValidationIssue::DuplicateImage { image_id });
            continue;
        }
        let sample = ImageSample { image_id: image_id.clone(), width: img.width, height: img.height, uri_or_path: img.file_name.clone() };
        if opts.check_files {
            let path = image_root.join(&img.file_name);
            if !path.exists() {
                report.issues.push(ValidationIssue::MissingImageFile { image_id, path });
                continue;
            }
            match image::image_dimensions(&path) {
                Ok((w, h)) if (h as usize, w as usize) != (img.height, img.width) => {
                    report.issues.push(ValidationIssue::ImageSizeMismatch {
                        image_id,
                        record: (img.height, img.width),
                        file: (h as usize, w as usize),
                    });
                    continue;
                }
                Ok(_) => {}
                Err(e) => {
                    report.issues.push(ValidationIssue::UndecodableImage { image_id, path, reason: e.to_string() });
                    continue;
                }
            }
        }
        images.push(sample);
    }
    let by_id: HashMap<&str, &ImageSample> = images.iter().map(|s| (s.image_id.as_str(), s)).collect();
    let declared: HashSet<String> = file.images.iter().map(|i| id_string(&i.id)).collect();

    let mut instances = Vec::new();
    for ann in &file.annotations {
        let annotation_id = id_string(&ann.id);
        let image_id = id_string(&ann.image_id);
        let Some(sample) = by_id.get(image_id.as_str()) else {
            // Annotations of images dropped above were already reported through the image.
            if !declared.contains(&image_id) {
                report.issues.push(ValidationIssue::DanglingImage { annotation_id, image_id });
            }
            continue;
        };
        let category_id = id_string(&ann.category_id);
        let Some(class_name) = categories.get(&category_id) else {
            report.issues.push(ValidationIssue::DanglingCategory { annotation_id, category_id });
            continue;
        };
        let rle = match decode_segmentation(&ann.segmentation, sample.height, sample.width) {
            Ok(r) => r,
            Err(reason) => {
                report.issues.push(ValidationIssue::BadSegmentation { annotation_id, reason });
                continue;
            }
        };
        if rle.area() == 0 {
            report.issues.push(ValidationIssue::ZeroArea { annotation_id });
            continue;
        }
        let inst = InstanceMask::new(image_id, annotation_id, class_name.clone(), rle);
        report.small_instances += inst.is_small() as usize;
        instances.push(inst);
    }

    if opts.strict && !report.is_clean() {
        return Err(DatasetError::Validation(report));
    }
    for issue in &report.issues {
        tracing::warn!(%issue, "dropping record");
    }
    report.images = images.len();
    report.instances = instances.len();
    let mut manifest = DatasetManifest {
        dataset_name: opts.dataset_name,
        annotation_paths: vec![annotation_path.to_path_buf()],
        image_root: image_root.to_path_buf(),
        split: None,
        counts_per_class: BTreeMap::new(),
        images,
        instances,
        memory: HashMap::new(),
    };
    manifest.recount();
    Ok((manifest, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use serde_json::json;

    fn write_fixture(dir: &Path, with_missing: bool) -> PathBuf {
        for (name, w, h) in [("a.png", 40u32, 30u32), ("b.png", 20, 20), ("c.png", 32, 24)] {
            image::RgbImage::new(w, h).save(dir.join(name)).unwrap();
        }
        let mut images = vec![
            json!({"id": 1, "file_name": "a.png", "width": 40, "height": 30}),
            json!({"id": 2, "file_name": "b.png", "width": 20, "height": 20}),
            json!({"id": 3, "file_name": "c.png", "width": 32, "height": 24}),
        ];
        if with_missing {
            images.push(json!({"id": 4, "file_name": "gone.png", "width": 8, "height": 8}));
        }
        let annotations = json!([
            {"id": 10, "image_id": 1, "category_id": 1, "segmentation": [[2, 2, 12, 2, 12, 12, 2, 12]]},
            {"id": 11, "image_id": 1, "category_id": 2, "segmentation": [[20, 5, 35, 5, 35, 25]]},
            {"id": 12, "image_id": 2, "category_id": 1, "segmentation": {"size": [20, 20], "counts": [21, 3, 17, 3, 356]}},
            {"id": 13, "image_id": 3, "category_id": 2, "segmentation": [[0, 0, 10, 0, 10, 10, 0, 10], [20, 10, 30, 10, 30, 20, 20, 20]]},
            {"id": 14, "image_id": 3, "category_id": 1, "segmentation": [[15, 15, 18, 15, 18, 18]]},
        ]);
        let coco = json!({
            "images": images,
            "annotations": annotations,
            "categories": [{"id": 1, "name": "cat"}, {"id": 2, "name": "dog"}],
        });
        let path = dir.join("ann.json");
        std::fs::write(&path, coco.to_string()).unwrap();
        path
    }

    #[test]
    fn toy_fixture_ingests() {
        let dir = tempfile::tempdir().unwrap();
        let ann = write_fixture(dir.path(), false);
        let opts = IngestOptions { strict: true, check_files: true, dataset_name: None };
        let (m, report) = ingest(&ann, dir.path(), &opts).unwrap();
        assert_eq!(m.images.len(), 3);
        assert_eq!(m.instances.len(), 5);
        assert!(report.is_clean());
        assert_eq!(m.counts_per_class["cat"], 3);
        // 10x10 square polygon covers exactly 100 pixel centres.
        assert_eq!(m.instance("10").unwrap().area, 100);
        // Column-major RLE: columns 1 and 2 hold rows 1..4.
        let mask = m.instance("12").unwrap().decode().unwrap();
        assert!(mask[[1, 1]] && mask[[3, 2]] && !mask[[1, 3]] && !mask[[0, 1]]);
        assert_eq!(m.instance("13").unwrap().area, 200);
        let img = m.load_image("2").unwrap();
        assert_eq!(img.shape(), (20, 20));
    }

    #[test]
    fn missing_image_reported_or_fatal() {
        let dir = tempfile::tempdir().unwrap();
        let ann = write_fixture(dir.path(), true);
        let lax = IngestOptions { strict: false, check_files: true, dataset_name: None };
        let (m, report) = ingest(&ann, dir.path(), &lax).unwrap();
        assert_eq!(m.images.len(), 3);
        assert!(matches!(&report.issues[..], [ValidationIssue::MissingImageFile { image_id, .. }] if image_id == "4"));
        let strict = IngestOptions { strict: true, ..lax };
        match ingest(&ann, dir.path(), &strict) {
            Err(DatasetError::Validation(r)) => assert!(r.issues[0].to_string().contains("image 4")),
            other => panic!("expected a validation error, got {other:?}"),
        }
    }

    #[test]
    fn dangling_references_reported() {
        let dir = tempfile::tempdir().unwrap();
        let coco = json!({
            "images": [{"id": "x", "file_name": "x.png", "width": 4, "height": 4}],
            "annotations": [
                {"id": 1, "image_id": "nope", "category_id": 1, "segmentation": [[0, 0, 2, 0, 2, 2]]},
                {"id": 2, "image_id": "x", "category_id": 9, "segmentation": [[0, 0, 2, 0, 2, 2]]},
                {"id": 3, "image_id": "x", "category_id": 1, "segmentation": [[0, 0, 0.1, 0, 0.1, 0.1]]},
            ],
            "categories": [{"id": 1, "name": "cat"}],
        });
        let ann = dir.path().join("a.json");
        std::fs::write(&ann, coco.to_string()).unwrap();
        let (m, r) = ingest(&ann, dir.path(), &IngestOptions::default()).unwrap();
        assert!(m.instances.is_empty());
        assert_eq!(
            r.issues,
            vec![
                ValidationIssue::DanglingImage { annotation_id: "1".into(), image_id: "nope".into() },
                ValidationIssue::DanglingCategory { annotation_id: "2".into(), category_id: "9".into() },
                ValidationIssue::ZeroArea { annotation_id: "3".into() },
            ]
        );
    }

    proptest! {
        /// Star-shaped polygons of a few thousand pixels rasterize to within
        /// 1% of their exact area.
        #[test]
        fn raster_area_matches_shoelace(
            radii in proptest::collection::vec(35.0f64..60.0, 5..12),
            cx in 62.0f64..66.0, cy in 62.0f64..66.0,
        ) {
            let n = radii.len();
            let poly: Vec<f64> = radii
                .iter()
                .enumerate()
                .flat_map(|(i, r)| {
                    let t = i as f64 / n as f64 * std::f64::consts::TAU;
                    [cx + r * t.cos(), cy + r * t.sin()]
                })
                .collect();
            let exact = shoelace_area(&poly);
            let raster = rasterize_polygons(&[poly], 128, 128).iter().filter(|&&v| v).count() as f64;
            prop_assert!((raster - exact).abs() <= 0.01 * exact, "raster {raster} exact {exact}");
        }
    }
}
