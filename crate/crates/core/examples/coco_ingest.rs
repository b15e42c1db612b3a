//! Ingest a COCO-format annotation file, with one deliberately broken record.
//!
//! cargo run --example coco_ingest

use clickseg::dataset::{ingest, IngestOptions};
use serde_json::json;

fn main() -> anyhow::Result<()> {
    let dir = tempfile::tempdir()?;
    image::RgbImage::from_pixel(40, 30, image::Rgb([90, 140, 200])).save(dir.path().join("a.png"))?;

    let annotations = json!({
        "images": [{"id": 1, "file_name": "a.png", "width": 40, "height": 30}],
        "categories": [{"id": 3, "name": "Car"}, {"id": 5, "name": "cat"}],
        "annotations": [
            {"id": 10, "image_id": 1, "category_id": 3, "segmentation": [[5, 5, 25, 5, 25, 20, 5, 20]]},
            {"id": 11, "image_id": 1, "category_id": 5, "segmentation": {"size": [30, 40], "counts": [300, 10, 20, 10, 860]}},
            {"id": 12, "image_id": 2, "category_id": 5, "segmentation": [[0, 0, 4, 0, 4, 4]]}
        ]
    });
    let path = dir.path().join("instances.json");
    std::fs::write(&path, serde_json::to_vec_pretty(&annotations)?)?;

    let (manifest, report) = ingest(&path, dir.path(), &IngestOptions { check_files: true, ..Default::default() })?;
    println!("{} images, {} instances kept", report.images, report.instances);
    for issue in &report.issues {
        println!("dropped: {issue}");
    }
    for inst in &manifest.instances {
        println!("{} {:>4} px  class {:?}", inst.instance_id, inst.area, inst.class_name);
    }

    let strict = ingest(&path, dir.path(), &IngestOptions { strict: true, ..Default::default() });
    println!("strict mode: {}", strict.err().map_or("accepted".into(), |e| e.to_string()));
    Ok(())
}
