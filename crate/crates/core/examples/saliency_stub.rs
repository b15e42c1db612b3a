//! The analytic saliency backend and the on-disk cache.
//!
//! cargo run --example saliency_stub

use std::sync::Arc;

use clickseg::data::{ImageSample, LoadedImage};
use clickseg::saliency::{SaliencyBackend, SaliencyCache, StubBackend};

fn main() -> anyhow::Result<()> {
    let pixels = image::RgbImage::from_pixel(80, 60, image::Rgb([120, 120, 120]));
    let sample = ImageSample { image_id: "grey".into(), width: 80, height: 60, uri_or_path: String::new() };
    let image = LoadedImage::new(sample, Arc::new(pixels))?;

    let backend = StubBackend::new();
    backend.add_alias("red mug", "blob:cx=20,cy=30,s=6")?;
    backend.add_image_alias("grey", "lamp", "blob:cx=60,cy=15,s=8;blob:cx=60,cy=45,s=4")?;

    for phrase in ["red mug", "lamp", "blob:cx=40,cy=30,s=3"] {
        let map = backend.compute(&image, phrase)?;
        let (y, x) = map.argmax();
        println!("{phrase:>22}: peak at (x={x}, y={y})");
    }
    match backend.compute(&image, "giraffe") {
        Err(e) => println!("{:>22}: {e}", "giraffe"),
        Ok(_) => unreachable!("no alias for giraffe"),
    }

    let dir = tempfile::tempdir()?;
    let cache = SaliencyCache::with_dir(dir.path());
    cache.get_or_compute(&backend, &image, "red mug")?;
    cache.get_or_compute(&backend, &image, "red mug")?;
    println!("cache entries: {}, file {}", cache.len(), cache.npy_path("stub", &clickseg::saliency::image_hash(&image), "red mug").unwrap().display());
    Ok(())
}
