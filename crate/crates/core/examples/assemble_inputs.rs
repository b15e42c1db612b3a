//! Build 5-channel network inputs and dump them as images.
//!
//! cargo run --example assemble_inputs -- [out_dir]
//!
//! Channels are RGB, the signed click map and text saliency, letterboxed
//! onto a square grid. Each channel is written as a grey PNG.

use std::path::PathBuf;

use clickseg::clicks::{synthesize_interactions, ClickConfig, SynthesisMode};
use clickseg::dataset::{make_loaders, AssemblyConfig, InteractionIndex, LoadMode, LoaderConfig, SaliencySource};
use clickseg::synthetic::{generate, SceneConfig};

fn main() -> anyhow::Result<()> {
    let out = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "target/inputs".into()));
    std::fs::create_dir_all(&out)?;
    let set = generate(&SceneConfig { images: 4, size: 96, ..Default::default() });
    let clicks = ClickConfig { d_border: 3.0, d_between: 10.0, ring_radius: 4.0, ..Default::default() };
    let (records, _) = synthesize_interactions(&set.dataset.instances, Some(&set.split), &clicks, SynthesisMode::Train)?;
    let index = InteractionIndex::from_records(records);
    let loader = make_loaders(
        &set.dataset,
        &set.split,
        LoadMode::Train,
        &index,
        Some(SaliencySource::new(set.saliency.clone())),
        AssemblyConfig { resolution: 128, ..Default::default() },
        LoaderConfig { batch_size: 4, ..Default::default() },
        None,
    )?;
    println!("{} training examples, {} batches per epoch", loader.len(), loader.batches_per_epoch());

    let ex = &loader.batch(0, 0)?[0];
    println!("{} ({}) target area {} of {} valid pixels", ex.instance_id, ex.class_name, ex.target.iter().filter(|v| **v).count(), ex.valid.iter().filter(|v| **v).count());
    let names = ["red", "green", "blue", "clicks", "saliency"];
    for (c, name) in names.iter().enumerate() {
        let ch = ex.channels.index_axis(ndarray::Axis(0), c);
        let (lo, hi) = ch.iter().fold((f32::MAX, f32::MIN), |(a, b), &v| (a.min(v), b.max(v)));
        let (h, w) = ch.dim();
        let img = image::GrayImage::from_fn(w as u32, h as u32, |x, y| {
            image::Luma([((ch[[y as usize, x as usize]] + 1.0) * 127.5).clamp(0.0, 255.0) as u8])
        });
        img.save(out.join(format!("{c}_{name}.png")))?;
        println!("  {name:>8}: [{lo:+.2}, {hi:+.2}]");
    }
    println!("channel images in {}", out.display());
    Ok(())
}
