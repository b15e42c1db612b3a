//! Train the toy model on synthetic square/disk scenes and save it.
//!
//! cargo run --release --example train_toy -- [out_dir] [iterations]
//!
//! Squares are seen during training, disks are not. The checkpoint lands in
//! `<out_dir>/final.safetensors` (default `target/toy-model`) and is picked
//! up by the `evaluate`, `interaction_sweep` and `serve_demo` examples.

use std::path::PathBuf;

use candle_core::Device;
use clickseg::dataset::ExperimentConfig;
use clickseg::experiment::Experiment;

fn main() -> anyhow::Result<()> {
    let mut args = std::env::args().skip(1);
    let out = PathBuf::from(args.next().unwrap_or_else(|| "target/toy-model".into()));
    let mut cfg = ExperimentConfig::load(concat!(env!("CARGO_MANIFEST_DIR"), "/configs/toy.toml"))?;
    if let Some(n) = args.next() {
        cfg.model.iterations = Some(n.parse()?);
    }
    let exp = Experiment::open(cfg)?;
    println!("{} training instances, {} eval instances", exp.train_set.instances.len(), exp.eval_set.instances.len());
    let outcome = exp.train(Some(&out), &Device::Cpu)?;
    let losses = &outcome.losses;
    let tail = &losses[losses.len().saturating_sub(20)..];
    println!(
        "{} steps, loss {:.4} -> {:.4} (mean of last {})",
        losses.len(),
        losses[0],
        tail.iter().sum::<f32>() / tail.len() as f32,
        tail.len()
    );
    for path in &outcome.saved {
        println!("saved {}", path.display());
    }
    Ok(())
}
