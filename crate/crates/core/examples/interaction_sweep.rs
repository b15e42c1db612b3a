//! One checkpoint, several interaction settings: text on/off, click counts.
//!
//! cargo run --release --example interaction_sweep -- [checkpoint]
//!
//! Without a checkpoint, a short run is trained on a mix of settings.

use std::path::Path;

use candle_core::Device;
use clickseg::clicks::InteractionSpec;
use clickseg::dataset::ExperimentConfig;
use clickseg::eval::EvalOptions;
use clickseg::experiment::Experiment;
use clickseg::model::Checkpoint;

fn main() -> anyhow::Result<()> {
    let ckpt = std::env::args().nth(1);
    let mut cfg = ExperimentConfig::load(concat!(env!("CARGO_MANIFEST_DIR"), "/configs/toy.toml"))?;
    cfg.model.iterations.get_or_insert(300);
    cfg.clicks.mix = ["text,2,1", "notext,2,1", "text,1,0", "notext,1,0"].iter().map(|s| s.parse()).collect::<Result<_, _>>()?;
    cfg.clicks.samples_per_instance = cfg.clicks.mix.len();
    let exp = Experiment::open(cfg)?;
    let checkpoint = match ckpt {
        Some(p) => Checkpoint::load(Path::new(&p), &Device::Cpu)?,
        None => exp.train(None, &Device::Cpu)?.checkpoint,
    };

    let specs: Vec<InteractionSpec> = ["text,2,1", "notext,2,1", "text,1,0", "notext,1,0"].iter().map(|s| s.parse()).collect::<Result<_, _>>()?;
    let table = exp.sweep(&checkpoint, &specs, &EvalOptions::default())?;
    println!("{:<12} {:>8} {:>8} {:>8}", "setting", "overall", "seen", "unseen");
    for (spec, report) in &table.rows {
        let a = &report.aggregates;
        let f = |v: Option<f64>| v.map_or("-".into(), |v| format!("{:.2}", 100.0 * v));
        println!("{:<12} {:>8} {:>8} {:>8}", spec.to_string(), f(a.overall_miou), f(a.seen_miou), f(a.unseen_miou));
    }
    // Rows 3 and 2 differ only in the text; deltas are paired per instance.
    let delta = table.paired_delta(3, 2)?;
    let wins = delta.iter().filter(|d| **d > 0.0).count();
    println!(
        "adding text to one click: {:+.2} mIoU, better on {wins}/{} instances",
        100.0 * delta.iter().sum::<f64>() / delta.len() as f64,
        delta.len()
    );
    Ok(())
}
