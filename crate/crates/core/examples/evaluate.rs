//! Evaluate a toy checkpoint: seen/unseen mIoU, boundary IoU, distractor buckets.
//!
//! cargo run --release --example evaluate -- [checkpoint] [out_dir]
//!
//! Without a checkpoint a short toy run is trained first.

use std::path::{Path, PathBuf};

use candle_core::Device;
use clickseg::clicks::InteractionSpec;
use clickseg::dataset::ExperimentConfig;
use clickseg::eval::{plot_distractor_buckets, Averaging, EvalOptions};
use clickseg::experiment::Experiment;
use clickseg::model::Checkpoint;

fn main() -> anyhow::Result<()> {
    let mut args = std::env::args().skip(1);
    let ckpt = args.next();
    let out = PathBuf::from(args.next().unwrap_or_else(|| "target/toy-eval".into()));
    let mut cfg = ExperimentConfig::load(concat!(env!("CARGO_MANIFEST_DIR"), "/configs/toy.toml"))?;
    cfg.model.iterations.get_or_insert(300);
    let exp = Experiment::open(cfg)?;
    let checkpoint = match ckpt {
        Some(p) => Checkpoint::load(Path::new(&p), &Device::Cpu)?,
        None => exp.train(None, &Device::Cpu)?.checkpoint,
    };

    std::fs::create_dir_all(&out)?;
    for averaging in [Averaging::Instance, Averaging::Class] {
        let opts = EvalOptions { averaging, ..Default::default() };
        let report = exp.evaluate(&checkpoint, InteractionSpec::new(true, 1, 0), &opts)?;
        let a = &report.aggregates;
        println!(
            "{averaging:?}-averaged: overall {:.3}, seen {:.3}, unseen {:.3}, boundary {:.3}",
            a.overall_miou.unwrap_or(f64::NAN),
            a.seen_miou.unwrap_or(f64::NAN),
            a.unseen_miou.unwrap_or(f64::NAN),
            a.overall_boundary_iou.unwrap_or(f64::NAN)
        );
        if averaging == Averaging::Instance {
            for (k, b) in &report.distractor_buckets {
                println!("  {k} same-class instances in image: {} unseen instances, mIoU {:.3}", b.instances, b.mean_iou);
            }
            report.write_json(&out.join("report.json"))?;
            report.write_csv(&out.join("report.csv"))?;
            plot_distractor_buckets(&report.distractor_buckets, 5, &out.join("distractors.png"))?;
        }
    }
    println!("report, per-instance CSV and bucket plot in {}", out.display());
    Ok(())
}
