//! Overfit the desk-sized network on one batch of eight instances.
//!
//! cargo run --release --example desk_overfit -- [steps]
//!
//! A quick end-to-end sanity check: loss should fall steadily and train
//! IoU should pass 0.9 within a few hundred steps.

use candle_core::Device;
use clickseg::clicks::{synthesize_interactions, ClickConfig, SynthesisMode};
use clickseg::dataset::{make_loaders, AssemblyConfig, InteractionIndex, LoadMode, LoaderConfig, SaliencySource};
use clickseg::geometry::mask_iou;
use clickseg::model::{Batch, ModelConfig, Trainer};
use clickseg::synthetic::{full_shape_split, generate, SceneConfig};
use ndarray::Array2;

fn main() -> anyhow::Result<()> {
    let steps: usize = std::env::args().nth(1).map(|s| s.parse()).transpose()?.unwrap_or(150);
    let set = generate(&SceneConfig {
        images: 4,
        size: 256,
        seed: 3,
        whole_radius: (40.0, 60.0),
        part_radius: (16.0, 22.0),
        extra_objects: (1, 1),
        ..Default::default()
    });
    let split = full_shape_split();
    let mut dataset = set.dataset.clone();
    dataset.instances.truncate(8);
    let clicks = ClickConfig { d_border: 15.0, d_between: 150.0, ..Default::default() };
    let (records, _) = synthesize_interactions(&dataset.instances, Some(&split), &clicks, SynthesisMode::Train)?;
    let index = InteractionIndex::from_records(records);
    let loader = make_loaders(
        &dataset,
        &split,
        LoadMode::Train,
        &index,
        Some(SaliencySource::new(set.saliency.clone())),
        AssemblyConfig { resolution: 256, ..Default::default() },
        LoaderConfig { batch_size: 8, ..Default::default() },
        None,
    )?;
    let batch = loader.batch(0, 0)?;

    let device = Device::Cpu;
    let mut trainer = Trainer::new(ModelConfig::desk(), &device)?;
    let inputs = Batch::from_examples(&batch, &device)?.inputs;
    let start = std::time::Instant::now();
    for step in 1..=steps {
        let loss = trainer.step(&batch)?;
        if step % 25 == 0 || step == steps {
            let prob = trainer.net().foreground_probability(&inputs)?.to_vec3::<f32>()?;
            let mean_iou = batch
                .iter()
                .enumerate()
                .map(|(i, ex)| {
                    let pred = Array2::from_shape_fn(ex.target.dim(), |(y, x)| ex.valid[[y, x]] && prob[i][y][x] > 0.5);
                    mask_iou(pred.view(), ex.target.view())
                })
                .sum::<Result<f64, _>>()?
                / batch.len() as f64;
            println!("step {step:>4}  loss {loss:.4}  train IoU {mean_iou:.3}  ({:.0}s)", start.elapsed().as_secs_f64());
        }
    }
    Ok(())
}
