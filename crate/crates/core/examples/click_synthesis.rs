//! Synthesize click interactions for a small synthetic dataset.
//!
//! cargo run --example click_synthesis

use clickseg::clicks::{synthesize_interactions, write_jsonl, ClickConfig, InteractionSpec, SynthesisMode};
use clickseg::synthetic::{generate, SceneConfig};

fn main() -> anyhow::Result<()> {
    let set = generate(&SceneConfig { images: 8, ..Default::default() });
    let cfg = ClickConfig { d_border: 3.0, d_between: 10.0, ring_radius: 4.0, ..Default::default() };

    for spec in ["text,1,0", "notext,2,1"] {
        let spec: InteractionSpec = spec.parse()?;
        let (records, stats) =
            synthesize_interactions(&set.dataset.instances, Some(&set.split), &cfg.with_spec(spec), SynthesisMode::Eval)?;
        println!(
            "{spec}: {} interactions, {:.1}% relaxed, {} skipped",
            stats.samples,
            100.0 * stats.relaxation_rate(),
            stats.skipped
        );
        let first = &records[0].interaction;
        println!("  {} -> {:?} text={:?}", first.instance_id, first.clicks, first.text);
    }

    let (records, _) = synthesize_interactions(&set.dataset.instances, Some(&set.split), &cfg, SynthesisMode::Train)?;
    let path = std::env::temp_dir().join("clicks.jsonl");
    write_jsonl(std::io::BufWriter::new(std::fs::File::create(&path)?), &records)?;
    println!("{} training interactions written to {}", records.len(), path.display());
    Ok(())
}
