use std::path::PathBuf;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use candle_core::Device;
use clap::{Parser, Subcommand, ValueEnum};
use clickseg::clicks::{synthesize_interactions, write_jsonl, InteractionSpec, SynthesisMode};
use clickseg::data::{Click, ImageSample, InteractionSet, LoadedImage};
use clickseg::dataset::SaliencySource;
use clickseg::eval::{plot_distractor_buckets, Averaging, EvalOptions};
use clickseg::experiment::Experiment;
use clickseg::model::Checkpoint;
use clickseg::saliency::{open_backend, SaliencyCache};
use clickseg::service::{serve, Engine, ServiceConfig};

#[derive(Parser)]
#[command(name = "clickseg", version, about = "Text + click interactive segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Train,
    Eval,
}

#[derive(Subcommand)]
enum Command {
    /// Write synthetic click interactions for a dataset as JSON lines.
    SynthClicks {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_enum, default_value = "train")]
        mode: Mode,
        #[arg(long, default_value = "interactions.jsonl")]
        out: PathBuf,
    },
    /// Train a model from an experiment config.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Defaults to the config's `out_dir`.
        #[arg(long)]
        out_dir: Option<PathBuf>,
        #[arg(long)]
        iterations: Option<usize>,
    },
    /// Segment one instance of one image.
    Predict {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        image: PathBuf,
        /// `x,y` for a positive click, `x,y,-` for a negative one. Repeatable.
        #[arg(long = "click")]
        clicks: Vec<String>,
        #[arg(long)]
        text: Option<String>,
        #[arg(long, default_value = "maskclip")]
        backend: String,
        #[arg(long)]
        registry: Option<PathBuf>,
        #[arg(long, default_value = "mask.png")]
        out: PathBuf,
    },
    /// Evaluate a checkpoint under one or more interaction specs.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        /// For example `text,1,0` or `notext,2,1`. Repeatable.
        #[arg(long = "spec", default_value = "text,1,0")]
        specs: Vec<InteractionSpec>,
        #[arg(long)]
        class_averaged: bool,
        #[arg(long, default_value = "eval")]
        out_dir: PathBuf,
    },
    /// Run the HTTP service.
    Serve {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value = "maskclip")]
        backend: String,
        #[arg(long)]
        registry: Option<PathBuf>,
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        #[arg(long)]
        cache_dir: Option<PathBuf>,
        #[arg(long)]
        ui_dir: Option<PathBuf>,
    },
}

fn parse_click(s: &str) -> Result<Click> {
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    let (x, y, negative) = match parts.as_slice() {
        [x, y] => (x, y, false),
        [x, y, p] => (x, y, matches!(*p, "-" | "neg" | "negative")),
        _ => bail!("bad click {s:?}, expected x,y or x,y,-"),
    };
    let (x, y) = (x.parse().context("click x")?, y.parse().context("click y")?);
    Ok(if negative { Click::negative(x, y) } else { Click::positive(x, y) })
}

fn main() -> Result<()> {
    tracing_subscriber::fmt().with_env_filter(tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into())).init();
    let device = Device::Cpu;
    match Cli::parse().command {
        Command::SynthClicks { config, mode, out } => {
            let exp = Experiment::load(&config)?;
            let (dataset, mode) = match mode {
                Mode::Train => (&exp.train_set, SynthesisMode::Train),
                Mode::Eval => (&exp.eval_set, SynthesisMode::Eval),
            };
            let cfg = match mode {
                SynthesisMode::Train => exp.config.clicks.clone(),
                SynthesisMode::Eval => exp.config.eval_clicks(),
            };
            let (records, stats) = synthesize_interactions(&dataset.instances, Some(&exp.split), &cfg, mode)?;
            write_jsonl(std::io::BufWriter::new(std::fs::File::create(&out)?), &records)?;
            println!("{} interactions for {} instances ({} relaxed, {} skipped) -> {}", stats.samples, stats.instances, stats.relaxed, stats.skipped, out.display());
        }
        Command::Train { config, out_dir, iterations } => {
            let mut exp = Experiment::load(&config)?;
            if let Some(n) = iterations {
                exp.config.model.iterations = Some(n);
            }
            let dir = out_dir.unwrap_or_else(|| exp.config.resolve(&exp.config.out_dir));
            let out = exp.train(Some(&dir), &device)?;
            println!("trained {} steps, final loss {:.4}, checkpoint {}", out.losses.len(), out.losses.last().copied().unwrap_or(f32::NAN), dir.join("final.safetensors").display());
        }
        Command::Predict { ckpt, image, clicks, text, backend, registry, out } => {
            let checkpoint = Checkpoint::load(&ckpt, &device)?;
            let pixels = image::open(&image).with_context(|| format!("reading {}", image.display()))?.to_rgb8();
            let sample = ImageSample { image_id: image.display().to_string(), width: pixels.width() as usize, height: pixels.height() as usize, uri_or_path: image.display().to_string() };
            let img = LoadedImage::new(sample, Arc::new(pixels))?;
            let clicks = clicks.iter().map(|c| parse_click(c)).collect::<Result<Vec<_>>>()?;
            let set = InteractionSet::new("cli", clicks, text.clone())?;
            let source = match &text {
                Some(_) => Some(SaliencySource::new(open_backend(&backend, registry.as_deref())?)),
                None => None,
            };
            let pred = checkpoint.predict_instance(&img, &set, source.as_ref())?;
            let mask = pred.mask.decode()?;
            let (h, w) = mask.dim();
            let png = image::GrayImage::from_fn(w as u32, h as u32, |x, y| image::Luma([if mask[[y as usize, x as usize]] { 255 } else { 0 }]));
            png.save(&out)?;
            println!("{} foreground pixels, confidence {:.3} -> {}", pred.mask.area, pred.confidence, out.display());
        }
        Command::Eval { config, ckpt, specs, class_averaged, out_dir } => {
            let exp = Experiment::load(&config)?;
            let checkpoint = Checkpoint::load(&ckpt, &device)?;
            let opts = EvalOptions { averaging: if class_averaged { Averaging::Class } else { Averaging::Instance }, ..Default::default() };
            std::fs::create_dir_all(&out_dir)?;
            let table = exp.sweep(&checkpoint, &specs, &opts)?;
            for (spec, report) in &table.rows {
                let stem = out_dir.join(spec.label().replace(',', "_"));
                report.write_json(&stem.with_extension("json"))?;
                report.write_csv(&stem.with_extension("csv"))?;
                plot_distractor_buckets(&report.distractor_buckets, 5, &stem.with_extension("png"))?;
                let a = &report.aggregates;
                let fmt = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{:.2}", 100.0 * v));
                println!(
                    "{spec}: overall {} seen {} unseen {} boundary {} ({} instances)",
                    fmt(a.overall_miou),
                    fmt(a.seen_miou),
                    fmt(a.unseen_miou),
                    fmt(a.overall_boundary_iou),
                    a.n_overall
                );
            }
        }
        Command::Serve { ckpt, backend, registry, port, host, cache_dir, ui_dir } => {
            let config = ServiceConfig { host, port, cache_dir, ui_dir, ..Default::default() }.with_env_overrides();
            let cache_dir = config.cache_dir.clone();
            let runtime = tokio::runtime::Runtime::new()?;
            runtime.block_on(serve(config, move || {
                let checkpoint = Checkpoint::load(&ckpt, &Device::Cpu).map_err(|e| e.to_string())?;
                let saliency = if checkpoint.manifest.assembly.use_text {
                    let backend = open_backend(&backend, registry.as_deref()).map_err(|e| e.to_string())?;
                    let cache = cache_dir.map_or_else(SaliencyCache::in_memory, SaliencyCache::with_dir);
                    Some(SaliencySource { backend, cache: Arc::new(cache) })
                } else {
                    None
                };
                Ok(Engine { checkpoint, saliency })
            }))?;
        }
    }
    Ok(())
}
