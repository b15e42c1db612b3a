//! Run the HTTP service in-process and drive it like an annotation client.
//!
//! cargo run --release --example serve_demo -- [checkpoint]
//!
//! Uploads a synthetic scene, segments the compound object from one click,
//! then asks for its part by name, then lists the session history. Without
//! a checkpoint a short toy run is trained first. For a standalone server
//! use `clickseg serve`.

use std::io::Cursor;
use std::path::Path;
use std::sync::Arc;

use candle_core::Device;
use clickseg::dataset::{ExperimentConfig, SaliencySource};
use clickseg::experiment::Experiment;
use clickseg::model::Checkpoint;
use clickseg::saliency::StubBackend;
use clickseg::service::{router, AppState, Engine, ImageInfo, SegmentResponse, ServiceConfig};
use clickseg::synthetic::{generate, SceneConfig};
use serde_json::json;

#[tokio::main]
async fn main() -> anyhow::Result<()> {
    let ckpt = std::env::args().nth(1);
    let checkpoint = match ckpt {
        Some(p) => Checkpoint::load(Path::new(&p), &Device::Cpu)?,
        None => {
            let mut cfg = ExperimentConfig::load(concat!(env!("CARGO_MANIFEST_DIR"), "/configs/toy.toml"))?;
            cfg.split = "shapes_full".into();
            cfg.model.iterations = Some(300);
            tokio::task::spawn_blocking(move || Ok::<_, anyhow::Error>(Experiment::open(cfg)?.train(None, &Device::Cpu)?.checkpoint)).await??
        }
    };

    // A fresh scene; its stub saliency aliases are keyed by dataset image id.
    let set = generate(&SceneConfig { images: 1, seed: 4242, ..Default::default() });
    let scene = &set.dataset.images[0];
    let pixels = set.dataset.load_image(&scene.image_id)?.pixels;
    let whole = set.dataset.instances.iter().find(|i| i.image_id == scene.image_id).expect("scene has instances");
    let part = set.dataset.instances.iter().rev().find(|i| i.image_id == scene.image_id).expect("scene has a part");
    let backend = Arc::new(StubBackend::new());
    backend.absorb(&set.saliency);

    let engine = Engine { checkpoint, saliency: Some(SaliencySource::new(backend.clone())) };
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await?;
    let base = format!("http://{}", listener.local_addr()?);
    tokio::spawn(async move { axum::serve(listener, router(AppState::with_engine(ServiceConfig::default(), engine))).await });
    println!("serving on {base}");

    let client = reqwest::Client::new();
    let health: serde_json::Value = client.get(format!("{base}/v1/health")).send().await?.json().await?;
    println!("health: {} (backend {})", health["status"], health["backend_id"]);
    let mut png = Cursor::new(Vec::new());
    pixels.write_to(&mut png, image::ImageFormat::Png)?;
    let info: ImageInfo = client.post(format!("{base}/v1/images")).body(png.into_inner()).send().await?.json().await?;
    backend.copy_image_aliases(&scene.image_id, &info.image_id);
    println!("uploaded {}x{} as {}", info.width, info.height, info.image_id);

    let mask = whole.decode()?;
    let ((y, x), _) = mask.indexed_iter().find(|(_, v)| **v).expect("non-empty instance");
    let mut session: Option<String> = None;
    for (label, body) in [
        ("one click on the whole object", json!({"image_id": info.image_id, "clicks": [{"x": x, "y": y, "polarity": "positive"}], "text": whole.class_name})),
        ("text naming the part", json!({"image_id": info.image_id, "clicks": [], "text": part.class_name, "saliency_preview": true})),
    ] {
        let mut body = body;
        if let Some(s) = &session {
            body["session_id"] = json!(s);
        }
        let r: SegmentResponse = client.post(format!("{base}/v1/segment")).json(&body).send().await?.json().await?;
        let area = r.mask_rle.to_rle()?.area();
        println!("{label}: mask {} with {area} px (confidence {:.2})", r.mask_id, r.confidence);
        session = Some(r.session_id);
    }
    let history: serde_json::Value = client.get(format!("{base}/v1/sessions/{}", session.unwrap())).send().await?.json().await?;
    println!("session history: {} entries", history["history"].as_array().map_or(0, Vec::len));
    Ok(())
}
