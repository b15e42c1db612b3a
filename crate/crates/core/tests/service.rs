use std::io::Cursor;
use std::sync::Arc;

use candle_core::Device;
use clickseg::clicks::ClickConfig;
use clickseg::dataset::{AssemblyConfig, ExperimentConfig, SaliencySource};
use clickseg::experiment::Experiment;
use clickseg::model::{Checkpoint, ModelConfig, TrainingManifest};
use clickseg::saliency::StubBackend;
use clickseg::service::{router, AppState, Engine, Health, ImageInfo, SegmentResponse, ServiceConfig};
use serde_json::json;

fn png_bytes(img: &image::RgbImage) -> Vec<u8> {
    let mut out = Cursor::new(Vec::new());
    img.write_to(&mut out, image::ImageFormat::Png).unwrap();
    out.into_inner()
}

fn test_image() -> image::RgbImage {
    image::RgbImage::from_fn(40, 30, |x, y| image::Rgb([(x * 6) as u8, (y * 8) as u8, 90]))
}

fn untrained_engine(backend: Arc<StubBackend>) -> Engine {
    let asm = AssemblyConfig { resolution: 32, ..Default::default() };
    let manifest = TrainingManifest::new("fixture", "stub", ClickConfig::default(), asm, ModelConfig::toy());
    Engine { checkpoint: Checkpoint::untrained(manifest, &Device::Cpu).unwrap(), saliency: Some(SaliencySource::new(backend)) }
}

async fn spawn(state: Arc<AppState>) -> String {
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    tokio::spawn(async move { axum::serve(listener, router(state)).await.unwrap() });
    format!("http://{addr}")
}

async fn upload(client: &reqwest::Client, base: &str, bytes: Vec<u8>) -> reqwest::Response {
    client.post(format!("{base}/v1/images")).body(bytes).send().await.unwrap()
}

#[tokio::test]
async fn upload_is_content_addressed_and_validated() {
    let cfg = ServiceConfig { max_upload_bytes: 64 * 1024, ..Default::default() };
    let base = spawn(AppState::with_engine(cfg, untrained_engine(Arc::new(StubBackend::new())))).await;
    let client = reqwest::Client::new();
    let bytes = png_bytes(&test_image());

    let r = upload(&client, &base, bytes.clone()).await;
    assert_eq!(r.status(), 200);
    let a: ImageInfo = r.json().await.unwrap();
    assert_eq!((a.width, a.height), (40, 30));
    let b: ImageInfo = upload(&client, &base, bytes.clone()).await.json().await.unwrap();
    assert_eq!(a, b);

    assert_eq!(upload(&client, &base, bytes[..bytes.len() / 2].to_vec()).await.status(), 400);
    assert_eq!(upload(&client, &base, vec![0u8; 100 * 1024]).await.status(), 413);
}

#[tokio::test]
async fn segment_errors_map_to_statuses() {
    let base = spawn(AppState::with_engine(ServiceConfig::default(), untrained_engine(Arc::new(StubBackend::new())))).await;
    let client = reqwest::Client::new();
    let id = upload(&client, &base, png_bytes(&test_image())).await.json::<ImageInfo>().await.unwrap().image_id;
    let seg = |body: serde_json::Value| client.post(format!("{base}/v1/segment")).json(&body).send();

    let r = seg(json!({"image_id": "nope", "clicks": [{"x": 1, "y": 1, "polarity": "positive"}]})).await.unwrap();
    assert_eq!(r.status(), 404);
    let r = seg(json!({"image_id": id, "clicks": [], "text": ""})).await.unwrap();
    assert_eq!(r.status(), 422);
    let r = seg(json!({"image_id": id, "clicks": [{"x": 40, "y": 1, "polarity": "positive"}]})).await.unwrap();
    assert_eq!(r.status(), 422);
    assert!(r.json::<serde_json::Value>().await.unwrap()["error"].as_str().unwrap().contains("40"));
    // Unknown phrase for the stub backend.
    let r = seg(json!({"image_id": id, "clicks": [], "text": "zebra"})).await.unwrap();
    assert_eq!(r.status(), 422);
    let r = seg(json!({"image_id": id, "clicks": [{"x": 3, "y": 4, "polarity": "positive"}]})).await.unwrap();
    assert_eq!(r.status(), 200);
    let body: SegmentResponse = r.json().await.unwrap();
    assert_eq!(body.mask_rle.size, [30, 40]);
    assert_eq!(body.mask_rle.counts.iter().map(|&c| c as usize).sum::<usize>(), 1200);
}

#[tokio::test]
async fn health_reports_loading_then_ready() {
    let state = AppState::new(ServiceConfig::default());
    let base = spawn(state.clone()).await;
    let client = reqwest::Client::new();
    let h: Health = client.get(format!("{base}/v1/health")).send().await.unwrap().json().await.unwrap();
    assert_eq!(h.status, "loading");
    let id = upload(&client, &base, png_bytes(&test_image())).await.json::<ImageInfo>().await.unwrap().image_id;
    let r = client
        .post(format!("{base}/v1/segment"))
        .json(&json!({"image_id": id, "clicks": [{"x": 1, "y": 1, "polarity": "positive"}]}))
        .send()
        .await
        .unwrap();
    assert_eq!(r.status(), 503);

    state.set_ready(untrained_engine(Arc::new(StubBackend::new())));
    let h: Health = client.get(format!("{base}/v1/health")).send().await.unwrap().json().await.unwrap();
    assert_eq!(h.status, "ready");
    assert_eq!(h.backend_id.as_deref(), Some("stub"));
    let manifest = h.checkpoint_manifest.unwrap();
    assert_eq!(manifest.git_revision, clickseg::model::git_revision());
    assert_eq!(manifest.dataset, "fixture");
}

#[tokio::test]
async fn concurrent_identical_requests_agree() {
    let backend = Arc::new(StubBackend::new());
    let base = spawn(AppState::with_engine(ServiceConfig::default(), untrained_engine(backend.clone()))).await;
    let client = reqwest::Client::new();
    let id = upload(&client, &base, png_bytes(&test_image())).await.json::<ImageInfo>().await.unwrap().image_id;
    backend.add_image_alias(&id, "tie", "blob:cx=10,cy=12,s=4").unwrap();
    let body = json!({"image_id": id, "clicks": [{"x": 10, "y": 12, "polarity": "positive"}], "text": "tie"});
    let futures: Vec<_> = (0..10)
        .map(|_| {
            let (client, url, body) = (client.clone(), format!("{base}/v1/segment"), body.clone());
            tokio::spawn(async move { client.post(url).json(&body).send().await.unwrap().json::<SegmentResponse>().await.unwrap() })
        })
        .collect();
    let mut masks = Vec::new();
    for f in futures {
        masks.push(f.await.unwrap().mask_rle);
    }
    assert!(masks.windows(2).all(|w| w[0] == w[1]));
}

#[tokio::test]
async fn sessions_record_and_replay() {
    let backend = Arc::new(StubBackend::new());
    let state = AppState::with_engine(ServiceConfig { preview_size: 16, ..Default::default() }, untrained_engine(backend.clone()));
    let base = spawn(state.clone()).await;
    let client = reqwest::Client::new();
    let id = upload(&client, &base, png_bytes(&test_image())).await.json::<ImageInfo>().await.unwrap().image_id;
    backend.add_image_alias(&id, "cup", "blob:cx=30,cy=8,s=5").unwrap();

    let first: SegmentResponse = client
        .post(format!("{base}/v1/segment"))
        .json(&json!({"image_id": id, "clicks": [{"x": 30, "y": 8, "polarity": "positive"}], "text": "cup", "saliency_preview": true}))
        .send()
        .await
        .unwrap()
        .json()
        .await
        .unwrap();
    let preview = first.saliency_preview.as_ref().unwrap();
    assert_eq!((preview.width, preview.height), (16, 12));
    assert!(preview.values.iter().all(|v| (0.0..=1.0).contains(v)));

    let refine = json!({
        "image_id": id,
        "session_id": first.session_id,
        "clicks": [{"x": 30, "y": 8, "polarity": "positive"}, {"x": 5, "y": 25, "polarity": "negative"}],
        "text": "cup"
    });
    let second: SegmentResponse = client.post(format!("{base}/v1/segment")).json(&refine).send().await.unwrap().json().await.unwrap();
    assert_eq!(second.session_id, first.session_id);
    assert!(second.saliency_preview.is_none());

    let session: clickseg::service::Session =
        client.get(format!("{base}/v1/sessions/{}", first.session_id)).send().await.unwrap().json().await.unwrap();
    assert_eq!(session.history().len(), 2);
    assert_eq!(session.history()[0].mask_id, first.mask_id);
    assert_eq!(session.last().unwrap().mask_rle, second.mask_rle);

    // Replaying the last interaction in a fresh session gives the same mask.
    let last = session.last().unwrap();
    let replay = json!({"image_id": id, "clicks": last.interaction.clicks, "text": last.interaction.text});
    let again: SegmentResponse = client.post(format!("{base}/v1/segment")).json(&replay).send().await.unwrap().json().await.unwrap();
    assert_ne!(again.session_id, first.session_id);
    assert_eq!(again.mask_rle, second.mask_rle);

    let other = upload(&client, &base, png_bytes(&image::RgbImage::new(8, 8))).await.json::<ImageInfo>().await.unwrap().image_id;
    let wrong = json!({"image_id": other, "session_id": first.session_id, "clicks": [{"x": 1, "y": 1, "polarity": "positive"}]});
    assert_eq!(client.post(format!("{base}/v1/segment")).json(&wrong).send().await.unwrap().status(), 422);
    assert_eq!(client.get(format!("{base}/v1/sessions/none")).send().await.unwrap().status(), 404);
}

#[tokio::test]
async fn serves_ui_with_cors() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("index.html"), "<html>annotate</html>").unwrap();
    let cfg = ServiceConfig { ui_dir: Some(dir.path().to_path_buf()), ..Default::default() };
    let base = spawn(AppState::new(cfg)).await;
    let client = reqwest::Client::new();
    let r = client.get(format!("{base}/ui/")).send().await.unwrap();
    assert_eq!(r.status(), 200);
    assert!(r.text().await.unwrap().contains("annotate"));
    let r = client.get(format!("{base}/v1/health")).header("Origin", "http://localhost:5173").send().await.unwrap();
    assert!(r.headers().contains_key("access-control-allow-origin"));
}

/// A part inside a whole: the same click with the part's class name gives a
/// smaller mask than with the whole's class name.
#[tokio::test]
async fn text_disambiguates_part_from_whole() {
    let (engine, eval) = tokio::task::spawn_blocking(|| {
        let mut cfg = ExperimentConfig::load(concat!(env!("CARGO_MANIFEST_DIR"), "/configs/toy.toml")).unwrap();
        cfg.split = "shapes_full".into();
        cfg.model.iterations = Some(400);
        let exp = Experiment::open(cfg).unwrap();
        let out = exp.train(None, &Device::Cpu).unwrap();
        (Engine { checkpoint: out.checkpoint, saliency: exp.saliency.clone() }, exp)
    })
    .await
    .unwrap();
    let stub = clickseg::synthetic::generate(&match &eval.config.eval_dataset {
        Some(clickseg::dataset::DatasetSource::Synthetic { scenes }) => scenes.clone(),
        _ => unreachable!("toy config evaluates on synthetic scenes"),
    })
    .saliency;
    let backend = Arc::new(StubBackend::new());
    backend.absorb(&stub);
    let engine = Engine { saliency: Some(SaliencySource::new(backend.clone())), ..engine };
    let base = spawn(AppState::with_engine(ServiceConfig::default(), engine)).await;
    let client = reqwest::Client::new();

    let mut smaller = 0;
    let scenes = 6;
    for s in 0..scenes {
        let image_id = format!("s7919-scene{s:04}");
        let insts: Vec<_> = eval.eval_set.instances.iter().filter(|i| i.image_id == image_id).collect();
        let (whole, part) = (insts[0], insts[insts.len() - 1]);
        let mask = part.decode().unwrap();
        let (n, sy, sx) = mask.indexed_iter().filter(|(_, &v)| v).fold((0, 0, 0), |(n, a, b), ((y, x), _)| (n + 1, a + y, b + x));
        let (cy, cx) = (sy / n, sx / n);
        let pixels = eval.eval_set.load_image(&image_id).unwrap().pixels;
        let id = upload(&client, &base, png_bytes(&pixels)).await.json::<ImageInfo>().await.unwrap().image_id;
        backend.copy_image_aliases(&image_id, &id);
        let mut areas = Vec::new();
        for class in [&part.class_name, &whole.class_name] {
            let body = json!({"image_id": id, "clicks": [{"x": cx, "y": cy, "polarity": "positive"}], "text": class});
            let r: SegmentResponse = client.post(format!("{base}/v1/segment")).json(&body).send().await.unwrap().json().await.unwrap();
            areas.push(r.mask_rle.to_rle().unwrap().area());
        }
        println!("{image_id}: part text area {} whole text area {}", areas[0], areas[1]);
        smaller += usize::from(areas[0] < areas[1]);
    }
    assert_eq!(smaller, scenes);
}
