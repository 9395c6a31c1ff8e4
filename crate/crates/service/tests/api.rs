use std::path::Path;
use std::sync::Arc;

use axum::body::Body;
use axum::http::{header, Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use planerect::dataset::{load_manifest, AnnotationRecord};
use planerect::model::{save_checkpoint, ModelConfig, ModelParams};
use planerect::{DisplacementVector, Image64, Side};
use planerect_service::{router, AppState, ServiceConfig};
use tower::ServiceExt;

const WORKING: usize = 32;

fn scene(w: usize, h: usize) -> Image64 {
    Image64::from_fn(w, h, 3, |x, y, c| 0.1 + 0.8 * (((x / 4 + y / 3 + c) % 5) as f64) / 4.0)
}

struct Fixture {
    dir: tempfile::TempDir,
}

impl Fixture {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        std::fs::create_dir(dir.path().join("images")).unwrap();
        scene(WORKING, WORKING).save_png(dir.path().join("images/a.png")).unwrap();
        scene(64, 64).save_png(dir.path().join("images/big.png")).unwrap();
        scene(WORKING, WORKING).save_png(dir.path().join("images/c.png")).unwrap();
        Self { dir }
    }

    fn config(&self) -> ServiceConfig {
        ServiceConfig {
            images: self.dir.path().join("images"),
            store: self.dir.path().join("annotations.txt"),
            checkpoint: None,
            working_size: WORKING,
        }
    }

    fn app(&self) -> Router {
        self.app_with(self.config())
    }

    fn app_with(&self, cfg: ServiceConfig) -> Router {
        router(Arc::new(AppState::open(&cfg).unwrap()))
    }
}

struct Reply {
    status: StatusCode,
    headers: axum::http::HeaderMap,
    body: Vec<u8>,
}

impl Reply {
    fn text(&self) -> String {
        String::from_utf8(self.body.clone()).unwrap()
    }
}

async fn send(app: &Router, method: &str, uri: &str, body: &str, if_match: Option<&str>) -> Reply {
    let mut req = Request::builder().method(method).uri(uri);
    if let Some(tag) = if_match {
        req = req.header(header::IF_MATCH, tag);
    }
    let resp = app.clone().oneshot(req.body(Body::from(body.to_string())).unwrap()).await.unwrap();
    let status = resp.status();
    let headers = resp.headers().clone();
    let body = resp.into_body().collect().await.unwrap().to_bytes().to_vec();
    Reply { status, headers, body }
}

async fn get(app: &Router, uri: &str) -> Reply {
    send(app, "GET", uri, "", None).await
}

#[tokio::test]
async fn lists_images_with_status() {
    let fx = Fixture::new();
    let app = fx.app();
    let r = get(&app, "/images").await;
    assert_eq!(r.status, StatusCode::OK);
    assert_eq!(r.text(), "a unannotated\nbig unannotated\nc unannotated\n");

    let put = send(&app, "PUT", "/annotations/c", "side = right\nd = 0 2 -1 0\n", None).await;
    assert_eq!(put.status, StatusCode::OK, "{}", put.text());
    assert_eq!(get(&app, "/images").await.text(), "a unannotated\nbig unannotated\nc annotated right 0 2 -1 0\n");
}

#[tokio::test]
async fn image_payload_and_zero_preview_are_identical() {
    let fx = Fixture::new();
    let app = fx.app();
    for id in ["a", "big"] {
        let img = get(&app, &format!("/images/{id}")).await;
        assert_eq!(img.status, StatusCode::OK);
        assert_eq!(img.headers[header::CONTENT_TYPE], "image/png");
        let decoded = Image64::from_png_bytes(&img.body).unwrap();
        assert_eq!((decoded.width(), decoded.height()), (WORKING, WORKING));

        let body = format!("image_id = {id}\nside = left\nd = 0 0 0 0\n");
        let pv = send(&app, "POST", "/preview", &body, None).await;
        assert_eq!(pv.status, StatusCode::OK, "{}", pv.text());
        assert_eq!(pv.body, img.body, "zero preview of {id} differs from the source payload");
        assert_eq!(pv.headers["x-valid-bbox"], format!("0 0 {} {}", WORKING - 1, WORKING - 1));
    }
}

#[tokio::test]
async fn preview_reports_valid_region() {
    let fx = Fixture::new();
    let app = fx.app();
    let pv = send(&app, "POST", "/preview", "image_id = a\nside = left\nd = -4 0 0 4\n", None).await;
    assert_eq!(pv.status, StatusCode::OK);
    let bbox: Vec<usize> =
        pv.headers["x-valid-bbox"].to_str().unwrap().split(' ').map(|v| v.parse().unwrap()).collect();
    assert_eq!(bbox.len(), 4);
    assert!(bbox[0] <= bbox[2] && bbox[1] <= bbox[3] && bbox[2] < WORKING && bbox[3] < WORKING);
    let decoded = Image64::from_png_bytes(&pv.body).unwrap();
    assert_eq!(decoded.width(), WORKING);
}

#[tokio::test]
async fn preview_rejects_bad_requests() {
    let fx = Fixture::new();
    let app = fx.app();
    let cases = [
        ("image_id = a\nside = left\nd = 0 3 0 0\n", StatusCode::UNPROCESSABLE_ENTITY),
        ("image_id = a\nside = left\nd = 16 0 0 0\n", StatusCode::UNPROCESSABLE_ENTITY),
        ("image_id = a\nside = up\nd = 0 0 0 0\n", StatusCode::UNPROCESSABLE_ENTITY),
        ("image_id = a\nd = 0 0 0 0\n", StatusCode::UNPROCESSABLE_ENTITY),
        ("garbage", StatusCode::UNPROCESSABLE_ENTITY),
        ("image_id = nope\nside = left\nd = 0 0 0 0\n", StatusCode::NOT_FOUND),
        ("image_id = ../images/a\nside = left\nd = 0 0 0 0\n", StatusCode::NOT_FOUND),
    ];
    for (body, status) in cases {
        assert_eq!(send(&app, "POST", "/preview", body, None).await.status, status, "{body:?}");
    }
    assert_eq!(get(&app, "/images/nope").await.status, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn annotations_convert_to_original_resolution() {
    let fx = Fixture::new();
    let app = fx.app();
    let put = send(&app, "PUT", "/annotations/big", "side = left\nd = 3 0 0 -2\n", None).await;
    assert_eq!(put.status, StatusCode::OK, "{}", put.text());

    let r = get(&app, "/annotations/big").await;
    assert_eq!(r.status, StatusCode::OK);
    let text = r.text();
    assert!(text.contains("d = 6 0 0 -4\n"), "{text}");
    assert!(text.contains("orig_width = 64\n") && text.contains("orig_height = 64\n"), "{text}");
    assert!(text.contains("working_d = 3 0 0 -2\n"), "{text}");

    let stored = load_manifest(&fx.config().store).unwrap();
    assert_eq!(stored, vec![AnnotationRecord::new("big", 64, 64, Side::Left, DisplacementVector([6.0, 0.0, 0.0, -4.0])).unwrap()]);
    assert_eq!(get(&app, "/annotations/a").await.status, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn concurrent_edits_are_detected() {
    let fx = Fixture::new();
    let app = fx.app();
    let first = send(&app, "PUT", "/annotations/a", "side = left\nd = 1 0 0 1\n", Some("\"0\"")).await;
    assert_eq!(first.status, StatusCode::OK);
    let tag = first.headers[header::ETAG].to_str().unwrap().to_string();
    assert_eq!(tag, "\"1\"");

    let ok = send(&app, "PUT", "/annotations/a", "side = left\nd = 2 0 0 1\n", Some(&tag)).await;
    assert_eq!(ok.status, StatusCode::OK);
    let stale = send(&app, "PUT", "/annotations/a", "side = left\nd = 9 0 0 9\n", Some(&tag)).await;
    assert_eq!(stale.status, StatusCode::CONFLICT);

    let current = get(&app, "/annotations/a").await;
    assert_eq!(current.headers[header::ETAG], "\"2\"");
    assert!(current.text().contains("d = 2 0 0 1\n"));
}

#[tokio::test]
async fn store_survives_restart() {
    let fx = Fixture::new();
    let entries = [("a", "left", "2 0 0 -1"), ("c", "right", "0 1.5 3 0")];
    {
        let app = fx.app();
        for (id, side, d) in entries {
            let r = send(&app, "PUT", &format!("/annotations/{id}"), &format!("side = {side}\nd = {d}\n"), None).await;
            assert_eq!(r.status, StatusCode::OK);
        }
    }
    let dir = fx.dir.path();
    assert!(std::fs::read_dir(dir).unwrap().all(|e| !e.unwrap().file_name().to_string_lossy().contains("tmp")));

    let app = fx.app();
    let listing = get(&app, "/images").await.text();
    assert!(listing.contains("a annotated left 2 0 0 -1\n") && listing.contains("c annotated right 0 1.5 3 0\n"));

    let stats = get(&app, "/stats").await.text();
    assert!(stats.contains("records = 2\n"), "{stats}");
    assert!(stats.contains("mean_abs = 1 0.75 1.5 0.5\n"), "{stats}");
    assert!(planerect::dataset::parse_manifest(&std::fs::read_to_string(fx.config().store).unwrap(), "store").is_ok());
}

#[tokio::test]
async fn empty_store_stats() {
    let fx = Fixture::new();
    assert_eq!(get(&fx.app(), "/stats").await.text(), "records = 0\n");
}

#[tokio::test]
async fn corrupt_store_is_refused() {
    let fx = Fixture::new();
    std::fs::write(fx.config().store, "a left 1 2 0 0 32 32\n").unwrap();
    assert!(AppState::open(&fx.config()).is_err());
}

fn write_checkpoint(path: &Path) {
    let cfg = ModelConfig { input_size: 16, widths: vec![2, 2], ..ModelConfig::default() };
    let params = ModelParams::<f64>::init(&cfg, 3);
    save_checkpoint(path, &params).unwrap();
}

#[tokio::test]
async fn predict_requires_checkpoint() {
    let fx = Fixture::new();
    let r = send(&fx.app(), "POST", "/predict", "image_id = a\n", None).await;
    assert_eq!(r.status, StatusCode::SERVICE_UNAVAILABLE);

    let ckpt = fx.dir.path().join("model.ckpt");
    write_checkpoint(&ckpt);
    let app = fx.app_with(ServiceConfig { checkpoint: Some(ckpt), ..fx.config() });
    let r = send(&app, "POST", "/predict", "image_id = big\n", None).await;
    assert_eq!(r.status, StatusCode::OK, "{}", r.text());
    let text = r.text();
    let side: Side = text.lines().next().unwrap().trim_start_matches("side = ").parse().unwrap();
    let d: DisplacementVector<f64> = text.lines().nth(1).unwrap().trim_start_matches("d = ").parse().unwrap();
    assert!(d.is_consistent_with(side));
    assert!(d.max_abs() < WORKING as f64 / 2.0);
    assert_eq!(send(&app, "POST", "/predict", "image_id = zzz\n", None).await.status, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn empty_directory_lists_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ServiceConfig {
        images: dir.path().to_path_buf(),
        store: dir.path().join("store.txt"),
        checkpoint: None,
        working_size: WORKING,
    };
    let r = get(&router(Arc::new(AppState::open(&cfg).unwrap())), "/images").await;
    assert_eq!(r.status, StatusCode::OK);
    assert_eq!(r.text(), "");
}

#[tokio::test]
async fn stats_of_two_saved_records() {
    let fx = Fixture::new();
    scene(64, 64).save_png(fx.dir.path().join("images/p.png")).unwrap();
    let app = fx.app_with(ServiceConfig { working_size: 64, ..fx.config() });
    for (id, body) in [("p", "side = left\nd = 10 0 0 10\n"), ("big", "side = right\nd = 0 20 20 0\n")] {
        assert_eq!(send(&app, "PUT", &format!("/annotations/{id}"), body, None).await.status, StatusCode::OK);
    }
    let stats = get(&app, "/stats").await.text();
    assert!(stats.contains("mean_abs = 5 10 10 5\n"), "{stats}");
    assert!(stats.contains("left = 1\n") && stats.contains("right = 1\n"), "{stats}");
}

#[tokio::test]
async fn save_then_get_and_invalid_saves() {
    let fx = Fixture::new();
    let app = fx.app();
    assert_eq!(send(&app, "PUT", "/annotations/a", "side = left\nd = 1 0 2 -3\n", None).await.status, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(send(&app, "PUT", "/annotations/a", "side = left\nd = 16 0 0 0\n", None).await.status, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(send(&app, "PUT", "/annotations/zzz", "side = left\nd = 1 0 0 0\n", None).await.status, StatusCode::NOT_FOUND);
    assert!(!fx.config().store.exists());

    assert_eq!(send(&app, "PUT", "/annotations/a", "side = left\nd = 1.25 0 0 -3\n", None).await.status, StatusCode::OK);
    let text = get(&app, "/annotations/a").await.text();
    assert_eq!(text, "image_id = a\nside = left\nd = 1.25 0 0 -3\norig_width = 32\norig_height = 32\nworking_d = 1.25 0 0 -3\n");
}

#[tokio::test]
async fn preview_is_pure_and_inverts() {
    let fx = Fixture::new();
    let smooth = Image64::from_fn(WORKING, WORKING, 3, |x, y, c| {
        0.5 + 0.3 * ((x as f64 * 0.3 + c as f64).sin() * (y as f64 * 0.2).cos())
    });
    smooth.save_png(fx.dir.path().join("images/s.png")).unwrap();
    let app = fx.app();
    let body = "image_id = s\nside = right\nd = 0 2 -2 0\n";
    let first = send(&app, "POST", "/preview", body, None).await;
    let second = send(&app, "POST", "/preview", body, None).await;
    assert_eq!(first.body, second.body);

    // Undo the preview with the inverse homography and compare interiors.
    let warped = Image64::from_png_bytes(&first.body).unwrap();
    let h = planerect::displacement_to_homography(&DisplacementVector([0.0, 2.0, -2.0, 0.0]), WORKING as f64, WORKING as f64).unwrap();
    let (back, mask) = planerect::warp::warp_image(&warped, &h.invert().unwrap(), WORKING, WORKING).unwrap();
    let original = Image64::from_png_bytes(&smooth.to_png_bytes().unwrap()).unwrap();
    let interior = mask.eroded(3);
    let (mut sum, mut n) = (0.0, 0usize);
    for y in 0..WORKING {
        for x in 0..WORKING {
            if interior.get(x, y) {
                for c in 0..3 {
                    sum += (back.get(c, x, y) - original.get(c, x, y)).abs();
                    n += 1;
                }
            }
        }
    }
    assert!(n > 0 && sum / (n as f64) < 0.02, "mean abs difference {}", sum / n as f64);
}

#[tokio::test]
async fn zero_checkpoint_suggests_zero() {
    let fx = Fixture::new();
    let ckpt = fx.dir.path().join("zero.ckpt");
    let cfg = ModelConfig { input_size: 16, widths: vec![2, 2], ..ModelConfig::default() };
    save_checkpoint(&ckpt, &ModelParams::<f64>::zeros(&cfg)).unwrap();
    let app = fx.app_with(ServiceConfig { checkpoint: Some(ckpt), ..fx.config() });
    let r = send(&app, "POST", "/predict", "image_id = a\n", None).await;
    assert_eq!(r.text(), "side = left\nd = 0 0 0 0\n");
}

#[tokio::test]
async fn suggestions_are_deterministic_and_previewable() {
    let fx = Fixture::new();
    let ckpt = fx.dir.path().join("model.ckpt");
    write_checkpoint(&ckpt);
    let app = fx.app_with(ServiceConfig { checkpoint: Some(ckpt), ..fx.config() });
    let a = send(&app, "POST", "/predict", "image_id = c\n", None).await.text();
    let b = send(&app, "POST", "/predict", "image_id = c\n", None).await.text();
    assert_eq!(a, b);
    let pv = send(&app, "POST", "/preview", &format!("image_id = c\n{a}"), None).await;
    assert_eq!(pv.status, StatusCode::OK, "{}", pv.text());
}
