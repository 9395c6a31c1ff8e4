//! HTTP API behind the annotation tool.
//!
//! Structured bodies are UTF-8 text with one `key = value` field per line.
//! Displacements sent to and returned from `/preview`, `/predict` and
//! `PUT /annotations` are in working-resolution pixels; the store keeps
//! them at each image's original resolution, in the dataset manifest
//! format.
//!
//! | Route | Result |
//! |---|---|
//! | `GET /images` | one line per image: `id status [side d0 d1 d2 d3]` |
//! | `GET /images/{id}` | PNG at working resolution |
//! | `POST /preview` | PNG warped by `H(d)`, `X-Valid-Bbox` header |
//! | `GET /annotations/{id}` | stored record, `ETag` header |
//! | `PUT /annotations/{id}` | durable save; `If-Match` guards against lost updates |
//! | `GET /stats` | per-corner statistics of the store |
//! | `POST /predict` | model suggestion; 503 without a checkpoint |

pub mod store;

use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Path as UrlPath, State};
use axum::http::{header, HeaderMap, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::Router;
use planerect::dataset::{compute_stats, image_path, AnnotationRecord};
use planerect::model::{read_checkpoint, Model};
use planerect::warp::warp_by_displacement;
use planerect::{DisplacementVector, Error, Image64, Side};

pub use store::AnnotationStore;

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    pub images: PathBuf,
    pub store: PathBuf,
    pub checkpoint: Option<PathBuf>,
    pub working_size: usize,
}

/// Shared state of one annotation session.
pub struct AppState {
    images: PathBuf,
    working_size: usize,
    model: Option<Model<f64>>,
    store: AnnotationStore,
}

impl AppState {
    pub fn open(cfg: &ServiceConfig) -> planerect::Result<Self> {
        if cfg.working_size < 2 {
            return Err(Error::Config("working size must be at least 2".into()));
        }
        let model = match &cfg.checkpoint {
            Some(p) => {
                let (mc, params) = read_checkpoint(p)?;
                Some(Model::new(mc, params)?)
            }
            None => None,
        };
        Ok(Self {
            images: cfg.images.clone(),
            working_size: cfg.working_size,
            model,
            store: AnnotationStore::open(&cfg.store)?,
        })
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/images", get(list_images))
        .route("/images/{id}", get(get_image))
        .route("/preview", post(preview))
        .route("/annotations/{id}", get(get_annotation).put(put_annotation))
        .route("/stats", get(stats))
        .route("/predict", post(predict))
        .with_state(state)
}

/// Binds `addr` and serves until Ctrl-C.
pub async fn serve(cfg: &ServiceConfig, addr: SocketAddr) -> planerect::Result<()> {
    let state = Arc::new(AppState::open(cfg)?);
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("annotation service listening on http://{}", listener.local_addr()?);
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}

#[derive(Debug)]
struct ApiError(StatusCode, String);

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, [(header::CONTENT_TYPE, "text/plain; charset=utf-8")], format!("{}\n", self.1)).into_response()
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::InvariantViolation(_) | Error::OutOfRange(_) | Error::Parse { .. } | Error::Config(_) => {
                StatusCode::UNPROCESSABLE_ENTITY
            }
            Error::SingularSystem(_) | Error::AtInfinity => StatusCode::UNPROCESSABLE_ENTITY,
            Error::Io(io) if io.kind() == std::io::ErrorKind::NotFound => StatusCode::NOT_FOUND,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        ApiError(status, e.to_string())
    }
}

type ApiResult<T> = Result<T, ApiError>;

fn unprocessable(msg: impl Into<String>) -> ApiError {
    ApiError(StatusCode::UNPROCESSABLE_ENTITY, msg.into())
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> ApiResult<T> + Send + 'static) -> ApiResult<T> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError(StatusCode::INTERNAL_SERVER_ERROR, format!("worker failed: {e}")))?
}

/// Parses `key = value` lines into a map; later keys win.
fn parse_fields(body: &[u8]) -> ApiResult<BTreeMap<String, String>> {
    let text = std::str::from_utf8(body).map_err(|_| unprocessable("body is not UTF-8"))?;
    let mut out = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| unprocessable(format!("line {}: expected `key = value`", i + 1)))?;
        out.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(out)
}

fn field<'a>(fields: &'a BTreeMap<String, String>, key: &str) -> ApiResult<&'a str> {
    fields.get(key).map(String::as_str).ok_or_else(|| unprocessable(format!("missing field `{key}`")))
}

fn known_image(dir: &Path, id: &str) -> ApiResult<PathBuf> {
    let valid = !id.is_empty() && !id.starts_with('.') && !id.contains(['/', '\\']) && !id.chars().any(char::is_whitespace);
    let path = image_path(dir, id);
    if !valid || !path.is_file() {
        return Err(ApiError(StatusCode::NOT_FOUND, format!("unknown image `{id}`")));
    }
    Ok(path)
}

struct LoadedImage {
    original: (usize, usize),
    working: Image64,
}

fn load_working(state: &AppState, id: &str) -> ApiResult<LoadedImage> {
    let path = known_image(&state.images, id)?;
    let img = Image64::load_png(path)?;
    let s = state.working_size;
    let original = (img.width(), img.height());
    let working = if original == (s, s) { img } else { img.resize(s, s) };
    Ok(LoadedImage { original, working })
}

/// Displacement and side from a request, checked against the convention at
/// working resolution.
fn parse_displacement(fields: &BTreeMap<String, String>, working: usize) -> ApiResult<(Side, DisplacementVector<f64>)> {
    let side: Side = field(fields, "side")?.parse().map_err(unprocessable)?;
    let d: DisplacementVector<f64> = field(fields, "d")?.parse().map_err(unprocessable)?;
    if !d.is_finite() {
        return Err(unprocessable("displacement must be finite"));
    }
    if !d.is_consistent_with(side) {
        return Err(unprocessable(format!("side {side} but {d} moves the other side")));
    }
    if d.max_abs() >= working as f64 / 2.0 {
        return Err(unprocessable(format!("|d| must stay below {}", working as f64 / 2.0)));
    }
    Ok((side, d))
}

fn png_response(bytes: Vec<u8>, extra: Option<(&'static str, String)>) -> ApiResult<Response> {
    let mut headers = HeaderMap::new();
    headers.insert(header::CONTENT_TYPE, HeaderValue::from_static("image/png"));
    if let Some((k, v)) = extra {
        headers.insert(k, HeaderValue::from_str(&v).map_err(|e| ApiError(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?);
    }
    Ok((headers, bytes).into_response())
}

fn text(body: String) -> Response {
    ([(header::CONTENT_TYPE, "text/plain; charset=utf-8")], body).into_response()
}

async fn list_images(State(state): State<Arc<AppState>>) -> ApiResult<Response> {
    let dir = state.images.clone();
    let mut ids = blocking(move || {
        let mut ids = Vec::new();
        for entry in std::fs::read_dir(&dir).map_err(Error::from)? {
            let path = entry.map_err(Error::from)?.path();
            if path.extension().is_some_and(|e| e == "png") {
                if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                    if !stem.starts_with('.') {
                        ids.push(stem.to_string());
                    }
                }
            }
        }
        Ok(ids)
    })
    .await?;
    ids.sort();
    let snapshot = state.store.snapshot();
    let mut out = String::new();
    for id in ids {
        match snapshot.get(&id) {
            Some(e) => out.push_str(&format!("{id} annotated {} {}\n", e.record.side, e.record.d)),
            None => out.push_str(&format!("{id} unannotated\n")),
        }
    }
    Ok(text(out))
}

async fn get_image(State(state): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> ApiResult<Response> {
    let bytes = blocking(move || Ok(load_working(&state, &id)?.working.to_png_bytes()?)).await?;
    png_response(bytes, None)
}

async fn preview(State(state): State<Arc<AppState>>, body: Bytes) -> ApiResult<Response> {
    let (bytes, bbox) = blocking(move || {
        let fields = parse_fields(&body)?;
        let id = field(&fields, "image_id")?.to_string();
        let (_, d) = parse_displacement(&fields, state.working_size)?;
        let img = load_working(&state, &id)?;
        let (warped, mask) = warp_by_displacement(&img.working, &d)?;
        let bbox = match mask.bounding_box() {
            Some((x0, y0, x1, y1)) => format!("{x0} {y0} {x1} {y1}"),
            None => "none".to_string(),
        };
        Ok((warped.to_png_bytes()?, bbox))
    })
    .await?;
    png_response(bytes, Some(("x-valid-bbox", bbox)))
}

fn etag(version: u64) -> String {
    format!("\"{version}\"")
}

async fn get_annotation(State(state): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> ApiResult<Response> {
    let snapshot = state.store.snapshot();
    let entry = snapshot.get(&id).ok_or_else(|| ApiError(StatusCode::NOT_FOUND, format!("no annotation for `{id}`")))?;
    let r = &entry.record;
    let working = r.label_at(state.working_size, state.working_size)?;
    let body = format!(
        "image_id = {}\nside = {}\nd = {}\norig_width = {}\norig_height = {}\nworking_d = {}\n",
        r.image_id, r.side, r.d, r.orig_width, r.orig_height, working
    );
    let mut resp = text(body);
    resp.headers_mut().insert(header::ETAG, HeaderValue::from_str(&etag(entry.version)).expect("ascii etag"));
    Ok(resp)
}

async fn put_annotation(
    State(state): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
    headers: HeaderMap,
    body: Bytes,
) -> ApiResult<Response> {
    let if_match = headers.get(header::IF_MATCH).map(|v| v.to_str().unwrap_or("").trim().to_string());
    let version = blocking(move || {
        let fields = parse_fields(&body)?;
        let (side, d) = parse_displacement(&fields, state.working_size)?;
        let (ow, oh) = load_working(&state, &id)?.original;
        let s = state.working_size;
        // Express the working-resolution label in the original frame.
        let at_working = AnnotationRecord::new(id.clone(), s, s, side, d)?;
        let record = AnnotationRecord::new(id, ow, oh, side, at_working.label_at(ow, oh)?)?;
        let expected = match if_match.as_deref() {
            None | Some("*") => None,
            Some(tag) => Some(tag.trim_matches('"').parse::<u64>().map_err(|_| ApiError(StatusCode::CONFLICT, "stale or malformed If-Match".into()))?),
        };
        state.store.put(record, expected).map_err(|e| match e {
            store::PutError::Conflict { current } => {
                ApiError(StatusCode::CONFLICT, format!("record changed (current version {current})"))
            }
            store::PutError::Io(e) => ApiError::from(e),
        })
    })
    .await?;
    let mut resp = text(format!("version = {version}\n"));
    resp.headers_mut().insert(header::ETAG, HeaderValue::from_str(&etag(version)).expect("ascii etag"));
    Ok(resp)
}

async fn stats(State(state): State<Arc<AppState>>) -> ApiResult<Response> {
    let records: Vec<AnnotationRecord> = state.store.snapshot().values().map(|e| e.record.clone()).collect();
    if records.is_empty() {
        return Ok(text("records = 0\n".into()));
    }
    Ok(text(compute_stats(&records)?.to_string()))
}

async fn predict(State(state): State<Arc<AppState>>, body: Bytes) -> ApiResult<Response> {
    if state.model.is_none() {
        return Err(ApiError(StatusCode::SERVICE_UNAVAILABLE, "no checkpoint loaded".into()));
    }
    let (side, d) = blocking(move || {
        let model = state.model.as_ref().expect("checked above");
        let fields = parse_fields(&body)?;
        let id = field(&fields, "image_id")?.to_string();
        let img = load_working(&state, &id)?;
        let raw = model.predict(&model.prepare(&img.working))?;
        Ok(suggestion(&raw, model.config.input_size, state.working_size)?)
    })
    .await?;
    Ok(text(format!("side = {side}\nd = {d}\n")))
}

/// Projects a raw prediction onto the annotation convention: keep the side
/// with the larger motion, zero the other, clamp into the legal range and
/// rescale from the model's input size to the working size.
fn suggestion(raw: &DisplacementVector<f64>, model_size: usize, working: usize) -> planerect::Result<(Side, DisplacementVector<f64>)> {
    let left: f64 = Side::Left.corners().iter().map(|&i| raw.0[i].abs()).sum();
    let right: f64 = Side::Right.corners().iter().map(|&i| raw.0[i].abs()).sum();
    let side = if right > left { Side::Right } else { Side::Left };
    let limit = model_size as f64 / 2.0 * 0.98;
    let [top, bottom] = raw.side_values(side).map(|v| v.clamp(-limit, limit));
    let d = DisplacementVector::from_side(side, top, bottom);
    let rec = AnnotationRecord::new("suggestion", model_size, model_size, side, d)?;
    Ok((side, rec.label_at(working, working)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suggestion_keeps_dominant_side() {
        let (side, d) = suggestion(&DisplacementVector([0.5, 3.0, -2.0, 0.1]), 224, 224).unwrap();
        assert_eq!(side, Side::Right);
        assert_eq!(d, DisplacementVector([0.0, 3.0, -2.0, 0.0]));
        let (side, d) = suggestion(&DisplacementVector::zero(), 56, 224).unwrap();
        assert_eq!(side, Side::Left);
        assert_eq!(d, DisplacementVector::zero());
    }

    #[test]
    fn field_parsing() {
        let f = parse_fields(b"image_id = a\n# note\nd = 1 0 0 2\n").unwrap();
        assert_eq!(f["image_id"], "a");
        assert_eq!(f["d"], "1 0 0 2");
        assert!(parse_fields(b"nonsense").is_err());
    }
}
