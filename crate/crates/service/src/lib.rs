//! Local HTTP + WebSocket service over one resident scene.
//!
//! Readers work on immutable, epoch-tagged snapshots; a single writer
//! (scene load or edit) builds the next snapshot and swaps it in. Renders
//! already running keep the snapshot they started with.

use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::{Arc, Mutex, RwLock};
use std::time::Duration;

use axum::extract::ws::{Message, WebSocket, WebSocketUpgrade};
use axum::extract::{Query, State};
use axum::http::{header, HeaderValue};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::Engine;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use tokio::sync::{broadcast, watch};

use genie_core::edit::{load_mesh_any, EditOp, EditSession};
use genie_core::io::camera::CameraSpec;
use genie_core::io::checkpoint::SceneBundle;
use genie_core::render::{render_image, RenderConfig};
use genie_core::{load_checkpoint, Camera, GenieError, ProximityIndex, Vec3};

mod error;

pub use error::ApiError;

/// Control payloads carry this `version`.
pub const API_VERSION: u32 = 1;

/// Widths of the progressive preview ladder; the last rung uses the most
/// recent render size.
pub const PREVIEW_LADDER: [u32; 2] = [16, 64];

const DEFAULT_PREVIEW_SIZE: u32 = 128;

/// What a second writer gets while another edit or load is running.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum WriterPolicy {
    #[default]
    Reject,
    Queue,
}

#[derive(Clone, Debug)]
pub struct ServiceOptions {
    pub bind: SocketAddr,
    pub writer_policy: WriterPolicy,
    /// Sleep inserted between taking a snapshot and rendering it.
    pub render_delay: Duration,
    /// Sleep inserted while holding the writer lock, before an edit commits.
    pub edit_delay: Duration,
    /// Push progressive preview frames after every epoch change.
    pub previews: bool,
}

impl Default for ServiceOptions {
    fn default() -> Self {
        ServiceOptions {
            bind: SocketAddr::from(([127, 0, 0, 1], 7878)),
            writer_policy: WriterPolicy::Reject,
            render_delay: Duration::ZERO,
            edit_delay: Duration::ZERO,
            previews: true,
        }
    }
}

/// An immutable view of the scene at one epoch.
#[derive(Debug)]
pub struct Snapshot {
    pub bundle: SceneBundle,
    pub index: Option<ProximityIndex>,
    pub session: EditSession,
}

impl Snapshot {
    fn new(bundle: SceneBundle, session: EditSession) -> Result<Self, GenieError> {
        let mut bundle = bundle;
        bundle.set = session.set.clone();
        let index = bundle.build_index()?;
        Ok(Snapshot { bundle, index, session })
    }

    pub fn epoch(&self) -> u64 {
        self.bundle.set.epoch()
    }

    /// AABB of every confidence sphere, or of nothing for an empty scene.
    pub fn bounds(&self) -> Option<[[f64; 3]; 2]> {
        self.index.as_ref().map(|ix| {
            let (lo, hi) = ix.bounds();
            [lo.into(), hi.into()]
        })
    }

    fn radius(&self, i: usize) -> f64 {
        self.index.as_ref().map_or(0.0, |ix| ix.radii()[i])
    }

    fn render(&self, camera: &Camera, samples: usize, seed: u64) -> Result<Vec<u8>, GenieError> {
        let splash = self.bundle.render_splash(None);
        let render = RenderConfig {
            samples_per_ray: samples,
            seed,
            ..self.bundle.config.render.clone()
        };
        let b = &self.bundle;
        render_image(camera, &b.set, self.index.as_ref(), &b.grid, &b.net, &splash, &render)?.encode_png()
    }
}

/// Server-pushed event.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", content = "payload", rename_all = "camelCase")]
pub enum Event {
    #[serde(rename_all = "camelCase")]
    EpochChanged {
        epoch: u64,
        dirty_bounds: Option<[[f64; 3]; 2]>,
    },
    #[serde(rename_all = "camelCase")]
    PreviewFrame {
        epoch: u64,
        /// Rung on the preview ladder, starting at 0.
        quality: u32,
        width: u32,
        height: u32,
        png: String,
    },
}

pub struct AppState {
    options: ServiceOptions,
    current: RwLock<Option<Arc<Snapshot>>>,
    writer: tokio::sync::Mutex<()>,
    /// Held while publishing so events for a superseded epoch are dropped.
    publish: Mutex<()>,
    events: broadcast::Sender<Event>,
    preview_tx: watch::Sender<u64>,
    last_camera: Mutex<Option<Camera>>,
}

impl AppState {
    pub fn new(options: ServiceOptions) -> Arc<Self> {
        let (events, _) = broadcast::channel(256);
        let (preview_tx, _) = watch::channel(0);
        Arc::new(AppState {
            options,
            current: RwLock::new(None),
            writer: tokio::sync::Mutex::new(()),
            publish: Mutex::new(()),
            events,
            preview_tx,
            last_camera: Mutex::new(None),
        })
    }

    pub fn snapshot(&self) -> Option<Arc<Snapshot>> {
        self.current.read().expect("snapshot lock").clone()
    }

    fn require_snapshot(&self) -> Result<Arc<Snapshot>, ApiError> {
        self.snapshot().ok_or(ApiError::NoScene)
    }

    pub fn subscribe(&self) -> broadcast::Receiver<Event> {
        self.events.subscribe()
    }

    async fn write_lock(&self) -> Result<tokio::sync::MutexGuard<'_, ()>, ApiError> {
        match self.options.writer_policy {
            WriterPolicy::Reject => self.writer.try_lock().map_err(|_| ApiError::WriterBusy),
            WriterPolicy::Queue => Ok(self.writer.lock().await),
        }
    }

    /// Swaps in `next` and announces it.
    fn commit(&self, next: Snapshot, dirty: Option<[[f64; 3]; 2]>) -> u64 {
        let epoch = next.epoch();
        let _p = self.publish.lock().expect("publish lock");
        *self.current.write().expect("snapshot lock") = Some(Arc::new(next));
        let _ = self.events.send(Event::EpochChanged { epoch, dirty_bounds: dirty });
        self.preview_tx.send_replace(epoch);
        epoch
    }

    /// Sends `event` only if `epoch` is still current.
    fn publish_preview(&self, epoch: u64, event: Event) -> bool {
        let _p = self.publish.lock().expect("publish lock");
        if self.snapshot().map(|s| s.epoch()) != Some(epoch) {
            return false;
        }
        let _ = self.events.send(event);
        true
    }

    fn preview_camera(&self, snap: &Snapshot) -> Camera {
        if let Some(c) = self.last_camera.lock().expect("camera lock").clone() {
            return c;
        }
        let (center, extent) = match snap.bounds() {
            Some([lo, hi]) => {
                let (lo, hi) = (Vec3::from(lo), Vec3::from(hi));
                ((lo + hi) * 0.5, (hi - lo).norm().max(1e-3))
            }
            None => (Vec3::zeros(), 1.0),
        };
        let s = DEFAULT_PREVIEW_SIZE;
        let focal = s as f64;
        let mut cam = Camera::look_at(center + Vec3::new(0.0, 0.0, 1.5 * extent), center, Vec3::y(), focal, s, s);
        cam.near = 1e-3 * extent;
        cam.far = 4.0 * extent;
        cam
    }
}

/// Renders the preview ladder for each new epoch, abandoning a ladder as
/// soon as a newer epoch appears.
async fn preview_worker(state: Arc<AppState>) {
    let mut rx = state.preview_tx.subscribe();
    while rx.changed().await.is_ok() {
        let Some(snap) = state.snapshot() else { continue };
        let full = state.preview_camera(&snap);
        let mut widths: Vec<u32> = PREVIEW_LADDER.iter().copied().filter(|w| *w < full.width).collect();
        widths.push(full.width);
        for (quality, width) in widths.into_iter().enumerate() {
            if state.snapshot().map(|s| s.epoch()) != Some(snap.epoch()) {
                break;
            }
            let cam = scaled_camera(&full, width);
            let s = snap.clone();
            let samples = quality_samples(Quality::ladder(quality), &s);
            let png = tokio::task::spawn_blocking(move || s.render(&cam, samples, 0).map(|p| (p, cam)))
                .await
                .ok()
                .and_then(|r| r.ok());
            let Some((png, cam)) = png else { break };
            let event = Event::PreviewFrame {
                epoch: snap.epoch(),
                quality: quality as u32,
                width: cam.width,
                height: cam.height,
                png: base64::engine::general_purpose::STANDARD.encode(png),
            };
            if !state.publish_preview(snap.epoch(), event) {
                break;
            }
        }
    }
}

/// `camera` resampled to `width` pixels across, keeping its field of view.
fn scaled_camera(camera: &Camera, width: u32) -> Camera {
    let s = width as f64 / camera.width as f64;
    Camera {
        width,
        height: ((camera.height as f64 * s).round() as u32).max(1),
        focal: camera.focal * s,
        ..camera.clone()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Quality {
    Low,
    Medium,
    #[default]
    Full,
}

impl Quality {
    fn ladder(rung: usize) -> Self {
        match rung {
            0 => Quality::Low,
            1 => Quality::Medium,
            _ => Quality::Full,
        }
    }
}

fn quality_samples(q: Quality, snap: &Snapshot) -> usize {
    let full = snap.bundle.config.render.samples_per_ray.max(1);
    match q {
        Quality::Low => (full / 4).max(8).min(full),
        Quality::Medium => (full / 2).max(8).min(full),
        Quality::Full => full,
    }
}

fn check_version(v: Option<u32>) -> Result<(), ApiError> {
    match v {
        None | Some(API_VERSION) => Ok(()),
        Some(v) => Err(ApiError::BadRequest(format!(
            "unsupported version {v} (this service speaks {API_VERSION})"
        ))),
    }
}

#[derive(Debug, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct LoadRequest {
    pub version: Option<u32>,
    pub checkpoint_path: PathBuf,
    /// Mesh file or frame-sequence directory to bind for deform edits.
    pub mesh_path: Option<PathBuf>,
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
#[serde(rename_all = "camelCase")]
pub struct SceneInfo {
    pub version: u32,
    pub epoch: u64,
    pub gaussian_count: usize,
    pub bounds: Option<[[f64; 3]; 2]>,
}

impl SceneInfo {
    fn of(s: &Snapshot) -> Self {
        SceneInfo {
            version: API_VERSION,
            epoch: s.epoch(),
            gaussian_count: s.bundle.set.len(),
            bounds: s.bounds(),
        }
    }
}

async fn load_scene(State(state): State<Arc<AppState>>, Json(req): Json<LoadRequest>) -> Result<Json<SceneInfo>, ApiError> {
    check_version(req.version)?;
    let _w = state.write_lock().await?;
    for p in std::iter::once(&req.checkpoint_path).chain(req.mesh_path.as_ref()) {
        if !p.exists() {
            return Err(ApiError::NotFound(p.clone()));
        }
    }
    let prev = state.snapshot().map(|s| s.epoch());
    let snap = tokio::task::spawn_blocking(move || -> Result<Snapshot, ApiError> {
        let mut bundle = load_checkpoint(&req.checkpoint_path)?;
        // keep epochs monotone across reloads within one session
        if let Some(prev) = prev {
            if bundle.set.epoch() <= prev {
                let (gs, _) = bundle.set.clone().into_parts();
                bundle.set = genie_core::GaussianSet::with_epoch(gs, prev + 1);
            }
        }
        let mut session = EditSession::new(bundle.set.clone());
        if let Some(m) = &req.mesh_path {
            session.bind(load_mesh_any(m)?)?;
        }
        Ok(Snapshot::new(bundle, session)?)
    })
    .await
    .map_err(|e| ApiError::Internal(e.to_string()))??;
    let info = SceneInfo::of(&snap);
    let bounds = snap.bounds();
    state.commit(snap, bounds);
    Ok(Json(info))
}

async fn scene_info(State(state): State<Arc<AppState>>) -> Result<Json<SceneInfo>, ApiError> {
    let snap = state.require_snapshot()?;
    Ok(Json(SceneInfo::of(&snap)))
}

#[derive(Debug, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct RenderRequest {
    pub version: Option<u32>,
    pub camera: CameraSpec,
    pub width: u32,
    pub height: u32,
    #[serde(default)]
    pub quality: Quality,
    #[serde(default)]
    pub seed: u64,
}

async fn render(State(state): State<Arc<AppState>>, Json(req): Json<RenderRequest>) -> Result<Response, ApiError> {
    check_version(req.version)?;
    let camera = req.camera.to_camera(Some(req.width), Some(req.height))?;
    let snap = state.require_snapshot()?;
    *state.last_camera.lock().expect("camera lock") = Some(camera.clone());
    let epoch = snap.epoch();
    let delay = state.options.render_delay;
    let samples = quality_samples(req.quality, &snap);
    let seed = req.seed;
    let png = tokio::task::spawn_blocking(move || {
        if !delay.is_zero() {
            std::thread::sleep(delay);
        }
        snap.render(&camera, samples, seed)
    })
    .await
    .map_err(|e| ApiError::Internal(e.to_string()))??;
    let mut resp = png.into_response();
    let h = resp.headers_mut();
    h.insert(header::CONTENT_TYPE, HeaderValue::from_static("image/png"));
    h.insert("X-Epoch", HeaderValue::from(epoch));
    h.insert("X-Render-Seed", HeaderValue::from(seed));
    Ok(resp)
}

#[derive(Debug, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct EditRequest {
    pub version: Option<u32>,
    pub op: String,
    #[serde(default)]
    pub selection: Option<Value>,
    #[serde(default)]
    pub params: serde_json::Map<String, Value>,
}

impl EditRequest {
    /// The request as a library edit: `op`, `selection` and `params`
    /// flattened into one tagged object.
    pub fn to_op(&self) -> Result<EditOp, ApiError> {
        if self.op == "bind" {
            return Err(ApiError::Unprocessable("bind a mesh through /scene/load".into()));
        }
        let mut obj = self.params.clone();
        obj.insert("op".into(), Value::String(self.op.clone()));
        if self.op != "deform_frame" {
            let sel = self.selection.clone().unwrap_or(Value::String("all".into()));
            obj.insert("selection".into(), sel);
        }
        serde_json::from_value(Value::Object(obj)).map_err(|e| ApiError::Unprocessable(e.to_string()))
    }
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
#[serde(rename_all = "camelCase")]
pub struct EditResponse {
    pub version: u32,
    pub new_epoch: u64,
    pub dirty_bounds: Option<[[f64; 3]; 2]>,
}

/// Union of the sphere boxes of every Gaussian that differs between the
/// two snapshots, before and after.
fn dirty_bounds(old: &Snapshot, new: &Snapshot) -> Option<[[f64; 3]; 2]> {
    let (a, b) = (old.bundle.set.gaussians(), new.bundle.set.gaussians());
    let mut lo = Vec3::repeat(f64::INFINITY);
    let mut hi = Vec3::repeat(f64::NEG_INFINITY);
    let mut any = false;
    let mut grow = |m: &Vec3, r: f64| {
        lo = lo.inf(&m.add_scalar(-r));
        hi = hi.sup(&m.add_scalar(r));
        any = true;
    };
    for i in 0..a.len().max(b.len()) {
        if a.get(i) == b.get(i) {
            continue;
        }
        if let Some(g) = a.get(i) {
            grow(&g.mean, old.radius(i));
        }
        if let Some(g) = b.get(i) {
            grow(&g.mean, new.radius(i));
        }
    }
    any.then(|| [lo.into(), hi.into()])
}

async fn edit(State(state): State<Arc<AppState>>, Json(req): Json<EditRequest>) -> Result<Json<EditResponse>, ApiError> {
    check_version(req.version)?;
    let op = req.to_op()?;
    let _w = state.write_lock().await?;
    let old = state.require_snapshot()?;
    let delay = state.options.edit_delay;
    let base = old.clone();
    let next = tokio::task::spawn_blocking(move || -> Result<Snapshot, ApiError> {
        if !delay.is_zero() {
            std::thread::sleep(delay);
        }
        let mut session = base.session.clone();
        session.set = base.bundle.set.clone();
        session.apply(&op, std::path::Path::new("."))?;
        Ok(Snapshot::new(base.bundle.clone(), session)?)
    })
    .await
    .map_err(|e| ApiError::Internal(e.to_string()))??;
    let dirty = dirty_bounds(&old, &next);
    let new_epoch = state.commit(next, dirty);
    Ok(Json(EditResponse {
        version: API_VERSION,
        new_epoch,
        dirty_bounds: dirty,
    }))
}

#[derive(Debug, Deserialize)]
pub struct GaussiansQuery {
    pub bounds: String,
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct GaussianInfo {
    pub index: usize,
    pub mean: [f64; 3],
    pub radius: f64,
    pub confidence: f64,
}

/// Parses `x0,y0,z0,x1,y1,z1`.
pub fn parse_bounds(s: &str) -> Result<[[f64; 3]; 2], ApiError> {
    let bad = || ApiError::BadRequest(format!("bounds must be six comma-separated numbers with min <= max, got {s:?}"));
    let v: Vec<f64> = s
        .split(',')
        .map(|t| t.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|_| bad())?;
    if v.len() != 6 || v.iter().any(|x| x.is_nan()) || (0..3).any(|a| v[a] > v[a + 3]) {
        return Err(bad());
    }
    Ok([[v[0], v[1], v[2]], [v[3], v[4], v[5]]])
}

async fn gaussians(
    State(state): State<Arc<AppState>>,
    Query(q): Query<GaussiansQuery>,
) -> Result<Json<Vec<GaussianInfo>>, ApiError> {
    let [lo, hi] = parse_bounds(&q.bounds)?;
    let snap = state.require_snapshot()?;
    let out = snap
        .bundle
        .set
        .gaussians()
        .iter()
        .enumerate()
        .filter_map(|(i, g)| {
            let r = snap.radius(i);
            let hit = (0..3).all(|a| g.mean[a] + r >= lo[a] && g.mean[a] - r <= hi[a]);
            hit.then(|| GaussianInfo {
                index: i,
                mean: g.mean.into(),
                radius: r,
                confidence: g.confidence,
            })
        })
        .collect();
    Ok(Json(out))
}

async fn subscribe(State(state): State<Arc<AppState>>, ws: WebSocketUpgrade) -> Response {
    let rx = state.subscribe();
    ws.on_upgrade(move |socket| forward_events(socket, rx))
}

async fn forward_events(mut socket: WebSocket, mut rx: broadcast::Receiver<Event>) {
    loop {
        tokio::select! {
            ev = rx.recv() => match ev {
                Ok(ev) => {
                    let text = serde_json::to_string(&ev).expect("event serializes");
                    if socket.send(Message::Text(text.into())).await.is_err() {
                        break;
                    }
                }
                Err(broadcast::error::RecvError::Lagged(n)) => {
                    log::warn!("subscriber lagged by {n} events");
                }
                Err(broadcast::error::RecvError::Closed) => break,
            },
            msg = socket.recv() => match msg {
                Some(Ok(Message::Close(_))) | None | Some(Err(_)) => break,
                _ => {}
            },
        }
    }
}

/// Routes plus the preview worker; must be called inside a tokio runtime.
pub fn app(state: Arc<AppState>) -> Router {
    if state.options.previews {
        tokio::spawn(preview_worker(state.clone()));
    }
    Router::new()
        .route("/scene", get(scene_info))
        .route("/scene/load", post(load_scene))
        .route("/render", post(render))
        .route("/edit", post(edit))
        .route("/gaussians", get(gaussians))
        .route("/subscribe", get(subscribe))
        .with_state(state)
}

/// Serves until the process is stopped.
pub async fn serve(options: ServiceOptions, initial: Option<LoadRequest>) -> std::io::Result<()> {
    let state = AppState::new(options.clone());
    let router = app(state.clone());
    if let Some(req) = initial {
        let Json(info) = load_scene(State(state), Json(req))
            .await
            .map_err(|e| std::io::Error::other(e.to_string()))?;
        log::info!("loaded {} gaussians at epoch {}", info.gaussian_count, info.epoch);
    }
    let listener = tokio::net::TcpListener::bind(options.bind).await?;
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router).await
}
