//! HTTP steering surface over a live dataset-update run.
//!
//! [`RunHandle`] is the bridge: the orchestration thread drains its command
//! queue between rounds and publishes round results into it, while the
//! server started by [`serve_control`] reads immutable copies.

use std::collections::{BTreeMap, VecDeque};
use std::convert::Infallible;
use std::net::{SocketAddr, TcpListener};
use std::sync::{Arc, Condvar, Mutex, MutexGuard};
use std::thread::JoinHandle;

use axum::extract::{Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::sse::{Event, KeepAlive, Sse};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use tokio::sync::{broadcast, oneshot};

use crate::dataset_update::{ControlCommand, RunControl, RunEvent, Termination};
use crate::editor::EditorParams;
use crate::error::{Error, Result};
use crate::scene_io::SceneDataset;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunPhase {
    Pending,
    Running,
    Paused,
    Finished,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunStatus {
    pub run_id: String,
    pub phase: RunPhase,
    pub iteration: u64,
    pub round: u64,
    pub loss: Option<f64>,
    pub last_view: Option<usize>,
    pub editor_params: EditorParams,
    pub termination: Option<Termination>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImageSide {
    Original,
    Current,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GuidanceBody {
    #[serde(rename = "s_I", default, skip_serializing_if = "Option::is_none")]
    pub s_i: Option<f64>,
    #[serde(rename = "s_T", default, skip_serializing_if = "Option::is_none")]
    pub s_t: Option<f64>,
}

/// Body of `POST /control`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControlBody {
    #[serde(default)]
    pub stop: bool,
    #[serde(default)]
    pub pause: bool,
    #[serde(default)]
    pub resume: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub set_guidance: Option<GuidanceBody>,
}

impl ControlBody {
    /// Commands in application order: guidance, resume, pause, stop.
    pub fn commands(&self) -> Result<Vec<ControlCommand>> {
        let mut out = Vec::new();
        if let Some(g) = &self.set_guidance {
            for v in [g.s_i, g.s_t].into_iter().flatten() {
                if !(v.is_finite() && v >= 0.0) {
                    return Err(Error::InvalidConfig(format!("guidance scale {v}")));
                }
            }
            if g.s_i.is_none() && g.s_t.is_none() {
                return Err(Error::InvalidConfig(
                    "set_guidance without s_I or s_T".into(),
                ));
            }
            out.push(ControlCommand::SetGuidance {
                guidance_image: g.s_i,
                guidance_text: g.s_t,
            });
        }
        if self.resume {
            out.push(ControlCommand::Resume);
        }
        if self.pause {
            out.push(ControlCommand::Pause);
        }
        if self.stop {
            out.push(ControlCommand::Stop);
        }
        if out.is_empty() {
            return Err(Error::InvalidConfig("empty control body".into()));
        }
        Ok(out)
    }
}

#[derive(Clone, Debug)]
struct StreamItem {
    event: &'static str,
    data: String,
}

struct Published {
    status: RunStatus,
    renders: BTreeMap<u64, Arc<Vec<u8>>>,
    originals: Vec<Arc<Vec<u8>>>,
    current: Vec<Arc<Vec<u8>>>,
}

struct Shared {
    published: Mutex<Published>,
    queue: Mutex<VecDeque<ControlCommand>>,
    wake: Condvar,
    events: broadcast::Sender<StreamItem>,
}

/// Shared state of one run, cheap to clone.
#[derive(Clone)]
pub struct RunHandle {
    shared: Arc<Shared>,
}

fn lock<T>(m: &Mutex<T>) -> MutexGuard<'_, T> {
    m.lock().unwrap_or_else(|e| e.into_inner())
}

impl RunHandle {
    pub fn new(run_id: &str, dataset: &SceneDataset, params: &EditorParams) -> Result<Self> {
        let encode = |img: &crate::image::Image| img.to_png_bytes().map(Arc::new);
        let originals = dataset
            .views()
            .iter()
            .map(|v| encode(v.original()))
            .collect::<Result<Vec<_>>>()?;
        let current = dataset
            .views()
            .iter()
            .map(|v| encode(v.current()))
            .collect::<Result<Vec<_>>>()?;
        let status = RunStatus {
            run_id: run_id.to_string(),
            phase: RunPhase::Pending,
            iteration: 0,
            round: 0,
            loss: None,
            last_view: None,
            editor_params: params.clone(),
            termination: None,
        };
        let (events, _) = broadcast::channel(256);
        Ok(Self {
            shared: Arc::new(Shared {
                published: Mutex::new(Published {
                    status,
                    renders: BTreeMap::new(),
                    originals,
                    current,
                }),
                queue: Mutex::new(VecDeque::new()),
                wake: Condvar::new(),
                events,
            }),
        })
    }

    pub fn status(&self) -> RunStatus {
        lock(&self.shared.published).status.clone()
    }

    /// Queues commands for the next round boundary.
    pub fn submit(&self, commands: Vec<ControlCommand>) -> Result<()> {
        let mut queue = lock(&self.shared.queue);
        if lock(&self.shared.published).status.phase == RunPhase::Finished {
            return Err(Error::ControlConflict("run has finished".into()));
        }
        queue.extend(commands);
        self.shared.wake.notify_all();
        Ok(())
    }

    /// PNG of the snapshot after `round`, or of the latest round.
    pub fn render_png(&self, round: Option<u64>) -> Option<Arc<Vec<u8>>> {
        let p = lock(&self.shared.published);
        match round {
            Some(k) => p.renders.get(&k).cloned(),
            None => p.renders.values().next_back().cloned(),
        }
    }

    pub fn dataset_png(&self, view_id: usize, side: ImageSide) -> Option<Arc<Vec<u8>>> {
        let p = lock(&self.shared.published);
        match side {
            ImageSide::Original => p.originals.get(view_id).cloned(),
            ImageSide::Current => p.current.get(view_id).cloned(),
        }
    }

    fn subscribe(&self) -> broadcast::Receiver<StreamItem> {
        self.shared.events.subscribe()
    }

    fn set_phase(&self, phase: RunPhase) {
        lock(&self.shared.published).status.phase = phase;
    }

    fn broadcast(&self, event: &'static str, data: String) {
        // No subscribers is fine.
        let _ = self.shared.events.send(StreamItem { event, data });
    }
}

impl RunControl for RunHandle {
    fn commands(&mut self, wait: bool) -> Vec<ControlCommand> {
        let mut queue = lock(&self.shared.queue);
        if wait && queue.is_empty() {
            self.set_phase(RunPhase::Paused);
            while queue.is_empty() {
                queue = self
                    .shared
                    .wake
                    .wait(queue)
                    .unwrap_or_else(|e| e.into_inner());
            }
            self.set_phase(RunPhase::Running);
        }
        queue.drain(..).collect()
    }

    fn publish(&mut self, event: RunEvent<'_>) {
        match event {
            RunEvent::Started { params, iteration } => {
                let mut p = lock(&self.shared.published);
                p.status.phase = RunPhase::Running;
                p.status.iteration = iteration;
                p.status.editor_params = params.clone();
            }
            RunEvent::Round {
                record,
                snapshot,
                dataset,
            } => {
                let render = snapshot.to_png_bytes().ok().map(Arc::new);
                let edited: Vec<(usize, Arc<Vec<u8>>)> = record
                    .edited_views
                    .iter()
                    .filter_map(|&v| {
                        let img = dataset.view(v).ok()?.current();
                        Some((v, Arc::new(img.to_png_bytes().ok()?)))
                    })
                    .collect();
                {
                    let mut p = lock(&self.shared.published);
                    if let Some(r) = render {
                        p.renders.insert(record.round, r);
                    }
                    for (v, png) in edited {
                        if let Some(slot) = p.current.get_mut(v) {
                            *slot = png;
                        }
                    }
                    let s = &mut p.status;
                    s.iteration = s.iteration.max(record.iteration);
                    s.round = record.round;
                    s.loss = Some(record.loss);
                    if let Some(&v) = record.edited_views.last() {
                        s.last_view = Some(v);
                    }
                    s.editor_params = record.editor_params.clone();
                }
                self.broadcast("round", serde_json::to_string(record).unwrap_or_default());
            }
            RunEvent::Finished { report } => {
                {
                    let _queue = lock(&self.shared.queue);
                    let mut p = lock(&self.shared.published);
                    p.status.phase = RunPhase::Finished;
                    p.status.termination = Some(report.termination);
                }
                self.broadcast(
                    "finished",
                    serde_json::to_string(report).unwrap_or_default(),
                );
            }
        }
    }
}

/// A running control server; dropped or [`ControlServer::shutdown`] stops it.
pub struct ControlServer {
    addr: SocketAddr,
    stop: Option<oneshot::Sender<()>>,
    thread: Option<JoinHandle<()>>,
}

impl ControlServer {
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn url(&self) -> String {
        format!("http://{}", self.addr)
    }

    pub fn shutdown(mut self) {
        self.stop_now();
    }

    fn stop_now(&mut self) {
        if let Some(tx) = self.stop.take() {
            let _ = tx.send(());
        }
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

impl Drop for ControlServer {
    fn drop(&mut self) {
        self.stop_now();
    }
}

/// Binds `127.0.0.1:port` (0 picks a free port) and serves the control
/// endpoints on a background thread.
pub fn serve_control(handle: RunHandle, port: u16) -> Result<ControlServer> {
    let listener = TcpListener::bind(("127.0.0.1", port)).map_err(|e| match e.kind() {
        std::io::ErrorKind::AddrInUse => Error::PortInUse(port),
        _ => Error::Io(e),
    })?;
    listener.set_nonblocking(true)?;
    let addr = listener.local_addr()?;
    let runtime = tokio::runtime::Builder::new_multi_thread()
        .worker_threads(2)
        .enable_all()
        .build()?;
    let (stop, stopped) = oneshot::channel::<()>();
    let app = router(handle);
    let thread = std::thread::spawn(move || {
        runtime.block_on(async move {
            let Ok(listener) = tokio::net::TcpListener::from_std(listener) else {
                return;
            };
            let _ = axum::serve(listener, app)
                .with_graceful_shutdown(async {
                    let _ = stopped.await;
                })
                .await;
        });
        runtime.shutdown_background();
    });
    Ok(ControlServer {
        addr,
        stop: Some(stop),
        thread: Some(thread),
    })
}

fn router(handle: RunHandle) -> Router {
    Router::new()
        .route("/status", get(status))
        .route("/snapshot/render", get(snapshot_render))
        .route("/snapshot/dataset/{view_id}", get(snapshot_dataset))
        .route("/events", get(events))
        .route("/control", post(control))
        .with_state(handle)
}

fn png(bytes: Arc<Vec<u8>>) -> Response {
    (
        [(header::CONTENT_TYPE, "image/png")],
        bytes.as_ref().clone(),
    )
        .into_response()
}

fn error(status: StatusCode, message: String) -> Response {
    (status, Json(serde_json::json!({ "error": message }))).into_response()
}

async fn status(State(h): State<RunHandle>) -> Json<RunStatus> {
    Json(h.status())
}

#[derive(Deserialize)]
struct RoundQuery {
    round: Option<u64>,
}

async fn snapshot_render(State(h): State<RunHandle>, Query(q): Query<RoundQuery>) -> Response {
    match h.render_png(q.round) {
        Some(b) => png(b),
        None => error(StatusCode::NOT_FOUND, "no snapshot for that round".into()),
    }
}

#[derive(Deserialize)]
struct SideQuery {
    which: Option<ImageSide>,
}

async fn snapshot_dataset(
    State(h): State<RunHandle>,
    Path(view_id): Path<usize>,
    Query(q): Query<SideQuery>,
) -> Response {
    match h.dataset_png(view_id, q.which.unwrap_or(ImageSide::Current)) {
        Some(b) => png(b),
        None => error(StatusCode::NOT_FOUND, format!("unknown view {view_id}")),
    }
}

async fn control(
    State(h): State<RunHandle>,
    body: std::result::Result<Json<ControlBody>, axum::extract::rejection::JsonRejection>,
) -> Response {
    let Ok(Json(body)) = body else {
        return error(StatusCode::BAD_REQUEST, "malformed control body".into());
    };
    let commands = match body.commands() {
        Ok(c) => c,
        Err(e) => return error(StatusCode::BAD_REQUEST, e.to_string()),
    };
    let n = commands.len();
    match h.submit(commands) {
        Ok(()) => (
            StatusCode::ACCEPTED,
            Json(serde_json::json!({ "queued": n })),
        )
            .into_response(),
        Err(e) => error(StatusCode::CONFLICT, e.to_string()),
    }
}

async fn events(
    State(h): State<RunHandle>,
) -> Sse<impl futures::Stream<Item = std::result::Result<Event, Infallible>>> {
    let finished = h.status().phase == RunPhase::Finished;
    let rx = h.subscribe();
    let stream = futures::stream::unfold((rx, finished), |(mut rx, done)| async move {
        if done {
            return None;
        }
        loop {
            match rx.recv().await {
                Ok(item) => {
                    let last = item.event == "finished";
                    let ev = Event::default().event(item.event).data(item.data);
                    return Some((Ok(ev), (rx, last)));
                }
                Err(broadcast::error::RecvError::Lagged(_)) => continue,
                Err(broadcast::error::RecvError::Closed) => return None,
            }
        }
    });
    Sse::new(stream).keep_alive(KeepAlive::default())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn control_body_maps_to_commands() {
        let b: ControlBody = serde_json::from_str(r#"{"set_guidance": {"s_T": 10.0}}"#).unwrap();
        assert_eq!(
            b.commands().unwrap(),
            vec![ControlCommand::SetGuidance {
                guidance_image: None,
                guidance_text: Some(10.0)
            }]
        );
        let b: ControlBody = serde_json::from_str(r#"{"stop": true, "pause": true}"#).unwrap();
        assert_eq!(
            b.commands().unwrap(),
            vec![ControlCommand::Pause, ControlCommand::Stop]
        );
        for bad in [
            r#"{}"#,
            r#"{"set_guidance": {}}"#,
            r#"{"set_guidance": {"s_I": -1}}"#,
        ] {
            let b: ControlBody = serde_json::from_str(bad).unwrap();
            assert!(b.commands().is_err(), "{bad}");
        }
        assert!(serde_json::from_str::<ControlBody>(r#"{"halt": true}"#).is_err());
    }
}
