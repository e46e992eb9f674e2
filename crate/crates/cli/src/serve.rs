//! Live session server: a fixed-rate tick thread owns the session; socket
//! handlers only deposit into the inbox and forward state frames.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use anyhow::{Context, Result};
use axum::extract::ws::{Message, WebSocket, WebSocketUpgrade};
use axum::extract::State;
use axum::response::Response;
use axum::routing::get;
use axum::{Json, Router};
use log::{error, info, warn};
use rotnav::teleop::{ClientMessage, ClientTranslator, ServerMessage, Session, SessionInbox, STREAM_RATE_HZ};
use rotnav::ScenarioConfig;
use serde_json::json;
use tokio::sync::watch;

use crate::commands::load_config;

/// Ticks run back to back when the loop falls behind; the rest are dropped.
const MAX_CATCH_UP: u64 = 5;

type Frame = Option<Arc<str>>;

struct App {
    config: ScenarioConfig,
    inbox: Arc<SessionInbox>,
    frames: watch::Receiver<Frame>,
    shutdown: watch::Receiver<bool>,
    controller: AtomicBool,
}

pub fn run(host: &str, port: u16, config: Option<&Path>, record_dir: Option<PathBuf>) -> Result<ExitCode> {
    let cfg = load_config(config)?;
    let session = Session::new(cfg.clone())?;
    if let Some(dir) = &record_dir {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let runtime = tokio::runtime::Runtime::new()?;
    runtime.block_on(async move {
        let listener = tokio::net::TcpListener::bind((host, port))
            .await
            .with_context(|| format!("binding {host}:{port}"))?;
        let addr = listener.local_addr()?;
        println!("listening on {addr}");
        std::io::stdout().flush()?;

        let inbox = Arc::new(SessionInbox::new());
        let (frame_tx, frame_rx) = watch::channel::<Frame>(None);
        let (shutdown_tx, shutdown_rx) = watch::channel(false);
        let stop = Arc::new(AtomicBool::new(false));

        let ticker = {
            let inbox = inbox.clone();
            let stop = stop.clone();
            thread::spawn(move || {
                let result = tick_loop(session, &inbox, &frame_tx, &stop, record_dir.as_deref());
                let _ = shutdown_tx.send(true);
                result
            })
        };
        {
            let stop = stop.clone();
            tokio::spawn(async move {
                if tokio::signal::ctrl_c().await.is_ok() {
                    info!("interrupt received, ending session");
                    stop.store(true, Ordering::SeqCst);
                }
            });
        }

        let app = Arc::new(App {
            config: cfg,
            inbox,
            frames: frame_rx,
            shutdown: shutdown_rx.clone(),
            controller: AtomicBool::new(false),
        });
        let router = Router::new()
            .route("/health", get(health))
            .route("/config", get(config_handler))
            .route("/session", get(session_handler))
            .with_state(app);
        let mut done = shutdown_rx;
        axum::serve(listener, router)
            .with_graceful_shutdown(async move {
                let _ = done.wait_for(|d| *d).await;
            })
            .await?;
        stop.store(true, Ordering::SeqCst);
        ticker.join().map_err(|_| anyhow::anyhow!("tick thread panicked"))??;
        Ok(ExitCode::SUCCESS)
    })
}

fn tick_loop(
    mut session: Session,
    inbox: &SessionInbox,
    frames: &watch::Sender<Frame>,
    stop: &AtomicBool,
    record_dir: Option<&Path>,
) -> Result<()> {
    let dt = session.config().dt;
    let last_tick = session.config().steps();
    let stream_every = ((1.0 / (dt * STREAM_RATE_HZ)).round() as u64).max(1);
    let start = Instant::now();
    let mut handled: u64 = 0;
    let mut failure = None;
    'run: while !stop.load(Ordering::SeqCst) && session.tick_count() <= last_tick {
        let due = (start.elapsed().as_secs_f64() / dt) as u64 + 1;
        if due <= handled {
            let next = start + Duration::from_secs_f64(handled as f64 * dt);
            thread::sleep(next.saturating_duration_since(Instant::now()));
            continue;
        }
        let behind = due - handled;
        if behind > MAX_CATCH_UP {
            warn!("tick loop {} ticks behind, dropping {}", behind, behind - MAX_CATCH_UP);
            session.mark_gap();
        }
        for _ in 0..behind.min(MAX_CATCH_UP) {
            if session.tick_count() > last_tick {
                break;
            }
            match session.tick(inbox) {
                Ok(row) => {
                    if row.tick % stream_every == 0 {
                        let text = serde_json::to_string(&ServerMessage::state(row))?;
                        frames.send_replace(Some(text.into()));
                    }
                }
                Err(e) => {
                    error!("session stopped: {e}");
                    let text = serde_json::to_string(&ServerMessage::error(e.to_string()))?;
                    frames.send_replace(Some(text.into()));
                    failure = Some(e);
                    break 'run;
                }
            }
        }
        handled = due;
    }
    info!("session ended after {} ticks", session.tick_count());
    if let Some(dir) = record_dir {
        if session.tick_count() > 0 {
            let log_path = dir.join("session.csv");
            session.export()?.save(&log_path)?;
            session.trajectory().save(dir.join("trajectory.csv"))?;
            info!("session recorded to {}", log_path.display());
        }
    }
    match failure {
        Some(e) => Err(e.into()),
        None => Ok(()),
    }
}

async fn health(State(app): State<Arc<App>>) -> Json<serde_json::Value> {
    Json(json!({ "status": "ok", "tick_rate": 1.0 / app.config.dt }))
}

async fn config_handler(State(app): State<Arc<App>>) -> Json<ScenarioConfig> {
    Json(app.config.clone())
}

async fn session_handler(ws: WebSocketUpgrade, State(app): State<Arc<App>>) -> Response {
    ws.on_upgrade(move |socket| client(socket, app))
}

async fn send(socket: &mut WebSocket, msg: &ServerMessage) -> bool {
    match serde_json::to_string(msg) {
        Ok(text) => socket.send(Message::Text(text.into())).await.is_ok(),
        Err(_) => false,
    }
}

async fn client(mut socket: WebSocket, app: Arc<App>) {
    if app.controller.swap(true, Ordering::SeqCst) {
        send(&mut socket, &ServerMessage::error("session already has a controlling client")).await;
        let _ = socket.send(Message::Close(None)).await;
        return;
    }
    info!("client connected");
    let mut translator = ClientTranslator::default();
    let mut frames = app.frames.clone();
    let mut shutdown = app.shutdown.clone();
    loop {
        tokio::select! {
            msg = socket.recv() => match msg {
                Some(Ok(Message::Text(text))) => {
                    let applied = ClientMessage::parse(text.as_str()).and_then(|m| translator.apply(&m, &app.inbox));
                    if let Err(e) = applied {
                        if !send(&mut socket, &ServerMessage::error(e.to_string())).await {
                            break;
                        }
                    }
                }
                Some(Ok(Message::Close(_))) | Some(Err(_)) | None => break,
                Some(Ok(_)) => {}
            },
            changed = frames.changed() => {
                if changed.is_err() {
                    break;
                }
                let frame = frames.borrow_and_update().clone();
                if let Some(text) = frame {
                    if socket.send(Message::Text(text.as_ref().into())).await.is_err() {
                        break;
                    }
                }
            }
            _ = async { shutdown.wait_for(|d| *d).await.is_ok() } => {
                let _ = socket.send(Message::Close(None)).await;
                break;
            }
        }
    }
    app.controller.store(false, Ordering::SeqCst);
    info!("client disconnected");
}
