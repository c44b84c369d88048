//! Real-time serve mode: the simulation thread plus one thread per
//! WebSocket client, connected by channels.

use crate::error::RunnerError;
use crate::protocol::{ClientMessage, ServerMessage};
use crate::run::{read_trace, write_outputs};
use pod_core::api::{ApiError, CommandOutcome};
use pod_core::scenario::ScenarioConfig;
use pod_core::service::{ServiceEvent, ServiceOptions, SimHandle, SimulationService};
use pod_core::world::{RunSummary, World};
use serde_json::Value;
use std::fs::File;
use std::io::{BufWriter, ErrorKind, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::{self, Receiver, SyncSender, TryRecvError, TrySendError};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::Duration;
use tungstenite::{Message, WebSocket};

pub const SNAPSHOT_HZ: u32 = 20;
/// Snapshots buffered per client before new ones are dropped.
const CLIENT_QUEUE: usize = 64;
const POLL: Duration = Duration::from_millis(10);

#[derive(Debug, Clone)]
pub struct ServeOptions {
    pub host: String,
    pub port: u16,
    /// Simulated seconds per wall second; `None` runs unpaced.
    pub speed: Option<f64>,
    /// Stop after this much simulated time; `None` serves until stopped.
    pub duration: Option<f64>,
    pub record: Option<PathBuf>,
    pub replay: Option<PathBuf>,
    /// Telemetry and summary are written here on exit.
    pub out: Option<PathBuf>,
}

impl Default for ServeOptions {
    fn default() -> Self {
        Self { host: "127.0.0.1".into(), port: 8765, speed: Some(1.0), duration: None, record: None, replay: None, out: None }
    }
}

type Clients = Arc<Mutex<Vec<SyncSender<Arc<str>>>>>;

pub struct Server {
    listener: TcpListener,
    cfg: ScenarioConfig,
    opts: ServeOptions,
    stop: Arc<AtomicBool>,
}

/// Stops a running server from another thread.
#[derive(Clone)]
pub struct StopHandle(Arc<AtomicBool>);

impl StopHandle {
    pub fn stop(&self) {
        self.0.store(true, Ordering::SeqCst);
    }
}

impl Server {
    pub fn bind(cfg: ScenarioConfig, opts: ServeOptions) -> Result<Self, RunnerError> {
        cfg.validate()?;
        let addr = format!("{}:{}", opts.host, opts.port);
        let listener = TcpListener::bind(&addr).map_err(|source| RunnerError::Bind { addr: addr.clone(), source })?;
        listener.set_nonblocking(true).map_err(|source| RunnerError::Bind { addr, source })?;
        Ok(Self { listener, cfg, opts, stop: Arc::new(AtomicBool::new(false)) })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.listener.local_addr().expect("bound listener has an address")
    }

    pub fn stop_handle(&self) -> StopHandle {
        StopHandle(self.stop.clone())
    }

    /// Serves until the duration elapses or the stop handle fires.
    pub fn run(self) -> Result<RunSummary, RunnerError> {
        let Self { listener, cfg, opts, stop } = self;
        let mut world = World::new(cfg)?;
        world.set_record_telemetry(opts.out.is_some());
        if let Some(path) = &opts.replay {
            let entries = read_trace(path)?;
            log::info!("replaying {} inputs from {}", entries.len(), path.display());
            world.schedule(entries);
        }
        let mut recorder = match &opts.record {
            Some(path) => {
                world.set_record_trace(true);
                Some(BufWriter::new(File::create(path).map_err(RunnerError::io(path))?))
            }
            None => None,
        };
        let record_error: Arc<Mutex<Option<std::io::Error>>> = Arc::default();

        let physics_hz = world.config().timing.physics_rate_hz;
        let service_opts = ServiceOptions {
            speed: opts.speed,
            snapshot_every: (physics_hz / SNAPSHOT_HZ).max(1) as u64,
            max_ticks: opts.duration.map(|d| (d * physics_hz as f64).round() as u64),
        };
        let clients: Clients = Arc::default();
        let sink = clients.clone();
        let rec_err = record_error.clone();
        let service = SimulationService::spawn(world, service_opts, move |event| match event {
            ServiceEvent::Snapshot(s) => broadcast(&sink, ServerMessage::Snapshot(s).to_json().into()),
            ServiceEvent::Input(entry) => {
                if let Some(w) = recorder.as_mut() {
                    let line = serde_json::to_string(&entry).expect("trace entries serialize");
                    if let Err(e) = writeln!(w, "{line}").and_then(|_| w.flush()) {
                        rec_err.lock().expect("lock").get_or_insert(e);
                    }
                }
            }
        });
        log::info!("serving on ws://{}", listener.local_addr().map(|a| a.to_string()).unwrap_or_default());

        let mut connections: Vec<JoinHandle<()>> = Vec::new();
        while !service.is_finished() && !stop.load(Ordering::SeqCst) {
            match listener.accept() {
                Ok((stream, peer)) => {
                    log::info!("client {peer} connected");
                    let (tx, rx) = mpsc::sync_channel(CLIENT_QUEUE);
                    clients.lock().expect("lock").push(tx);
                    let handle = service.handle();
                    let stop = stop.clone();
                    connections.push(std::thread::spawn(move || {
                        if let Err(e) = serve_client(stream, handle, rx, &stop) {
                            log::info!("client {peer}: {e}");
                        }
                    }));
                }
                Err(e) if e.kind() == ErrorKind::WouldBlock => std::thread::sleep(POLL),
                Err(e) => log::warn!("accept failed: {e}"),
            }
            connections.retain(|c| !c.is_finished());
        }
        let world = service.stop();
        stop.store(true, Ordering::SeqCst);
        for c in connections {
            let _ = c.join();
        }
        if let Some(e) = record_error.lock().expect("lock").take() {
            return Err(RunnerError::Io { path: opts.record.clone().unwrap_or_default(), source: e });
        }
        let summary = world.summary();
        if let Some(dir) = &opts.out {
            write_outputs(dir, world.telemetry(), &summary)?;
        }
        Ok(summary)
    }
}

/// Queues the message for every client; full queues drop it, closed ones
/// are forgotten.
fn broadcast(clients: &Clients, msg: Arc<str>) {
    clients.lock().expect("lock").retain(|tx| match tx.try_send(msg.clone()) {
        Ok(()) | Err(TrySendError::Full(_)) => true,
        Err(TrySendError::Disconnected(_)) => false,
    });
}

enum Pending {
    Api(Option<Value>, Receiver<CommandOutcome>),
    Set(String, Receiver<Result<(), String>>),
}

impl Pending {
    /// The reply once it has arrived.
    fn poll(&self) -> Option<ServerMessage> {
        match self {
            Pending::Api(id, rx) => match rx.try_recv() {
                Ok(outcome) => Some(ServerMessage::ApiResult { id: id.clone(), outcome }),
                Err(TryRecvError::Empty) => None,
                Err(TryRecvError::Disconnected) => Some(stopped()),
            },
            Pending::Set(path, rx) => match rx.try_recv() {
                Ok(Ok(())) => Some(ServerMessage::SetResult { path: path.clone() }),
                Ok(Err(reason)) => Some(ServerMessage::Error { reason }),
                Err(TryRecvError::Empty) => None,
                Err(TryRecvError::Disconnected) => Some(stopped()),
            },
        }
    }
}

fn stopped() -> ServerMessage {
    ServerMessage::Error { reason: ApiError::SimulationStopped.to_string() }
}

fn handle_text(text: &str, sim: &SimHandle, pending: &mut Vec<Pending>) -> Result<Option<ServerMessage>, ApiError> {
    let msg = match ClientMessage::parse(text) {
        Ok(m) => m,
        Err(reason) => return Ok(Some(ServerMessage::Error { reason })),
    };
    match msg {
        ClientMessage::Pause {} => sim.pause()?,
        ClientMessage::Resume {} => sim.resume()?,
        ClientMessage::Api { command, id } => pending.push(Pending::Api(id, sim.submit(command)?)),
        ClientMessage::Set { path, value } => {
            let rx = sim.submit_set(&path, value)?;
            pending.push(Pending::Set(path, rx));
        }
        other => sim.send(other.into_input().expect("world input"))?,
    }
    Ok(None)
}

fn send(ws: &mut WebSocket<TcpStream>, text: &str) -> tungstenite::Result<()> {
    ws.send(Message::text(text))
}

fn serve_client(
    stream: TcpStream,
    sim: SimHandle,
    outbox: Receiver<Arc<str>>,
    stop: &AtomicBool,
) -> tungstenite::Result<()> {
    stream.set_nonblocking(false)?;
    stream.set_nodelay(true)?;
    let mut ws = tungstenite::accept(stream).map_err(|e| match e {
        tungstenite::HandshakeError::Failure(e) => e,
        tungstenite::HandshakeError::Interrupted(_) => tungstenite::Error::ConnectionClosed,
    })?;
    ws.get_mut().set_read_timeout(Some(POLL))?;
    let mut pending: Vec<Pending> = Vec::new();
    loop {
        if stop.load(Ordering::SeqCst) {
            let _ = ws.close(None);
            let _ = ws.flush();
            return Ok(());
        }
        loop {
            match outbox.try_recv() {
                Ok(msg) => send(&mut ws, &msg)?,
                Err(TryRecvError::Empty) => break,
                Err(TryRecvError::Disconnected) => return Ok(()),
            }
        }
        let mut i = 0;
        while i < pending.len() {
            if let Some(reply) = pending[i].poll() {
                pending.remove(i);
                send(&mut ws, &reply.to_json())?;
            } else {
                i += 1;
            }
        }
        match ws.read() {
            Ok(Message::Text(text)) => match handle_text(text.as_str(), &sim, &mut pending) {
                Ok(Some(reply)) => send(&mut ws, &reply.to_json())?,
                Ok(None) => {}
                Err(e) => {
                    send(&mut ws, &ServerMessage::Error { reason: e.to_string() }.to_json())?;
                }
            },
            Ok(Message::Binary(_)) => {
                send(&mut ws, &ServerMessage::Error { reason: "binary frames are not supported".into() }.to_json())?
            }
            Ok(Message::Close(_)) => {
                let _ = ws.flush();
                return Ok(());
            }
            Ok(_) => {}
            Err(tungstenite::Error::Io(e)) if matches!(e.kind(), ErrorKind::WouldBlock | ErrorKind::TimedOut) => {
                ws.flush().or_else(|e| match e {
                    tungstenite::Error::Io(ref io) if io.kind() == ErrorKind::WouldBlock => Ok(()),
                    e => Err(e),
                })?;
            }
            Err(tungstenite::Error::ConnectionClosed | tungstenite::Error::AlreadyClosed) => return Ok(()),
            Err(e) => return Err(e),
        }
    }
}
