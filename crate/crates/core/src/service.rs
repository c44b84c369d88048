//! Runs a `World` on its own thread. External callers go through the
//! world's ordered input queue; blocking API calls wait on a reply channel.

use crate::api::{ApiError, CommandOutcome, MoveCommand};
use crate::world::{Inbound, Input, Reply, Snapshot, TraceEntry, World};
use serde_json::Value;
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender, TryRecvError};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

const MAX_LAG: Duration = Duration::from_millis(100);

pub enum Control {
    Input(Inbound),
    Pause,
    Resume,
    Stop,
}

#[derive(Clone)]
pub struct SimHandle {
    tx: Sender<Control>,
}

impl SimHandle {
    fn send_control(&self, c: Control) -> Result<(), ApiError> {
        self.tx.send(c).map_err(|_| ApiError::SimulationStopped)
    }

    pub fn send(&self, input: Input) -> Result<(), ApiError> {
        self.send_control(Control::Input(input.into()))
    }

    /// Queues a move and returns the channel its outcome arrives on.
    pub fn submit(&self, command: MoveCommand) -> Result<Receiver<CommandOutcome>, ApiError> {
        let (tx, rx) = mpsc::channel();
        self.send_control(Control::Input(Inbound { input: Input::Api { command }, reply: Some(Reply::Api(tx)) }))?;
        Ok(rx)
    }

    /// Blocks until the move completes, times out, is rejected or preempted.
    pub fn submit_blocking(&self, command: MoveCommand) -> Result<CommandOutcome, ApiError> {
        self.submit(command)?.recv().map_err(|_| ApiError::SimulationStopped)
    }

    /// Queues a config change; the result arrives once a tick applies it.
    pub fn submit_set(&self, path: &str, value: Value) -> Result<Receiver<Result<(), String>>, ApiError> {
        let (tx, rx) = mpsc::channel();
        let input = Input::Set { path: path.to_string(), value };
        self.send_control(Control::Input(Inbound { input, reply: Some(Reply::Set(tx)) }))?;
        Ok(rx)
    }

    /// Blocks until the change is applied or rejected. Blocks for the whole
    /// pause if the simulation is paused.
    pub fn set(&self, path: &str, value: Value) -> Result<Result<(), String>, ApiError> {
        self.submit_set(path, value)?.recv().map_err(|_| ApiError::SimulationStopped)
    }

    pub fn pause(&self) -> Result<(), ApiError> {
        self.send_control(Control::Pause)
    }

    pub fn resume(&self) -> Result<(), ApiError> {
        self.send_control(Control::Resume)
    }

    pub fn stop(&self) -> Result<(), ApiError> {
        self.send_control(Control::Stop)
    }
}

/// What the simulation thread reports while running.
#[derive(Debug, Clone)]
pub enum ServiceEvent {
    Snapshot(Snapshot),
    /// An input as recorded by the world; only sent while trace recording is on.
    Input(TraceEntry),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ServiceOptions {
    /// Simulated seconds per wall second; `None` runs as fast as possible.
    pub speed: Option<f64>,
    /// Physics ticks between snapshots; 0 disables them.
    pub snapshot_every: u64,
    /// Stop after this many ticks of simulated time.
    pub max_ticks: Option<u64>,
}

impl Default for ServiceOptions {
    fn default() -> Self {
        Self { speed: None, snapshot_every: 0, max_ticks: None }
    }
}

pub struct SimulationService {
    handle: SimHandle,
    join: JoinHandle<World>,
}

impl SimulationService {
    pub fn spawn<F>(world: World, opts: ServiceOptions, on_event: F) -> Self
    where
        F: FnMut(ServiceEvent) + Send + 'static,
    {
        let (tx, rx) = mpsc::channel();
        let join = std::thread::Builder::new()
            .name("pod-sim".into())
            .spawn(move || run(world, rx, opts, on_event))
            .expect("spawn simulation thread");
        Self { handle: SimHandle { tx }, join }
    }

    pub fn handle(&self) -> SimHandle {
        self.handle.clone()
    }

    pub fn is_finished(&self) -> bool {
        self.join.is_finished()
    }

    /// Waits for the thread to finish on its own.
    pub fn join(self) -> World {
        let Self { handle, join } = self;
        drop(handle);
        join.join().expect("simulation thread panicked")
    }

    pub fn stop(self) -> World {
        let _ = self.handle.stop();
        self.join()
    }
}

fn run<F: FnMut(ServiceEvent)>(mut world: World, rx: Receiver<Control>, opts: ServiceOptions, mut on_event: F) -> World {
    let mut paused = false;
    let mut base = (Instant::now(), world.time());
    let end = opts.max_ticks.map(|n| world.tick_index() + n);
    let mut dropped_snapshots = 0u64;
    'outer: loop {
        loop {
            let msg = if paused {
                match rx.recv_timeout(Duration::from_millis(50)) {
                    Ok(m) => m,
                    Err(RecvTimeoutError::Timeout) => continue,
                    Err(RecvTimeoutError::Disconnected) => break 'outer,
                }
            } else {
                match rx.try_recv() {
                    Ok(m) => m,
                    Err(TryRecvError::Empty) => break,
                    Err(TryRecvError::Disconnected) if end.is_some() => break,
                    Err(TryRecvError::Disconnected) => break 'outer,
                }
            };
            match msg {
                Control::Input(i) => world.push(i),
                Control::Pause => paused = true,
                Control::Resume => {
                    paused = false;
                    base = (Instant::now(), world.time());
                }
                Control::Stop => break 'outer,
            }
        }
        if end.is_some_and(|e| world.tick_index() >= e) {
            break;
        }
        world.tick();
        for entry in world.take_trace() {
            on_event(ServiceEvent::Input(entry));
        }
        let tick = world.tick_index();
        let pace = opts.speed.filter(|s| *s > 0.0);
        let target = pace.map(|speed| base.0 + Duration::from_secs_f64((world.time() - base.1) / speed));
        if opts.snapshot_every > 0 && tick % opts.snapshot_every == 0 {
            // Behind schedule: skip the snapshot rather than slow physics further.
            let lagging = target.is_some_and(|t| Instant::now() > t + MAX_LAG);
            if lagging {
                dropped_snapshots += 1;
            } else {
                on_event(ServiceEvent::Snapshot(world.snapshot()));
            }
        }
        if let Some(target) = target.filter(|_| tick % 10 == 0) {
            let now = Instant::now();
            if target > now {
                std::thread::sleep(target - now);
            }
        }
    }
    if dropped_snapshots > 0 {
        log::warn!("dropped {dropped_snapshots} snapshots while behind real time");
    }
    world.shutdown();
    drop(rx);
    world
}
