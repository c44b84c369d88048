//! Closed-loop simulation on one deterministic physics clock: drone plant,
//! user, sensing, behavior, follow control, movement API, stabilizer and
//! ANC.
//!
//! World frame: X east, Y up, Z north. Ground-plane vectors are
//! (east, north). A drone with yaw ψ looks along (−sin ψ, −cos ψ); a user
//! with heading h faces (sin h, cos h).

use crate::anc::{AncLoop, WindowReport};
use crate::api::{ActiveCommand, CommandOutcome, CommandTracker, DronePose, MoveCommand, MoveTarget};
use crate::behavior::{ActuationMask, Behavior, BehaviorState};
use crate::control::{facing_axis_offset, motion_errors, FollowCommand, FollowController};
use crate::geometry::{estimate_pose, BodyLandmarks3D, PoseEstimate};
use crate::scenario::{ConfigError, GestureKind, PlantConfig, ScenarioConfig, ScriptEvent};
use crate::stabilizer::Stabilizer;
use crate::vision::{visible_projection, EventClassifier, FrameSource, Tracker, UserEvent};
use nalgebra::{Vector2, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use std::collections::VecDeque;
use std::f64::consts::{FRAC_PI_2, PI, TAU};
use std::sync::mpsc::Sender;

pub const TELEMETRY_VERSION: u32 = 1;

const VISION_STREAM: u64 = 1;
const ANC_STREAM: u64 = 2;

/// Wraps to `(-π, π]`; angles already in range are returned unchanged.
pub fn wrap_angle(a: f64) -> f64 {
    if a > -PI && a <= PI {
        return a;
    }
    let w = (a + PI).rem_euclid(TAU) - PI;
    if w <= -PI {
        w + TAU
    } else {
        w
    }
}

fn clamp_norm(v: Vector2<f64>, max: f64) -> Vector2<f64> {
    let n = v.norm();
    if n > max {
        v * (max / n)
    } else {
        v
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DroneState {
    pub position: Vector3<f64>,
    pub velocity: Vector3<f64>,
    pub yaw: f64,
    pub yaw_rate: f64,
}

impl DroneState {
    pub fn forward(&self) -> Vector2<f64> {
        Vector2::new(-self.yaw.sin(), -self.yaw.cos())
    }

    pub fn right(&self) -> Vector2<f64> {
        Vector2::new(-self.yaw.cos(), self.yaw.sin())
    }

    pub fn ground(&self) -> Vector2<f64> {
        Vector2::new(self.position.x, self.position.z)
    }

    pub fn pose(&self) -> DronePose {
        DronePose { ground: self.ground(), altitude: self.position.y, forward: self.forward(), right: self.right() }
    }

    /// World direction to camera coordinates (X right, Y up, Z forward).
    pub fn dir_to_camera(&self, v: &Vector3<f64>) -> Vector3<f64> {
        let (f, r) = (self.forward(), self.right());
        Vector3::new(v.x * r.x + v.z * r.y, v.y, v.x * f.x + v.z * f.y)
    }

    pub fn point_to_camera(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.dir_to_camera(&(p - self.position))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HumanState {
    /// Ground position (east, north).
    pub position: Vector2<f64>,
    /// Compass heading, radians.
    pub heading: f64,
    pub right_wrist_raised: bool,
    pub left_wrist_raised: bool,
}

impl HumanState {
    pub fn facing(&self) -> Vector2<f64> {
        Vector2::new(self.heading.sin(), self.heading.cos())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct LiveMove {
    velocity: Vector2<f64>,
    heading_rate: f64,
    until_tick: u64,
}

#[derive(Debug, Clone)]
struct Human {
    state: HumanState,
    waypoints: VecDeque<(Vector2<f64>, f64)>,
    live: Option<LiveMove>,
    /// Tick (exclusive) until which each wrist stays raised: right, left.
    raised_until: [Option<u64>; 2],
}

impl Human {
    fn step(&mut self, tick: u64, dt: f64) {
        let up = |u: Option<u64>| u.is_some_and(|u| tick < u);
        self.state.right_wrist_raised = up(self.raised_until[0]);
        self.state.left_wrist_raised = up(self.raised_until[1]);

        if let Some(live) = self.live.filter(|l| tick < l.until_tick) {
            self.state.position += live.velocity * dt;
            self.state.heading = wrap_angle(self.state.heading + live.heading_rate * dt);
            return;
        }
        self.live = None;
        if let Some((target, speed)) = self.waypoints.front().copied() {
            let to = target - self.state.position;
            let dist = to.norm();
            let step = speed * dt;
            if dist <= step {
                self.state.position = target;
                self.waypoints.pop_front();
            } else {
                self.state.position += to * (step / dist);
            }
        }
    }
}

/// First-order velocity and yaw-rate tracking plus a disturbance
/// acceleration, integrated semi-implicitly. Altitude never goes below the
/// ground.
pub fn plant_step(
    state: &DroneState,
    v_cmd: Vector3<f64>,
    yaw_rate_cmd: f64,
    disturbance: Vector3<f64>,
    dt: f64,
    p: &PlantConfig,
) -> DroneState {
    let mut d = *state;
    let accel = (v_cmd - d.velocity) / p.velocity_tau_s + disturbance;
    d.velocity += accel * dt;
    d.position += d.velocity * dt;
    d.yaw_rate += (yaw_rate_cmd - d.yaw_rate) / p.velocity_tau_s * dt;
    d.yaw = wrap_angle(d.yaw + d.yaw_rate * dt);
    if d.position.y < 0.0 {
        d.position.y = 0.0;
        d.velocity.y = d.velocity.y.max(0.0);
    }
    d
}

/// Ornstein–Uhlenbeck acceleration on one axis, exactly discretized.
#[derive(Debug, Clone)]
struct OuAxis {
    value: f64,
    decay: f64,
    scale: f64,
    rng: ChaCha8Rng,
}

impl OuAxis {
    fn new(sigma: f64, tau: f64, dt: f64, seed: u64) -> Self {
        let decay = (-dt / tau).exp();
        Self { value: 0.0, decay, scale: sigma * (1.0 - decay * decay).sqrt(), rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    fn sample(&mut self) -> f64 {
        let n: f64 = StandardNormal.sample(&mut self.rng);
        self.value = self.value * self.decay + self.scale * n;
        self.value
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GesturePhase {
    Press,
    Release,
}

/// Operator input, applied at the start of the tick that drains it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Input {
    /// Live user velocity (east, north, m/s) and heading rate (rad/s),
    /// valid for the deadman time after receipt.
    UserMove { vx: f64, vy: f64, vheading: f64 },
    Gesture {
        kind: GestureKind,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        phase: Option<GesturePhase>,
    },
    Set { path: String, value: Value },
    Api {
        #[serde(rename = "move")]
        command: MoveCommand,
    },
}

pub enum Reply {
    Api(Sender<CommandOutcome>),
    Set(Sender<Result<(), String>>),
}

pub struct Inbound {
    pub input: Input,
    pub reply: Option<Reply>,
}

impl From<Input> for Inbound {
    fn from(input: Input) -> Self {
        Self { input, reply: None }
    }
}

/// A recorded input and the tick that applied it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub tick: u64,
    pub input: Input,
}

/// One row per vision frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TelemetryRow {
    pub tick: u64,
    pub t: f64,
    pub drone_east: f64,
    pub drone_up: f64,
    pub drone_north: f64,
    pub drone_yaw_deg: f64,
    pub human_east: f64,
    pub human_north: f64,
    pub human_heading_deg: f64,
    pub true_tau_deg: f64,
    pub true_distance_m: f64,
    pub true_lateral_m: f64,
    pub in_frame: bool,
    pub frame_source: FrameSource,
    pub lost: bool,
    pub est_tau_deg: Option<f64>,
    pub est_distance_m: Option<f64>,
    pub est_facing_offset_m: Option<f64>,
    pub event: Option<UserEvent>,
    pub state: String,
    pub mask_yaw: bool,
    pub mask_distance: bool,
    pub mask_lateral: bool,
    pub cmd_forward: f64,
    pub cmd_lateral: f64,
    pub cmd_yaw_rate: f64,
    pub stab_offset_x_px: f64,
    pub stab_offset_y_px: f64,
    pub anc_noise_dba: Option<f64>,
    pub anc_residual_dba: Option<f64>,
    pub api_active: bool,
    pub fault: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CommandRecord {
    pub id: Option<u64>,
    pub command: MoveCommand,
    pub submitted_t: f64,
    pub finished_t: f64,
    pub outcome: CommandOutcome,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SnapshotDrone {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub yaw: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SnapshotHuman {
    pub x: f64,
    pub y: f64,
    pub heading: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SnapshotMetrics {
    pub distance_error_m: f64,
    pub in_frame: bool,
    pub lost: bool,
    pub event: Option<UserEvent>,
    pub stab_offset_px: [f64; 2],
    pub anc_residual_dba: Option<f64>,
    pub api_active: bool,
}

/// State pushed to live viewers. Angles in radians; the drone is in world
/// coordinates (x east, y up, z north), the user on the ground plane
/// (x east, y north).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub t: f64,
    pub drone: SnapshotDrone,
    pub human: SnapshotHuman,
    pub state: String,
    pub tau_est: Option<f64>,
    #[serde(rename = "D_est")]
    pub d_est: Option<f64>,
    pub metrics: SnapshotMetrics,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct StateFractions {
    pub home: f64,
    pub idle: f64,
    #[serde(rename = "await")]
    pub await_: f64,
    pub lost: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct FollowSummary {
    /// Frames counted: Home, user tracked, after first acquisition.
    pub frames: u64,
    pub mean_abs_distance_error_m: f64,
    pub rms_distance_error_m: f64,
    pub in_frame_fraction: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct StabilizerSummary {
    /// Vertical apparent motion with and without stabilization, px RMS.
    pub residual_px: f64,
    pub unstabilized_px: f64,
    pub ratio: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct AncSummary {
    pub windows: u64,
    pub mean_noise_dba: f64,
    pub mean_residual_dba: f64,
    pub reduction_db: f64,
    pub first_converged_window: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub telemetry_version: u32,
    pub scenario: String,
    pub seed: u64,
    pub sim_time_s: f64,
    pub ticks: u64,
    pub vision_frames: u64,
    pub detector_runs: u64,
    pub follow: FollowSummary,
    pub states: StateFractions,
    pub stabilizer: Option<StabilizerSummary>,
    pub anc: Option<AncSummary>,
    pub commands: Vec<CommandRecord>,
    pub faults: Vec<String>,
}

#[derive(Debug, Clone, Default)]
struct Moments {
    n: f64,
    sum: f64,
    sum_sq: f64,
}

impl Moments {
    fn push(&mut self, x: f64) {
        self.n += 1.0;
        self.sum += x;
        self.sum_sq += x * x;
    }

    fn rms_about_mean(&self) -> f64 {
        if self.n == 0.0 {
            return 0.0;
        }
        let mean = self.sum / self.n;
        (self.sum_sq / self.n - mean * mean).max(0.0).sqrt()
    }
}

/// How many times each periodic task has run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct RateCounters {
    pub physics: u64,
    pub vision: u64,
    pub detector: u64,
    pub controller: u64,
    pub firmware: u64,
    pub stabilizer: u64,
    pub anc_windows: u64,
}

#[derive(Debug, Clone, Default)]
struct Stats {
    frames: u64,
    in_frame: u64,
    home: u64,
    idle: u64,
    await_: u64,
    lost: u64,
    acquired: bool,
    follow_frames: u64,
    abs_err: f64,
    sq_err: f64,
    stab_display: Moments,
    stab_apparent: Moments,
    anc_windows: u64,
    anc_noise_power: f64,
    anc_residual_power: f64,
    anc_first_converged: Option<u64>,
}

struct InFlight {
    id: u64,
    command: MoveCommand,
    submitted_t: f64,
    reply: Option<Sender<CommandOutcome>>,
}

pub struct World {
    cfg: ScenarioConfig,
    dt: f64,
    tick: u64,
    div_vision: u64,
    div_control: u64,
    div_firmware: u64,
    drone: DroneState,
    human: Human,
    disturbance: [OuAxis; 3],
    vision_rng: ChaCha8Rng,
    anc_rng: ChaCha8Rng,
    tracker: Tracker,
    classifier: EventClassifier,
    behavior: Behavior,
    follow: FollowController,
    estimate: Option<PoseEstimate>,
    frame_source: FrameSource,
    frame_lost: bool,
    event: Option<UserEvent>,
    follow_cmd: FollowCommand,
    horizontal_follow: bool,
    yaw_follow: bool,
    altitude_ref: f64,
    anchor: Option<Vector2<f64>>,
    hold_cmd: Vector3<f64>,
    api: CommandTracker,
    in_flight: Option<InFlight>,
    stabilizer: Stabilizer,
    anc: AncLoop,
    anc_last: Option<WindowReport>,
    script: Vec<(u64, ScriptEvent)>,
    script_pos: usize,
    inbox: VecDeque<Inbound>,
    scheduled: VecDeque<TraceEntry>,
    trace: Option<Vec<TraceEntry>>,
    telemetry: Option<Vec<TelemetryRow>>,
    commands: Vec<CommandRecord>,
    faults: Vec<String>,
    pending_fault: Option<String>,
    stats: Stats,
    counters: RateCounters,
}

impl World {
    pub fn new(cfg: ScenarioConfig) -> Result<Self, ConfigError> {
        cfg.validate()?;
        let timing = cfg.timing;
        let dt = timing.physics_dt();
        let d = &cfg.disturbance;
        let disturbance = std::array::from_fn(|i| {
            OuAxis::new(d.sigma_m_s2[i], d.correlation_time_s[i], dt, cfg.seed.wrapping_add(d.seed_offset[i]))
        });
        let stream = |s: u64| {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(s);
            rng
        };
        let start = &cfg.drone;
        let drone = DroneState {
            position: Vector3::from(start.position),
            velocity: Vector3::zeros(),
            yaw: wrap_angle(start.yaw_deg.to_radians()),
            yaw_rate: 0.0,
        };
        let human = Human {
            state: HumanState {
                position: Vector2::from(cfg.human.position),
                heading: wrap_angle(cfg.human.heading_deg.to_radians()),
                right_wrist_raised: false,
                left_wrist_raised: false,
            },
            waypoints: VecDeque::new(),
            live: None,
            raised_until: [None, None],
        };
        let mut script: Vec<(u64, ScriptEvent)> =
            cfg.script.iter().map(|e| (Self::tick_at(e.t, dt), e.event.clone())).collect();
        script.sort_by_key(|(t, _)| *t);
        let mut anc = AncLoop::new(cfg.anc.settings, cfg.anc.spectrum.clone());
        anc.enabled = cfg.features.anc;

        Ok(Self {
            dt,
            tick: 0,
            div_vision: timing.divisor(timing.vision_rate_hz),
            div_control: timing.divisor(timing.controller_rate_hz),
            div_firmware: timing.divisor(timing.firmware_task_rate_hz),
            drone,
            human,
            disturbance,
            vision_rng: stream(VISION_STREAM),
            anc_rng: stream(ANC_STREAM),
            tracker: Tracker::new(cfg.vision, timing.detector_period),
            classifier: EventClassifier::new(cfg.vision.thresholds),
            behavior: Behavior::new(cfg.behavior),
            follow: FollowController::new(cfg.gains, cfg.setpoint),
            estimate: None,
            frame_source: FrameSource::Unavailable,
            frame_lost: true,
            event: None,
            follow_cmd: FollowCommand::default(),
            horizontal_follow: false,
            yaw_follow: false,
            altitude_ref: drone.position.y,
            anchor: None,
            hold_cmd: Vector3::zeros(),
            api: CommandTracker::new(cfg.api_defaults, timing.firmware_task_rate_hz),
            in_flight: None,
            stabilizer: Stabilizer::new(cfg.stabilizer, dt),
            anc,
            anc_last: None,
            script,
            script_pos: 0,
            inbox: VecDeque::new(),
            scheduled: VecDeque::new(),
            trace: None,
            telemetry: Some(Vec::new()),
            commands: Vec::new(),
            faults: Vec::new(),
            pending_fault: None,
            stats: Stats::default(),
            counters: RateCounters::default(),
            cfg,
        })
    }

    fn tick_at(t: f64, dt: f64) -> u64 {
        (t / dt - 1e-6).ceil().max(0.0) as u64
    }

    pub fn config(&self) -> &ScenarioConfig {
        &self.cfg
    }

    pub fn tick_index(&self) -> u64 {
        self.tick
    }

    /// Simulated time at the start of the next tick.
    pub fn time(&self) -> f64 {
        self.tick as f64 * self.dt
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn drone(&self) -> &DroneState {
        &self.drone
    }

    pub fn human(&self) -> &HumanState {
        &self.human.state
    }

    pub fn behavior_state(&self) -> BehaviorState {
        self.behavior.state()
    }

    pub fn mask(&self) -> ActuationMask {
        self.behavior.mask()
    }

    pub fn estimate(&self) -> Option<&PoseEstimate> {
        self.estimate.as_ref()
    }

    pub fn last_event(&self) -> Option<UserEvent> {
        self.event
    }

    pub fn tracker(&self) -> &Tracker {
        &self.tracker
    }

    pub fn stabilizer(&self) -> &Stabilizer {
        &self.stabilizer
    }

    pub fn anc_reports_processed(&self) -> u64 {
        self.anc.windows_processed()
    }

    pub fn last_anc_report(&self) -> Option<&WindowReport> {
        self.anc_last.as_ref()
    }

    pub fn counters(&self) -> RateCounters {
        RateCounters { detector: self.tracker.detector_runs(), ..self.counters }
    }

    pub fn api_in_flight(&self) -> bool {
        self.api.in_flight()
    }

    pub fn commands(&self) -> &[CommandRecord] {
        &self.commands
    }

    pub fn faults(&self) -> &[String] {
        &self.faults
    }

    /// Keeps every telemetry row in memory (on by default).
    pub fn set_record_telemetry(&mut self, on: bool) {
        self.telemetry = if on { Some(self.telemetry.take().unwrap_or_default()) } else { None };
    }

    pub fn telemetry(&self) -> &[TelemetryRow] {
        self.telemetry.as_deref().unwrap_or(&[])
    }

    pub fn take_telemetry(&mut self) -> Vec<TelemetryRow> {
        self.telemetry.as_mut().map(std::mem::take).unwrap_or_default()
    }

    pub fn set_record_trace(&mut self, on: bool) {
        self.trace = if on { Some(self.trace.take().unwrap_or_default()) } else { None };
    }

    pub fn trace(&self) -> &[TraceEntry] {
        self.trace.as_deref().unwrap_or(&[])
    }

    /// Removes and returns the inputs recorded so far.
    pub fn take_trace(&mut self) -> Vec<TraceEntry> {
        self.trace.as_mut().map(std::mem::take).unwrap_or_default()
    }

    /// Inputs injected at their recorded ticks, ahead of live inputs.
    pub fn schedule(&mut self, entries: impl IntoIterator<Item = TraceEntry>) {
        self.scheduled.extend(entries);
        self.scheduled.make_contiguous().sort_by_key(|e| e.tick);
    }

    pub fn push(&mut self, inbound: impl Into<Inbound>) {
        self.inbox.push_back(inbound.into());
    }

    /// Camera-frame landmarks of the user as seen from the drone now.
    pub fn true_landmarks(&self) -> BodyLandmarks3D {
        let h = &self.human.state;
        let eye_world = Vector3::new(h.position.x, self.cfg.human.eye_height_m, h.position.y);
        let (s, c) = h.heading.sin_cos();
        let along = self.drone.dir_to_camera(&Vector3::new(-c, 0.0, s));
        let facing = self.drone.dir_to_camera(&Vector3::new(s, 0.0, c));
        let up = Vector3::new(0.0, 1.0, 0.0);
        BodyLandmarks3D::from_frame(
            &self.cfg.user_model,
            &self.cfg.human.body,
            &self.drone.point_to_camera(&eye_world),
            &along,
            &facing,
            &up,
            h.right_wrist_raised,
            h.left_wrist_raised,
        )
    }

    /// True orientation τ of the shoulder line in the camera, radians.
    pub fn true_tau(&self) -> f64 {
        let (s, c) = self.human.state.heading.sin_cos();
        let along = self.drone.dir_to_camera(&Vector3::new(-c, 0.0, s));
        along.x.atan2(along.z)
    }

    fn fault(&mut self, msg: String) {
        log::warn!("t={:.3}: {msg}", self.time());
        if self.faults.len() < 1000 {
            self.faults.push(format!("t={:.3}: {msg}", self.time()));
        }
        self.pending_fault = Some(msg);
    }

    pub fn run_for(&mut self, seconds: f64) {
        let n = (seconds / self.dt).round() as u64;
        for _ in 0..n {
            self.tick();
        }
    }

    /// Runs until the scenario duration has elapsed.
    pub fn run_to_end(&mut self) {
        let end = (self.cfg.duration / self.dt).round() as u64;
        while self.tick < end {
            self.tick();
        }
    }

    pub fn tick(&mut self) {
        let t = self.time();
        let tick = self.tick;

        while self.scheduled.front().is_some_and(|e| e.tick <= tick) {
            let e = self.scheduled.pop_front().expect("front exists");
            self.apply_input(Inbound::from(e.input));
        }
        while let Some(inbound) = self.inbox.pop_front() {
            if let Some(trace) = self.trace.as_mut() {
                trace.push(TraceEntry { tick, input: inbound.input.clone() });
            }
            self.apply_input(inbound);
        }
        while self.script_pos < self.script.len() && self.script[self.script_pos].0 <= tick {
            let event = self.script[self.script_pos].1.clone();
            self.script_pos += 1;
            self.apply_script(event);
        }

        self.human.step(tick, self.dt);

        let vision_tick = tick % self.div_vision == 0;
        if vision_tick {
            self.counters.vision += 1;
            self.vision_frame(t);
        }
        if tick % self.div_control == 0 {
            self.counters.controller += 1;
            self.control_step();
        }
        if tick % self.div_firmware == 0 {
            self.counters.firmware += 1;
            self.firmware_step(t);
        }
        self.counters.physics += 1;

        let v_before = self.drone.velocity;
        self.plant_step();
        self.stabilizer_step(v_before);
        self.tick += 1;
        self.anc_step();

        if vision_tick {
            self.record_frame(t);
        }
    }

    fn apply_script(&mut self, event: ScriptEvent) {
        match event {
            ScriptEvent::Waypoint { x, y, speed } => {
                let speed = speed.unwrap_or(self.cfg.human.speed_m_s);
                self.human.waypoints.push_back((Vector2::new(x, y), speed));
            }
            ScriptEvent::Heading { heading_deg } => self.human.state.heading = wrap_angle(heading_deg.to_radians()),
            ScriptEvent::Gesture { kind, duration_s } => {
                let d = duration_s.unwrap_or(self.cfg.human.gesture_pulse_s);
                let until = self.tick + (d / self.dt).round() as u64;
                self.raise(kind, Some(until));
            }
            ScriptEvent::Set { path, value } => {
                if let Err(e) = self.set(&path, value) {
                    self.fault(e.to_string());
                }
            }
            ScriptEvent::Api { command } => self.submit(command, None),
        }
    }

    fn raise(&mut self, kind: GestureKind, until: Option<u64>) {
        let i = match kind {
            GestureKind::Summon => 0,
            GestureKind::Relieve => 1,
        };
        self.human.raised_until[i] = until;
    }

    fn apply_input(&mut self, inbound: Inbound) {
        match inbound.input {
            Input::UserMove { vx, vy, vheading } => {
                let hold = (self.cfg.human.deadman_s / self.dt).round() as u64;
                self.human.live = Some(LiveMove {
                    velocity: Vector2::new(vx, vy),
                    heading_rate: vheading,
                    until_tick: self.tick + hold,
                });
            }
            Input::Gesture { kind, phase } => {
                let until = match phase {
                    None => Some(self.tick + (self.cfg.human.gesture_pulse_s / self.dt).round() as u64),
                    Some(GesturePhase::Press) => Some(u64::MAX),
                    Some(GesturePhase::Release) => None,
                };
                self.raise(kind, until);
            }
            Input::Set { path, value } => {
                let res = self.set(&path, value).map_err(|e| e.to_string());
                if let Err(e) = &res {
                    self.fault(e.clone());
                }
                if let Some(Reply::Set(tx)) = inbound.reply {
                    let _ = tx.send(res);
                }
            }
            Input::Api { command } => {
                let reply = match inbound.reply {
                    Some(Reply::Api(tx)) => Some(tx),
                    _ => None,
                };
                self.submit(command, reply);
            }
        }
    }

    /// Applies a dotted-path config change to the running world. Timing,
    /// camera, seed and start-state sections are fixed once running.
    pub fn set(&mut self, path: &str, value: Value) -> Result<(), ConfigError> {
        const LIVE: [&str; 13] = [
            "behavior.",
            "setpoint.",
            "gains.",
            "vision.",
            "stabilizer.",
            "features.",
            "api_defaults.",
            "plant.",
            "human.speed_m_s",
            "human.deadman_s",
            "human.gesture_pulse_s",
            "human.body.",
            "anc.spectrum.",
        ];
        if !LIVE.iter().any(|p| path.starts_with(p)) {
            return Err(ConfigError::InvalidValue { path: path.into(), message: "not settable while running".into() });
        }
        let next = self.cfg.with_path(path, value)?;
        self.behavior.set_config(next.behavior);
        self.follow.setpoint = next.setpoint;
        self.follow.gains = next.gains;
        self.tracker.set_config(next.vision);
        self.classifier.set_thresholds(next.vision.thresholds);
        if next.stabilizer != self.cfg.stabilizer {
            self.stabilizer.set_config(next.stabilizer, self.dt);
        }
        self.api.set_defaults(next.api_defaults);
        self.anc.spectrum = next.anc.spectrum.clone();
        self.anc.enabled = next.features.anc;
        self.cfg = next;
        Ok(())
    }

    fn submit(&mut self, command: MoveCommand, reply: Option<Sender<CommandOutcome>>) {
        let t = self.time();
        match self.api.submit(&command, &self.drone.pose(), t) {
            Ok(active) => {
                match active.target {
                    MoveTarget::Altitude(h) => self.altitude_ref = h,
                    MoveTarget::Horizontal(p) => self.anchor = Some(p),
                }
                self.horizontal_follow = false;
                self.yaw_follow = false;
                self.in_flight = Some(InFlight { id: active.id, command, submitted_t: t, reply });
            }
            Err(reason) => {
                let outcome = CommandOutcome::Rejected(reason);
                self.commands.push(CommandRecord { id: None, command, submitted_t: t, finished_t: t, outcome: outcome.clone() });
                if let Some(tx) = reply {
                    let _ = tx.send(outcome);
                }
            }
        }
    }
}

impl World {
    fn vision_frame(&mut self, t: f64) {
        let truth = self.true_landmarks();
        let cam = self.cfg.camera;
        let mut frame = self.tracker.step(Some(&truth), &cam, &mut self.vision_rng);
        let est = if frame.lost {
            None
        } else {
            frame.landmarks.and_then(|lm| estimate_pose(&lm, &self.cfg.user_model, &cam).ok())
        };
        if est.is_none() {
            frame.lost = true;
        }
        self.estimate = est;
        self.frame_source = frame.source;
        self.frame_lost = frame.lost;
        let errors = est.map(|e| motion_errors(&e, &self.follow.setpoint));
        self.event = self.classifier.classify(&frame, errors).ok();
        if let Some(event) = self.event {
            let tau = est.map_or(FRAC_PI_2, |e| e.tau);
            if let Err(e) = self.behavior.step(event, tau, t) {
                self.fault(e.to_string());
            }
        }
    }

    fn control_step(&mut self) {
        let mask = if self.cfg.features.follow && !self.api.in_flight() {
            self.behavior.mask()
        } else {
            ActuationMask::ALL_OFF
        };
        let dt = self.div_control as f64 * self.dt;
        self.follow_cmd = match self.follow.step(self.estimate.as_ref(), mask, dt) {
            Ok(cmd) => cmd,
            Err(e) => {
                self.fault(e.to_string());
                FollowCommand::default()
            }
        };
        self.horizontal_follow = mask.distance || mask.lateral;
        self.yaw_follow = mask.yaw;
    }

    fn firmware_step(&mut self, t: f64) {
        let pose = self.drone.pose();
        if let Some((done, outcome)) = self.api.progress(&pose, t) {
            self.finish_command(done, outcome, t);
        }
        let p = self.cfg.plant;
        let vz = (p.altitude_gain * (self.altitude_ref - pose.altitude)).clamp(-p.max_climb_m_s, p.max_climb_m_s);
        let hv = if self.horizontal_follow && !self.api.in_flight() {
            self.anchor = None;
            Vector2::zeros()
        } else {
            let anchor = *self.anchor.get_or_insert(pose.ground);
            clamp_norm((anchor - pose.ground) * p.hold_gain, p.max_speed_m_s)
        };
        self.hold_cmd = Vector3::new(hv.x, vz, hv.y);
    }

    fn finish_command(&mut self, done: ActiveCommand, outcome: CommandOutcome, t: f64) {
        let Some(flight) = self.in_flight.take().filter(|f| f.id == done.id) else {
            return;
        };
        self.commands.push(CommandRecord {
            id: Some(done.id),
            command: flight.command,
            submitted_t: flight.submitted_t,
            finished_t: t,
            outcome: outcome.clone(),
        });
        if let Some(tx) = flight.reply {
            let _ = tx.send(outcome);
        }
    }

    /// Preempts the in-flight command, waking its caller, and drops queued
    /// inputs so their callers see the simulation as stopped.
    pub fn shutdown(&mut self) {
        self.inbox.clear();
        let t = self.time();
        if let Some((done, outcome)) = self.api.preempt() {
            self.finish_command(done, outcome, t);
        }
    }

    fn plant_step(&mut self) {
        let p = self.cfg.plant;
        let h = if self.horizontal_follow && !self.api.in_flight() {
            self.drone.forward() * self.follow_cmd.forward + self.drone.right() * self.follow_cmd.lateral
        } else {
            Vector2::new(self.hold_cmd.x, self.hold_cmd.z)
        };
        let v_cmd = Vector3::new(h.x, self.hold_cmd.y, h.y);
        let yaw_cmd = if self.yaw_follow { self.follow_cmd.yaw_rate } else { 0.0 };
        let dist = Vector3::new(self.disturbance[0].sample(), self.disturbance[1].sample(), self.disturbance[2].sample());

        self.drone = plant_step(&self.drone, v_cmd, yaw_cmd, dist, self.dt, &p);
    }

    fn stabilizer_step(&mut self, v_before: Vector3<f64>) {
        if !self.cfg.features.stabilizer {
            return;
        }
        let a = (self.drone.velocity - v_before) / self.dt;
        let r = self.drone.right();
        let display_accel = Vector2::new(a.x * r.x + a.z * r.y, a.y);
        match self.stabilizer.step(display_accel, self.dt) {
            Ok(s) => {
                self.counters.stabilizer += 1;
                let display = self.drone.position.y * self.cfg.stabilizer.px_per_m;
                self.stats.stab_display.push(display);
                self.stats.stab_apparent.push(display + s.offset.y);
            }
            Err(e) => self.fault(e.to_string()),
        }
    }

    fn anc_step(&mut self) {
        if !self.cfg.features.anc {
            return;
        }
        let now = self.time();
        let window = self.anc.cfg.window_seconds();
        while self.anc.next_window_start() + window <= now + 1e-12 {
            match self.anc.step(&mut self.anc_rng) {
                Ok(report) => {
                    self.counters.anc_windows += 1;
                    let s = &mut self.stats;
                    s.anc_windows += 1;
                    s.anc_noise_power += 10f64.powf(report.noise_dba / 10.0);
                    s.anc_residual_power += 10f64.powf(report.residual_dba / 10.0);
                    if report.converged && s.anc_first_converged.is_none() {
                        s.anc_first_converged = Some(report.index);
                    }
                    self.anc_last = Some(report);
                }
                Err(e) => {
                    self.fault(e.to_string());
                    break;
                }
            }
        }
    }

    fn record_frame(&mut self, t: f64) {
        let truth = self.true_landmarks();
        let eye = truth.eye_mid();
        let in_frame = visible_projection(&truth, &self.cfg.camera).is_some();
        let state = self.behavior.state();
        let lost = self.frame_lost;
        let d_err = eye.z - self.follow.setpoint.distance;

        let s = &mut self.stats;
        s.frames += 1;
        s.in_frame += in_frame as u64;
        match state {
            BehaviorState::Home => s.home += 1,
            BehaviorState::Idle { .. } => s.idle += 1,
            BehaviorState::Await => s.await_ += 1,
        }
        s.lost += lost as u64;
        let following = state == BehaviorState::Home && !lost;
        if following && d_err.abs() < 0.05 {
            s.acquired = true;
        }
        if following && s.acquired {
            s.follow_frames += 1;
            s.abs_err += d_err.abs();
            s.sq_err += d_err * d_err;
        }

        let fault = self.pending_fault.take();
        if self.telemetry.is_none() {
            return;
        }
        let mask = self.behavior.mask();
        let stab = self.stabilizer.state().offset;
        let est = self.estimate;
        let h = &self.human.state;
        let row = TelemetryRow {
            tick: self.tick - 1,
            t,
            drone_east: self.drone.position.x,
            drone_up: self.drone.position.y,
            drone_north: self.drone.position.z,
            drone_yaw_deg: self.drone.yaw.to_degrees(),
            human_east: h.position.x,
            human_north: h.position.y,
            human_heading_deg: h.heading.to_degrees(),
            true_tau_deg: self.true_tau().to_degrees(),
            true_distance_m: eye.z,
            true_lateral_m: eye.x,
            in_frame,
            frame_source: self.frame_source,
            lost,
            est_tau_deg: est.map(|e| e.tau.to_degrees()),
            est_distance_m: est.map(|e| e.distance),
            est_facing_offset_m: est.as_ref().map(facing_axis_offset),
            event: self.event,
            state: state.name().to_string(),
            mask_yaw: mask.yaw,
            mask_distance: mask.distance,
            mask_lateral: mask.lateral,
            cmd_forward: self.follow_cmd.forward,
            cmd_lateral: self.follow_cmd.lateral,
            cmd_yaw_rate: self.follow_cmd.yaw_rate,
            stab_offset_x_px: stab.x,
            stab_offset_y_px: stab.y,
            anc_noise_dba: self.anc_last.map(|r| r.noise_dba),
            anc_residual_dba: self.anc_last.map(|r| r.residual_dba),
            api_active: self.api.in_flight(),
            fault,
        };
        if let Some(rows) = self.telemetry.as_mut() {
            rows.push(row);
        }
    }

    pub fn snapshot(&self) -> Snapshot {
        let truth = self.true_landmarks();
        let d = &self.drone;
        let h = &self.human.state;
        Snapshot {
            t: self.time(),
            drone: SnapshotDrone { x: d.position.x, y: d.position.y, z: d.position.z, yaw: d.yaw },
            human: SnapshotHuman { x: h.position.x, y: h.position.y, heading: h.heading },
            state: self.behavior.state().name().to_string(),
            tau_est: self.estimate.map(|e| e.tau),
            d_est: self.estimate.map(|e| e.distance),
            metrics: SnapshotMetrics {
                distance_error_m: truth.eye_mid().z - self.follow.setpoint.distance,
                in_frame: visible_projection(&truth, &self.cfg.camera).is_some(),
                lost: self.frame_lost,
                event: self.event,
                stab_offset_px: self.stabilizer.state().offset.into(),
                anc_residual_dba: self.anc_last.map(|r| r.residual_dba),
                api_active: self.api.in_flight(),
            },
        }
    }

    pub fn summary(&self) -> RunSummary {
        let s = &self.stats;
        let frames = s.frames.max(1) as f64;
        let n = s.follow_frames.max(1) as f64;
        let stabilizer = self.cfg.features.stabilizer.then(|| {
            let residual_px = s.stab_apparent.rms_about_mean();
            let unstabilized_px = s.stab_display.rms_about_mean();
            StabilizerSummary {
                residual_px,
                unstabilized_px,
                ratio: if unstabilized_px > 0.0 { residual_px / unstabilized_px } else { 1.0 },
            }
        });
        let anc = (s.anc_windows > 0).then(|| {
            let w = s.anc_windows as f64;
            let noise = 10.0 * (s.anc_noise_power / w).log10();
            let residual = 10.0 * (s.anc_residual_power / w).log10();
            AncSummary {
                windows: s.anc_windows,
                mean_noise_dba: noise,
                mean_residual_dba: residual,
                reduction_db: noise - residual,
                first_converged_window: s.anc_first_converged,
            }
        });
        RunSummary {
            telemetry_version: TELEMETRY_VERSION,
            scenario: self.cfg.name.clone(),
            seed: self.cfg.seed,
            sim_time_s: self.time(),
            ticks: self.tick,
            vision_frames: self.tracker.frames(),
            detector_runs: self.tracker.detector_runs(),
            follow: FollowSummary {
                frames: s.follow_frames,
                mean_abs_distance_error_m: s.abs_err / n,
                rms_distance_error_m: (s.sq_err / n).sqrt(),
                in_frame_fraction: s.in_frame as f64 / frames,
            },
            states: StateFractions {
                home: s.home as f64 / frames,
                idle: s.idle as f64 / frames,
                await_: s.await_ as f64 / frames,
                lost: s.lost as f64 / frames,
            },
            stabilizer,
            anc,
            commands: self.commands.clone(),
            faults: self.faults.clone(),
        }
    }
}
