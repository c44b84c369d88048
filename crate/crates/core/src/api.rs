//! Blocking movement API: one command in flight, progress evaluated by a
//! firmware-rate task.

use nalgebra::Vector2;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MoveKind {
    /// Absolute height above ground, m.
    ZAbsolute { h: f64 },
    ZRelative { dz: f64 },
    /// Body-frame displacement: `dx` forward along the camera, `dy` right.
    XyRelative { dx: f64, dy: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawMove")]
pub struct MoveCommand {
    #[serde(flatten)]
    pub kind: MoveKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tolerance_m: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hold_s: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timeout_s: Option<f64>,
}

#[derive(Deserialize)]
#[serde(rename_all = "snake_case")]
enum RawKind {
    ZAbsolute,
    ZRelative,
    XyRelative,
}

/// Wire form of [`MoveCommand`]; `flatten` cannot reject unknown fields.
#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawMove {
    kind: RawKind,
    h: Option<f64>,
    dz: Option<f64>,
    dx: Option<f64>,
    dy: Option<f64>,
    tolerance_m: Option<f64>,
    hold_s: Option<f64>,
    timeout_s: Option<f64>,
}

impl TryFrom<RawMove> for MoveCommand {
    type Error = String;

    fn try_from(r: RawMove) -> Result<Self, String> {
        let kind = match (r.kind, r.h, r.dz, r.dx, r.dy) {
            (RawKind::ZAbsolute, Some(h), None, None, None) => MoveKind::ZAbsolute { h },
            (RawKind::ZRelative, None, Some(dz), None, None) => MoveKind::ZRelative { dz },
            (RawKind::XyRelative, None, None, Some(dx), Some(dy)) => MoveKind::XyRelative { dx, dy },
            (RawKind::ZAbsolute, ..) => return Err("z_absolute takes exactly `h`".into()),
            (RawKind::ZRelative, ..) => return Err("z_relative takes exactly `dz`".into()),
            (RawKind::XyRelative, ..) => return Err("xy_relative takes exactly `dx` and `dy`".into()),
        };
        Ok(Self { kind, tolerance_m: r.tolerance_m, hold_s: r.hold_s, timeout_s: r.timeout_s })
    }
}

impl MoveCommand {
    pub fn new(kind: MoveKind) -> Self {
        Self { kind, tolerance_m: None, hold_s: None, timeout_s: None }
    }

    pub fn z_absolute(h: f64) -> Self {
        Self::new(MoveKind::ZAbsolute { h })
    }

    pub fn z_relative(dz: f64) -> Self {
        Self::new(MoveKind::ZRelative { dz })
    }

    pub fn xy_relative(dx: f64, dy: f64) -> Self {
        Self::new(MoveKind::XyRelative { dx, dy })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ApiDefaults {
    pub tolerance_m: f64,
    pub hold_s: f64,
    pub timeout_s: f64,
}

impl Default for ApiDefaults {
    fn default() -> Self {
        Self { tolerance_m: 0.03, hold_s: 0.3, timeout_s: 10.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ResolvedCommand {
    pub kind: MoveKind,
    pub tolerance_m: f64,
    pub hold_s: f64,
    pub timeout_s: f64,
}

impl ApiDefaults {
    pub fn resolve(&self, cmd: &MoveCommand) -> Result<ResolvedCommand, String> {
        let r = ResolvedCommand {
            kind: cmd.kind,
            tolerance_m: cmd.tolerance_m.unwrap_or(self.tolerance_m),
            hold_s: cmd.hold_s.unwrap_or(self.hold_s),
            timeout_s: cmd.timeout_s.unwrap_or(self.timeout_s),
        };
        if !(r.tolerance_m > 0.0) {
            return Err("tolerance must be > 0".into());
        }
        if !(r.hold_s > 0.0 && r.timeout_s > r.hold_s) {
            return Err("need timeout > hold > 0".into());
        }
        let finite = match r.kind {
            MoveKind::ZAbsolute { h } => h.is_finite() && h >= 0.0,
            MoveKind::ZRelative { dz } => dz.is_finite(),
            MoveKind::XyRelative { dx, dy } => dx.is_finite() && dy.is_finite(),
        };
        if !finite {
            return Err("target must be finite and above ground".into());
        }
        Ok(r)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "reason", rename_all = "snake_case")]
pub enum RejectReason {
    Busy,
    Invalid { message: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "outcome", rename_all = "snake_case")]
pub enum CommandOutcome {
    Completed { elapsed_s: f64 },
    TimedOut { residual_m: f64 },
    Preempted,
    Rejected(RejectReason),
}

impl CommandOutcome {
    pub fn label(&self) -> &'static str {
        match self {
            CommandOutcome::Completed { .. } => "completed",
            CommandOutcome::TimedOut { .. } => "timed_out",
            CommandOutcome::Preempted => "preempted",
            CommandOutcome::Rejected(RejectReason::Busy) => "rejected_busy",
            CommandOutcome::Rejected(RejectReason::Invalid { .. }) => "rejected_invalid",
        }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ApiError {
    #[error("simulation stopped")]
    SimulationStopped,
}

/// Setpoint a command drives while in flight.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum MoveTarget {
    Altitude(f64),
    /// World ground-plane point (east, north).
    Horizontal(Vector2<f64>),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ActiveCommand {
    pub id: u64,
    pub cmd: ResolvedCommand,
    pub target: MoveTarget,
    pub accepted_at: f64,
    in_tolerance_ticks: u32,
}

/// What a command needs to know about the drone at acceptance and at
/// every progress check.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DronePose {
    /// Ground-plane position (east, north).
    pub ground: Vector2<f64>,
    pub altitude: f64,
    /// Camera forward and right unit vectors in the ground plane.
    pub forward: Vector2<f64>,
    pub right: Vector2<f64>,
}

/// Firmware-side command bookkeeping. Progress is only evaluated by
/// `progress`, which the world calls at the firmware task rate.
#[derive(Debug, Clone)]
pub struct CommandTracker {
    defaults: ApiDefaults,
    firmware_rate_hz: f64,
    active: Option<ActiveCommand>,
    next_id: u64,
}

impl CommandTracker {
    pub fn new(defaults: ApiDefaults, firmware_rate_hz: u32) -> Self {
        Self { defaults, firmware_rate_hz: firmware_rate_hz as f64, active: None, next_id: 1 }
    }

    pub fn defaults(&self) -> &ApiDefaults {
        &self.defaults
    }

    pub fn set_defaults(&mut self, defaults: ApiDefaults) {
        self.defaults = defaults;
    }

    pub fn active(&self) -> Option<&ActiveCommand> {
        self.active.as_ref()
    }

    pub fn in_flight(&self) -> bool {
        self.active.is_some()
    }

    /// Consecutive in-tolerance firmware ticks needed to complete.
    pub fn hold_ticks(&self, hold_s: f64) -> u32 {
        (hold_s * self.firmware_rate_hz - 1e-9).ceil().max(1.0) as u32
    }

    /// Accepts a command unless one is already in flight. Relative targets
    /// are resolved against `pose` now.
    pub fn submit(&mut self, cmd: &MoveCommand, pose: &DronePose, now: f64) -> Result<ActiveCommand, RejectReason> {
        if self.active.is_some() {
            return Err(RejectReason::Busy);
        }
        let cmd = self.defaults.resolve(cmd).map_err(|message| RejectReason::Invalid { message })?;
        let target = match cmd.kind {
            MoveKind::ZAbsolute { h } => MoveTarget::Altitude(h),
            MoveKind::ZRelative { dz } => MoveTarget::Altitude((pose.altitude + dz).max(0.0)),
            MoveKind::XyRelative { dx, dy } => MoveTarget::Horizontal(pose.ground + pose.forward * dx + pose.right * dy),
        };
        let active = ActiveCommand { id: self.next_id, cmd, target, accepted_at: now, in_tolerance_ticks: 0 };
        self.next_id += 1;
        self.active = Some(active);
        Ok(active)
    }

    pub fn error(target: &MoveTarget, pose: &DronePose) -> f64 {
        match target {
            MoveTarget::Altitude(h) => (pose.altitude - h).abs(),
            MoveTarget::Horizontal(p) => (pose.ground - p).norm(),
        }
    }

    /// One firmware tick. Returns the finished command, if any.
    pub fn progress(&mut self, pose: &DronePose, now: f64) -> Option<(ActiveCommand, CommandOutcome)> {
        let hold_ticks = self.hold_ticks(self.active?.cmd.hold_s);
        let active = self.active.as_mut()?;
        let err = Self::error(&active.target, pose);
        if err < active.cmd.tolerance_m {
            active.in_tolerance_ticks += 1;
        } else {
            active.in_tolerance_ticks = 0;
        }
        let elapsed = now - active.accepted_at;
        let outcome = if active.in_tolerance_ticks >= hold_ticks {
            CommandOutcome::Completed { elapsed_s: elapsed }
        } else if elapsed >= active.cmd.timeout_s - 1e-9 {
            CommandOutcome::TimedOut { residual_m: err }
        } else {
            return None;
        };
        let done = *active;
        self.active = None;
        Some((done, outcome))
    }

    pub fn preempt(&mut self) -> Option<(ActiveCommand, CommandOutcome)> {
        self.active.take().map(|a| (a, CommandOutcome::Preempted))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pose(alt: f64) -> DronePose {
        DronePose {
            ground: Vector2::new(1.0, 2.0),
            altitude: alt,
            forward: Vector2::new(0.0, 1.0),
            right: Vector2::new(1.0, 0.0),
        }
    }

    #[test]
    fn second_submit_is_busy() {
        let mut t = CommandTracker::new(ApiDefaults::default(), 100);
        t.submit(&MoveCommand::z_absolute(1.0), &pose(0.5), 0.0).unwrap();
        assert_eq!(t.submit(&MoveCommand::z_relative(0.1), &pose(0.5), 0.0), Err(RejectReason::Busy));
    }

    #[test]
    fn relative_targets_resolve_at_acceptance() {
        let mut t = CommandTracker::new(ApiDefaults::default(), 100);
        let a = t.submit(&MoveCommand::xy_relative(0.5, -0.25), &pose(1.0), 0.0).unwrap();
        assert_eq!(a.target, MoveTarget::Horizontal(Vector2::new(0.75, 2.5)));
        t.preempt();
        let a = t.submit(&MoveCommand::z_relative(0.2), &pose(1.0), 0.0).unwrap();
        assert_eq!(a.target, MoveTarget::Altitude(1.2));
    }

    #[test]
    fn hold_needs_thirty_consecutive_ticks() {
        let mut t = CommandTracker::new(ApiDefaults::default(), 100);
        assert_eq!(t.hold_ticks(0.3), 30);
        t.submit(&MoveCommand::z_relative(0.0), &pose(1.0), 0.0).unwrap();
        for i in 1..30 {
            assert!(t.progress(&pose(1.0), i as f64 * 0.01).is_none(), "tick {i}");
        }
        let (_, outcome) = t.progress(&pose(1.0), 0.30).unwrap();
        assert_eq!(outcome, CommandOutcome::Completed { elapsed_s: 0.30 });
        assert!(!t.in_flight());
    }

    #[test]
    fn leaving_tolerance_resets_hold() {
        let mut t = CommandTracker::new(ApiDefaults::default(), 100);
        t.submit(&MoveCommand::z_absolute(1.0), &pose(0.0), 0.0).unwrap();
        let mut tick = 0;
        let mut step = |alt: f64| {
            tick += 1;
            t.progress(&pose(alt), tick as f64 * 0.01)
        };
        for _ in 0..20 {
            assert!(step(1.0).is_none());
        }
        assert!(step(1.1).is_none());
        for _ in 0..29 {
            assert!(step(1.0).is_none());
        }
        assert!(matches!(step(1.0), Some((_, CommandOutcome::Completed { .. }))));
    }

    #[test]
    fn unreachable_target_times_out_on_schedule() {
        let mut t = CommandTracker::new(ApiDefaults::default(), 100);
        t.submit(&MoveCommand::z_absolute(5.0), &pose(0.0), 0.0).unwrap();
        for i in 1..1000 {
            assert!(t.progress(&pose(0.0), i as f64 * 0.01).is_none());
        }
        let (_, outcome) = t.progress(&pose(0.0), 10.0).unwrap();
        assert_eq!(outcome, CommandOutcome::TimedOut { residual_m: 5.0 });
    }

    #[test]
    fn invalid_commands_are_rejected() {
        let mut t = CommandTracker::new(ApiDefaults::default(), 100);
        let mut cmd = MoveCommand::z_absolute(1.0);
        cmd.hold_s = Some(20.0);
        assert!(matches!(t.submit(&cmd, &pose(0.0), 0.0), Err(RejectReason::Invalid { .. })));
        assert!(!t.in_flight());
    }

    #[test]
    fn wire_format() {
        let c: MoveCommand = serde_json::from_str(r#"{"kind":"xy_relative","dx":0.5,"dy":0}"#).unwrap();
        assert_eq!(c, MoveCommand::xy_relative(0.5, 0.0));
        let c: MoveCommand = serde_json::from_str(r#"{"kind":"z_absolute","h":1,"timeout_s":3}"#).unwrap();
        assert_eq!(c.timeout_s, Some(3.0));
        let o = serde_json::to_value(CommandOutcome::Rejected(RejectReason::Busy)).unwrap();
        assert_eq!(o, serde_json::json!({"outcome": "rejected", "reason": "busy"}));
    }
}
