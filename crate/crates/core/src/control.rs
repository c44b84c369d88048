//! PID loops for yaw, distance and lateral position, run at the vision rate.
//!
//! Outputs are body-frame velocity commands: `forward` along the camera
//! axis, `lateral` toward camera +X (right) and `yaw_rate` positive when
//! turning the camera toward its right.

use crate::behavior::ActuationMask;
use crate::geometry::PoseEstimate;
use crate::vision::MotionErrors;
use serde::{Deserialize, Serialize};
use std::f64::consts::FRAC_PI_2;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ControlError {
    #[error("dt must be > 0, got {0}")]
    NonpositiveDt(f64),
    #[error("no usable pose estimate")]
    NoEstimate,
    #[error("invalid gains: {0}")]
    InvalidGains(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PidGains {
    pub kp: f64,
    pub ki: f64,
    pub kd: f64,
    pub integral_clamp: f64,
    pub output_clamp: f64,
}

impl PidGains {
    pub fn p(kp: f64, output_clamp: f64) -> Self {
        Self { kp, ki: 0.0, kd: 0.0, integral_clamp: output_clamp, output_clamp }
    }

    pub fn validate(&self) -> Result<(), ControlError> {
        if !(self.kp >= 0.0 && self.ki >= 0.0 && self.kd >= 0.0) {
            return Err(ControlError::InvalidGains("gains must be >= 0"));
        }
        if !(self.integral_clamp > 0.0 && self.output_clamp > 0.0) {
            return Err(ControlError::InvalidGains("clamps must be > 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PidState {
    /// Integral term in output units (ki already applied).
    pub integral: f64,
    pub prev_measurement: Option<f64>,
    pub last_output: f64,
}

/// One PID update with derivative on measurement. The integral is clamped
/// before it contributes, and the output is clamped last.
pub fn pid_step(
    gains: &PidGains,
    state: &PidState,
    setpoint: f64,
    measurement: f64,
    dt: f64,
) -> Result<(f64, PidState), ControlError> {
    if !(dt > 0.0) {
        return Err(ControlError::NonpositiveDt(dt));
    }
    let error = setpoint - measurement;
    let integral = (state.integral + gains.ki * error * dt).clamp(-gains.integral_clamp, gains.integral_clamp);
    let derivative = state.prev_measurement.map_or(0.0, |prev| (measurement - prev) / dt);
    let raw = gains.kp * error + integral - gains.kd * derivative;
    let output = raw.clamp(-gains.output_clamp, gains.output_clamp);
    Ok((output, PidState { integral, prev_measurement: Some(measurement), last_output: output }))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FollowSetpoint {
    /// Desired camera-to-user distance D*, meters.
    pub distance: f64,
    /// Desired user orientation, degrees; 90 means the display faces the user.
    pub orientation_deg: f64,
    /// Desired offset of the drone from the user's facing axis, meters.
    pub lateral_offset: f64,
}

impl Default for FollowSetpoint {
    fn default() -> Self {
        Self { distance: 0.6, orientation_deg: 90.0, lateral_offset: 0.0 }
    }
}

impl FollowSetpoint {
    pub fn orientation(&self) -> f64 {
        self.orientation_deg.to_radians()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FollowGains {
    pub yaw: PidGains,
    pub distance: PidGains,
    pub lateral: PidGains,
}

impl Default for FollowGains {
    fn default() -> Self {
        Self {
            yaw: PidGains { kp: 3.0, ki: 0.3, kd: 0.0, integral_clamp: 0.5, output_clamp: 2.0 },
            distance: PidGains { kp: 4.0, ki: 0.2, kd: 0.05, integral_clamp: 0.5, output_clamp: 1.0 },
            lateral: PidGains { kp: 4.0, ki: 1.0, kd: 0.0, integral_clamp: 0.5, output_clamp: 1.0 },
        }
    }
}

impl FollowGains {
    pub fn validate(&self) -> Result<(), ControlError> {
        self.yaw.validate()?;
        self.distance.validate()?;
        self.lateral.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct FollowCommand {
    pub yaw_rate: f64,
    pub forward: f64,
    pub lateral: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct FollowStates {
    pub yaw: PidState,
    pub distance: PidState,
    pub lateral: PidState,
}

/// Where the user's facing axis crosses the camera plane, along camera X.
/// Zero when the drone sits straight in front of the user.
pub fn facing_axis_offset(est: &PoseEstimate) -> f64 {
    est.lateral + est.distance * (FRAC_PI_2 - est.tau).tan()
}

pub fn motion_errors(est: &PoseEstimate, sp: &FollowSetpoint) -> MotionErrors {
    MotionErrors {
        x: facing_axis_offset(est) - sp.lateral_offset,
        z: est.distance - sp.distance,
        orientation: est.tau - sp.orientation(),
    }
}

/// Runs the three loops on a valid estimate.
pub fn follow_commands(
    est: &PoseEstimate,
    sp: &FollowSetpoint,
    gains: &FollowGains,
    states: &FollowStates,
    dt: f64,
) -> Result<(FollowCommand, FollowStates), ControlError> {
    if !(est.confidence > 0.0) {
        return Err(ControlError::NoEstimate);
    }
    let (yaw, ys) = pid_step(&gains.yaw, &states.yaw, 0.0, est.bearing, dt)?;
    let (fwd, ds) = pid_step(&gains.distance, &states.distance, sp.distance, est.distance, dt)?;
    let (lat, ls) = pid_step(&gains.lateral, &states.lateral, sp.lateral_offset, facing_axis_offset(est), dt)?;
    Ok((
        FollowCommand { yaw_rate: -yaw, forward: -fwd, lateral: -lat },
        FollowStates { yaw: ys, distance: ds, lateral: ls },
    ))
}

/// Controller bank owned by the simulation loop.
#[derive(Debug, Clone)]
pub struct FollowController {
    pub gains: FollowGains,
    pub setpoint: FollowSetpoint,
    states: FollowStates,
}

impl FollowController {
    pub fn new(gains: FollowGains, setpoint: FollowSetpoint) -> Self {
        Self { gains, setpoint, states: FollowStates::default() }
    }

    pub fn states(&self) -> &FollowStates {
        &self.states
    }

    /// Masked update. Without an estimate every command is zero and the
    /// integrators are left untouched; a masked-off loop outputs zero and
    /// restarts from a clean state when re-enabled.
    pub fn step(&mut self, est: Option<&PoseEstimate>, mask: ActuationMask, dt: f64) -> Result<FollowCommand, ControlError> {
        if !(dt > 0.0) {
            return Err(ControlError::NonpositiveDt(dt));
        }
        let Some(est) = est.filter(|e| e.confidence > 0.0) else {
            return Ok(FollowCommand::default());
        };
        let (cmd, next) = follow_commands(est, &self.setpoint, &self.gains, &self.states, dt)?;
        let pick = |on: bool, v: f64, s: PidState| if on { (v, s) } else { (0.0, PidState::default()) };
        let (yaw_rate, ys) = pick(mask.yaw, cmd.yaw_rate, next.yaw);
        let (forward, ds) = pick(mask.distance, cmd.forward, next.distance);
        let (lateral, ls) = pick(mask.lateral, cmd.lateral, next.lateral);
        self.states = FollowStates { yaw: ys, distance: ds, lateral: ls };
        Ok(FollowCommand { yaw_rate, forward, lateral })
    }

    pub fn reset(&mut self) {
        self.states = FollowStates::default();
    }
}
