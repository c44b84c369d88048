//! Home / Idle / Await following state machine with the laziness timer `T`.

use crate::vision::UserEvent;
use serde::{Deserialize, Serialize};
use std::f64::consts::FRAC_PI_2;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum BehaviorError {
    #[error("time went backwards: {now} < {last}")]
    TimeRegression { now: f64, last: f64 },
    #[error("invalid behavior config: {0}")]
    InvalidConfig(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BehaviorConfig {
    /// Seconds spent in Idle before returning Home.
    #[serde(rename = "T")]
    pub t: f64,
    /// Rotation away from frontal, degrees, that sends POD to Idle.
    pub tau_threshold_deg: f64,
}

impl Default for BehaviorConfig {
    fn default() -> Self {
        Self { t: 5.0, tau_threshold_deg: 30.0 }
    }
}

impl BehaviorConfig {
    pub fn validate(&self) -> Result<(), BehaviorError> {
        if !(self.t > 0.0 && self.t.is_finite()) {
            return Err(BehaviorError::InvalidConfig("T must be > 0"));
        }
        if !(self.tau_threshold_deg > 0.0 && self.tau_threshold_deg < 90.0) {
            return Err(BehaviorError::InvalidConfig("tau_threshold must be in (0, 90) degrees"));
        }
        Ok(())
    }

    pub fn tau_threshold(&self) -> f64 {
        self.tau_threshold_deg.to_radians()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "state", rename_all = "snake_case")]
pub enum BehaviorState {
    Home,
    Idle { entered_at: f64 },
    Await,
}

impl BehaviorState {
    pub fn name(&self) -> &'static str {
        match self {
            BehaviorState::Home => "Home",
            BehaviorState::Idle { .. } => "Idle",
            BehaviorState::Await => "Await",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActuationMask {
    pub yaw: bool,
    pub distance: bool,
    pub lateral: bool,
}

impl ActuationMask {
    pub const ALL_OFF: ActuationMask = ActuationMask { yaw: false, distance: false, lateral: false };
    pub const ALL_ON: ActuationMask = ActuationMask { yaw: true, distance: true, lateral: true };
}

pub fn mask_of(state: BehaviorState) -> ActuationMask {
    match state {
        BehaviorState::Home => ActuationMask::ALL_ON,
        BehaviorState::Idle { .. } => ActuationMask::ALL_OFF,
        BehaviorState::Await => ActuationMask { yaw: true, distance: false, lateral: false },
    }
}

/// Inputs to one transition besides the event.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepInput {
    pub event: UserEvent,
    /// Estimated user orientation; ignored on `Lost`.
    pub tau: f64,
    pub now: f64,
}

/// Pure transition function. `was_beyond` tells whether the previous
/// observation already exceeded the rotation threshold; Idle is entered
/// (or its timer restarted) only when the threshold is crossed.
pub fn transition(
    state: BehaviorState,
    input: StepInput,
    was_beyond: bool,
    cfg: &BehaviorConfig,
) -> (BehaviorState, bool) {
    use BehaviorState::*;
    use UserEvent::*;
    if input.event == Lost {
        return (state, was_beyond);
    }
    let beyond = (input.tau - FRAC_PI_2).abs() > cfg.tau_threshold();
    let crossed = beyond && !was_beyond;
    let next = match (state, input.event) {
        (Home, Relieving) => Await,
        (Home, Summoning) => Home,
        (Home, _) if crossed => Idle { entered_at: input.now },
        (Home, _) => Home,
        (Idle { .. }, Summoning) => Home,
        (Idle { .. }, Relieving) => Await,
        (Idle { .. }, _) if crossed => Idle { entered_at: input.now },
        (Idle { entered_at }, _) if input.now - entered_at >= cfg.t => Home,
        (s @ Idle { .. }, _) => s,
        (Await, Summoning) => Home,
        (Await, _) => Await,
    };
    (next, beyond)
}

/// Stateful wrapper owned by the simulation loop.
#[derive(Debug, Clone)]
pub struct Behavior {
    cfg: BehaviorConfig,
    state: BehaviorState,
    beyond: bool,
    lost: bool,
    last_now: Option<f64>,
}

impl Behavior {
    pub fn new(cfg: BehaviorConfig) -> Self {
        Self { cfg, state: BehaviorState::Home, beyond: false, lost: false, last_now: None }
    }

    pub fn with_state(cfg: BehaviorConfig, state: BehaviorState) -> Self {
        Self { state, ..Self::new(cfg) }
    }

    pub fn state(&self) -> BehaviorState {
        self.state
    }

    pub fn config(&self) -> &BehaviorConfig {
        &self.cfg
    }

    pub fn set_config(&mut self, cfg: BehaviorConfig) {
        self.cfg = cfg;
    }

    pub fn is_lost(&self) -> bool {
        self.lost
    }

    /// Mask for the current state; all off while the user is lost.
    pub fn mask(&self) -> ActuationMask {
        if self.lost {
            ActuationMask::ALL_OFF
        } else {
            mask_of(self.state)
        }
    }

    pub fn step(&mut self, event: UserEvent, tau: f64, now: f64) -> Result<(BehaviorState, ActuationMask), BehaviorError> {
        if let Some(last) = self.last_now {
            if now < last {
                return Err(BehaviorError::TimeRegression { now, last });
            }
        }
        self.last_now = Some(now);
        let (next, beyond) = transition(self.state, StepInput { event, tau, now }, self.beyond, &self.cfg);
        self.state = next;
        self.beyond = beyond;
        self.lost = event == UserEvent::Lost;
        Ok((self.state, self.mask()))
    }

    /// Overrides the state, e.g. from a gesture injected by an operator.
    pub fn force(&mut self, state: BehaviorState) {
        self.state = state;
    }
}
