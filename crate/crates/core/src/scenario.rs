//! Scenario configuration: every tunable of a run in one JSON document.

use crate::anc::{AncConfig, NoiseSpectrum};
use crate::api::{ApiDefaults, MoveCommand};
use crate::behavior::BehaviorConfig;
use crate::control::{FollowGains, FollowSetpoint};
use crate::geometry::{BodyTemplate, CameraIntrinsics, UserModelParams};
use crate::stabilizer::StabilizerConfig;
use crate::vision::{TimingConfig, VisionConfig};
use serde::{Deserialize, Serialize};
use serde_json::Value;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ConfigError {
    #[error("parse error: {0}")]
    Parse(String),
    #[error("unknown config path '{0}'")]
    UnknownPath(String),
    #[error("invalid value for '{path}': {message}")]
    InvalidValue { path: String, message: String },
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlantConfig {
    /// Time constant of velocity tracking, s.
    pub velocity_tau_s: f64,
    /// Altitude hold gain, 1/s.
    pub altitude_gain: f64,
    pub max_climb_m_s: f64,
    /// Horizontal position hold gain, 1/s.
    pub hold_gain: f64,
    pub max_speed_m_s: f64,
}

impl Default for PlantConfig {
    fn default() -> Self {
        Self { velocity_tau_s: 0.15, altitude_gain: 10.0, max_climb_m_s: 1.0, hold_gain: 2.0, max_speed_m_s: 1.0 }
    }
}

/// Ornstein–Uhlenbeck acceleration disturbance, per world axis
/// (east, up, north).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DisturbanceModel {
    /// Stationary standard deviation, m/s².
    pub sigma_m_s2: [f64; 3],
    pub correlation_time_s: [f64; 3],
    /// Added to the scenario seed to derive each axis' stream.
    pub seed_offset: [u64; 3],
}

impl Default for DisturbanceModel {
    fn default() -> Self {
        Self { sigma_m_s2: [0.6; 3], correlation_time_s: [0.02; 3], seed_offset: [11, 12, 13] }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DroneStart {
    /// World position (east, up, north), m.
    pub position: [f64; 3],
    pub yaw_deg: f64,
}

impl Default for DroneStart {
    fn default() -> Self {
        Self { position: [0.0, 1.475, -0.6], yaw_deg: 180.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HumanConfig {
    /// Ground position (east, north), m.
    pub position: [f64; 2],
    /// Compass heading the user faces, degrees (0 = north, 90 = east).
    pub heading_deg: f64,
    pub eye_height_m: f64,
    /// Default walking speed for waypoints without one.
    pub speed_m_s: f64,
    /// Live velocity commands expire after this long without a refresh.
    pub deadman_s: f64,
    /// Length of a gesture without an explicit duration.
    pub gesture_pulse_s: f64,
    pub body: BodyTemplate,
}

impl Default for HumanConfig {
    fn default() -> Self {
        Self {
            position: [0.0, 0.0],
            heading_deg: 180.0,
            eye_height_m: 1.6,
            speed_m_s: 0.5,
            deadman_s: 0.25,
            gesture_pulse_s: 0.5,
            body: BodyTemplate::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Features {
    pub follow: bool,
    pub stabilizer: bool,
    pub anc: bool,
}

impl Default for Features {
    fn default() -> Self {
        Self { follow: true, stabilizer: true, anc: true }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AncSection {
    pub settings: AncConfig,
    pub spectrum: NoiseSpectrum,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GestureKind {
    /// Right wrist above the eyes.
    Summon,
    /// Left wrist above the eyes.
    Relieve,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum ScriptEvent {
    /// Appends a waypoint (east, north) to the user's walking queue.
    Waypoint {
        x: f64,
        y: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        speed: Option<f64>,
    },
    Heading { heading_deg: f64 },
    Gesture {
        kind: GestureKind,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        duration_s: Option<f64>,
    },
    /// Sets one config value by dotted path, as a live `set` would.
    Set { path: String, value: Value },
    Api {
        #[serde(rename = "move")]
        command: MoveCommand,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScriptEntry {
    pub t: f64,
    pub event: ScriptEvent,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScenarioConfig {
    pub schema_version: u32,
    pub name: String,
    pub seed: u64,
    /// Simulated seconds for headless runs.
    pub duration: f64,
    pub timing: TimingConfig,
    pub camera: CameraIntrinsics,
    pub user_model: UserModelParams,
    pub vision: VisionConfig,
    pub setpoint: FollowSetpoint,
    pub gains: FollowGains,
    pub behavior: BehaviorConfig,
    pub stabilizer: StabilizerConfig,
    pub anc: AncSection,
    pub api_defaults: ApiDefaults,
    pub plant: PlantConfig,
    pub disturbance: DisturbanceModel,
    pub drone: DroneStart,
    pub human: HumanConfig,
    pub features: Features,
    pub script: Vec<ScriptEntry>,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            name: "default".into(),
            seed: 42,
            duration: 60.0,
            timing: TimingConfig::default(),
            camera: CameraIntrinsics::default(),
            user_model: UserModelParams::default(),
            vision: VisionConfig::default(),
            setpoint: FollowSetpoint::default(),
            gains: FollowGains::default(),
            behavior: BehaviorConfig::default(),
            stabilizer: StabilizerConfig::default(),
            anc: AncSection::default(),
            api_defaults: ApiDefaults::default(),
            plant: PlantConfig::default(),
            disturbance: DisturbanceModel::default(),
            drone: DroneStart::default(),
            human: HumanConfig::default(),
            features: Features::default(),
            script: Vec::new(),
        }
    }
}

fn invalid(e: impl std::fmt::Display) -> ConfigError {
    ConfigError::Invalid(e.to_string())
}

impl ScenarioConfig {
    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(ConfigError::Invalid(format!(
                "schema_version {} unsupported (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        if !(self.duration > 0.0 && self.duration.is_finite()) {
            return Err(invalid("duration must be > 0"));
        }
        self.timing.validate().map_err(invalid)?;
        self.camera.validate().map_err(invalid)?;
        self.user_model.validate().map_err(invalid)?;
        self.vision.validate().map_err(invalid)?;
        self.gains.validate().map_err(invalid)?;
        self.behavior.validate().map_err(invalid)?;
        self.stabilizer.validate().map_err(invalid)?;
        self.anc.settings.validate().map_err(invalid)?;
        self.anc.spectrum.validate().map_err(invalid)?;
        if !(self.setpoint.distance > 0.0) {
            return Err(invalid("setpoint.distance must be > 0"));
        }
        let p = &self.plant;
        if !(p.velocity_tau_s > 0.0 && p.altitude_gain > 0.0 && p.max_climb_m_s > 0.0 && p.hold_gain > 0.0 && p.max_speed_m_s > 0.0) {
            return Err(invalid("plant parameters must be > 0"));
        }
        let d = &self.disturbance;
        if d.sigma_m_s2.iter().any(|s| !(*s >= 0.0)) || d.correlation_time_s.iter().any(|t| !(*t > 0.0)) {
            return Err(invalid("disturbance sigma must be >= 0 and correlation time > 0"));
        }
        let h = &self.human;
        if !(h.eye_height_m > 0.0 && h.speed_m_s > 0.0 && h.deadman_s > 0.0 && h.gesture_pulse_s > 0.0) {
            return Err(invalid("human parameters must be > 0"));
        }
        if self.drone.position[1] < 0.0 {
            return Err(invalid("drone must start above ground"));
        }
        let mut last = 0.0;
        for e in &self.script {
            if !(e.t >= last && e.t.is_finite()) {
                return Err(invalid("script times must be >= 0 and nondecreasing"));
            }
            last = e.t;
        }
        if last > self.duration {
            return Err(invalid("duration must cover the last script event"));
        }
        Ok(())
    }

    /// Returns a copy with one dotted-path value replaced, re-validated.
    pub fn with_path(&self, path: &str, value: Value) -> Result<Self, ConfigError> {
        let mut doc = serde_json::to_value(self).expect("config serializes");
        set_path(&mut doc, path, value)?;
        let cfg: Self = serde_json::from_value(doc)
            .map_err(|e| ConfigError::InvalidValue { path: path.into(), message: e.to_string() })?;
        cfg.validate()
            .map_err(|e| ConfigError::InvalidValue { path: path.into(), message: e.to_string() })?;
        Ok(cfg)
    }
}

/// Replaces the value at a dotted path (`"gains.yaw.kp"`, `"script.0.t"`).
/// The path must already exist.
pub fn set_path(doc: &mut Value, path: &str, value: Value) -> Result<(), ConfigError> {
    let unknown = || ConfigError::UnknownPath(path.to_string());
    let mut cur = doc;
    for seg in path.split('.') {
        cur = match cur {
            Value::Object(map) => map.get_mut(seg).ok_or_else(unknown)?,
            Value::Array(items) => {
                let i: usize = seg.parse().map_err(|_| unknown())?;
                items.get_mut(i).ok_or_else(unknown)?
            }
            _ => return Err(unknown()),
        };
    }
    *cur = value;
    Ok(())
}
