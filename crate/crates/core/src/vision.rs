//! Detection cadence and user-state recognition.
//!
//! A full landmark detection runs every `detector_period` frames. Frames in
//! between shift the previous landmarks by the observed image displacement
//! and accumulate tracking drift until the next detection resets it.

use crate::geometry::{project, BodyLandmarks3D, CameraIntrinsics, ProjectedLandmarks};
use nalgebra::Vector2;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum VisionError {
    #[error("need at least 2 frames of history to classify")]
    InsufficientHistory,
    #[error("invalid timing: {0}")]
    InvalidTiming(String),
    #[error("invalid vision parameter: {0}")]
    InvalidParameter(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TimingConfig {
    pub vision_rate_hz: u32,
    /// A detection runs on every frame whose index is a multiple of this.
    pub detector_period: u32,
    pub controller_rate_hz: u32,
    pub firmware_task_rate_hz: u32,
    pub physics_rate_hz: u32,
}

impl Default for TimingConfig {
    fn default() -> Self {
        Self {
            vision_rate_hz: 50,
            detector_period: 4,
            controller_rate_hz: 50,
            firmware_task_rate_hz: 100,
            physics_rate_hz: 1000,
        }
    }
}

impl TimingConfig {
    pub fn validate(&self) -> Result<(), VisionError> {
        if self.detector_period == 0 {
            return Err(VisionError::InvalidTiming("detector_period must be >= 1".into()));
        }
        for (name, rate) in [
            ("vision_rate_hz", self.vision_rate_hz),
            ("controller_rate_hz", self.controller_rate_hz),
            ("firmware_task_rate_hz", self.firmware_task_rate_hz),
        ] {
            if rate == 0 || self.physics_rate_hz % rate != 0 {
                return Err(VisionError::InvalidTiming(format!(
                    "physics_rate_hz {} is not a multiple of {name} {rate}",
                    self.physics_rate_hz
                )));
            }
        }
        Ok(())
    }

    pub fn physics_dt(&self) -> f64 {
        1.0 / self.physics_rate_hz as f64
    }

    /// Physics ticks between consecutive runs of a task at `rate_hz`.
    pub fn divisor(&self, rate_hz: u32) -> u64 {
        (self.physics_rate_hz / rate_hz) as u64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EventThresholds {
    /// Acceptable error along camera X or Z, meters.
    pub position_m: f64,
    /// Acceptable orientation error, degrees.
    pub orientation_deg: f64,
    /// Consecutive out-of-range frames before a major motion is reported.
    pub sustain_frames: u32,
    /// Consecutive wrist-above-eye frames before a gesture fires.
    pub gesture_frames: u32,
}

impl Default for EventThresholds {
    fn default() -> Self {
        Self {
            position_m: 0.20,
            orientation_deg: 15.0,
            sustain_frames: 2,
            gesture_frames: 5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VisionConfig {
    /// Pixel noise of a full detection.
    pub detector_sigma_px: f64,
    /// Per-frame tracking drift between detections.
    pub drift_sigma_px: f64,
    pub thresholds: EventThresholds,
}

impl Default for VisionConfig {
    fn default() -> Self {
        Self {
            detector_sigma_px: 1.0,
            drift_sigma_px: 0.5,
            thresholds: EventThresholds::default(),
        }
    }
}

impl VisionConfig {
    pub fn validate(&self) -> Result<(), VisionError> {
        if !(self.detector_sigma_px >= 0.0 && self.drift_sigma_px >= 0.0) {
            return Err(VisionError::InvalidParameter("noise sigmas must be >= 0"));
        }
        let t = &self.thresholds;
        if !(t.position_m > 0.0 && t.orientation_deg > 0.0) || t.sustain_frames == 0 || t.gesture_frames == 0 {
            return Err(VisionError::InvalidParameter("thresholds must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FrameSource {
    Detector,
    Propagated,
    /// No landmarks this frame.
    Unavailable,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrackedFrame {
    pub index: u64,
    pub source: FrameSource,
    pub landmarks: Option<ProjectedLandmarks>,
    pub lost: bool,
}

impl TrackedFrame {
    pub fn lost(index: u64) -> Self {
        Self { index, source: FrameSource::Unavailable, landmarks: None, lost: true }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UserEvent {
    Summoning,
    Relieving,
    MajorMotion,
    MinorMotion,
    Lost,
}

impl UserEvent {
    pub const ALL: [UserEvent; 5] = [
        UserEvent::Summoning,
        UserEvent::Relieving,
        UserEvent::MajorMotion,
        UserEvent::MinorMotion,
        UserEvent::Lost,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            UserEvent::Summoning => "summoning",
            UserEvent::Relieving => "relieving",
            UserEvent::MajorMotion => "major_motion",
            UserEvent::MinorMotion => "minor_motion",
            UserEvent::Lost => "lost",
        }
    }
}

/// True projection of the user if it is detectable: every required landmark
/// in front of the camera, eyes in frontal left/right order, and all four
/// inside the sensor.
pub fn visible_projection(truth: &BodyLandmarks3D, cam: &CameraIntrinsics) -> Option<ProjectedLandmarks> {
    let proj = project(&without_hidden_wrists(truth), cam).ok()?;
    (proj.right_eye.x < proj.left_eye.x && proj.all_in_frame()).then_some(proj)
}

fn without_hidden_wrists(truth: &BodyLandmarks3D) -> BodyLandmarks3D {
    let mut lm = *truth;
    lm.right_wrist = lm.right_wrist.filter(|w| w.z > 0.0);
    lm.left_wrist = lm.left_wrist.filter(|w| w.z > 0.0);
    lm
}

fn jitter<R: Rng + ?Sized>(px: Vector2<f64>, noise: &Normal<f64>, rng: &mut R) -> Vector2<f64> {
    let dx = noise.sample(rng);
    let dy = noise.sample(rng);
    px + Vector2::new(dx, dy)
}

/// Synthetic stand-in for the pose network: the true projection plus
/// zero-mean Gaussian pixel noise.
pub fn detect<R: Rng + ?Sized>(
    index: u64,
    truth: &BodyLandmarks3D,
    cam: &CameraIntrinsics,
    sigma_px: f64,
    rng: &mut R,
) -> TrackedFrame {
    let Some(clean) = visible_projection(truth, cam) else {
        return TrackedFrame::lost(index);
    };
    let noise = Normal::new(0.0, sigma_px).expect("sigma validated");
    let noisy = clean.map_points(cam, |_, px| jitter(px, &noise, rng));
    if noisy.visible_count() < 4 {
        return TrackedFrame::lost(index);
    }
    TrackedFrame { index, source: FrameSource::Detector, landmarks: Some(noisy), lost: false }
}

/// Shifts the previous landmarks by the image displacement plus fresh drift
/// noise. Drift compounds over consecutive propagated frames.
pub fn propagate<R: Rng + ?Sized>(
    prev: &TrackedFrame,
    displacement: Vector2<f64>,
    cam: &CameraIntrinsics,
    drift_sigma_px: f64,
    rng: &mut R,
) -> TrackedFrame {
    let index = prev.index + 1;
    let Some(lm) = prev.landmarks.filter(|_| !prev.lost) else {
        return TrackedFrame::lost(index);
    };
    let noise = Normal::new(0.0, drift_sigma_px).expect("sigma validated");
    let moved = lm.map_points(cam, |_, px| jitter(px + displacement, &noise, rng));
    TrackedFrame { index, source: FrameSource::Propagated, landmarks: Some(moved), lost: false }
}

/// Owns the per-frame tracking state and applies the detection cadence.
#[derive(Debug, Clone)]
pub struct Tracker {
    cfg: VisionConfig,
    period: u64,
    next_index: u64,
    last: Option<TrackedFrame>,
    last_truth_centroid: Option<Vector2<f64>>,
    detector_runs: u64,
}

impl Tracker {
    pub fn new(cfg: VisionConfig, detector_period: u32) -> Self {
        Self {
            cfg,
            period: detector_period.max(1) as u64,
            next_index: 0,
            last: None,
            last_truth_centroid: None,
            detector_runs: 0,
        }
    }

    pub fn set_config(&mut self, cfg: VisionConfig) {
        self.cfg = cfg;
    }

    pub fn detector_runs(&self) -> u64 {
        self.detector_runs
    }

    pub fn frames(&self) -> u64 {
        self.next_index
    }

    pub fn is_detector_frame(&self, index: u64) -> bool {
        index % self.period == 0
    }

    /// Advances one vision frame. `truth` is the user's landmarks in the
    /// current camera frame, if the user exists.
    pub fn step<R: Rng + ?Sized>(
        &mut self,
        truth: Option<&BodyLandmarks3D>,
        cam: &CameraIntrinsics,
        rng: &mut R,
    ) -> TrackedFrame {
        let index = self.next_index;
        self.next_index += 1;
        let truth_proj = truth.and_then(|t| visible_projection(t, cam));
        let centroid = truth_proj.map(|p| required_centroid(&p));

        let frame = if self.is_detector_frame(index) {
            self.detector_runs += 1;
            match truth {
                Some(t) => detect(index, t, cam, self.cfg.detector_sigma_px, rng),
                None => TrackedFrame::lost(index),
            }
        } else {
            match (self.last, centroid, self.last_truth_centroid) {
                (Some(prev), Some(now), Some(before)) if !prev.lost => {
                    let mut prev = prev;
                    prev.index = index - 1;
                    propagate(&prev, now - before, cam, self.cfg.drift_sigma_px, rng)
                }
                _ => TrackedFrame::lost(index),
            }
        };
        self.last = Some(frame);
        self.last_truth_centroid = centroid;
        frame
    }
}

fn required_centroid(p: &ProjectedLandmarks) -> Vector2<f64> {
    (p.right_eye + p.left_eye + p.right_shoulder + p.left_shoulder) / 4.0
}

/// Errors of the user's pose relative to the follow setpoint.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct MotionErrors {
    /// Camera-X offset error, meters.
    pub x: f64,
    /// Distance error along the optical axis, meters.
    pub z: f64,
    /// Orientation error, radians.
    pub orientation: f64,
}

/// Debounced per-frame user-state classification.
#[derive(Debug, Clone)]
pub struct EventClassifier {
    thresholds: EventThresholds,
    frames_seen: u64,
    right_raised: u32,
    left_raised: u32,
    out_of_range: u32,
}

impl EventClassifier {
    pub fn new(thresholds: EventThresholds) -> Self {
        Self { thresholds, frames_seen: 0, right_raised: 0, left_raised: 0, out_of_range: 0 }
    }

    pub fn set_thresholds(&mut self, thresholds: EventThresholds) {
        self.thresholds = thresholds;
    }

    /// Feeds one frame. Priority: Summoning, Relieving, Lost, Major, Minor.
    pub fn classify(
        &mut self,
        frame: &TrackedFrame,
        errors: Option<MotionErrors>,
    ) -> Result<UserEvent, VisionError> {
        self.frames_seen += 1;
        let t = self.thresholds;
        match frame.landmarks.filter(|_| !frame.lost) {
            Some(lm) => {
                let eye_line = lm.eye_line();
                let above = |w: Option<Vector2<f64>>| w.is_some_and(|w| w.y > eye_line);
                self.right_raised = if above(lm.right_wrist) { self.right_raised + 1 } else { 0 };
                self.left_raised = if above(lm.left_wrist) { self.left_raised + 1 } else { 0 };
            }
            None => {
                self.right_raised = 0;
                self.left_raised = 0;
            }
        }
        let exceeded = errors.is_some_and(|e| {
            e.x.abs() > t.position_m
                || e.z.abs() > t.position_m
                || e.orientation.abs() > t.orientation_deg.to_radians()
        });
        self.out_of_range = if exceeded && !frame.lost { self.out_of_range + 1 } else { 0 };

        if self.frames_seen < 2 {
            return Err(VisionError::InsufficientHistory);
        }
        Ok(if self.right_raised >= t.gesture_frames {
            UserEvent::Summoning
        } else if self.left_raised >= t.gesture_frames {
            UserEvent::Relieving
        } else if frame.lost {
            UserEvent::Lost
        } else if self.out_of_range >= t.sustain_frames {
            UserEvent::MajorMotion
        } else {
            UserEvent::MinorMotion
        })
    }
}
