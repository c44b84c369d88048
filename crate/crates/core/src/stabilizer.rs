//! Spring-mass display-content stabilization.
//!
//! Content is a damped mass on a spring anchored at the screen centre and is
//! pushed opposite to the sensed display acceleration, so it stays roughly
//! still relative to the viewer's eye.

use nalgebra::Vector2;
use serde::{Deserialize, Serialize};
use std::collections::VecDeque;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum StabilizerError {
    #[error("dt must be > 0, got {0}")]
    NonpositiveDt(f64),
    #[error("trace lengths differ: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("invalid stabilizer config: {0}")]
    InvalidConfig(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StabilizerConfig {
    /// Spring factor, 1/s².
    pub k: f64,
    /// Friction constant, 1/s.
    pub c: f64,
    pub max_offset_px: f64,
    /// Display pixel pitch.
    pub px_per_m: f64,
    /// Sensing-to-render latency.
    pub delay_s: f64,
}

impl Default for StabilizerConfig {
    fn default() -> Self {
        Self { k: 0.02, c: 0.25, max_offset_px: 400.0, px_per_m: 17480.0, delay_s: 0.02 }
    }
}

impl StabilizerConfig {
    pub fn validate(&self) -> Result<(), StabilizerError> {
        if !(self.k > 0.0) {
            return Err(StabilizerError::InvalidConfig("k must be > 0"));
        }
        if !(self.c >= 0.0) {
            return Err(StabilizerError::InvalidConfig("c must be >= 0"));
        }
        if !(self.max_offset_px > 0.0 && self.px_per_m > 0.0) {
            return Err(StabilizerError::InvalidConfig("max_offset_px and px_per_m must be > 0"));
        }
        if !(self.delay_s >= 0.0) {
            return Err(StabilizerError::InvalidConfig("delay_s must be >= 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct StabilizerState {
    /// Content offset, px. Component 0 is lateral, 1 is vertical.
    pub offset: Vector2<f64>,
    pub velocity: Vector2<f64>,
}

impl StabilizerState {
    /// Per-axis spring energy `(k·x² + ẋ²)/2`.
    pub fn energy(&self, k: f64) -> Vector2<f64> {
        self.offset.zip_map(&self.velocity, |x, v| 0.5 * (k * x * x + v * v))
    }
}

/// Semi-implicit Euler step of `ẍ = −k·x − c·ẋ − a·px_per_m`, then clamp.
pub fn stabilize_step(
    state: &StabilizerState,
    accel: Vector2<f64>,
    dt: f64,
    cfg: &StabilizerConfig,
) -> Result<StabilizerState, StabilizerError> {
    if !(dt > 0.0) {
        return Err(StabilizerError::NonpositiveDt(dt));
    }
    let mut next = *state;
    for i in 0..2 {
        let x = state.offset[i];
        let v = state.velocity[i] + (-cfg.k * x - cfg.c * state.velocity[i] - accel[i] * cfg.px_per_m) * dt;
        let x = x + v * dt;
        if x.abs() > cfg.max_offset_px {
            next.offset[i] = cfg.max_offset_px.copysign(x);
            next.velocity[i] = 0.0;
        } else {
            next.offset[i] = x;
            next.velocity[i] = v;
        }
    }
    Ok(next)
}

/// RMS apparent motion, px: `display·px_per_m + offset`, mean removed.
pub fn residual_motion(display_m: &[f64], offset_px: &[f64], px_per_m: f64) -> Result<f64, StabilizerError> {
    if display_m.len() != offset_px.len() {
        return Err(StabilizerError::LengthMismatch(display_m.len(), offset_px.len()));
    }
    if display_m.is_empty() {
        return Ok(0.0);
    }
    let apparent: Vec<f64> = display_m.iter().zip(offset_px).map(|(d, o)| d * px_per_m + o).collect();
    Ok(rms_about_mean(&apparent))
}

pub fn rms_about_mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt()
}

/// Stabilizer with its input delay line, stepped at the physics rate.
#[derive(Debug, Clone)]
pub struct Stabilizer {
    cfg: StabilizerConfig,
    state: StabilizerState,
    pending: VecDeque<Vector2<f64>>,
    delay_steps: usize,
}

impl Stabilizer {
    pub fn new(cfg: StabilizerConfig, dt: f64) -> Self {
        let delay_steps = (cfg.delay_s / dt).round() as usize;
        Self {
            cfg,
            state: StabilizerState::default(),
            pending: VecDeque::from(vec![Vector2::zeros(); delay_steps]),
            delay_steps,
        }
    }

    pub fn config(&self) -> &StabilizerConfig {
        &self.cfg
    }

    pub fn state(&self) -> &StabilizerState {
        &self.state
    }

    /// New gains take effect immediately; the delay line is resized.
    pub fn set_config(&mut self, cfg: StabilizerConfig, dt: f64) {
        let delay_steps = (cfg.delay_s / dt).round() as usize;
        self.pending.resize(delay_steps, Vector2::zeros());
        self.delay_steps = delay_steps;
        self.cfg = cfg;
    }

    pub fn delay_steps(&self) -> usize {
        self.delay_steps
    }

    /// Feeds the true display acceleration; the spring sees it `delay_s` later.
    pub fn step(&mut self, accel: Vector2<f64>, dt: f64) -> Result<StabilizerState, StabilizerError> {
        self.pending.push_back(accel);
        let sensed = self.pending.pop_front().unwrap_or_default();
        self.state = stabilize_step(&self.state, sensed, dt, &self.cfg)?;
        Ok(self.state)
    }
}

/// Residual/unstabilized RMS ratio for a sinusoidal vertical display motion.
pub fn sinusoid_ratio(cfg: &StabilizerConfig, freq_hz: f64, amplitude_m: f64, dt: f64, seconds: f64) -> f64 {
    let w = 2.0 * std::f64::consts::PI * freq_hz;
    let mut stab = Stabilizer::new(*cfg, dt);
    let n = (seconds / dt).round() as usize;
    let mut display = Vec::with_capacity(n);
    let mut offsets = Vec::with_capacity(n);
    for i in 0..n {
        let t = i as f64 * dt;
        // Starts from rest so the acceleration alone describes the motion.
        let a = amplitude_m * w * w * (w * t).cos();
        let s = stab.step(Vector2::new(0.0, a), dt).expect("dt > 0");
        display.push(amplitude_m * (1.0 - (w * t).cos()));
        offsets.push(s.offset.y);
    }
    // Skip the first half to let transients decay.
    let half = n / 2;
    let zeros = vec![0.0; n - half];
    let base = residual_motion(&display[half..], &zeros, cfg.px_per_m).unwrap();
    let resid = residual_motion(&display[half..], &offsets[half..], cfg.px_per_m).unwrap();
    resid / base
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    const DT: f64 = 0.001;

    #[test]
    fn rest_stays_at_rest() {
        let cfg = StabilizerConfig::default();
        let mut s = StabilizerState::default();
        for _ in 0..10_000 {
            s = stabilize_step(&s, Vector2::zeros(), DT, &cfg).unwrap();
        }
        assert_eq!(s, StabilizerState::default());
    }

    #[test]
    fn constant_acceleration_settles_at_spring_statics() {
        let cfg = StabilizerConfig { k: 4.0, c: 4.0, max_offset_px: 1e6, ..Default::default() };
        let a = Vector2::new(0.002, -0.001);
        let mut s = StabilizerState::default();
        for _ in 0..30_000 {
            s = stabilize_step(&s, a, DT, &cfg).unwrap();
        }
        assert_abs_diff_eq!(s.offset, -a * cfg.px_per_m / cfg.k, epsilon = 1e-6);
    }

    #[test]
    fn nonpositive_dt_is_rejected() {
        let cfg = StabilizerConfig::default();
        assert_eq!(
            stabilize_step(&StabilizerState::default(), Vector2::zeros(), 0.0, &cfg),
            Err(StabilizerError::NonpositiveDt(0.0))
        );
    }

    #[test]
    fn clamp_zeroes_velocity() {
        let cfg = StabilizerConfig { max_offset_px: 10.0, ..Default::default() };
        let mut s = StabilizerState::default();
        for _ in 0..1000 {
            s = stabilize_step(&s, Vector2::new(1.0, -1.0), DT, &cfg).unwrap();
        }
        assert_eq!(s.offset, Vector2::new(-10.0, 10.0));
        assert_eq!(s.velocity, Vector2::zeros());
    }

    #[test]
    fn residual_without_stabilization_is_display_rms() {
        let display: Vec<f64> = (0..1000).map(|i| 0.005 * (i as f64 * 0.0126).sin()).collect();
        let zeros = vec![0.0; display.len()];
        let r = residual_motion(&display, &zeros, 17480.0).unwrap();
        assert_abs_diff_eq!(r, rms_about_mean(&display) * 17480.0, epsilon = 1e-9);
    }

    #[test]
    fn perfect_inverse_has_zero_residual() {
        let display: Vec<f64> = (0..1000).map(|i| 0.005 * (i as f64 * 0.0126).sin()).collect();
        let inverse: Vec<f64> = display.iter().map(|d| -d * 17480.0).collect();
        assert_abs_diff_eq!(residual_motion(&display, &inverse, 17480.0).unwrap(), 0.0, epsilon = 1e-9);
    }

    #[test]
    fn length_mismatch_is_an_error() {
        assert_eq!(residual_motion(&[0.0; 3], &[0.0; 2], 1.0), Err(StabilizerError::LengthMismatch(3, 2)));
    }

    #[test]
    fn delay_line_holds_input_back() {
        let cfg = StabilizerConfig { delay_s: 0.005, ..Default::default() };
        let mut stab = Stabilizer::new(cfg, DT);
        assert_eq!(stab.delay_steps(), 5);
        for _ in 0..5 {
            let s = stab.step(Vector2::new(0.0, 1.0), DT).unwrap();
            assert_eq!(s.offset.y, 0.0);
        }
        assert!(stab.step(Vector2::new(0.0, 1.0), DT).unwrap().offset.y < 0.0);
    }

    #[test]
    fn two_hertz_shake_is_halved_regression() {
        let ratio = sinusoid_ratio(&StabilizerConfig::default(), 2.0, 0.005, DT, 20.0);
        assert!(ratio < 0.5, "ratio {ratio}");
        assert_abs_diff_eq!(ratio, 0.22332227003018265, epsilon = 1e-9);
    }
}
