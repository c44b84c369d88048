//! Feedback active noise cancellation of the loudest rotor tone.
//!
//! The rotor noise is modelled at the receiver (the user's ear) as a sum of
//! tones plus high-passed wideband noise. A single speaker on the drone
//! emits an anti-tone that reaches the receiver after a pure propagation
//! delay with 1/r decay. Amplitude and phase of the anti-tone are adapted by
//! pattern search on the mean-square pressure seen by the feedback
//! microphone next to the ear.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rustfft::{num_complex::Complex64, FftPlanner};
use serde::{Deserialize, Serialize};
use std::f64::consts::{PI, TAU};

/// Reference pressure for dB SPL.
pub const P_REF: f64 = 20e-6;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum AncError {
    #[error("sample rate {fs} Hz cannot represent a {freq} Hz tone")]
    AliasingRisk { fs: f64, freq: f64 },
    #[error("buffer of {got} samples is shorter than the {need}-sample window")]
    BufferTooShort { got: usize, need: usize },
    #[error("empty buffer")]
    EmptyBuffer,
    #[error("no target tone selected")]
    NoTarget,
    #[error("invalid ANC config: {0}")]
    InvalidConfig(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Tone {
    pub frequency_hz: f64,
    pub amplitude_pa: f64,
    #[serde(default)]
    pub phase_rad: f64,
    /// Relative linear frequency drift per second.
    #[serde(default)]
    pub drift_per_s: f64,
}

impl Tone {
    pub fn new(frequency_hz: f64, amplitude_pa: f64, phase_rad: f64) -> Self {
        Self { frequency_hz, amplitude_pa, phase_rad, drift_per_s: 0.0 }
    }

    pub fn frequency_at(&self, t: f64) -> f64 {
        self.frequency_hz * (1.0 + self.drift_per_s * t)
    }

    fn phase_at(&self, t: f64) -> f64 {
        self.phase_rad + TAU * self.frequency_hz * (t + 0.5 * self.drift_per_s * t * t)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Wideband {
    /// RMS pressure of the wideband component.
    pub std_pa: f64,
    /// Content is flat above this frequency and absent below it.
    pub cutoff_hz: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSpectrum {
    pub tones: Vec<Tone>,
    pub wideband: Wideband,
}

impl Default for NoiseSpectrum {
    /// Constructed stand-in for a small quadrotor: a 180 Hz blade-pass tone
    /// and four harmonics plus a wideband floor above 6 kHz, scaled to about
    /// 73 dBA with the fundamental carrying half of the A-weighted power.
    fn default() -> Self {
        let fundamental = 0.35359215;
        let tones = [1.0, 0.3, 0.15, 0.1, 0.06]
            .iter()
            .enumerate()
            .map(|(i, rel)| Tone::new(180.0 * (i + 1) as f64, fundamental * rel, 0.0))
            .collect();
        Self { tones, wideband: Wideband { std_pa: 0.05394802, cutoff_hz: 6000.0 } }
    }
}

impl NoiseSpectrum {
    pub fn silent() -> Self {
        Self { tones: Vec::new(), wideband: Wideband { std_pa: 0.0, cutoff_hz: 6000.0 } }
    }

    pub fn validate(&self) -> Result<(), AncError> {
        if self.tones.iter().any(|t| !(t.frequency_hz > 0.0) || !(t.amplitude_pa >= 0.0)) {
            return Err(AncError::InvalidConfig("tone frequencies must be > 0 and amplitudes >= 0"));
        }
        if self.tones.windows(2).any(|w| w[0].frequency_hz > w[1].frequency_hz) {
            return Err(AncError::InvalidConfig("tones must be sorted by frequency"));
        }
        if !(self.wideband.std_pa >= 0.0 && self.wideband.cutoff_hz >= 0.0) {
            return Err(AncError::InvalidConfig("wideband level and cutoff must be >= 0"));
        }
        Ok(())
    }

    /// Mean-square pressure implied by the component levels.
    pub fn analytic_power(&self) -> f64 {
        self.tones.iter().map(|t| 0.5 * t.amplitude_pa.powi(2)).sum::<f64>() + self.wideband.std_pa.powi(2)
    }

    pub fn loudest(&self) -> Option<&Tone> {
        self.tones.iter().max_by(|a, b| a.amplitude_pa.total_cmp(&b.amplitude_pa))
    }
}

/// IEC 61672 A-weighting, dB.
pub fn a_weighting_db(f: f64) -> f64 {
    if f <= 0.0 {
        return f64::NEG_INFINITY;
    }
    let f2 = f * f;
    let ra = 12194f64.powi(2) * f2 * f2
        / ((f2 + 20.6f64.powi(2))
            * ((f2 + 107.7f64.powi(2)) * (f2 + 737.9f64.powi(2))).sqrt()
            * (f2 + 12194f64.powi(2)));
    20.0 * ra.log10() + 2.0
}

fn spectrum(buffer: &[f64]) -> Vec<Complex64> {
    let mut data: Vec<Complex64> = buffer.iter().map(|&x| Complex64::new(x, 0.0)).collect();
    FftPlanner::new().plan_fft_forward(data.len()).process(&mut data);
    data
}

fn bin_freq(k: usize, n: usize, fs: f64) -> f64 {
    k.min(n - k) as f64 * fs / n as f64
}

pub fn db_spl(mean_square: f64) -> f64 {
    10.0 * (mean_square / (P_REF * P_REF)).log10()
}

/// Unweighted level of a buffer, dB SPL.
pub fn level_db(buffer: &[f64]) -> Result<f64, AncError> {
    if buffer.is_empty() {
        return Err(AncError::EmptyBuffer);
    }
    Ok(db_spl(mean_square(buffer)))
}

pub fn mean_square(buffer: &[f64]) -> f64 {
    buffer.iter().map(|x| x * x).sum::<f64>() / buffer.len().max(1) as f64
}

/// A-weighted level, dBA, applied bin by bin in the frequency domain.
pub fn a_weighted_level(buffer: &[f64], sample_rate: f64) -> Result<f64, AncError> {
    if buffer.is_empty() {
        return Err(AncError::EmptyBuffer);
    }
    let n = buffer.len();
    let spec = spectrum(buffer);
    let weighted: f64 = spec
        .iter()
        .enumerate()
        .skip(1)
        .map(|(k, z)| z.norm_sqr() * 10f64.powf(a_weighting_db(bin_freq(k, n, sample_rate)) / 10.0))
        .sum();
    Ok(db_spl(weighted / (n as f64 * n as f64)))
}

/// Samples `[start, start + n)` of the noise at the receiver. Tones are
/// referenced to absolute time so consecutive windows join seamlessly.
pub fn synthesize_window<R: Rng + ?Sized>(
    spec: &NoiseSpectrum,
    start_sample: u64,
    n: usize,
    sample_rate: f64,
    rng: &mut R,
) -> Result<Vec<f64>, AncError> {
    if let Some(t) = spec.tones.iter().find(|t| 2.0 * t.frequency_hz >= sample_rate) {
        return Err(AncError::AliasingRisk { fs: sample_rate, freq: t.frequency_hz });
    }
    let mut out = vec![0.0; n];
    for tone in spec.tones.iter().filter(|t| t.amplitude_pa > 0.0) {
        for (i, x) in out.iter_mut().enumerate() {
            let t = (start_sample + i as u64) as f64 / sample_rate;
            *x += tone.amplitude_pa * tone.phase_at(t).cos();
        }
    }
    if spec.wideband.std_pa > 0.0 && n > 0 {
        for (x, w) in out.iter_mut().zip(highpassed_noise(n, sample_rate, &spec.wideband, rng)) {
            *x += w;
        }
    }
    Ok(out)
}

fn highpassed_noise<R: Rng + ?Sized>(n: usize, fs: f64, wb: &Wideband, rng: &mut R) -> Vec<f64> {
    let mut data: Vec<Complex64> = (0..n).map(|_| Complex64::new(StandardNormal.sample(rng), 0.0)).collect();
    let mut planner = FftPlanner::new();
    planner.plan_fft_forward(n).process(&mut data);
    let mut kept = 0usize;
    for (k, z) in data.iter_mut().enumerate() {
        if bin_freq(k, n, fs) < wb.cutoff_hz {
            *z = Complex64::new(0.0, 0.0);
        } else {
            kept += 1;
        }
    }
    planner.plan_fft_inverse(n).process(&mut data);
    let scale = wb.std_pa / n as f64 * (n as f64 / kept.max(1) as f64).sqrt();
    data.iter().map(|z| z.re * scale).collect()
}

/// Noise buffer of `duration_s` starting at t = 0.
pub fn synthesize_noise<R: Rng + ?Sized>(
    spec: &NoiseSpectrum,
    duration_s: f64,
    sample_rate: f64,
    rng: &mut R,
) -> Result<Vec<f64>, AncError> {
    let n = (duration_s * sample_rate).round() as usize;
    synthesize_window(spec, 0, n, sample_rate, rng)
}

fn hann(n: usize) -> Vec<f64> {
    (0..n).map(|i| 0.5 - 0.5 * (TAU * i as f64 / n as f64).cos()).collect()
}

/// Loudest spectral peak over the first `window` samples, optionally
/// restricted to `[lo, hi]` Hz. Frequency is refined by a parabola through
/// the log magnitudes of the peak bin and its neighbours; the amplitude is
/// the projection onto that frequency.
pub fn strongest_tone_in(
    buffer: &[f64],
    sample_rate: f64,
    window: usize,
    band: Option<(f64, f64)>,
) -> Result<(f64, f64), AncError> {
    if buffer.len() < window || window < 4 {
        return Err(AncError::BufferTooShort { got: buffer.len(), need: window.max(4) });
    }
    let w = hann(window);
    let windowed: Vec<f64> = buffer[..window].iter().zip(&w).map(|(x, w)| x * w).collect();
    let mags: Vec<f64> = spectrum(&windowed)[..window / 2 + 1].iter().map(|z| z.norm()).collect();
    let df = sample_rate / window as f64;
    let (lo, hi) = match band {
        Some((lo, hi)) => (((lo / df).floor() as usize).max(1), ((hi / df).ceil() as usize).min(window / 2 - 1)),
        None => (1, window / 2 - 1),
    };
    let k = (lo..=hi.max(lo)).max_by(|&a, &b| mags[a].total_cmp(&mags[b])).unwrap_or(1);
    let (a, b, c) = (mags[k - 1].max(1e-300).ln(), mags[k].max(1e-300).ln(), mags[k + 1].max(1e-300).ln());
    let denom = a - 2.0 * b + c;
    let d = if denom.abs() > 1e-300 { (0.5 * (a - c) / denom).clamp(-0.5, 0.5) } else { 0.0 };
    let freq = (k as f64 + d) * df;
    Ok((freq, tone_phasor(&buffer[..window], sample_rate, freq, 0.0).norm()))
}

pub fn strongest_tone(buffer: &[f64], sample_rate: f64) -> Result<(f64, f64), AncError> {
    strongest_tone_in(buffer, sample_rate, DEFAULT_WINDOW, None)
}

pub const DEFAULT_WINDOW: usize = 4096;

/// Complex amplitude `A·e^{iφ}` of the component `A·cos(2πf·t + φ)` in a
/// buffer whose first sample is at `t0`, by Hann-windowed projection.
pub fn tone_phasor(buffer: &[f64], sample_rate: f64, freq: f64, t0: f64) -> Complex64 {
    let w = hann(buffer.len());
    let sum: Complex64 = buffer
        .iter()
        .zip(&w)
        .enumerate()
        .map(|(i, (x, w))| {
            let t = t0 + i as f64 / sample_rate;
            Complex64::from_polar(x * w, -TAU * freq * t)
        })
        .sum();
    sum * 2.0 / w.iter().sum::<f64>()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AncConfig {
    pub sample_rate_hz: f64,
    pub window: usize,
    /// Speaker to feedback microphone distance.
    pub receiver_distance_m: f64,
    pub speed_of_sound_m_s: f64,
    /// Relative MS improvement below which an iteration counts as converged.
    pub converge_tol: f64,
    /// Re-detection is limited to this fraction around the current target.
    pub search_band: f64,
}

impl Default for AncConfig {
    fn default() -> Self {
        Self {
            sample_rate_hz: 48_000.0,
            window: DEFAULT_WINDOW,
            receiver_distance_m: 0.6,
            speed_of_sound_m_s: 343.0,
            converge_tol: 1e-4,
            search_band: 0.05,
        }
    }
}

impl AncConfig {
    pub fn validate(&self) -> Result<(), AncError> {
        if !(self.sample_rate_hz > 0.0 && self.receiver_distance_m > 0.0 && self.speed_of_sound_m_s > 0.0) {
            return Err(AncError::InvalidConfig("rates and distances must be > 0"));
        }
        if self.window < 16 {
            return Err(AncError::InvalidConfig("window must be >= 16 samples"));
        }
        if !(self.converge_tol > 0.0 && self.search_band > 0.0) {
            return Err(AncError::InvalidConfig("converge_tol and search_band must be > 0"));
        }
        Ok(())
    }

    pub fn window_seconds(&self) -> f64 {
        self.window as f64 / self.sample_rate_hz
    }

    fn delay_s(&self) -> f64 {
        self.receiver_distance_m / self.speed_of_sound_m_s
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AncState {
    pub target_hz: Option<f64>,
    /// Speaker drive amplitude, Pa at 1 m.
    pub amplitude: f64,
    /// Speaker drive phase, wrapped to `[0, 2π)`.
    pub phase: f64,
    pub converged: bool,
    pub phase_step: f64,
    pub amplitude_step: f64,
    /// Largest amplitude step, set from the detected tone level.
    pub amplitude_step_max: f64,
    pub iterations: u64,
}

impl Default for AncState {
    fn default() -> Self {
        Self {
            target_hz: None,
            amplitude: 0.0,
            phase: 0.0,
            converged: false,
            phase_step: PHASE_STEP_MAX,
            amplitude_step: 0.0,
            amplitude_step_max: 0.0,
            iterations: 0,
        }
    }
}

const PHASE_STEP_MAX: f64 = PI / 4.0;
const PHASE_STEP_MIN: f64 = 1e-6;

fn wrap(phase: f64) -> f64 {
    let p = phase.rem_euclid(TAU);
    if p >= TAU {
        0.0
    } else {
        p
    }
}

impl AncState {
    /// Starts cancelling `freq`, whose receiver phasor is `amp·e^{iφ}` at
    /// absolute time zero: zero drive, phase opposite the tone.
    pub fn targeting(freq: f64, amp: f64, phase: f64, cfg: &AncConfig) -> Self {
        let amp_step = amp * cfg.receiver_distance_m;
        Self {
            target_hz: Some(freq),
            amplitude: 0.0,
            phase: wrap(phase + PI + TAU * freq * cfg.delay_s()),
            converged: false,
            phase_step: PHASE_STEP_MAX,
            amplitude_step: amp_step,
            amplitude_step_max: amp_step,
            iterations: 0,
        }
    }

    /// Moves the target to `freq` while keeping the emitted waveform phase
    /// continuous at absolute time `t`.
    pub fn retune(&mut self, freq: f64, t: f64, cfg: &AncConfig) {
        if let Some(old) = self.target_hz {
            self.phase = wrap(self.phase + TAU * (old - freq) * (t - cfg.delay_s()));
        }
        self.target_hz = Some(freq);
    }

    /// Anti-tone as heard at the receiver for samples `[start, start + n)`.
    pub fn render(&self, start_sample: u64, n: usize, cfg: &AncConfig) -> Vec<f64> {
        render_anti(self.target_hz, self.amplitude, self.phase, start_sample, n, cfg)
    }
}

fn render_anti(target: Option<f64>, amplitude: f64, phase: f64, start: u64, n: usize, cfg: &AncConfig) -> Vec<f64> {
    let Some(f) = target.filter(|_| amplitude != 0.0) else {
        return vec![0.0; n];
    };
    let gain = amplitude / cfg.receiver_distance_m;
    let delay = cfg.delay_s();
    (0..n)
        .map(|i| {
            let t = (start + i as u64) as f64 / cfg.sample_rate_hz - delay;
            gain * (TAU * f * t + phase).cos()
        })
        .collect()
}

/// One phase-then-amplitude pattern-search iteration on a feedback window
/// recorded with the current anti-tone playing. Candidates are scored on
/// the same window by swapping the known anti-tone contribution.
pub fn adapt_step(state: &AncState, feedback: &[f64], start_sample: u64, cfg: &AncConfig) -> Result<AncState, AncError> {
    if state.target_hz.is_none() {
        return Err(AncError::NoTarget);
    }
    let n = feedback.len();
    let current = state.render(start_sample, n, cfg);
    let primary: Vec<f64> = feedback.iter().zip(&current).map(|(y, a)| y - a).collect();
    let score = |amp: f64, ph: f64| {
        let anti = render_anti(state.target_hz, amp, ph, start_sample, n, cfg);
        primary.iter().zip(&anti).map(|(p, a)| (p + a).powi(2)).sum::<f64>() / n.max(1) as f64
    };

    let mut next = *state;
    let start_ms = score(state.amplitude, state.phase);
    let mut best = start_ms;

    let mut improved = false;
    for cand in [wrap(next.phase + next.phase_step), wrap(next.phase - next.phase_step)] {
        let ms = score(next.amplitude, cand);
        if ms < best {
            best = ms;
            next.phase = cand;
            improved = true;
        }
    }
    if !improved {
        next.phase_step = (next.phase_step * 0.5).max(PHASE_STEP_MIN);
    }

    let amp_min = next.amplitude_step_max * 1e-7;
    let mut improved = false;
    for cand in [next.amplitude + next.amplitude_step, (next.amplitude - next.amplitude_step).max(0.0)] {
        let ms = score(cand, next.phase);
        if ms < best {
            best = ms;
            next.amplitude = cand;
            improved = true;
        }
    }
    if !improved {
        next.amplitude_step = (next.amplitude_step * 0.5).max(amp_min);
    }

    next.converged = start_ms <= 0.0 || (start_ms - best) / start_ms < cfg.converge_tol;
    next.iterations += 1;
    Ok(next)
}

/// Outcome of one processed window.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WindowReport {
    pub index: u64,
    pub start_s: f64,
    pub noise_dba: f64,
    pub residual_dba: f64,
    pub target_hz: Option<f64>,
    /// Attenuation at the target frequency, dB.
    pub target_attenuation_db: f64,
    pub converged: bool,
}

/// Closed loop of noise source, anti-tone and adaptation, one window at a
/// time. `enabled = false` keeps the speaker silent but still reports levels.
#[derive(Debug, Clone)]
pub struct AncLoop {
    pub cfg: AncConfig,
    pub spectrum: NoiseSpectrum,
    pub state: AncState,
    pub enabled: bool,
    next_window: u64,
    /// Frequency and phase of the primary tone measured in the last window.
    last_phase: Option<(f64, f64)>,
    /// Refined frequency of the last window, for the chirp-rate estimate.
    last_freq: Option<f64>,
}

impl AncLoop {
    pub fn new(cfg: AncConfig, spectrum: NoiseSpectrum) -> Self {
        Self { cfg, spectrum, state: AncState::default(), enabled: true, next_window: 0, last_phase: None, last_freq: None }
    }

    pub fn windows_processed(&self) -> u64 {
        self.next_window
    }

    /// Start time of the next window, seconds.
    pub fn next_window_start(&self) -> f64 {
        self.next_window as f64 * self.cfg.window_seconds()
    }

    /// Phase-vocoder refinement: a frequency error δ rotates the phasor of
    /// consecutive windows by 2π·δ·T. Falls back to the spectral peak when
    /// the two disagree by more than one bin.
    fn refine_frequency(&self, primary: &[f64], t0: f64, coarse: f64) -> f64 {
        let Some((f_prev, arg_prev)) = self.last_phase else {
            return coarse;
        };
        let arg = tone_phasor(primary, self.cfg.sample_rate_hz, f_prev, t0).arg();
        let dphi = (arg - arg_prev + PI).rem_euclid(TAU) - PI;
        let refined = f_prev + dphi / (TAU * self.cfg.window_seconds());
        let bin = self.cfg.sample_rate_hz / self.cfg.window as f64;
        if (refined - coarse).abs() < bin {
            refined
        } else {
            coarse
        }
    }

    pub fn step<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Result<WindowReport, AncError> {
        let n = self.cfg.window;
        let fs = self.cfg.sample_rate_hz;
        let index = self.next_window;
        let start = index * n as u64;
        let t0 = start as f64 / fs;
        self.next_window += 1;

        let noise = synthesize_window(&self.spectrum, start, n, fs, rng)?;
        let anti = if self.enabled { self.state.render(start, n, &self.cfg) } else { vec![0.0; n] };
        let feedback: Vec<f64> = noise.iter().zip(&anti).map(|(x, a)| x + a).collect();

        let attenuation = |freq: f64| {
            let before = tone_phasor(&noise, fs, freq, t0).norm();
            let after = tone_phasor(&feedback, fs, freq, t0).norm();
            20.0 * (before / after.max(1e-300)).log10()
        };
        let report_target = self.state.target_hz;
        let report = WindowReport {
            index,
            start_s: t0,
            noise_dba: a_weighted_level(&noise, fs)?,
            residual_dba: a_weighted_level(&feedback, fs)?,
            target_hz: report_target,
            target_attenuation_db: report_target.map_or(0.0, attenuation),
            converged: self.state.converged,
        };

        if self.enabled {
            // The emitted anti-tone is known, so the primary noise is recovered
            // from the feedback signal for detection.
            let primary: Vec<f64> = feedback.iter().zip(&anti).map(|(y, a)| y - a).collect();
            match self.state.target_hz {
                None => {
                    let (f, _) = strongest_tone_in(&primary, fs, n, None)?;
                    let z = tone_phasor(&primary, fs, f, t0);
                    self.state = AncState::targeting(f, z.norm(), z.arg(), &self.cfg);
                    self.last_phase = Some((f, z.arg()));
                }
                Some(f) => {
                    self.state = adapt_step(&self.state, &feedback, start, &self.cfg)?;
                    let band = (f * (1.0 - self.cfg.search_band), f * (1.0 + self.cfg.search_band));
                    let (coarse, _) = strongest_tone_in(&primary, fs, n, Some(band))?;
                    let measured = self.refine_frequency(&primary, t0, coarse);
                    let period = self.cfg.window_seconds();
                    let rate = self.last_freq.map_or(0.0, |prev| (measured - prev) / period);
                    self.last_freq = Some(measured);
                    self.last_phase = Some((measured, tone_phasor(&primary, fs, measured, t0).arg()));
                    // The fitted phase is best at the window centre; continue from
                    // there at the frequency predicted for the next window.
                    self.state.retune(measured + rate * period, t0 + 0.5 * period, &self.cfg);
                }
            }
        }
        Ok(report)
    }
}
