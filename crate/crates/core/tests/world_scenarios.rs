use approx::assert_abs_diff_eq;
use nalgebra::{Vector2, Vector3};
use pod_core::scenario::{GestureKind, PlantConfig, ScenarioConfig, ScriptEntry, ScriptEvent};
use pod_core::world::{plant_step, DroneState, World};
use proptest::prelude::*;
use rustfft::{num_complex::Complex64, FftPlanner};

fn quiet() -> ScenarioConfig {
    let mut c = ScenarioConfig::default();
    c.disturbance.sigma_m_s2 = [0.0; 3];
    c.features.anc = false;
    c
}

fn square_walk(seed: u64) -> ScenarioConfig {
    let mut c = ScenarioConfig { name: "square_walk".into(), seed, duration: 60.0, ..Default::default() };
    for _ in 0..3 {
        for (x, y) in [(2.0, 0.0), (2.0, -2.0), (0.0, -2.0), (0.0, 0.0)] {
            c.script.push(ScriptEntry { t: 2.0, event: ScriptEvent::Waypoint { x, y, speed: Some(0.5) } });
        }
    }
    c
}

fn hover(seed: u64) -> ScenarioConfig {
    let mut c = ScenarioConfig { name: "hover".into(), seed, duration: 30.0, ..Default::default() };
    c.features.anc = false;
    c
}

fn run(cfg: ScenarioConfig) -> World {
    let mut w = World::new(cfg).unwrap();
    w.run_to_end();
    w
}

#[test]
fn plant_at_rest_stays_at_rest() {
    let s = DroneState { position: Vector3::new(1.0, 2.0, 3.0), velocity: Vector3::zeros(), yaw: 0.4, yaw_rate: 0.0 };
    let next = plant_step(&s, Vector3::zeros(), 0.0, Vector3::zeros(), 0.001, &PlantConfig::default());
    assert_eq!(next, s);
}

#[test]
fn plant_velocity_follows_a_first_order_lag() {
    let p = PlantConfig::default();
    let dt = 0.001;
    let mut s = DroneState { position: Vector3::new(0.0, 1.0, 0.0), velocity: Vector3::zeros(), yaw: 0.0, yaw_rate: 0.0 };
    let n = (p.velocity_tau_s / dt).round() as usize;
    for _ in 0..n {
        s = plant_step(&s, Vector3::new(1.0, 0.0, 0.0), 0.0, Vector3::zeros(), dt, &p);
    }
    assert_abs_diff_eq!(s.velocity.x, 1.0 - (-1.0f64).exp(), epsilon = 2e-3);
    for _ in 0..10 * n {
        s = plant_step(&s, Vector3::new(1.0, 0.0, 0.0), 0.0, Vector3::zeros(), dt, &p);
    }
    assert_abs_diff_eq!(s.velocity.x, 1.0, epsilon = 1e-4);
}

proptest! {
    #[test]
    fn plant_never_goes_below_ground(
        y in 0.0f64..2.0,
        vy in -20.0f64..5.0,
        cmd in -5.0f64..5.0,
        dist in -50.0f64..50.0,
        steps in 1usize..500,
    ) {
        let p = PlantConfig::default();
        let mut s = DroneState { position: Vector3::new(0.0, y, 0.0), velocity: Vector3::new(0.0, vy, 0.0), yaw: 0.0, yaw_rate: 0.0 };
        for _ in 0..steps {
            s = plant_step(&s, Vector3::new(0.0, cmd, 0.0), 0.0, Vector3::new(0.0, dist, 0.0), 0.001, &p);
            prop_assert!(s.position.y >= 0.0);
        }
    }
}

#[test]
fn human_without_waypoints_stays_put() {
    let mut w = World::new(quiet()).unwrap();
    let start = w.human().position;
    w.run_for(3.0);
    assert_eq!(w.human().position, start);
}

#[test]
fn one_metre_waypoint_at_half_speed_takes_two_seconds() {
    let mut c = quiet();
    c.script.push(ScriptEntry { t: 0.0, event: ScriptEvent::Waypoint { x: 1.0, y: 0.0, speed: Some(0.5) } });
    let mut w = World::new(c).unwrap();
    let dt = w.dt();
    while w.human().position != Vector2::new(1.0, 0.0) {
        w.tick();
        assert!(w.time() < 3.0);
    }
    assert!((w.time() - 2.0).abs() <= dt + 1e-9, "arrived at {}", w.time());
}

#[test]
fn scripted_gesture_covers_exactly_its_interval() {
    let mut c = quiet();
    c.script.push(ScriptEntry { t: 3.0, event: ScriptEvent::Gesture { kind: GestureKind::Summon, duration_s: Some(0.5) } });
    let mut w = World::new(c).unwrap();
    for tick in 0..4000u64 {
        w.tick();
        assert_eq!(w.human().right_wrist_raised, (3000..3500).contains(&tick), "tick {tick}");
        assert!(!w.human().left_wrist_raised);
    }
}

#[test]
fn modules_run_at_their_rates() {
    let mut w = World::new(ScenarioConfig::default()).unwrap();
    w.run_for(1.0);
    let c = w.counters();
    assert_eq!(c.physics, 1000);
    assert_eq!(c.vision, 50);
    assert_eq!(c.detector, 13);
    assert_eq!(c.controller, 50);
    assert_eq!(c.firmware, 100);
    assert_eq!(c.stabilizer, 1000);
    // 4096-sample windows at 48 kHz end at 85.3 ms multiples.
    assert_eq!(c.anc_windows, 11);
}

#[test]
fn same_seed_same_telemetry() {
    let cfg = ScenarioConfig { duration: 15.0, ..square_walk(7) };
    let a = run(cfg.clone());
    let b = run(cfg.clone());
    assert_eq!(a.telemetry(), b.telemetry());
    assert_eq!(a.summary(), b.summary());
    let c = run(ScenarioConfig { seed: 8, ..cfg });
    assert_ne!(a.telemetry(), c.telemetry());
}

/// Fraction of detrended signal power below `f` Hz.
fn power_below(x: &[f64], fs: f64, f: f64) -> f64 {
    let mean = x.iter().sum::<f64>() / x.len() as f64;
    let mut data: Vec<Complex64> = x.iter().map(|v| Complex64::new(v - mean, 0.0)).collect();
    FftPlanner::new().plan_fft_forward(data.len()).process(&mut data);
    let n = data.len();
    let power: Vec<(f64, f64)> = (1..n / 2).map(|k| (k as f64 * fs / n as f64, data[k].norm_sqr())).collect();
    let total: f64 = power.iter().map(|p| p.1).sum();
    power.iter().filter(|p| p.0 < f).map(|p| p.1).sum::<f64>() / total
}

#[test]
fn hover_jitter_is_millimetre_scale_and_low_frequency() {
    let w = run(hover(42));
    let ys: Vec<f64> = w.telemetry().iter().map(|r| r.drone_up).collect();
    let mean = ys.iter().sum::<f64>() / ys.len() as f64;
    let rms = (ys.iter().map(|y| (y - mean).powi(2)).sum::<f64>() / ys.len() as f64).sqrt();
    assert!((0.002..=0.010).contains(&rms), "vertical RMS {rms}");
    assert_abs_diff_eq!(rms, HOVER_RMS_M, epsilon = 1e-12);
    let low = power_below(&ys, 50.0, 5.0);
    assert!(low > 0.5, "fraction below 5 Hz: {low}");
}

const HOVER_RMS_M: f64 = 0.004253972051980922;

#[test]
fn square_walk_is_followed_closely() {
    let w = run(square_walk(42));
    let s = w.summary();
    assert!(s.follow.mean_abs_distance_error_m < 0.10, "{:?}", s.follow);
    assert!(s.follow.in_frame_fraction >= 0.99, "{:?}", s.follow);
    assert!(s.follow.frames > 2500, "{:?}", s.follow);
    assert_abs_diff_eq!(s.follow.mean_abs_distance_error_m, SQUARE_WALK_MEAN_M, epsilon = 1e-12);
    assert!(s.faults.is_empty(), "{:?}", s.faults);
}

const SQUARE_WALK_MEAN_M: f64 = 0.06133390731085174;

#[test]
fn other_seeds_follow_too() {
    for seed in [1, 2, 3] {
        let s = run(square_walk(seed)).summary();
        assert!(s.follow.mean_abs_distance_error_m < 0.10, "seed {seed}: {:?}", s.follow);
        assert!(s.follow.in_frame_fraction >= 0.99, "seed {seed}: {:?}", s.follow);
    }
}

#[test]
fn estimates_average_to_the_truth_at_home() {
    let mut c = quiet();
    c.duration = 20.0;
    let w = run(c);
    let rows: Vec<_> = w.telemetry().iter().filter(|r| r.t >= 5.0).collect();
    let est: Vec<_> = rows.iter().filter_map(|r| Some((r.est_tau_deg?, r.est_distance_m?))).collect();
    assert!(est.len() as f64 > 0.95 * rows.len() as f64);
    let n = est.len() as f64;
    let tau = est.iter().map(|e| e.0).sum::<f64>() / n;
    let d = est.iter().map(|e| e.1).sum::<f64>() / n;
    let true_tau = rows.iter().map(|r| r.true_tau_deg).sum::<f64>() / rows.len() as f64;
    let true_d = rows.iter().map(|r| r.true_distance_m).sum::<f64>() / rows.len() as f64;
    assert!((tau - true_tau).abs() < 1.0, "tau {tau} vs {true_tau}");
    assert!((d - true_d).abs() < 0.01 * true_d, "D {d} vs {true_d}");
}
