//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit on any
//! failure. Run with `cargo test -p pod-runner --test acceptance`.

use nalgebra::{Vector2, Vector3};
use pod_core::anc::*;
use pod_core::api::{CommandOutcome, MoveCommand, RejectReason};
use pod_core::behavior::{transition, Behavior, BehaviorConfig, BehaviorState, StepInput};
use pod_core::geometry::{estimate_pose, project, BodyLandmarks3D, BodyPose, BodyTemplate, CameraIntrinsics, UserModelParams};
use pod_core::scenario::{GestureKind, ScenarioConfig, ScriptEntry, ScriptEvent};
use pod_core::service::{ServiceOptions, SimulationService};
use pod_core::stabilizer::{stabilize_step, StabilizerConfig, StabilizerState};
use pod_core::vision::UserEvent;
use pod_core::world::{Input, TraceEntry, World};
use pod_runner::run::{load_scenario, read_trace, simulate, write_telemetry};
use pod_runner::sweep::{sweep, Grid, STABILIZER_TUNING_GRID};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::path::PathBuf;
use std::sync::{Arc, Barrier};
use std::time::{Duration, Instant};

type Outcome = Result<String, String>;

fn scenario(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../scenarios").join(name)
}

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn landmarks(user: &UserModelParams, tau: f64, eye_mid: Vector3<f64>) -> BodyLandmarks3D {
    BodyLandmarks3D::from_pose(
        user,
        &BodyTemplate::default(),
        &BodyPose { eye_mid, tau, right_wrist_raised: false, left_wrist_raised: false },
    )
}

fn geometry_round_trip() -> Outcome {
    let cam = CameraIntrinsics::default();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let start = Instant::now();
    let (mut worst_tau, mut worst_d) = (0.0f64, 0.0f64);
    for _ in 0..10_000 {
        let user = UserModelParams {
            eye_span: rng.random_range(0.055..0.072),
            shoulder_span: rng.random_range(0.33..0.46),
            plane_offset: rng.random_range(0.05..0.12),
        };
        let tau = rng.random_range(10f64..170.0).to_radians();
        let d = rng.random_range(0.3..2.0);
        let mid = Vector3::new(rng.random_range(-0.25..0.25) * d, rng.random_range(-0.2..0.2), d);
        let proj = project(&landmarks(&user, tau, mid), &cam).map_err(|e| e.to_string())?;
        let est = estimate_pose(&proj, &user, &cam).map_err(|e| e.to_string())?;
        worst_tau = worst_tau.max((est.tau - tau).abs());
        worst_d = worst_d.max((est.distance - d).abs());
    }
    let secs = start.elapsed().as_secs_f64();
    check(
        worst_tau < 1e-6 && worst_d < 1e-6 && secs < 5.0,
        format!("worst tau {worst_tau:.1e} rad, worst D {worst_d:.1e} m, {secs:.2} s"),
    )
}

fn geometry_noise() -> Outcome {
    let cam = CameraIntrinsics::default();
    let user = UserModelParams::default();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let n = 10_000;
    let mut ok = 0;
    let (mut tau_errs, mut d_errs) = (Vec::with_capacity(n), Vec::with_capacity(n));
    for _ in 0..n {
        let tau = rng.random_range(30f64..150.0).to_radians();
        let d = rng.random_range(0.3..1.0);
        let proj = project(&landmarks(&user, tau, Vector3::new(0.0, 0.0, d)), &cam).map_err(|e| e.to_string())?;
        let noisy =
            proj.map_points(&cam, |_, px| px + Vector2::new(rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5)));
        let est = estimate_pose(&noisy, &user, &cam).map_err(|e| e.to_string())?;
        let te = (est.tau - tau).abs().to_degrees();
        let de = (est.distance - d).abs() / d;
        if te <= 5.0 && de <= 0.05 {
            ok += 1;
        }
        tau_errs.push(te);
        d_errs.push(de);
    }
    tau_errs.sort_by(f64::total_cmp);
    d_errs.sort_by(f64::total_cmp);
    let p99 = n * 99 / 100 - 1;
    let rate = ok as f64 / n as f64;
    check(
        rate >= 0.99 && tau_errs[p99] < 0.4 && d_errs[p99] < 0.026,
        format!("within 5 deg / 5 %: {:.2} %, p99 tau {:.3} deg, p99 D {:.2} %", rate * 100.0, tau_errs[p99], d_errs[p99] * 100.0),
    )
}

fn behavior_fsm() -> Outcome {
    use BehaviorState::*;
    use UserEvent::*;
    let cfg = BehaviorConfig::default();
    let frontal = std::f64::consts::FRAC_PI_2;
    let turned = frontal + 0.7;
    let step = |s, e, tau, now, beyond| transition(s, StepInput { event: e, tau, now }, beyond, &cfg).0;
    let idle = Idle { entered_at: 0.0 };
    #[rustfmt::skip]
    let table = [
        (Home, Summoning, Home), (Home, Relieving, Await), (Home, MajorMotion, Home), (Home, MinorMotion, Home), (Home, Lost, Home),
        (idle, Summoning, Home), (idle, Relieving, Await), (idle, MajorMotion, idle), (idle, MinorMotion, idle), (idle, Lost, idle),
        (Await, Summoning, Home), (Await, Relieving, Await), (Await, MajorMotion, Await), (Await, MinorMotion, Await), (Await, Lost, Await),
    ];
    let mut mismatches = Vec::new();
    for (from, e, to) in table {
        let got = step(from, e, frontal, 1.0, false);
        if got != to {
            mismatches.push(format!("{from:?}+{e:?}->{got:?}"));
        }
    }
    for e in [MajorMotion, MinorMotion] {
        if step(Home, e, turned, 2.0, false) != (Idle { entered_at: 2.0 }) {
            mismatches.push(format!("Home+{e:?} turned"));
        }
        let idle = Idle { entered_at: 10.0 };
        if step(idle, e, frontal, 10.0 + cfg.t - 1e-9, false) != idle || step(idle, e, frontal, 10.0 + cfg.t, false) != Home {
            mismatches.push(format!("timer edge {e:?}"));
        }
    }

    let traces: Vec<Vec<(UserEvent, f64)>> = {
        let frames = 3000;
        let turns = (0..frames)
            .map(|i| (MinorMotion, if (i as f64 * 0.02) % 10.0 < 2.0 { turned } else { frontal }))
            .collect();
        let gestures = (0..frames)
            .map(|i| {
                let e = match i {
                    900..=904 => Relieving,
                    1500..=1504 => Summoning,
                    2200..=2210 => Lost,
                    _ => MajorMotion,
                };
                (e, if (i as f64 * 0.02) % 7.0 < 0.5 { turned } else { frontal })
            })
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut tau = frontal;
        let random = (0..frames)
            .map(|_| {
                tau = (tau + rng.random_range(-0.08..0.08)).clamp(0.3, 2.8);
                let e = match rng.random_range(0..100) {
                    0 => Summoning,
                    1 => Relieving,
                    2..=4 => Lost,
                    5..=40 => MajorMotion,
                    _ => MinorMotion,
                };
                (e, tau)
            })
            .collect();
        vec![turns, gestures, random]
    };
    let mut home_times = Vec::new();
    for trace in &traces {
        let times: Vec<f64> = [0.5, 5.0, 20.0]
            .iter()
            .map(|&t| {
                let mut b = Behavior::new(BehaviorConfig { t, ..cfg });
                let mut home = 0;
                for (i, (e, tau)) in trace.iter().enumerate() {
                    if b.step(*e, *tau, i as f64 * 0.02).map(|s| s.0) == Ok(Home) {
                        home += 1;
                    }
                }
                home as f64 * 0.02
            })
            .collect();
        if !(times[0] >= times[1] && times[1] >= times[2]) {
            mismatches.push(format!("laziness {times:?}"));
        }
        home_times.push(times);
    }
    check(mismatches.is_empty(), if mismatches.is_empty() { format!("15 pairs, timer edges, Home time {home_times:?}") } else { mismatches.join("; ") })
}

fn telemetry_bytes(world: &World) -> Result<Vec<u8>, String> {
    let mut buf = Vec::new();
    write_telemetry(world.telemetry(), &mut buf).map_err(|e| e.to_string())?;
    Ok(buf)
}

fn closed_loop_following() -> Outcome {
    let cfg = load_scenario(&scenario("square_walk.json")).map_err(|e| e.to_string())?;
    let start = Instant::now();
    let a = simulate(cfg.clone(), true).map_err(|e| e.to_string())?;
    let secs = start.elapsed().as_secs_f64();
    let b = simulate(cfg, true).map_err(|e| e.to_string())?;
    let s = a.summary();
    let identical = telemetry_bytes(&a)? == telemetry_bytes(&b)?;
    check(
        s.follow.mean_abs_distance_error_m < 0.10 && s.follow.in_frame_fraction >= 0.99 && identical && secs < 30.0 && s.faults.is_empty(),
        format!(
            "mean |dD| {:.4} m over {} frames, in frame {:.2} %, identical telemetry {identical}, {secs:.2} s for {} s",
            s.follow.mean_abs_distance_error_m,
            s.follow.frames,
            s.follow.in_frame_fraction * 100.0,
            s.sim_time_s
        ),
    )
}

fn stabilizer() -> Outcome {
    let hover = load_scenario(&scenario("hover.json")).map_err(|e| e.to_string())?;
    let grid: Grid = STABILIZER_TUNING_GRID.parse().map_err(|e: pod_runner::RunnerError| e.to_string())?;
    let rows = sweep(&hover, &grid).map_err(|e| e.to_string())?;
    let best = rows.iter().find(|r| r.best_stabilizer).ok_or("no stabilizer result")?;
    let ratio = best.stabilizer_ratio().ok_or("no ratio")?;
    let defaults = StabilizerConfig::default();
    let (k, c) = (best.params[0].1.as_f64().unwrap_or(f64::NAN), best.params[1].1.as_f64().unwrap_or(f64::NAN));
    let tuned_is_default = k == defaults.k && c == defaults.c;

    let dt = 0.001;
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut violations = 0;
    for _ in 0..500 {
        let k = rng.random_range(0.01..50.0);
        let cfg = StabilizerConfig { k, c: k * dt + rng.random_range(0.0..200.0), max_offset_px: rng.random_range(1.0..1000.0), ..defaults };
        let m = cfg.max_offset_px;
        let mut s = StabilizerState {
            offset: Vector2::new(rng.random_range(-m..m), rng.random_range(-m..m)),
            velocity: Vector2::new(rng.random_range(-5000.0..5000.0), rng.random_range(-5000.0..5000.0)),
        };
        let mut e = s.energy(k);
        for _ in 0..100 {
            s = stabilize_step(&s, Vector2::zeros(), dt, &cfg).map_err(|e| e.to_string())?;
            let next = s.energy(k);
            if next.x > e.x * (1.0 + 1e-12) + 1e-12 || next.y > e.y * (1.0 + 1e-12) + 1e-12 {
                violations += 1;
            }
            e = next;
        }
        let mut s = StabilizerState::default();
        for _ in 0..200 {
            let a = Vector2::new(rng.random_range(-100.0..100.0), rng.random_range(-100.0..100.0));
            s = stabilize_step(&s, a, dt, &cfg).map_err(|e| e.to_string())?;
            if s.offset.x.abs() > m || s.offset.y.abs() > m {
                violations += 1;
            }
        }
    }
    check(
        ratio <= 0.5 && tuned_is_default && violations == 0,
        format!("hover residual/unstabilized {ratio:.4} at k {k}, c {c} (defaults {tuned_is_default}), fuzz violations {violations}"),
    )
}

fn first_sustained(reports: &[WindowReport], db: f64) -> Option<usize> {
    (0..reports.len()).find(|&i| reports[i..].iter().all(|r| r.target_attenuation_db >= db))
}

fn anc() -> Outcome {
    let fs = 48_000.0;
    let run = |spec: NoiseSpectrum, windows: usize, seed: u64| -> Result<Vec<WindowReport>, String> {
        let mut l = AncLoop::new(AncConfig::default(), spec);
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        (0..windows).map(|_| l.step(&mut r).map_err(|e| e.to_string())).collect()
    };
    let tone = NoiseSpectrum {
        tones: vec![Tone { frequency_hz: 180.0, amplitude_pa: 0.35, phase_rad: 1.1, drift_per_s: 0.0 }],
        wideband: Wideband { std_pa: 0.054, cutoff_hz: 6000.0 },
    };
    let iterations = first_sustained(&run(tone, 300, 42)?, 20.0);

    let spec = NoiseSpectrum::default();
    let a_gain = |f: f64| 10f64.powf(a_weighting_db(f) / 10.0);
    let tones: Vec<f64> = spec.tones.iter().map(|t| 0.5 * t.amplitude_pa.powi(2) * a_gain(t.frequency_hz)).collect();
    let bins: Vec<f64> =
        (1..DEFAULT_WINDOW / 2).map(|k| k as f64 * fs / DEFAULT_WINDOW as f64).filter(|&f| f >= spec.wideband.cutoff_hz).collect();
    let floor = spec.wideband.std_pa.powi(2) * bins.iter().map(|&f| a_gain(f)).sum::<f64>() / bins.len().max(1) as f64;
    let rho = tones.iter().cloned().fold(0.0, f64::max) / (tones.iter().sum::<f64>() + floor);
    let predicted = -10.0 * (1.0 - rho).log10();
    let reports = run(spec, 120, 42)?;
    let power = |db: f64| 10f64.powf(db / 10.0);
    let settled = &reports[40..];
    let noise: f64 = settled.iter().map(|r| power(r.noise_dba)).sum();
    let resid: f64 = settled.iter().map(|r| power(r.residual_dba)).sum();
    let reduction = 10.0 * (noise / resid).log10();
    check(
        iterations.is_some_and(|i| i <= 200) && (reduction - predicted).abs() < 0.2 && (2.8..3.3).contains(&reduction),
        format!(
            "tone >= 20 dB from iteration {iterations:?}; reduction {reduction:.3} dBA vs predicted {predicted:.3} (rho {rho:.4}); {:.1} -> {:.1} dBA",
            10.0 * (noise / settled.len() as f64).log10(),
            10.0 * (resid / settled.len() as f64).log10()
        ),
    )
}

fn low_start() -> ScenarioConfig {
    let mut c = ScenarioConfig { duration: 30.0, ..Default::default() };
    c.drone.position[1] = 0.5;
    c.features.anc = false;
    c
}

fn climb_elapsed() -> Result<f64, String> {
    let mut c = low_start();
    c.script.push(ScriptEntry { t: 1.0, event: ScriptEvent::Api { command: MoveCommand::z_absolute(1.0) } });
    let mut w = World::new(c).map_err(|e| e.to_string())?;
    w.run_for(10.0);
    match w.commands() {
        [r] => match r.outcome {
            CommandOutcome::Completed { elapsed_s } => Ok(elapsed_s),
            ref o => Err(format!("climb {o:?}")),
        },
        other => Err(format!("climb {other:?}")),
    }
}

fn api() -> Outcome {
    let service = SimulationService::spawn(World::new(ScenarioConfig::default()).map_err(|e| e.to_string())?, ServiceOptions::default(), |_| {});
    let handle = service.handle();
    handle.pause().map_err(|e| e.to_string())?;
    let barrier = Arc::new(Barrier::new(16));
    let callers: Vec<_> = (0..16)
        .map(|i| {
            let h = service.handle();
            let b = barrier.clone();
            std::thread::spawn(move || {
                b.wait();
                h.submit_blocking(MoveCommand::z_relative(0.1 * (i % 3) as f64))
            })
        })
        .collect();
    std::thread::sleep(Duration::from_millis(200));
    handle.resume().map_err(|e| e.to_string())?;
    let outcomes: Vec<CommandOutcome> =
        callers.into_iter().map(|c| c.join().expect("caller").map_err(|e| e.to_string())).collect::<Result<_, _>>()?;
    let busy = outcomes.iter().filter(|o| **o == CommandOutcome::Rejected(RejectReason::Busy)).count();
    let done = outcomes.iter().filter(|o| matches!(o, CommandOutcome::Completed { .. })).count();
    let hold = handle.submit_blocking(MoveCommand::z_relative(0.0)).map_err(|e| e.to_string())?;
    service.stop();
    let hold_ok = matches!(hold, CommandOutcome::Completed { elapsed_s } if (0.29 - 1e-9..=0.30 + 1e-9).contains(&elapsed_s));

    let mut c = low_start();
    c.plant.max_climb_m_s = 0.01;
    c.script.push(ScriptEntry { t: 0.5, event: ScriptEvent::Api { command: MoveCommand::z_absolute(3.0) } });
    let mut w = World::new(c).map_err(|e| e.to_string())?;
    w.run_for(12.0);
    let r = &w.commands()[0];
    let timeout = r.finished_t - r.submitted_t;
    let timeout_ok = matches!(r.outcome, CommandOutcome::TimedOut { .. }) && (timeout - 10.0).abs() <= 0.01 + 1e-9;

    let (a, b) = (climb_elapsed()?, climb_elapsed()?);
    check(
        (done, busy) == (1, 15) && hold_ok && timeout_ok && a == b && (a - 1.27).abs() < 1e-9,
        format!("{done} completed / {busy} busy of 16; hold {hold:?}; timeout after {timeout:.3} s; ZAbsolute elapsed {a} s twice {}", a == b),
    )
}

fn determinism() -> Outcome {
    let cfg = load_scenario(&scenario("hover.json")).map_err(|e| e.to_string())?;
    let trace = vec![
        TraceEntry { tick: 2_000, input: Input::UserMove { vx: 0.3, vy: 0.0, vheading: 0.1 } },
        TraceEntry { tick: 5_000, input: Input::Gesture { kind: GestureKind::Relieve, phase: None } },
        TraceEntry { tick: 9_000, input: Input::Gesture { kind: GestureKind::Summon, phase: None } },
        TraceEntry { tick: 12_000, input: Input::Api { command: MoveCommand::z_relative(0.2) } },
        TraceEntry { tick: 16_000, input: Input::Set { path: "behavior.T".into(), value: serde_json::json!(2.0) } },
    ];
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let path = dir.path().join("trace.jsonl");
    let lines: String = trace.iter().map(|e| serde_json::to_string(e).expect("trace") + "\n").collect();
    std::fs::write(&path, lines).map_err(|e| e.to_string())?;
    let replay = |entries: Vec<TraceEntry>| -> Result<Vec<u8>, String> {
        let mut w = World::new(cfg.clone()).map_err(|e| e.to_string())?;
        w.set_record_telemetry(true);
        w.schedule(entries);
        w.run_to_end();
        telemetry_bytes(&w)
    };
    let a = replay(trace.clone())?;
    let b = replay(read_trace(&path).map_err(|e| e.to_string())?)?;
    let plain = replay(Vec::new())?;
    check(
        a == b && a != plain,
        format!("{} telemetry bytes identical {}, trace changes the run {}", a.len(), a == b, a != plain),
    )
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 8] = [
        ("geometry round-trip", geometry_round_trip),
        ("geometry under noise", geometry_noise),
        ("behavior FSM", behavior_fsm),
        ("closed-loop following", closed_loop_following),
        ("stabilizer", stabilizer),
        ("ANC", anc),
        ("API", api),
        ("determinism", determinism),
    ];
    let mut failed = 0;
    for (name, f) in criteria {
        let start = Instant::now();
        let outcome = f();
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS  {name:<22} {detail} [{secs:.1} s]"),
            Err(detail) => {
                failed += 1;
                println!("FAIL  {name:<22} {detail} [{secs:.1} s]");
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
