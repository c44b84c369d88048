use pod_core::behavior::{mask_of, transition, ActuationMask, Behavior, BehaviorConfig, BehaviorState, StepInput};
use pod_core::vision::UserEvent;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::f64::consts::FRAC_PI_2;
use BehaviorState::*;
use UserEvent::*;

const FRONTAL: f64 = FRAC_PI_2;
const TURNED: f64 = FRAC_PI_2 + 0.7;

fn cfg() -> BehaviorConfig {
    BehaviorConfig::default()
}

fn step(state: BehaviorState, event: UserEvent, tau: f64, now: f64, was_beyond: bool) -> BehaviorState {
    transition(state, StepInput { event, tau, now }, was_beyond, &cfg()).0
}

#[test]
fn all_fifteen_pairs() {
    let idle = Idle { entered_at: 0.0 };
    #[rustfmt::skip]
    let table = [
        (Home, Summoning, Home),
        (Home, Relieving, Await),
        (Home, MajorMotion, Home),
        (Home, MinorMotion, Home),
        (Home, Lost, Home),
        (idle, Summoning, Home),
        (idle, Relieving, Await),
        (idle, MajorMotion, idle),
        (idle, MinorMotion, idle),
        (idle, Lost, idle),
        (Await, Summoning, Home),
        (Await, Relieving, Await),
        (Await, MajorMotion, Await),
        (Await, MinorMotion, Await),
        (Await, Lost, Await),
    ];
    for (from, event, to) in table {
        assert_eq!(step(from, event, FRONTAL, 1.0, false), to, "{from:?} + {event:?}");
    }
}

#[test]
fn rotation_crossing_variants() {
    for e in [MajorMotion, MinorMotion] {
        assert_eq!(step(Home, e, TURNED, 2.0, false), Idle { entered_at: 2.0 });
        assert_eq!(step(Home, e, TURNED, 2.0, true), Home, "no new crossing");
        assert_eq!(step(Idle { entered_at: 0.0 }, e, TURNED, 2.0, false), Idle { entered_at: 2.0 });
        assert_eq!(step(Await, e, TURNED, 2.0, false), Await);
    }
    assert_eq!(step(Home, Summoning, TURNED, 2.0, false), Home);
    assert_eq!(step(Home, Relieving, TURNED, 2.0, false), Await);
    assert_eq!(step(Home, Lost, TURNED, 2.0, false), Home);
    // Exactly at the threshold is not beyond it.
    let at = FRAC_PI_2 - cfg().tau_threshold();
    assert_eq!(step(Home, MinorMotion, at, 2.0, false), Home);
}

#[test]
fn timer_edges() {
    let t = cfg().t;
    let idle = Idle { entered_at: 10.0 };
    for e in [MajorMotion, MinorMotion] {
        assert_eq!(step(idle, e, FRONTAL, 10.0 + t - 1e-9, false), idle);
        assert_eq!(step(idle, e, FRONTAL, 10.0 + t, false), Home);
        assert_eq!(step(idle, e, FRONTAL, 10.0 + t + 1.0, false), Home);
    }
    // Lost leaves the timer alone; the next tracked frame resolves it.
    assert_eq!(step(idle, Lost, FRONTAL, 10.0 + t + 1.0, false), idle);
}

#[test]
fn wrapper_masks_follow_states_and_lost_disables_all() {
    let mut b = Behavior::new(cfg());
    assert_eq!(b.step(Relieving, FRONTAL, 0.0).unwrap(), (Await, mask_of(Await)));
    let (s, m) = b.step(Lost, FRONTAL, 0.1).unwrap();
    assert_eq!((s, m), (Await, ActuationMask::ALL_OFF));
    assert_eq!(b.step(Summoning, FRONTAL, 0.2).unwrap(), (Home, ActuationMask::ALL_ON));
}

fn event_strategy() -> impl Strategy<Value = UserEvent> {
    prop::sample::select(UserEvent::ALL.to_vec())
}

proptest! {
    #[test]
    fn masks_stay_consistent(trace in prop::collection::vec((event_strategy(), 0.0f64..std::f64::consts::PI), 1..300)) {
        let mut b = Behavior::new(cfg());
        for (i, (e, tau)) in trace.into_iter().enumerate() {
            let (s, m) = b.step(e, tau, i as f64 * 0.02).unwrap();
            if e == Lost {
                prop_assert_eq!(m, ActuationMask::ALL_OFF);
            } else {
                prop_assert_eq!(m, mask_of(s));
            }
            if let Idle { entered_at } = s {
                prop_assert!(entered_at <= i as f64 * 0.02);
            }
        }
    }
}

type Trace = Vec<(UserEvent, f64)>;

/// 50 Hz traces, 60 s each.
fn traces() -> Vec<Trace> {
    let frames = 3000;
    let periodic_turns = (0..frames)
        .map(|i| {
            let t = i as f64 * 0.02;
            (MinorMotion, if t % 10.0 < 2.0 { TURNED } else { FRONTAL })
        })
        .collect();
    let gestures = (0..frames)
        .map(|i| {
            let t = i as f64 * 0.02;
            let e = match i {
                900..=904 => Relieving,
                1500..=1504 => Summoning,
                2200..=2210 => Lost,
                _ => MajorMotion,
            };
            (e, if (t % 7.0) < 0.5 { TURNED } else { FRONTAL })
        })
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut tau = FRONTAL;
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
    vec![periodic_turns, gestures, random]
}

fn home_time(trace: &Trace, t: f64) -> f64 {
    let mut b = Behavior::new(BehaviorConfig { t, ..cfg() });
    trace
        .iter()
        .enumerate()
        .filter(|(i, (e, tau))| b.step(*e, *tau, *i as f64 * 0.02).unwrap().0 == Home)
        .count() as f64
        * 0.02
}

#[test]
fn lazier_settings_never_spend_more_time_home() {
    for (n, trace) in traces().iter().enumerate() {
        let times: Vec<f64> = [0.5, 5.0, 20.0].iter().map(|&t| home_time(trace, t)).collect();
        assert!(times[0] >= times[1] && times[1] >= times[2], "trace {n}: {times:?}");
        assert!(times[0] > times[2], "trace {n} should exercise the timer: {times:?}");
    }
}
