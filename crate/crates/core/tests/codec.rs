use mmntp_core::codec::*;
use mmntp_core::scene::generate::quintic;
use proptest::prelude::*;
use std::time::Instant;
use Manoeuvre::*;

/// A label sequence with at most one transition per change period.
fn grid_sequence(cfg: &HorizonConfig, start: usize, picks: &[(bool, usize, usize)]) -> LabelSequence {
    let mut labels = vec![Manoeuvre::from_index(start).unwrap(); cfg.t_pred];
    for (i, &(switch, offset, shift)) in (1..=cfg.periods()).zip(picks) {
        if !switch {
            continue;
        }
        let begin = cfg.period_start(i);
        let last = (begin + cfg.period_len(i)).min(cfg.t_pred - 1);
        if last <= begin {
            continue;
        }
        let p = begin + 1 + offset % (last - begin);
        let next = Manoeuvre::from_index((labels[p].index() + 1 + shift % 2) % 3).unwrap();
        for l in &mut labels[p..] {
            *l = next;
        }
    }
    LabelSequence(labels)
}

/// Valid pairs from T_pred in {10, 25} and T_change in {5, 13}; (10, 13)
/// breaks T_change <= T_pred.
const CONFIGS: [(usize, usize); 3] = [(10, 5), (25, 5), (25, 13)];

fn config() -> impl Strategy<Value = HorizonConfig> {
    (0..CONFIGS.len()).prop_map(|i| HorizonConfig::new(CONFIGS[i].0, CONFIGS[i].1, 5).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn round_trip_and_sentinels(cfg in config(), start in 0usize..3, picks in prop::collection::vec((any::<bool>(), 0usize..64, 0usize..2), 3)) {
        let labels = grid_sequence(&cfg, start, &picks);
        let mv = encode_manoeuvre_vector(&labels, &cfg).unwrap();
        prop_assert_eq!(mv.types.len(), cfg.periods() + 1);
        for i in 0..mv.times.len() {
            prop_assert_eq!(mv.times[i] == NO_TRANSITION, mv.types[i] == mv.types[i + 1]);
        }
        let decoded = decode_manoeuvre_vector(&mv, &cfg).unwrap();
        prop_assert!(decoded.transitions() <= cfg.periods());
        prop_assert_eq!(decoded, labels);
    }

    #[test]
    fn two_transitions_in_a_period_are_rejected(cfg in config(), period in 1usize..3, a in 0usize..64) {
        let period = period.min(cfg.periods());
        let begin = cfg.period_start(period);
        let last = (begin + cfg.period_len(period)).min(cfg.t_pred - 1);
        prop_assume!(last >= begin + 2);
        let p = begin + 1 + a % (last - begin - 1);
        let mut labels = vec![LaneKeep; cfg.t_pred];
        labels[p] = LeftLaneChange;
        let err = encode_manoeuvre_vector(&LabelSequence(labels), &cfg).unwrap_err();
        let is_multi = matches!(err, CodecError::MultipleTransitionsInPeriod { .. });
        prop_assert!(is_multi);
    }

    #[test]
    fn no_crossing_means_lane_keep(y0 in 0.3f64..3.4, amp in 0.0f64..0.3, freq in 0.1f64..2.0, n in 2usize..80) {
        let markings = [0.0, 3.75, 7.5];
        let traj: Vec<(f64, f64)> = (0..n)
            .map(|k| {
                let t = k as f64 * 0.2;
                (t * 20.0, (y0 + amp * (freq * t).sin()).clamp(0.01, 3.74))
            })
            .collect();
        let labels = auto_label_trajectory(&traj, &markings, &AutoLabelConfig::default()).unwrap();
        prop_assert!(labels.as_slice().iter().all(|&m| m == LaneKeep));
    }
}

#[test]
fn thousand_round_trips_are_fast() {
    let started = Instant::now();
    let mut rng = 0x2545F4914F6CDD1Du64;
    let mut next = || {
        rng ^= rng << 13;
        rng ^= rng >> 7;
        rng ^= rng << 17;
        rng as usize
    };
    for _ in 0..1000 {
        let (tp, tc) = CONFIGS[next() % CONFIGS.len()];
        let cfg = HorizonConfig::new(tp, tc, 5).unwrap();
        let picks: Vec<_> = (0..3).map(|_| (next() % 2 == 0, next(), next())).collect();
        let labels = grid_sequence(&cfg, next() % 3, &picks);
        let mv = encode_manoeuvre_vector(&labels, &cfg).unwrap();
        assert_eq!(decode_manoeuvre_vector(&mv, &cfg).unwrap(), labels);
    }
    assert!(started.elapsed().as_secs_f64() < 5.0);
}

/// Lateral position of a quintic lane change of `width` over `[t0, t0 + d]`.
fn profile(t: f64, y0: f64, width: f64, t0: f64, d: f64) -> f64 {
    y0 + width * quintic((t - t0) / d).0
}

/// Steps whose central-difference window overlaps the open motion interval.
fn moving_span(n: usize, dt: f64, t0: f64, d: f64) -> Vec<bool> {
    (0..n).map(|k| (k + 1) as f64 * dt > t0 && (k as f64 - 1.0) * dt < t0 + d).collect()
}

#[test]
fn quintic_crossing_is_labelled_over_the_moving_span() {
    let (dt, n) = (0.2, 60);
    let markings = [0.0, 3.75, 7.5];
    let (t0, d) = (2.1, 4.3);
    let traj: Vec<(f64, f64)> = (0..n).map(|k| (k as f64, profile(k as f64 * dt, 1.875, 3.75, t0, d))).collect();
    let cfg = AutoLabelConfig { fps: 5, lateral_speed_eps: 1e-9 };
    let labels = auto_label_trajectory(&traj, &markings, &cfg).unwrap();
    let span = moving_span(n, dt, t0, d);
    for k in 0..n {
        let expect = if span[k] { LeftLaneChange } else { LaneKeep };
        assert_eq!(labels.0[k], expect, "step {k}");
    }
}

#[test]
fn left_then_right_crossings_form_two_episodes() {
    let (dt, n) = (0.2, 90);
    let markings = [0.0, 3.75, 7.5];
    let (a0, ad, b0, bd) = (1.1, 4.1, 8.3, 5.5);
    let lat = |t: f64| profile(t, 1.875, 3.75, a0, ad) + profile(t, 0.0, -3.75, b0, bd);
    let traj: Vec<(f64, f64)> = (0..n).map(|k| (k as f64, lat(k as f64 * dt))).collect();
    let cfg = AutoLabelConfig { fps: 5, lateral_speed_eps: 1e-9 };
    let labels = auto_label_trajectory(&traj, &markings, &cfg).unwrap();
    let (left, right) = (moving_span(n, dt, a0, ad), moving_span(n, dt, b0, bd));
    for k in 0..n {
        let expect = match (left[k], right[k]) {
            (true, false) => LeftLaneChange,
            (false, true) => RightLaneChange,
            (false, false) => LaneKeep,
            (true, true) => unreachable!("episodes overlap"),
        };
        assert_eq!(labels.0[k], expect, "step {k}");
    }
    let episodes = labels.0.windows(2).filter(|w| w[0] == LaneKeep && w[1] != LaneKeep).count();
    assert_eq!(episodes, 2);
}

#[test]
fn change_longer_than_horizon_is_rejected() {
    assert!(matches!(HorizonConfig::new(10, 13, 5), Err(CodecError::ChangeLongerThanHorizon { .. })));
}

#[test]
fn hand_traced_examples() {
    let cfg = HorizonConfig::new(10, 5, 5).unwrap();
    let mut l = vec![LaneKeep; 7];
    l.extend([RightLaneChange; 3]);
    let mv = encode_manoeuvre_vector(&LabelSequence(l), &cfg).unwrap();
    assert_eq!(mv.types, vec![LaneKeep, LaneKeep, RightLaneChange]);
    assert_eq!(mv.times, vec![NO_TRANSITION, 0.4]);
    let mut l = vec![LeftLaneChange; 2];
    l.extend([LaneKeep; 8]);
    let mv = encode_manoeuvre_vector(&LabelSequence(l), &cfg).unwrap();
    assert_eq!(mv.types, vec![LeftLaneChange, LaneKeep, LaneKeep]);
    assert_eq!(mv.times, vec![0.4, NO_TRANSITION]);
}
