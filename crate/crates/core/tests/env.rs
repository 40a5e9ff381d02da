mod common;

use std::io::{Cursor, Write};

use common::rng;
use proptest::prelude::*;
use rand::Rng;
use rlab_core::encoder::UserId;
use rlab_core::env::{
    apply_drift, criteo_to_features, ground_truth_p, oracle_ctr, parse_criteo_line, parse_criteo_line_at,
    replay_source, sample_user, step, ClickModel, ClickScenario, CriteoFeatureConfig, DelayConfig,
    DelayedRewardQueue, DriftEvent, DriftKind, DriftSchedule, Population, PopulationConfig, PopulationModel,
    ReplayConfig, ReplaySource, SimUser, World,
};
use rlab_core::numkit::{l2_norm, sigmoid};
use rlab_core::variants::{Arm, PromptParams, Variant, VariantPair};
use rlab_core::Error;

fn small_config() -> PopulationConfig {
    PopulationConfig {
        n_users: 200,
        n_segments: 4,
        preference_dim: 6,
        profile_dim: 4,
        ..PopulationConfig::default()
    }
}

fn variant(id: Arm, embedding: Vec<f64>) -> Variant {
    Variant {
        id,
        text: format!("variant {id}"),
        raw_features: Vec::new(),
        embedding,
        params: PromptParams::default(),
    }
}

fn preference_world(bias: f64, temperature: f64) -> World {
    World {
        scenario: ClickScenario::Preference(ClickModel {
            bias,
            temperature,
            noise_std: 0.0,
        }),
        tone_bonus: 0.0,
    }
}

#[test]
fn users_are_unit_norm_and_seeded() {
    let cfg = small_config();
    let a = Population::new(cfg.clone(), 1).unwrap();
    let b = Population::new(cfg.clone(), 1).unwrap();
    let c = Population::new(cfg, 2).unwrap();
    assert_eq!(a, b);
    assert_ne!(a.users[0].preference, c.users[0].preference);
    for u in &a.users {
        assert!((l2_norm(&u.preference) - 1.0).abs() < 1e-12);
    }
}

#[test]
fn one_noiseless_segment_shares_the_archetype() {
    let cfg = PopulationConfig {
        n_segments: 1,
        noise_std: 0.0,
        ..small_config()
    };
    let model = PopulationModel::new(&cfg, 3).unwrap();
    let mut r = rng(3);
    for i in 0..20 {
        let u = sample_user(&cfg, &model, UserId(i), &mut r).unwrap();
        assert_eq!(u.preference, model.archetypes[0]);
    }
}

#[test]
fn click_model_spot_values() {
    let pop = Population::new(small_config(), 0).unwrap();
    let user = &pop.users[0];
    let flat = preference_world(0.0, 0.0);
    let v = variant(Arm::A, vec![0.3; 6]);
    assert_eq!(ground_truth_p(user, &v, &flat).unwrap(), 0.5);

    let aligned = variant(Arm::A, user.preference.clone());
    let p = ground_truth_p(user, &aligned, &preference_world(0.0, 4.0)).unwrap();
    assert!((p - sigmoid(4.0)).abs() < 1e-12);
    assert!((p - 0.982).abs() < 1e-3);

    let short = variant(Arm::A, vec![1.0; 3]);
    assert!(matches!(
        ground_truth_p(user, &short, &flat),
        Err(Error::Dimension { .. })
    ));
}

#[test]
fn empirical_click_rate_is_binomial() {
    let pop = Population::new(small_config(), 0).unwrap();
    let user = &pop.users[0];
    let v = variant(Arm::A, vec![0.0; 6]);
    let world = preference_world(-1.0, 1.0);
    let p = sigmoid(-1.0);
    let mut r = rng(5);
    let n = 100_000;
    let clicks = (0..n).filter(|_| step(user, &v, &world, &mut r).unwrap().0).count();
    let se = (p * (1.0 - p) / n as f64).sqrt();
    assert!(((clicks as f64 / n as f64) - p).abs() <= 3.0 * se);
}

fn flip_at(step: u64) -> DriftSchedule {
    DriftSchedule {
        events: vec![DriftEvent {
            step,
            kind: DriftKind::Flip,
        }],
        seed: 0,
    }
}

#[test]
fn flip_is_an_involution_and_swaps_the_better_variant() {
    let pop = Population::new(small_config(), 4).unwrap();
    let once = apply_drift(&pop, &flip_at(7), 7).unwrap();
    let twice = apply_drift(&once, &flip_at(7), 7).unwrap();
    assert_eq!(twice, pop);
    assert_eq!(apply_drift(&pop, &flip_at(7), 6).unwrap(), pop, "not due yet");

    let world = preference_world(-0.5, 4.0);
    let mut r = rng(8);
    for (before, after) in pop.users.iter().zip(&once.users) {
        let e_a: Vec<f64> = (0..6).map(|_| r.random_range(-1.0..1.0)).collect();
        let e_b: Vec<f64> = (0..6).map(|_| r.random_range(-1.0..1.0)).collect();
        let (a, b) = (variant(Arm::A, e_a), variant(Arm::B, e_b));
        let gap = |u: &SimUser| ground_truth_p(u, &a, &world).unwrap() - ground_truth_p(u, &b, &world).unwrap();
        assert!(gap(before) * gap(after) <= 0.0);
    }
}

#[test]
fn drift_schedules_must_increase() {
    let mut s = flip_at(5);
    s.events.push(DriftEvent {
        step: 5,
        kind: DriftKind::SegmentSwap,
    });
    assert!(s.validate().is_err());
}

fn fixed_world() -> World {
    World {
        scenario: ClickScenario::FixedArms { p_a: 0.8, p_b: 0.2 },
        tone_bonus: 0.0,
    }
}

#[test]
fn oracle_ctr_closed_forms() {
    let pop = Population::new(small_config(), 1).unwrap();
    let pair = || VariantPair {
        a: variant(Arm::A, vec![0.0; 6]),
        b: variant(Arm::B, vec![0.0; 6]),
    };
    let world = fixed_world();
    let mut r = rng(2);
    let best = oracle_ctr(&pop, &world, 50, &mut r, |_, _| Ok((pair(), [1.0, 0.0]))).unwrap();
    let worst = oracle_ctr(&pop, &world, 50, &mut r, |_, _| Ok((pair(), [0.0, 1.0]))).unwrap();
    let uniform = oracle_ctr(&pop, &world, 50, &mut r, |_, _| Ok((pair(), [0.5, 0.5]))).unwrap();
    assert!((best - 0.8).abs() < 1e-12);
    assert!(worst < best);
    assert!((uniform - 0.5).abs() < 1e-12);
    assert!(oracle_ctr(&pop, &world, 0, &mut r, |_, _| Ok((pair(), [0.5, 0.5]))).is_err());
}

#[test]
fn overdue_rewards_are_zero_filled() {
    let mut q = DelayedRewardQueue::new(5);
    q.push(1, 1.0, 0, None).unwrap();
    q.push(2, 1.0, 0, Some(2)).unwrap();
    assert!(q.push(2, 1.0, 1, Some(0)).is_err(), "duplicate id");
    assert!(q.push(3, 1.0, 0, Some(6)).is_err(), "beyond d_max");
    assert_eq!(q.pop_due(1), vec![]);
    assert_eq!(q.pop_due(2), vec![(2, 1.0)]);
    assert_eq!(q.pop_due(5), vec![(1, 0.0)]);
    assert!(q.is_empty());
}

#[test]
fn delay_sampling_stays_in_range() {
    let cfg = DelayConfig::default();
    let mut r = rng(6);
    let mut seen = [false; 21];
    for _ in 0..5000 {
        let d = cfg.sample(&mut r).unwrap();
        seen[d as usize] = true;
    }
    assert!(seen.iter().all(|s| *s));
    let lossy = DelayConfig {
        d_max: 3,
        loss_prob: 1.0,
    };
    assert_eq!(lossy.sample(&mut r), None);
    assert!(DelayConfig { d_max: 3, loss_prob: 1.5 }.validate().is_err());
}

fn blank_line(label: &str) -> String {
    std::iter::once(label).chain(std::iter::repeat_n("", 39)).collect::<Vec<_>>().join("\t")
}

/// A synthetic line in the documented layout: label, 13 integers, 26 hex tokens.
const SAMPLE: &str = "1\t5\t110\t\t16\t\t1\t0\t14\t7\t1\t\t306\t\t62770d79\te21f5d58\tafea442f\t945c7fcf\t38b02748\t6fcd6dcb\t3580aa21\t28e55712\t40ed41e5\t2fe39d60\t\t\t\t\t\t\t\t\t\t\t\t\t\t\t\t";

#[test]
fn sample_line_parses_field_for_field() {
    let rec = parse_criteo_line(SAMPLE).unwrap();
    assert_eq!(rec.label, 1);
    let ints = [Some(5), Some(110), None, Some(16), None, Some(1), Some(0), Some(14), Some(7), Some(1), None, Some(306), None];
    assert_eq!(rec.ints, ints.to_vec());
    assert_eq!(rec.cats[0].as_deref(), Some("62770d79"));
    assert_eq!(rec.cats[9].as_deref(), Some("2fe39d60"));
    assert!(rec.cats[10..].iter().all(Option::is_none));
    assert_eq!(rec.cats.len(), 26);
}

#[test]
fn all_missing_line_is_well_formed() {
    let rec = parse_criteo_line(&blank_line("0")).unwrap();
    assert_eq!(rec.label, 0);
    assert!(rec.ints.iter().all(Option::is_none));
    assert!(rec.cats.iter().all(Option::is_none));
    let (u, c) = criteo_to_features(&rec, &CriteoFeatureConfig::default()).unwrap();
    assert!(u.u.iter().chain(&c.c).all(|x| *x == 0.0));
}

fn parse_error_field(line: &str) -> usize {
    match parse_criteo_line_at(line, 9) {
        Err(Error::Parse { line, field, .. }) => {
            assert_eq!(line, 9);
            field
        }
        other => panic!("expected a parse error, got {other:?}"),
    }
}

#[test]
fn malformed_lines_name_the_field() {
    let short: String = std::iter::once("0").chain(std::iter::repeat_n("", 38)).collect::<Vec<_>>().join("\t");
    assert_eq!(short.matches('\t').count(), 38);
    assert_eq!(parse_error_field(&short), 40);
    assert_eq!(parse_error_field(&format!("{}\t", blank_line("0"))), 41);
    assert_eq!(parse_error_field(&blank_line("2")), 1);

    let mut fields: Vec<String> = blank_line("1").split('\t').map(str::to_string).collect();
    fields[3] = "4.5".into();
    assert_eq!(parse_error_field(&fields.join("\t")), 4);
    fields[3] = String::new();
    fields[20] = "zz12".into();
    assert_eq!(parse_error_field(&fields.join("\t")), 21);
}

#[test]
fn one_token_change_touches_only_its_buckets() {
    let cfg = CriteoFeatureConfig::default();
    let a = parse_criteo_line(SAMPLE).unwrap();
    let mut b = a.clone();
    b.cats[4] = Some("deadbeef".into());
    let (ua, ca) = criteo_to_features(&a, &cfg).unwrap();
    let (ub, cb) = criteo_to_features(&b, &cfg).unwrap();
    let va: Vec<f64> = ua.u.iter().chain(&ca.c).copied().collect();
    let vb: Vec<f64> = ub.u.iter().chain(&cb.c).copied().collect();
    let changed = va.iter().zip(&vb).filter(|(x, y)| x != y).count();
    assert!((1..=2).contains(&changed), "{changed} entries moved");

    let mut zero = a.clone();
    zero.ints[0] = Some(0);
    let mut absent = a.clone();
    absent.ints[0] = None;
    assert_eq!(criteo_to_features(&zero, &cfg).unwrap(), criteo_to_features(&absent, &cfg).unwrap());
}

fn file_with(lines: &[String]) -> tempfile::NamedTempFile {
    let mut f = tempfile::NamedTempFile::new().unwrap();
    for l in lines {
        writeln!(f, "{l}").unwrap();
    }
    f
}

#[test]
fn replay_streams_in_order_and_skips_bad_lines() {
    let good = |label: &str| blank_line(label);
    let f = file_with(&[good("1"), good("0"), good("1")]);
    let labels: Vec<u8> = replay_source(f.path(), ReplayConfig::default())
        .unwrap()
        .map(|r| r.unwrap().label)
        .collect();
    assert_eq!(labels, vec![1, 0, 1]);

    let f = file_with(&[good("1"), "garbage".into(), good("0")]);
    let mut src = replay_source(f.path(), ReplayConfig::default()).unwrap();
    let lines: Vec<u64> = src.by_ref().map(|r| r.unwrap().line).collect();
    assert_eq!(lines, vec![1, 3]);
    assert_eq!(src.skipped(), 1);

    let strict = ReplayConfig {
        strict: true,
        ..ReplayConfig::default()
    };
    let results: Vec<_> = replay_source(f.path(), strict).unwrap().collect();
    assert_eq!(results.len(), 2);
    assert!(matches!(results[1], Err(Error::Parse { line: 2, .. })));

    assert!(matches!(
        replay_source("/nonexistent/criteo.tsv", ReplayConfig::default()),
        Err(Error::Io(_))
    ));
}

#[test]
fn sampled_replay_is_deterministic_and_binomial() {
    let n = 2000;
    let text: String = (0..n).map(|_| blank_line("0") + "\n").collect();
    let cfg = ReplayConfig {
        sampling_rate: 0.5,
        seed: 17,
        ..ReplayConfig::default()
    };
    let take = || {
        ReplaySource::from_reader(Cursor::new(text.clone()), cfg.clone())
            .unwrap()
            .map(|r| r.unwrap().line)
            .collect::<Vec<_>>()
    };
    let kept = take();
    assert_eq!(kept, take());
    let sigma = (n as f64 * 0.25).sqrt();
    assert!((kept.len() as f64 - n as f64 / 2.0).abs() <= 3.0 * sigma);
}

proptest! {
    #[test]
    fn rotation_preserves_norms(angle in -6.3f64..6.3, seed in 0u64..100) {
        let pop = Population::new(small_config(), seed).unwrap();
        let schedule = DriftSchedule {
            events: vec![DriftEvent { step: 0, kind: DriftKind::Rotate { angle } }],
            seed,
        };
        let moved = apply_drift(&pop, &schedule, 0).unwrap();
        for u in &moved.users {
            prop_assert!((l2_norm(&u.preference) - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn flip_twice_is_identity(seed in 0u64..1000) {
        let pop = Population::new(PopulationConfig { n_users: 20, ..small_config() }, seed).unwrap();
        let back = apply_drift(&apply_drift(&pop, &flip_at(3), 3).unwrap(), &flip_at(3), 3).unwrap();
        prop_assert_eq!(back, pop);
    }

    #[test]
    fn each_reward_is_delivered_exactly_once(
        delays in prop::collection::vec(prop::option::of(0u64..=20), 1..200),
    ) {
        let mut q = DelayedRewardQueue::new(20);
        let mut delivered = vec![0u32; delays.len()];
        for (t, d) in delays.iter().enumerate() {
            q.push(t as u64, 1.0, t as u64, *d).unwrap();
            for (id, r) in q.pop_due(t as u64) {
                delivered[id as usize] += 1;
                prop_assert_eq!(r, if delays[id as usize].is_some() { 1.0 } else { 0.0 });
            }
        }
        for (id, _) in q.pop_due(u64::MAX - 1) {
            delivered[id as usize] += 1;
        }
        prop_assert!(delivered.iter().all(|&n| n == 1));
    }

    #[test]
    fn parser_accepts_only_forty_fields(n in 1usize..60) {
        let line = std::iter::once("1").chain(std::iter::repeat_n("", n - 1)).collect::<Vec<_>>().join("\t");
        prop_assert_eq!(parse_criteo_line(&line).is_ok(), n == 40);
    }
}
