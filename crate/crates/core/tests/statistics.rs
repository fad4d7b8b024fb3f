mod common;

use std::collections::BTreeMap;

use callslot::analysis::{
    bootstrap_ci, call_distribution, pooled_pr, slot_pr, t_test, tier_split, user_pr, BootstrapSettings, TTestKind,
};
use callslot::domain::{split_by_phase, Arm, CallLog, CallRecord, Phase, SlotId, UserId};
use callslot::simworld::{generate_world, run_trial, TrialDesign, WorldConfig};
use common::{binary_sample, t_p_value_quadrature, welch_textbook};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn call(user: u32, slot: u8, day: u32, picked: bool, arm: Arm) -> CallRecord {
    CallRecord {
        user: UserId(user),
        slot: SlotId::new(slot).unwrap(),
        day,
        retry: 0,
        attempted: true,
        picked,
        phase: Phase::Intervention,
        arm,
    }
}

#[test]
fn welch_matches_textbook_formula() {
    let mut rng = ChaCha8Rng::seed_from_u64(30);
    let x: Vec<f64> = (0..30).map(|_| rng.gen_bool(0.6) as u8 as f64).collect();
    let y: Vec<f64> = (0..30).map(|_| rng.gen_bool(0.35) as u8 as f64).collect();
    let r = t_test(&x, &y, TTestKind::Welch).unwrap();
    let (t, df) = welch_textbook(&x, &y);
    assert!((r.statistic - t).abs() < 1e-9);
    assert!((r.df - df).abs() < 1e-9);
    let p = t_p_value_quadrature(t, df);
    assert!((r.p_value - p).abs() < 1e-9, "{} vs {}", r.p_value, p);
}

#[test]
fn pooled_variant_matches_textbook_formula() {
    let x = [1.0, 0.0, 1.0, 1.0, 0.0, 1.0, 1.0];
    let y = [0.0, 0.0, 1.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0];
    let r = t_test(&x, &y, TTestKind::Pooled).unwrap();
    let (n1, n2) = (7.0, 9.0);
    let (m1, m2) = (5.0 / 7.0, 2.0 / 9.0);
    let s1 = x.iter().map(|v| (v - m1).powi(2)).sum::<f64>();
    let s2 = y.iter().map(|v| (v - m2).powi(2)).sum::<f64>();
    let sp2 = (s1 + s2) / (n1 + n2 - 2.0);
    let t = (m1 - m2) / (sp2 * (1.0 / n1 + 1.0 / n2)).sqrt();
    assert!((r.statistic - t).abs() < 1e-12);
    assert_eq!(r.df, 14.0);
    assert!((r.p_value - t_p_value_quadrature(t, 14.0)).abs() < 1e-9);
}

#[test]
fn mid_tier_p_value_near_published() {
    let r = t_test(&binary_sample(16775, 6312), &binary_sample(17345, 6167), TTestKind::Welch).unwrap();
    assert!(r.p_value > 7.07e-5 / 2.0 && r.p_value < 7.07e-5 * 2.0, "{}", r.p_value);
}

#[test]
fn slot_six_fixture() {
    // 857/2382 and 802/2488 round to the published 0.3598 and 0.3223
    let mut rs = Vec::new();
    for (arm, picks, calls, base) in [(Arm::Treatment, 857, 2382, 0u32), (Arm::Control, 802, 2488, 10_000)] {
        for k in 0..calls {
            rs.push(call(base + k / 10, 6, k % 10, k < picks, arm));
        }
    }
    let log = CallLog::from_records(rs).unwrap();
    let t = slot_pr(&log.arm(Arm::Treatment)).unwrap().rates[5].unwrap();
    let c = slot_pr(&log.arm(Arm::Control)).unwrap().rates[5].unwrap();
    assert_eq!((t * 1e4).round() / 1e4, 0.3598);
    assert_eq!((c * 1e4).round() / 1e4, 0.3223);
    let pct = 100.0 * (t - c) / c;
    assert!((pct - 11.6131).abs() < 1e-4, "{pct}");
    assert!(slot_pr(&log).unwrap().rates.iter().enumerate().all(|(j, r)| r.is_some() == (j == 5)));
}

#[test]
fn published_tier_fractions() {
    let arm = |n: u32, ones: u32, zeros: u32, base: u32| -> BTreeMap<UserId, f64> {
        (0..n)
            .map(|k| {
                let p = if k < ones {
                    1.0
                } else if k < ones + zeros {
                    0.0
                } else {
                    0.5
                };
                (UserId(base + k), p)
            })
            .collect()
    };
    let t = arm(10_000, 4059, 656, 0);
    let c = arm(10_000, 3846, 699, 100_000);
    let (st, sc) = tier_split(&t, &c).unwrap();
    assert_eq!((st.top_fraction, st.bottom_fraction), (0.4059, 0.0699));
    assert_eq!((sc.top_fraction, sc.bottom_fraction), (0.4059, 0.0699));
    assert_eq!((st.high.len(), st.low.len()), (4059, 699));
    assert_eq!((sc.high.len(), sc.low.len()), (4059, 699));
    // treatment High is all perfect users, so its High rate is 1 by construction
    assert!(st.high.iter().all(|u| t[u] == 1.0));
    assert!(sc.high.iter().any(|u| c[u] < 1.0));
}

#[test]
fn duplicating_records_moves_pooled_but_not_user_average() {
    let a = vec![
        call(0, 1, 0, true, Arm::Control),
        call(1, 1, 0, false, Arm::Control),
        call(1, 2, 1, false, Arm::Control),
    ];
    let log = CallLog::from_records(a.clone()).unwrap();
    let mut b = a;
    b.push(call(0, 1, 5, true, Arm::Control));
    let dup = CallLog::from_records(b).unwrap();
    assert_eq!(user_pr(&log).unwrap().user_avg, 0.5);
    assert_eq!(user_pr(&dup).unwrap().user_avg, 0.5);
    assert!((pooled_pr(&log).unwrap() - 1.0 / 3.0).abs() < 1e-15);
    assert_eq!(pooled_pr(&dup).unwrap(), 0.5);
}

#[test]
fn control_arm_distribution_is_near_uniform() {
    let world = generate_world(&WorldConfig {
        n_users: 6000,
        seed: 5,
        ..Default::default()
    })
    .unwrap();
    let log = run_trial(&world, &TrialDesign { seed: 5, ..Default::default() }).unwrap();
    let control = log.arm(Arm::Control);
    let firsts = control.records().iter().filter(|r| r.retry == 0).count();
    assert!(firsts >= 10_000, "{firsts}");
    let pi = call_distribution(&control).unwrap();
    let worst = pi.iter().map(|p| (p - 1.0 / 7.0).abs()).fold(0.0, f64::max);
    assert!(worst < 0.02, "{pi:?}");
    let (base, _) = split_by_phase(&control, 21);
    assert!(call_distribution(&base).is_ok());
}

#[test]
fn bootstrap_interval_covers_truth_at_nominal_rate() {
    // users draw p ~ U(0.2, 0.8) and take five calls each, so the
    // population pooled rate is 0.5
    let reps = 200;
    let covered: usize = (0..reps)
        .map(|rep| {
            let mut rng = ChaCha8Rng::seed_from_u64(7000 + rep);
            let mut rs = Vec::new();
            for u in 0..100u32 {
                let p = rng.gen_range(0.2..0.8);
                for d in 0..5 {
                    rs.push(call(u, 1 + rng.gen_range(0..7), d, rng.gen_bool(p), Arm::Control));
                }
            }
            let log = CallLog::from_records(rs).unwrap();
            let ci = bootstrap_ci(&log, |r| pooled_pr(&r.log), BootstrapSettings::default(), &mut rng).unwrap();
            (ci.low <= 0.5 && 0.5 <= ci.high) as usize
        })
        .sum();
    let rate = covered as f64 / reps as f64;
    // binomial sd at 200 reps is about 0.015
    assert!((0.90..=0.99).contains(&rate), "coverage {rate}");
}
