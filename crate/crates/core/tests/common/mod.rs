#![allow(dead_code)]

use std::collections::{BTreeMap, HashMap};

use callslot::domain::{Arm, CallLog, CallRecord, Phase, SlotId, UserId};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Random log with up to `max_users` users and `max_days` days. Each user
/// gets at most one slot per day and a run of retries starting at 0.
pub fn random_log(seed: u64, max_users: u32, max_days: u32) -> CallLog {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_users = rng.gen_range(1..=max_users);
    let n_days = rng.gen_range(1..=max_days);
    let p = rng.gen_range(0.0..=1.0);
    let mut records = Vec::new();
    for u in 0..n_users {
        let arm = if rng.gen_bool(0.5) { Arm::Treatment } else { Arm::Control };
        for day in 0..n_days {
            if rng.gen_bool(0.4) {
                continue;
            }
            let slot = SlotId::new(rng.gen_range(1..=7)).unwrap();
            for retry in 0..rng.gen_range(1..=3u8) {
                let attempted = rng.gen_bool(0.95);
                records.push(CallRecord {
                    user: UserId(u),
                    slot,
                    day,
                    retry,
                    attempted,
                    picked: attempted && rng.gen_bool(p),
                    phase: if day < n_days / 2 { Phase::Baseline } else { Phase::Intervention },
                    arm,
                });
            }
        }
    }
    CallLog::from_records(records).unwrap()
}

/// Indexes a log by its full key so the oracles can loop over (i, j, t, r).
pub struct Cube {
    pub cells: HashMap<(u32, u8, u32, u8), (bool, bool)>,
    pub users: Vec<u32>,
    pub days: u32,
}

impl Cube {
    pub fn new(log: &CallLog) -> Self {
        let cells = log
            .records()
            .iter()
            .map(|r| ((r.user.0, r.slot.get(), r.day, r.retry), (r.attempted, r.picked)))
            .collect();
        Cube {
            cells,
            users: log.users().iter().map(|u| u.0).collect(),
            days: log.records().iter().map(|r| r.day + 1).max().unwrap_or(0),
        }
    }

    /// Sum of (A, p) over every index the filter accepts.
    pub fn sum(&self, mut keep: impl FnMut(u32, u8, u32, u8) -> bool) -> (u64, u64) {
        let (mut a, mut p) = (0, 0);
        for &i in &self.users {
            for j in 1..=7u8 {
                for t in 0..self.days {
                    for r in 0..=2u8 {
                        if !keep(i, j, t, r) {
                            continue;
                        }
                        if let Some(&(att, pick)) = self.cells.get(&(i, j, t, r)) {
                            a += att as u64;
                            p += pick as u64;
                        }
                    }
                }
            }
        }
        (a, p)
    }
}

/// Tier assignment by pairwise ranking rather than sorting.
pub fn tier_oracle(rates: &BTreeMap<UserId, f64>, top: f64, bottom: f64) -> BTreeMap<UserId, &'static str> {
    let n = rates.len();
    let k_top = ((top * n as f64).round() as usize).min(n);
    let k_bottom = ((bottom * n as f64).round() as usize).min(n - k_top);
    let above = |a: (&UserId, &f64), b: (&UserId, &f64)| a.1 > b.1 || (a.1 == b.1 && a.0 < b.0);
    let below = |a: (&UserId, &f64), b: (&UserId, &f64)| a.1 < b.1 || (a.1 == b.1 && a.0 < b.0);
    let high: Vec<UserId> = rates
        .iter()
        .filter(|&x| rates.iter().filter(|&y| above(y, x)).count() < k_top)
        .map(|x| *x.0)
        .collect();
    let rest: Vec<(&UserId, &f64)> = rates.iter().filter(|x| !high.contains(x.0)).collect();
    let mut out: BTreeMap<UserId, &'static str> = high.iter().map(|&u| (u, "high")).collect();
    for &x in &rest {
        let rank = rest.iter().filter(|&&y| below(y, x)).count();
        out.insert(*x.0, if rank < k_bottom { "low" } else { "mid" });
    }
    out
}

/// Two-sided Student-t p-value by Simpson integration of the density.
pub fn t_p_value_quadrature(t: f64, df: f64) -> f64 {
    let ln_c = ln_gamma((df + 1.0) / 2.0) - ln_gamma(df / 2.0) - 0.5 * (df * std::f64::consts::PI).ln();
    let density = |x: f64| (ln_c - (df + 1.0) / 2.0 * (1.0 + x * x / df).ln()).exp();
    // P(|T| <= |t|) = 2 * int_0^|t| f
    let n = 20_000;
    let h = t.abs() / n as f64;
    let mut s = density(0.0) + density(t.abs());
    for k in 1..n {
        s += density(k as f64 * h) * if k % 2 == 1 { 4.0 } else { 2.0 };
    }
    1.0 - 2.0 * s * h / 3.0
}

/// Lanczos approximation, g = 7.
pub fn ln_gamma(x: f64) -> f64 {
    const C: [f64; 9] = [
        0.999_999_999_999_809_9,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_1,
        -176.615_029_162_140_6,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_572e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if x < 0.5 {
        return (std::f64::consts::PI / (std::f64::consts::PI * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut a = C[0];
    let t = x + 7.5;
    for (k, c) in C.iter().enumerate().skip(1) {
        a += c / (x + k as f64);
    }
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + a.ln()
}

/// Textbook Welch statistic and degrees of freedom.
pub fn welch_textbook(x: &[f64], y: &[f64]) -> (f64, f64) {
    let stats = |v: &[f64]| {
        let n = v.len() as f64;
        let m = v.iter().sum::<f64>() / n;
        let s2 = v.iter().map(|a| (a - m).powi(2)).sum::<f64>() / (n - 1.0);
        (n, m, s2)
    };
    let (n1, m1, s1) = stats(x);
    let (n2, m2, s2) = stats(y);
    let se2 = s1 / n1 + s2 / n2;
    let t = (m1 - m2) / se2.sqrt();
    let df = se2 * se2 / ((s1 / n1).powi(2) / (n1 - 1.0) + (s2 / n2).powi(2) / (n2 - 1.0));
    (t, df)
}

/// `k` ones followed by `n - k` zeros.
pub fn binary_sample(n: usize, k: usize) -> Vec<f64> {
    (0..n).map(|i| if i < k { 1.0 } else { 0.0 }).collect()
}
