//! Trial statistics: pick-up rates, tiering, t-tests, difference in
//! differences, the recommendation distribution, importance-sampling replay
//! and a user-level bootstrap.
//!
//! Every function is pure over an immutable [`CallLog`].

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};
use thiserror::Error;

use crate::domain::{filter_active, split_by_phase, Arm, CallLog, CallRecord, SlotId, UserId, N_SLOTS};
use crate::policy::{fit_per_user_exploit, ExploitTable};
use crate::scheduler::unique_first_calls;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AnalysisError {
    #[error("no attempted calls")]
    NoAttempts,
    #[error("no first calls")]
    NoFirstCalls,
    #[error("no users")]
    NoUsers,
    #[error("sample {which} has {len} elements, need at least 2")]
    SampleTooSmall { which: u8, len: usize },
    #[error("both samples have zero variance and equal means ({mean}); the test is undefined")]
    DegenerateVariance { mean: f64 },
    #[error("tier fractions top {top} + bottom {bottom} exceed 1")]
    DegenerateTiers { top: f64, bottom: f64 },
    #[error("behavior probability for slot {0} is zero")]
    ZeroBehaviorProbability(SlotId),
    #[error("invalid behavior distribution: {0}")]
    InvalidBehavior(String),
    #[error("invalid bootstrap setting: {0}")]
    InvalidBootstrap(String),
    #[error("every bootstrap resample failed ({0})")]
    AllResamplesFailed(usize),
}

fn attempted(log: &CallLog) -> impl Iterator<Item = &CallRecord> {
    log.records().iter().filter(|r| r.attempted)
}

/// Picks over attempts across every record.
pub fn pooled_pr(log: &CallLog) -> Result<f64, AnalysisError> {
    let (p, a) = attempted(log).fold((0u64, 0u64), |(p, a), r| (p + r.picked as u64, a + 1));
    if a == 0 {
        return Err(AnalysisError::NoAttempts);
    }
    Ok(p as f64 / a as f64)
}

/// Per-user pick-up rates and their unweighted mean.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserRates {
    pub per_user: BTreeMap<UserId, f64>,
    pub attempts: BTreeMap<UserId, u64>,
    pub user_avg: f64,
    /// Users present in the log without any attempt.
    pub excluded: Vec<UserId>,
}

pub fn user_pr(log: &CallLog) -> Result<UserRates, AnalysisError> {
    let mut counts: BTreeMap<UserId, (u64, u64)> = BTreeMap::new();
    for r in attempted(log) {
        let c = counts.entry(r.user).or_default();
        c.0 += r.picked as u64;
        c.1 += 1;
    }
    if counts.is_empty() {
        return Err(AnalysisError::NoAttempts);
    }
    let per_user: BTreeMap<UserId, f64> = counts
        .iter()
        .map(|(&u, &(p, a))| (u, p as f64 / a as f64))
        .collect();
    let user_avg = per_user.values().sum::<f64>() / per_user.len() as f64;
    let excluded = log
        .users()
        .iter()
        .filter(|u| !counts.contains_key(u))
        .copied()
        .collect();
    Ok(UserRates {
        attempts: counts.into_iter().map(|(u, (_, a))| (u, a)).collect(),
        per_user,
        user_avg,
        excluded,
    })
}

/// Per-slot pick-up rates; slots without attempts are `None`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlotRates {
    pub rates: [Option<f64>; N_SLOTS],
    pub picks: [u64; N_SLOTS],
    pub attempts: [u64; N_SLOTS],
}

impl SlotRates {
    pub fn rate(&self, slot: SlotId) -> Option<f64> {
        self.rates[slot.index()]
    }
}

pub fn slot_pr(log: &CallLog) -> Result<SlotRates, AnalysisError> {
    let mut picks = [0u64; N_SLOTS];
    let mut attempts = [0u64; N_SLOTS];
    for r in attempted(log) {
        picks[r.slot.index()] += r.picked as u64;
        attempts[r.slot.index()] += 1;
    }
    if attempts.iter().all(|&a| a == 0) {
        return Err(AnalysisError::NoAttempts);
    }
    let rates = std::array::from_fn(|j| (attempts[j] > 0).then(|| picks[j] as f64 / attempts[j] as f64));
    Ok(SlotRates {
        rates,
        picks,
        attempts,
    })
}

/// All three rate views of one log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateReport {
    pub pooled: f64,
    pub attempts: u64,
    pub users: UserRates,
    pub slots: SlotRates,
}

pub fn rate_report(log: &CallLog) -> Result<RateReport, AnalysisError> {
    Ok(RateReport {
        pooled: pooled_pr(log)?,
        attempts: log.total_attempted(),
        users: user_pr(log)?,
        slots: slot_pr(log)?,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Tier {
    High,
    Mid,
    Low,
}

impl Tier {
    pub const ALL: [Tier; 3] = [Tier::High, Tier::Mid, Tier::Low];
}

/// One arm's users split into High/Mid/Low by their pick-up rate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TierSplit {
    pub high: BTreeSet<UserId>,
    pub mid: BTreeSet<UserId>,
    pub low: BTreeSet<UserId>,
    pub top_fraction: f64,
    pub bottom_fraction: f64,
    /// This arm's own share of users at PR 1 and PR 0.
    pub own_top: f64,
    pub own_bottom: f64,
}

impl TierSplit {
    pub fn tier(&self, tier: Tier) -> &BTreeSet<UserId> {
        match tier {
            Tier::High => &self.high,
            Tier::Mid => &self.mid,
            Tier::Low => &self.low,
        }
    }
}

fn extreme_fractions(rates: &BTreeMap<UserId, f64>) -> (f64, f64) {
    let n = rates.len() as f64;
    let top = rates.values().filter(|&&p| p == 1.0).count() as f64 / n;
    let bottom = rates.values().filter(|&&p| p == 0.0).count() as f64 / n;
    (top, bottom)
}

fn split_arm(rates: &BTreeMap<UserId, f64>, top: f64, bottom: f64, own: (f64, f64)) -> TierSplit {
    let n = rates.len();
    let k_top = ((top * n as f64).round() as usize).min(n);
    let k_bottom = ((bottom * n as f64).round() as usize).min(n - k_top);
    let mut desc: Vec<(UserId, f64)> = rates.iter().map(|(&u, &p)| (u, p)).collect();
    desc.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let high: BTreeSet<UserId> = desc[..k_top].iter().map(|x| x.0).collect();
    let mut rest: Vec<(UserId, f64)> = desc[k_top..].to_vec();
    rest.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
    let low: BTreeSet<UserId> = rest[..k_bottom].iter().map(|x| x.0).collect();
    let mid = rest[k_bottom..].iter().map(|x| x.0).collect();
    TierSplit {
        high,
        mid,
        low,
        top_fraction: top,
        bottom_fraction: bottom,
        own_top: own.0,
        own_bottom: own.1,
    }
}

/// Removes the same top and bottom fractions from both arms. The fractions are
/// the larger of the two arms' shares of users with PR 1 and PR 0. Ties at a
/// cut go to the lower user id.
pub fn tier_split(
    treatment: &BTreeMap<UserId, f64>,
    control: &BTreeMap<UserId, f64>,
) -> Result<(TierSplit, TierSplit), AnalysisError> {
    if treatment.is_empty() || control.is_empty() {
        return Err(AnalysisError::NoUsers);
    }
    let ft = extreme_fractions(treatment);
    let fc = extreme_fractions(control);
    let top = ft.0.max(fc.0);
    let bottom = ft.1.max(fc.1);
    if top + bottom > 1.0 {
        return Err(AnalysisError::DegenerateTiers { top, bottom });
    }
    Ok((split_arm(treatment, top, bottom, ft), split_arm(control, top, bottom, fc)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TTestKind {
    #[default]
    Welch,
    Pooled,
}

impl std::str::FromStr for TTestKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "welch" => Ok(TTestKind::Welch),
            "pooled" => Ok(TTestKind::Pooled),
            _ => Err(format!("unknown t-test `{s}` (welch|pooled)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestResult {
    pub statistic: f64,
    pub df: f64,
    pub p_value: f64,
    pub n1: usize,
    pub n2: usize,
    pub mean1: f64,
    pub mean2: f64,
    pub pct_improvement: Option<f64>,
}

/// `100 (m1 - m2) / m2`, absent when `m2` is not positive.
pub fn pct_improvement(m1: f64, m2: f64) -> Option<f64> {
    (m2 > 0.0).then(|| 100.0 * (m1 - m2) / m2)
}

fn mean_var(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    let v = x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (n - 1.0);
    (m, v)
}

fn two_sided_p(t: f64, df: f64) -> f64 {
    if t.is_infinite() {
        return 0.0;
    }
    let dist = StudentsT::new(0.0, 1.0, df).expect("df is positive");
    (2.0 * dist.sf(t.abs())).clamp(0.0, 1.0)
}

/// Two-sample t-test. Welch uses the Welch-Satterthwaite degrees of freedom.
pub fn t_test(x1: &[f64], x2: &[f64], kind: TTestKind) -> Result<TestResult, AnalysisError> {
    for (which, x) in [(1u8, x1), (2u8, x2)] {
        if x.len() < 2 {
            return Err(AnalysisError::SampleTooSmall { which, len: x.len() });
        }
    }
    let (n1, n2) = (x1.len() as f64, x2.len() as f64);
    let (m1, v1) = mean_var(x1);
    let (m2, v2) = mean_var(x2);
    let (se, df) = match kind {
        TTestKind::Welch => {
            let (a, b) = (v1 / n1, v2 / n2);
            let df = if a + b > 0.0 {
                (a + b).powi(2) / (a * a / (n1 - 1.0) + b * b / (n2 - 1.0))
            } else {
                n1 + n2 - 2.0
            };
            ((a + b).sqrt(), df)
        }
        TTestKind::Pooled => {
            let df = n1 + n2 - 2.0;
            let sp2 = ((n1 - 1.0) * v1 + (n2 - 1.0) * v2) / df;
            ((sp2 * (1.0 / n1 + 1.0 / n2)).sqrt(), df)
        }
    };
    let statistic = if se > 0.0 {
        (m1 - m2) / se
    } else if m1 == m2 {
        return Err(AnalysisError::DegenerateVariance { mean: m1 });
    } else {
        f64::INFINITY.copysign(m1 - m2)
    };
    Ok(TestResult {
        statistic,
        df,
        p_value: two_sided_p(statistic, df),
        n1: x1.len(),
        n2: x2.len(),
        mean1: m1,
        mean2: m2,
        pct_improvement: pct_improvement(m1, m2),
    })
}

/// Paired t-test on `x1[k] - x2[k]`.
pub fn paired_t_test(x1: &[f64], x2: &[f64]) -> Result<TestResult, AnalysisError> {
    assert_eq!(x1.len(), x2.len(), "paired samples differ in length");
    if x1.len() < 2 {
        return Err(AnalysisError::SampleTooSmall { which: 1, len: x1.len() });
    }
    let d: Vec<f64> = x1.iter().zip(x2).map(|(a, b)| a - b).collect();
    let n = d.len() as f64;
    let (md, vd) = mean_var(&d);
    let se = (vd / n).sqrt();
    let statistic = if se > 0.0 {
        md / se
    } else if md == 0.0 {
        return Err(AnalysisError::DegenerateVariance { mean: md });
    } else {
        f64::INFINITY.copysign(md)
    };
    let m1 = x1.iter().sum::<f64>() / n;
    let m2 = x2.iter().sum::<f64>() / n;
    Ok(TestResult {
        statistic,
        df: n - 1.0,
        p_value: two_sided_p(statistic, n - 1.0),
        n1: x1.len(),
        n2: x2.len(),
        mean1: m1,
        mean2: m2,
        pct_improvement: pct_improvement(m1, m2),
    })
}

/// Call-level 0/1 outcomes of the attempted calls.
pub fn outcomes(log: &CallLog) -> Vec<f64> {
    attempted(log).map(|r| r.picked as u8 as f64).collect()
}

/// Difference in differences: treatment change minus control change.
pub fn did(treatment_base: f64, treatment_int: f64, control_base: f64, control_int: f64) -> f64 {
    (treatment_int - treatment_base) - (control_int - control_base)
}

/// Share of first calls placed in each slot.
pub fn call_distribution(log: &CallLog) -> Result<[f64; N_SLOTS], AnalysisError> {
    let counts = unique_first_calls(log);
    let total: u64 = counts.iter().sum();
    if total == 0 {
        return Err(AnalysisError::NoFirstCalls);
    }
    Ok(counts.map(|c| c as f64 / total as f64))
}

/// A target policy evaluated off-policy: probability of choosing `slot` for
/// `user`.
pub trait TargetPolicy {
    fn prob(&self, user: UserId, slot: SlotId) -> f64;
}

impl TargetPolicy for ExploitTable {
    fn prob(&self, user: UserId, slot: SlotId) -> f64 {
        (self.slot(user) == slot) as u8 as f64
    }
}

/// The same slot distribution for every user.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SlotDistribution(pub [f64; N_SLOTS]);

impl SlotDistribution {
    pub fn uniform() -> Self {
        SlotDistribution([1.0 / N_SLOTS as f64; N_SLOTS])
    }
}

impl TargetPolicy for SlotDistribution {
    fn prob(&self, _user: UserId, slot: SlotId) -> f64 {
        self.0[slot.index()]
    }
}

/// Evaluates `inner` on the original id of a relabelled bootstrap user.
pub struct Relabeled<'a, T> {
    pub inner: &'a T,
    pub origin: &'a BTreeMap<UserId, UserId>,
}

impl<T: TargetPolicy> TargetPolicy for Relabeled<'_, T> {
    fn prob(&self, user: UserId, slot: SlotId) -> f64 {
        let u = self.origin.get(&user).copied().unwrap_or(user);
        self.inner.prob(u, slot)
    }
}

/// Which calls enter the importance-sampling average.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CallSet {
    /// First attempts only (`retry == 0`).
    First,
    /// Every attempted call.
    #[default]
    All,
}

impl std::str::FromStr for CallSet {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "first" => Ok(CallSet::First),
            "all" => Ok(CallSet::All),
            _ => Err(format!("unknown call set `{s}` (first|all)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IsEstimate {
    pub value: f64,
    pub n_calls: usize,
}

/// Importance-sampling value `V_q = (1/|C|) sum q(c)/b(c) r_c`.
pub fn is_value(
    log: &CallLog,
    target: &impl TargetPolicy,
    behavior: &[f64; N_SLOTS],
    call_set: CallSet,
) -> Result<IsEstimate, AnalysisError> {
    if let Some(b) = behavior.iter().find(|b| !b.is_finite() || **b < 0.0 || **b > 1.0) {
        return Err(AnalysisError::InvalidBehavior(format!("probability {b} outside [0, 1]")));
    }
    let mut sum = 0.0;
    let mut n = 0usize;
    for r in attempted(log).filter(|r| call_set == CallSet::All || r.retry == 0) {
        let b = behavior[r.slot.index()];
        if b == 0.0 {
            return Err(AnalysisError::ZeroBehaviorProbability(r.slot));
        }
        if r.picked {
            sum += target.prob(r.user, r.slot) / b;
        }
        n += 1;
    }
    if n == 0 {
        return Err(AnalysisError::NoAttempts);
    }
    Ok(IsEstimate {
        value: sum / n as f64,
        n_calls: n,
    })
}

/// A user-resampled log. Draw `k` is relabelled as user `k`; `origin` maps
/// the new ids back.
#[derive(Debug, Clone)]
pub struct Resample {
    pub log: CallLog,
    pub origin: BTreeMap<UserId, UserId>,
}

impl Resample {
    pub fn identity(log: &CallLog) -> Self {
        Resample {
            origin: log.users().iter().map(|&u| (u, u)).collect(),
            log: log.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BootstrapSettings {
    pub resamples: usize,
    pub level: f64,
}

impl Default for BootstrapSettings {
    fn default() -> Self {
        BootstrapSettings {
            resamples: 2000,
            level: 0.95,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BootstrapCi {
    pub point: f64,
    pub low: f64,
    pub high: f64,
    pub resamples: usize,
    pub failed: usize,
}

/// Type-7 (linear interpolation) sample quantile of sorted data.
fn quantile(sorted: &[f64], p: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Percentile bootstrap over users. Resample `k` draws from its own ChaCha
/// stream, so the result does not depend on thread scheduling.
pub fn bootstrap_ci<R: Rng + ?Sized>(
    log: &CallLog,
    statistic: impl Fn(&Resample) -> Result<f64, AnalysisError> + Sync,
    settings: BootstrapSettings,
    rng: &mut R,
) -> Result<BootstrapCi, AnalysisError> {
    if settings.resamples == 0 {
        return Err(AnalysisError::InvalidBootstrap("resamples must be positive".into()));
    }
    if !(settings.level > 0.0 && settings.level < 1.0) {
        return Err(AnalysisError::InvalidBootstrap(format!(
            "level {} outside (0, 1)",
            settings.level
        )));
    }
    let users: Vec<UserId> = log.users().iter().copied().collect();
    if users.len() < 2 {
        return Err(AnalysisError::NoUsers);
    }
    let mut by_user: BTreeMap<UserId, Vec<CallRecord>> = BTreeMap::new();
    for r in log.records() {
        by_user.entry(r.user).or_default().push(*r);
    }
    let point = statistic(&Resample::identity(log))?;
    let base_seed: u64 = rng.gen();
    let values: Vec<Option<f64>> = (0..settings.resamples)
        .into_par_iter()
        .map(|k| {
            let mut local = ChaCha8Rng::seed_from_u64(base_seed);
            local.set_stream(k as u64);
            let mut records = Vec::new();
            let mut origin = BTreeMap::new();
            for slot in 0..users.len() {
                let src = users[local.gen_range(0..users.len())];
                let id = UserId(slot as u32);
                origin.insert(id, src);
                if let Some(rs) = by_user.get(&src) {
                    records.extend(rs.iter().map(|r| CallRecord { user: id, ..*r }));
                }
            }
            let log = CallLog::from_parts_unchecked(records, origin.keys().copied().collect(), BTreeMap::new());
            statistic(&Resample { log, origin }).ok().filter(|v| v.is_finite())
        })
        .collect();
    let mut ok: Vec<f64> = values.iter().flatten().copied().collect();
    let failed = settings.resamples - ok.len();
    if ok.is_empty() {
        return Err(AnalysisError::AllResamplesFailed(failed));
    }
    ok.sort_by(f64::total_cmp);
    let alpha = (1.0 - settings.level) / 2.0;
    Ok(BootstrapCi {
        point,
        low: quantile(&ok, alpha),
        high: quantile(&ok, 1.0 - alpha),
        resamples: settings.resamples,
        failed,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalysisOptions {
    pub ttest: TTestKind,
    pub is_call_set: CallSet,
    pub bootstrap: BootstrapSettings,
    /// Seed for the bootstrap.
    pub seed: u64,
}

impl Default for AnalysisOptions {
    fn default() -> Self {
        AnalysisOptions {
            ttest: TTestKind::Welch,
            is_call_set: CallSet::All,
            bootstrap: BootstrapSettings::default(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ArmPair<T> {
    pub treatment: T,
    pub control: T,
}

/// Treatment against control on one stratum of calls.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub rate: ArmPair<Option<f64>>,
    pub calls: ArmPair<u64>,
    pub pct_improvement: Option<f64>,
    pub statistic: Option<f64>,
    pub p_value: Option<f64>,
}

pub fn compare(treatment: &CallLog, control: &CallLog, kind: TTestKind) -> Comparison {
    let rate = ArmPair {
        treatment: pooled_pr(treatment).ok(),
        control: pooled_pr(control).ok(),
    };
    let test = t_test(&outcomes(treatment), &outcomes(control), kind).ok();
    Comparison {
        pct_improvement: rate.treatment.zip(rate.control).and_then(|(t, c)| pct_improvement(t, c)),
        calls: ArmPair {
            treatment: treatment.total_attempted(),
            control: control.total_attempted(),
        },
        statistic: test.as_ref().map(|t| t.statistic),
        p_value: test.map(|t| t.p_value),
        rate,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseRates {
    pub baseline: Option<Comparison>,
    pub intervention: Option<Comparison>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TierRow {
    pub tier: Tier,
    pub users: ArmPair<usize>,
    pub comparison: Comparison,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TierTable {
    pub top_fraction: f64,
    pub bottom_fraction: f64,
    /// Each arm's own share of users at PR 1 and at PR 0.
    pub perfect_share: ArmPair<f64>,
    pub zero_share: ArmPair<f64>,
    pub rows: Vec<TierRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlotRow {
    pub slot: SlotId,
    pub intervention: Comparison,
    pub baseline: Option<Comparison>,
    pub did: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SlotPopulation {
    MidTier,
    AllUsers,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlotTable {
    pub population: SlotPopulation,
    pub rows: Vec<SlotRow>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OffPolicy {
    pub call_set: CallSet,
    pub n_calls: usize,
    /// IS value of the per-user exploit policy on the control arm.
    pub v_q: BootstrapCi,
    pub control_pooled: BootstrapCi,
    pub treatment_pooled: Option<f64>,
}

/// Treatment-vs-control analysis of a two-arm trial log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisReport {
    pub baseline_days: u32,
    pub options: AnalysisOptions,
    pub active_users: ArmPair<usize>,
    pub dropped_users: usize,
    pub pooled: PhaseRates,
    pub tiers: Option<TierTable>,
    pub slots: Option<SlotTable>,
    pub call_distribution: Option<ArmPair<[f64; N_SLOTS]>>,
    pub off_policy: Option<OffPolicy>,
}

fn arm_users(log: &CallLog, arm: Arm) -> BTreeSet<UserId> {
    log.records().iter().filter(|r| r.arm == arm).map(|r| r.user).collect()
}

/// Runs the whole suite: active-user filter, phase split, pooled rates per
/// phase, tiers and slot rates on the intervention, the recommendation
/// distribution and the off-policy replay on the control arm. Sections whose
/// inputs are empty are `None`.
pub fn analyze(log: &CallLog, baseline_days: u32, options: &AnalysisOptions) -> Result<AnalysisReport, AnalysisError> {
    let active = filter_active(log);
    let (base, int) = split_by_phase(&active, baseline_days);
    let arms = |l: &CallLog| (l.arm(Arm::Treatment), l.arm(Arm::Control));
    let (bt, bc) = arms(&base);
    let (it, ic) = arms(&int);
    let kind = options.ttest;
    let phase = |t: &CallLog, c: &CallLog| {
        (t.total_attempted() + c.total_attempted() > 0).then(|| compare(t, c, kind))
    };
    let pooled = PhaseRates {
        baseline: phase(&bt, &bc),
        intervention: phase(&it, &ic),
    };

    let tier_sets = match (user_pr(&it), user_pr(&ic)) {
        (Ok(t), Ok(c)) => tier_split(&t.per_user, &c.per_user).ok(),
        _ => None,
    };
    let tiers = tier_sets.as_ref().map(|(st, sc)| TierTable {
        top_fraction: st.top_fraction,
        bottom_fraction: st.bottom_fraction,
        perfect_share: ArmPair {
            treatment: st.own_top,
            control: sc.own_top,
        },
        zero_share: ArmPair {
            treatment: st.own_bottom,
            control: sc.own_bottom,
        },
        rows: Tier::ALL
            .iter()
            .map(|&tier| TierRow {
                tier,
                users: ArmPair {
                    treatment: st.tier(tier).len(),
                    control: sc.tier(tier).len(),
                },
                comparison: compare(&it.restrict_users(st.tier(tier)), &ic.restrict_users(sc.tier(tier)), kind),
            })
            .collect(),
    });

    let slots = (it.total_attempted() + ic.total_attempted() > 0).then(|| {
        let (population, (t_users, c_users)) = match &tier_sets {
            Some((st, sc)) => (SlotPopulation::MidTier, (st.mid.clone(), sc.mid.clone())),
            None => (SlotPopulation::AllUsers, (arm_users(&int, Arm::Treatment), arm_users(&int, Arm::Control))),
        };
        let by_slot = |l: &CallLog, users: &BTreeSet<UserId>, s: SlotId| l.restrict_users(users).filter(|r| r.slot == s);
        let rows = SlotId::all()
            .map(|s| {
                let intervention = compare(&by_slot(&it, &t_users, s), &by_slot(&ic, &c_users, s), kind);
                let bt_s = by_slot(&bt, &t_users, s);
                let bc_s = by_slot(&bc, &c_users, s);
                let baseline = (bt_s.total_attempted() + bc_s.total_attempted() > 0).then(|| compare(&bt_s, &bc_s, kind));
                let did = baseline.as_ref().and_then(|b| {
                    Some(did(
                        b.rate.treatment?,
                        intervention.rate.treatment?,
                        b.rate.control?,
                        intervention.rate.control?,
                    ))
                });
                SlotRow {
                    slot: s,
                    intervention,
                    baseline,
                    did,
                }
            })
            .collect();
        SlotTable { population, rows }
    });

    let call_distribution = match (call_distribution(&it), call_distribution(&ic)) {
        (Ok(t), Ok(c)) => Some(ArmPair {
            treatment: t,
            control: c,
        }),
        _ => None,
    };

    let off_policy = off_policy(&bc, &ic, &it, options).ok();

    let n_active = |arm| arm_users(&active, arm).len();
    let all_users: BTreeSet<UserId> = log.records().iter().map(|r| r.user).collect();
    let active_users = ArmPair {
        treatment: n_active(Arm::Treatment),
        control: n_active(Arm::Control),
    };
    Ok(AnalysisReport {
        baseline_days,
        options: *options,
        dropped_users: all_users.len() - active_users.treatment - active_users.control,
        active_users,
        pooled,
        tiers,
        slots,
        call_distribution,
        off_policy,
    })
}

/// Fits the per-user exploit policy on `control_base` and replays it on
/// `control_int`, assuming the control arm called uniformly at random.
pub fn off_policy(
    control_base: &CallLog,
    control_int: &CallLog,
    treatment_int: &CallLog,
    options: &AnalysisOptions,
) -> Result<OffPolicy, AnalysisError> {
    let q = fit_per_user_exploit(control_base);
    replay(control_int, &q, &SlotDistribution::uniform().0, options).map(|(v_q, control_pooled, n_calls)| OffPolicy {
        call_set: options.is_call_set,
        n_calls,
        v_q,
        control_pooled,
        treatment_pooled: pooled_pr(treatment_int).ok(),
    })
}

/// IS value of `q` on `log` and the log's own pooled rate, both with
/// bootstrap intervals. Returns `(v_q, pooled, |C|)`.
pub fn replay<T: TargetPolicy + Sync>(
    log: &CallLog,
    q: &T,
    behavior: &[f64; N_SLOTS],
    options: &AnalysisOptions,
) -> Result<(BootstrapCi, BootstrapCi, usize), AnalysisError> {
    let set = options.is_call_set;
    let n_calls = is_value(log, q, behavior, set)?.n_calls;
    let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
    let v_q = bootstrap_ci(
        log,
        |r| {
            let target = Relabeled {
                inner: q,
                origin: &r.origin,
            };
            is_value(&r.log, &target, behavior, set).map(|e| e.value)
        },
        options.bootstrap,
        &mut rng,
    )?;
    let pooled = bootstrap_ci(log, |r| pooled_pr(&r.log), options.bootstrap, &mut rng)?;
    Ok((v_q, pooled, n_calls))
}

fn fmt_opt(v: Option<f64>, prec: usize) -> String {
    v.map_or_else(|| "NaN".to_string(), |x| format!("{x:.prec$}"))
}

fn fmt_p(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{x:.3e}"))
}

impl AnalysisReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Aligned plain-text tables.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "active users: treatment {} control {} (dropped {})",
            self.active_users.treatment, self.active_users.control, self.dropped_users
        );
        let _ = writeln!(s, "\npooled pick-up rate");
        let _ = writeln!(s, "{:<14}{:>10}{:>10}{:>12}", "phase", "treatment", "control", "p-value");
        for (name, c) in [("baseline", &self.pooled.baseline), ("intervention", &self.pooled.intervention)] {
            if let Some(c) = c {
                let _ = writeln!(
                    s,
                    "{:<14}{:>10}{:>10}{:>12}",
                    name,
                    fmt_opt(c.rate.treatment, 4),
                    fmt_opt(c.rate.control, 4),
                    fmt_p(c.p_value)
                );
            }
        }
        if let Some(t) = &self.tiers {
            let _ = writeln!(
                s,
                "\ntiers (top {:.2}%, bottom {:.2}% removed)",
                100.0 * t.top_fraction,
                100.0 * t.bottom_fraction
            );
            let _ = writeln!(
                s,
                "{:<6}{:>9}{:>9}{:>9}{:>9}{:>10}{:>10}{:>9}{:>12}",
                "tier", "users_t", "users_c", "calls_t", "calls_c", "rate_t", "rate_c", "impr_%", "p-value"
            );
            for r in &t.rows {
                let c = &r.comparison;
                let _ = writeln!(
                    s,
                    "{:<6}{:>9}{:>9}{:>9}{:>9}{:>10}{:>10}{:>9}{:>12}",
                    format!("{:?}", r.tier),
                    r.users.treatment,
                    r.users.control,
                    c.calls.treatment,
                    c.calls.control,
                    fmt_opt(c.rate.treatment, 4),
                    fmt_opt(c.rate.control, 4),
                    fmt_opt(c.pct_improvement, 2),
                    fmt_p(c.p_value)
                );
            }
        }
        if let Some(t) = &self.slots {
            let _ = writeln!(s, "\nslot rates ({:?})", t.population);
            let _ = writeln!(
                s,
                "{:<5}{:>10}{:>10}{:>9}{:>12}{:>10}{:>10}{:>9}",
                "slot", "int_t", "int_c", "impr_%", "p-value", "base_t", "base_c", "did"
            );
            for r in &t.rows {
                let b = r.baseline.as_ref();
                let _ = writeln!(
                    s,
                    "{:<5}{:>10}{:>10}{:>9}{:>12}{:>10}{:>10}{:>9}",
                    r.slot,
                    fmt_opt(r.intervention.rate.treatment, 4),
                    fmt_opt(r.intervention.rate.control, 4),
                    fmt_opt(r.intervention.pct_improvement, 2),
                    fmt_p(r.intervention.p_value),
                    fmt_opt(b.and_then(|b| b.rate.treatment), 4),
                    fmt_opt(b.and_then(|b| b.rate.control), 4),
                    fmt_opt(r.did, 4)
                );
            }
        }
        if let Some(pi) = &self.call_distribution {
            let _ = writeln!(s, "\nfirst-call distribution");
            let _ = writeln!(s, "{:<5}{:>10}{:>10}", "slot", "treatment", "control");
            for j in 0..N_SLOTS {
                let _ = writeln!(s, "{:<5}{:>10.4}{:>10.4}", j + 1, pi.treatment[j], pi.control[j]);
            }
        }
        if let Some(o) = &self.off_policy {
            let _ = writeln!(s, "\noff-policy replay on control ({:?} calls, |C| = {})", o.call_set, o.n_calls);
            let _ = writeln!(
                s,
                "V_q per-user exploit {:.4} [{:.4}, {:.4}]",
                o.v_q.point, o.v_q.low, o.v_q.high
            );
            let _ = writeln!(
                s,
                "control pooled       {:.4} [{:.4}, {:.4}]",
                o.control_pooled.point, o.control_pooled.low, o.control_pooled.high
            );
            let _ = writeln!(s, "treatment pooled     {}", fmt_opt(o.treatment_pooled, 4));
        }
        s
    }

    /// The first-call distribution as CSV (`slot,treatment,control`).
    pub fn distribution_csv(&self) -> Option<String> {
        let pi = self.call_distribution.as_ref()?;
        let mut s = String::from("slot,treatment,control\n");
        for j in 0..N_SLOTS {
            let _ = writeln!(s, "{},{},{}", j + 1, pi.treatment[j], pi.control[j]);
        }
        Some(s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::Phase;

    fn rec(user: u32, slot: u8, day: u32, retry: u8, picked: bool) -> CallRecord {
        CallRecord {
            user: UserId(user),
            slot: SlotId::new(slot).unwrap(),
            day,
            retry,
            attempted: true,
            picked,
            phase: Phase::Intervention,
            arm: Arm::Control,
        }
    }

    fn log(records: Vec<CallRecord>) -> CallLog {
        CallLog::from_records(records).unwrap()
    }

    #[test]
    fn pooled_trivial() {
        let l = log(vec![rec(0, 1, 0, 0, false), rec(0, 1, 0, 1, true), rec(1, 2, 0, 0, true), rec(2, 3, 0, 0, true)]);
        assert_eq!(pooled_pr(&l).unwrap(), 0.75);
        let none = log((0..10).map(|u| rec(u, 1, 0, 0, false)).collect());
        assert_eq!(pooled_pr(&none).unwrap(), 0.0);
        assert_eq!(pooled_pr(&CallLog::default()), Err(AnalysisError::NoAttempts));
    }

    #[test]
    fn user_rates_weighting() {
        // A: 2/2, B: 0/4
        let l = log(vec![
            rec(0, 1, 0, 0, false),
            rec(0, 1, 0, 1, true),
            rec(1, 1, 0, 0, false),
            rec(1, 1, 0, 1, false),
            rec(1, 1, 0, 2, false),
            rec(1, 2, 1, 0, false),
        ]);
        let u = user_pr(&l).unwrap();
        assert_eq!(u.per_user[&UserId(0)], 0.5);
        assert_eq!(u.per_user[&UserId(1)], 0.0);
        assert_eq!(u.user_avg, 0.25);
        // pooled weights by attempts: 1/6
        assert!((pooled_pr(&l).unwrap() - 1.0 / 6.0).abs() < 1e-15);

        let single = log(vec![rec(4, 1, 0, 0, false), rec(4, 1, 0, 1, true), rec(4, 3, 2, 0, true)]);
        assert_eq!(user_pr(&single).unwrap().user_avg, pooled_pr(&single).unwrap());
    }

    #[test]
    fn excluded_users_reported() {
        let mut r = rec(1, 1, 0, 0, false);
        r.attempted = false;
        let l = log(vec![rec(0, 1, 0, 0, true), r]);
        let u = user_pr(&l).unwrap();
        assert_eq!(u.excluded, vec![UserId(1)]);
        assert_eq!(u.per_user.len(), 1);
    }

    #[test]
    fn slot_one_only() {
        let l = log(vec![rec(0, 1, 0, 0, true), rec(1, 1, 0, 0, false)]);
        let s = slot_pr(&l).unwrap();
        assert_eq!(s.rates[0], Some(0.5));
        assert!(s.rates[1..].iter().all(Option::is_none));
    }

    #[test]
    fn tiers_all_perfect() {
        let m: BTreeMap<UserId, f64> = (0..5).map(|u| (UserId(u), 1.0)).collect();
        let (t, c) = tier_split(&m, &m).unwrap();
        assert_eq!(t.high.len(), 5);
        assert!(t.mid.is_empty() && t.low.is_empty());
        assert_eq!(c, t);
    }

    #[test]
    fn tiers_twenty_users_hand_sorted() {
        // treatment: 4 perfect, 2 zero of 20; control: 2 perfect, 3 zero of 20
        let rates_t = [1.0, 0.5, 1.0, 0.2, 0.0, 1.0, 0.9, 0.4, 0.0, 1.0, 0.3, 0.6, 0.7, 0.1, 0.8, 0.5, 0.2, 0.9, 0.3, 0.6];
        let rates_c = [0.5, 1.0, 0.0, 0.2, 0.0, 0.4, 0.9, 0.0, 0.6, 1.0, 0.3, 0.6, 0.7, 0.1, 0.8, 0.5, 0.2, 0.9, 0.3, 0.6];
        let t: BTreeMap<UserId, f64> = rates_t.iter().enumerate().map(|(i, &p)| (UserId(i as u32), p)).collect();
        let c: BTreeMap<UserId, f64> = rates_c.iter().enumerate().map(|(i, &p)| (UserId(100 + i as u32), p)).collect();
        let (st, sc) = tier_split(&t, &c).unwrap();
        assert_eq!((st.top_fraction, st.bottom_fraction), (0.2, 0.15));
        let ids = |s: &BTreeSet<UserId>| s.iter().map(|u| u.0).collect::<Vec<_>>();
        assert_eq!(ids(&st.high), vec![0, 2, 5, 9]);
        // PR 0 users 4, 8 then the 0.1 user 13
        assert_eq!(ids(&st.low), vec![4, 8, 13]);
        // control: 1.0 users 101, 109 then 0.9 users 106, 117
        assert_eq!(ids(&sc.high), vec![101, 106, 109, 117]);
        assert_eq!(ids(&sc.low), vec![102, 104, 107]);
        assert_eq!(st.mid.len(), 13);
        assert_eq!(sc.mid.len(), 13);
    }

    #[test]
    fn tiers_degenerate() {
        let t: BTreeMap<UserId, f64> = [(UserId(0), 1.0), (UserId(1), 0.0)].into();
        let c: BTreeMap<UserId, f64> = [(UserId(0), 1.0), (UserId(1), 1.0)].into();
        assert!(matches!(tier_split(&t, &c), Err(AnalysisError::DegenerateTiers { .. })));
        assert_eq!(tier_split(&BTreeMap::new(), &c), Err(AnalysisError::NoUsers));
    }

    #[test]
    fn t_test_identical_and_degenerate() {
        let x = [0.0, 1.0, 1.0, 0.0, 1.0];
        let r = t_test(&x, &x, TTestKind::Welch).unwrap();
        assert_eq!(r.statistic, 0.0);
        assert_eq!(r.p_value, 1.0);
        assert!(matches!(
            t_test(&[1.0, 1.0], &[1.0, 1.0, 1.0], TTestKind::Welch),
            Err(AnalysisError::DegenerateVariance { .. })
        ));
        let r = t_test(&[1.0, 1.0], &[0.0, 0.0], TTestKind::Pooled).unwrap();
        assert_eq!(r.p_value, 0.0);
        assert_eq!(r.pct_improvement, None);
        assert!(t_test(&[1.0], &[0.0, 1.0], TTestKind::Welch).is_err());
    }

    #[test]
    fn did_slot_one_and_symmetry() {
        assert!((did(0.3690, 0.3584, 0.3610, 0.3337) - 0.0167).abs() < 1e-12);
        assert_eq!(did(0.25, 0.5, 0.125, 0.375), 0.0);
        assert_eq!(did(0.1, 0.4, 0.2, 0.3), -did(0.2, 0.3, 0.1, 0.4));
    }

    #[test]
    fn distribution_arithmetic() {
        let mut rs = Vec::new();
        let mut u = 0;
        for (slot, n) in [(1u8, 2), (2, 1), (3, 1), (7, 3)] {
            for _ in 0..n {
                rs.push(rec(u, slot, 0, 0, false));
                rs.push(rec(u, slot, 0, 1, false));
                u += 1;
            }
        }
        let pi = call_distribution(&log(rs)).unwrap();
        assert_eq!(pi, [2.0 / 7.0, 1.0 / 7.0, 1.0 / 7.0, 0.0, 0.0, 0.0, 3.0 / 7.0]);
        let retries_only = log(vec![rec(0, 1, 0, 1, false)]);
        assert_eq!(call_distribution(&retries_only), Err(AnalysisError::NoFirstCalls));
    }

    #[test]
    fn is_hand_fixture() {
        let l = log((1..=7).map(|s| rec(s as u32, s, 0, 0, true)).collect());
        let q = ExploitTable {
            choice: (1..=7).map(|u| (UserId(u), SlotId::new(3).unwrap())).collect(),
        };
        let b = SlotDistribution::uniform().0;
        assert_eq!(is_value(&l, &q, &b, CallSet::First).unwrap().value, 1.0);
        let uni = is_value(&l, &SlotDistribution::uniform(), &b, CallSet::All).unwrap();
        assert_eq!(uni.value, 1.0);
        let mut b0 = b;
        b0[4] = 0.0;
        assert_eq!(
            is_value(&l, &q, &b0, CallSet::All),
            Err(AnalysisError::ZeroBehaviorProbability(SlotId::new(5).unwrap()))
        );
    }

    #[test]
    fn bootstrap_boundaries() {
        let l = log((0..10).map(|u| rec(u, 1, 0, 0, u % 2 == 0)).collect());
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = BootstrapSettings {
            resamples: 50,
            level: 0.9,
        };
        let c = bootstrap_ci(&l, |_| Ok(0.3), s, &mut rng).unwrap();
        assert_eq!((c.low, c.high, c.point), (0.3, 0.3, 0.3));
        let one = BootstrapSettings { resamples: 1, ..s };
        let c = bootstrap_ci(&l, |r| pooled_pr(&r.log), one, &mut rng).unwrap();
        assert_eq!(c.low, c.high);
        let c = bootstrap_ci(
            &l,
            |r| if r.origin[&UserId(0)] == UserId(1) { Err(AnalysisError::NoAttempts) } else { Ok(1.0) },
            s,
            &mut rng,
        )
        .unwrap();
        assert!(c.failed > 0 && c.failed < 50);
    }

    #[test]
    fn bootstrap_is_deterministic() {
        let l = log((0..30).map(|u| rec(u, 1 + (u % 7) as u8, 0, 0, u % 3 == 0)).collect());
        let s = BootstrapSettings::default();
        let a = bootstrap_ci(&l, |r| pooled_pr(&r.log), s, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = bootstrap_ci(&l, |r| pooled_pr(&r.log), s, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn type7_quantiles() {
        let x = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(quantile(&x, 0.0), 1.0);
        assert_eq!(quantile(&x, 1.0), 4.0);
        assert_eq!(quantile(&x, 0.5), 2.5);
        assert!((quantile(&x, 0.25) - 1.75).abs() < 1e-15);
    }
}
