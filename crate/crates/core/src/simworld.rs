//! Synthetic beneficiary populations and two-arm trial simulation.
//!
//! Pick-up probabilities are `clip(base_rate + U V^T + E, 0, 1)` with
//! Gaussian user factors `U`, slot factors `V` centred across slots (so the
//! low-rank part moves *when* a user answers, not how often on average) and
//! optional i.i.d. noise `E`. Outcomes are independent Bernoulli draws.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{
    split_by_phase, Arm, CallLog, CallRecord, SlotId, UserId, N_SLOTS,
};
use crate::matcomp::write_matrix_csv;
use crate::policy::{PolicyConfig, PolicyError, PolicyKind, PolicyState};
use crate::scheduler::{attempt_record, MessageCycle, ProtocolError, RetryProtocol};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("invalid world config: {0}")]
    InvalidWorld(String),
    #[error("invalid trial design: {0}")]
    InvalidTrial(String),
    #[error("user {user} dropped out on day {dropout_day} and cannot be called on day {day}")]
    DroppedOut { user: UserId, day: u32, dropout_day: u32 },
    #[error("user {0} is not part of the world")]
    UnknownUser(UserId),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldConfig {
    pub n_users: usize,
    pub n_slots: usize,
    pub rank: usize,
    pub noise_sd: f64,
    pub base_rate: f64,
    /// Standard deviation of an entry of the low-rank part before clipping.
    pub spread: f64,
    pub dropout_rate_per_week: f64,
    pub seed: u64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            n_users: 13_000,
            n_slots: N_SLOTS,
            rank: 3,
            noise_sd: 0.02,
            base_rate: 0.5,
            spread: 0.22,
            dropout_rate_per_week: 0.0,
            seed: 0,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: String| Err(SimError::InvalidWorld(m));
        if self.n_users == 0 {
            return bad("n_users must be positive".into());
        }
        if self.n_slots != N_SLOTS {
            return bad(format!("n_slots must be {N_SLOTS}, got {}", self.n_slots));
        }
        if self.rank == 0 || self.rank > self.n_users.min(N_SLOTS - 1) {
            return bad(format!(
                "rank must lie in 1..={}, got {}",
                self.n_users.min(N_SLOTS - 1),
                self.rank
            ));
        }
        if !(self.noise_sd >= 0.0) || !(self.spread >= 0.0) {
            return bad("noise_sd and spread must be non-negative".into());
        }
        if !(0.0..=1.0).contains(&self.base_rate) {
            return bad(format!("base_rate must lie in [0, 1], got {}", self.base_rate));
        }
        if !(0.0..1.0).contains(&self.dropout_rate_per_week) {
            return bad(format!(
                "dropout_rate_per_week must lie in [0, 1), got {}",
                self.dropout_rate_per_week
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct World {
    pub config: WorldConfig,
    /// `n_users x 7` pick-up probabilities.
    pub truth: DMatrix<f64>,
    pub user_factors: DMatrix<f64>,
    pub slot_factors: DMatrix<f64>,
    pub noise: DMatrix<f64>,
    pub dropout_day: Vec<Option<u32>>,
}

/// Samples a world; identical configs give identical worlds.
pub fn generate_world(config: &WorldConfig) -> Result<World, SimError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let (n, r) = (config.n_users, config.rank);
    let gauss = |rows: usize, cols: usize, rng: &mut ChaCha8Rng| {
        DMatrix::from_fn(rows, cols, |_, _| StandardNormal.sample(rng))
    };
    let raw_u: DMatrix<f64> = gauss(n, r, &mut rng);
    let mut raw_v: DMatrix<f64> = gauss(N_SLOTS, r, &mut rng);
    for mut col in raw_v.column_iter_mut() {
        let mean = col.mean();
        col.add_scalar_mut(-mean);
    }
    // centred slot factors have variance (6/7) per entry
    let scale = if config.spread > 0.0 {
        config.spread / (r as f64 * (N_SLOTS as f64 - 1.0) / N_SLOTS as f64).sqrt()
    } else {
        0.0
    };
    let user_factors = raw_u * scale.sqrt();
    let slot_factors = raw_v * scale.sqrt();
    let noise = if config.noise_sd > 0.0 {
        let d = Normal::new(0.0, config.noise_sd).expect("validated sd");
        DMatrix::from_fn(n, N_SLOTS, |_, _| d.sample(&mut rng))
    } else {
        DMatrix::zeros(n, N_SLOTS)
    };
    let low_rank = &user_factors * slot_factors.transpose();
    let truth = low_rank.zip_map(&noise, |l, e| (config.base_rate + l + e).clamp(0.0, 1.0));
    let dropout_day = (0..n)
        .map(|_| {
            if config.dropout_rate_per_week == 0.0 {
                return None;
            }
            let mut week = 0u32;
            while rng.gen::<f64>() >= config.dropout_rate_per_week {
                week += 1;
            }
            Some(week * 7 + rng.gen_range(0..7))
        })
        .collect();
    Ok(World {
        config: config.clone(),
        truth,
        user_factors,
        slot_factors,
        noise,
        dropout_day,
    })
}

impl World {
    pub fn n_users(&self) -> usize {
        self.truth.nrows()
    }

    pub fn users(&self) -> impl Iterator<Item = UserId> {
        (0..self.n_users() as u32).map(UserId)
    }

    pub fn probability(&self, user: UserId, slot: SlotId) -> Result<f64, SimError> {
        let i = user.0 as usize;
        if i >= self.n_users() {
            return Err(SimError::UnknownUser(user));
        }
        Ok(self.truth[(i, slot.index())])
    }

    pub fn is_active(&self, user: UserId, day: u32) -> bool {
        self.dropout_day
            .get(user.0 as usize)
            .copied()
            .flatten()
            .map_or(true, |d| day < d)
    }

    /// Writes the truth matrix and both factor matrices as dense CSV.
    pub fn dump<W: Write>(&self, truth: W, users: W, slots: W) -> std::io::Result<()> {
        write_matrix_csv(&self.truth, truth)?;
        write_matrix_csv(&self.user_factors, users)?;
        write_matrix_csv(&self.slot_factors, slots)
    }
}

/// Bernoulli pick-up draw for one call.
pub fn sample_outcome<R: Rng + ?Sized>(
    world: &World,
    user: UserId,
    slot: SlotId,
    day: u32,
    rng: &mut R,
) -> Result<bool, SimError> {
    let p = world.probability(user, slot)?;
    if !world.is_active(user, day) {
        return Err(SimError::DroppedOut {
            user,
            day,
            dropout_day: world.dropout_day[user.0 as usize].unwrap_or(0),
        });
    }
    Ok(rng.gen::<f64>() < p)
}

/// Two-arm trial layout: phase lengths, per-arm policies and the protocol.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrialDesign {
    pub baseline_days: u32,
    pub intervention_days: u32,
    pub treatment: PolicyConfig,
    pub control: PolicyConfig,
    pub protocol: RetryProtocol,
    pub treatment_share: f64,
    /// Spread first-message days over the first week by user id.
    pub stagger_starts: bool,
    pub seed: u64,
}

impl Default for TrialDesign {
    fn default() -> Self {
        TrialDesign {
            baseline_days: 21,
            intervention_days: 14,
            treatment: PolicyConfig::of_kind(PolicyKind::PhasedMc),
            control: PolicyConfig::of_kind(PolicyKind::Random),
            protocol: RetryProtocol::default(),
            treatment_share: 0.5,
            stagger_starts: true,
            seed: 0,
        }
    }
}

impl TrialDesign {
    pub fn validate(&self) -> Result<(), SimError> {
        if self.baseline_days == 0 || self.intervention_days == 0 {
            return Err(SimError::InvalidTrial(
                "baseline_days and intervention_days must be positive".into(),
            ));
        }
        if !(self.treatment_share > 0.0 && self.treatment_share < 1.0) {
            return Err(SimError::InvalidTrial(format!(
                "treatment_share must lie in (0, 1), got {}",
                self.treatment_share
            )));
        }
        self.treatment.validate()?;
        self.control.validate()?;
        self.protocol.validate()?;
        Ok(())
    }

    pub fn total_days(&self) -> u32 {
        self.baseline_days + self.intervention_days
    }
}

/// Seeded uniform split of `users` into (treatment, control).
pub fn assign_arms(n_users: usize, share: f64, seed: u64) -> (BTreeSet<UserId>, BTreeSet<UserId>) {
    let mut ids: Vec<UserId> = (0..n_users as u32).map(UserId).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    ids.shuffle(&mut rng);
    let n_treat = (n_users as f64 * share).round() as usize;
    let treat = ids[..n_treat].iter().copied().collect();
    let control = ids[n_treat..].iter().copied().collect();
    (treat, control)
}

/// Output of [`run_trial_detailed`].
#[derive(Debug, Clone)]
pub struct TrialRun {
    pub log: CallLog,
    pub treatment_users: BTreeSet<UserId>,
    pub control_users: BTreeSet<UserId>,
    pub treatment_state: PolicyState,
    pub control_state: PolicyState,
}

struct ArmSim {
    arm: Arm,
    config: PolicyConfig,
    state: Option<PolicyState>,
    users: Vec<UserId>,
    next_start: BTreeMap<UserId, u32>,
    cycles: BTreeMap<UserId, MessageCycle>,
    policy_rng: ChaCha8Rng,
    outcome_rng: ChaCha8Rng,
    random: PolicyConfig,
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

impl ArmSim {
    fn new(
        arm: Arm,
        users: &BTreeSet<UserId>,
        config: &PolicyConfig,
        design: &TrialDesign,
        stream: u64,
    ) -> Result<Self, SimError> {
        let state = PolicyState::new(users.iter().copied(), config, design.seed ^ stream)?;
        let next_start = users
            .iter()
            .map(|u| (*u, if design.stagger_starts { u.0 % 7 } else { 0 }))
            .collect();
        Ok(ArmSim {
            arm,
            config: config.clone(),
            state: Some(state),
            users: users.iter().copied().collect(),
            next_start,
            cycles: BTreeMap::new(),
            policy_rng: stream_rng(design.seed, 10 + stream),
            outcome_rng: stream_rng(design.seed, 20 + stream),
            random: PolicyConfig::of_kind(PolicyKind::Random),
        })
    }

    fn start_of_day(&mut self, day: u32, design: &TrialDesign, log_so_far: &[CallRecord]) -> Result<(), SimError> {
        let state = self.state.take().expect("state present between days");
        let handoff = day == design.baseline_days;
        let state = if handoff && self.config.kind == PolicyKind::PerUserExploit {
            let mine: Vec<CallRecord> = log_so_far
                .iter()
                .filter(|r| r.arm == self.arm)
                .copied()
                .collect();
            let users: BTreeSet<UserId> = self.users.iter().copied().collect();
            let log = CallLog::new(mine, users, BTreeMap::new())
                .expect("simulated records are valid");
            let (baseline, _) = split_by_phase(&log, design.baseline_days);
            state.fit_exploit(&baseline)
        } else if handoff && self.config.kind.uses_completion() {
            state.close_phase().advance_phase(&self.config)?
        } else if state.refit_due(&self.config, day) {
            state.close_phase().advance_phase(&self.config)?
        } else {
            state
        };
        self.state = Some(state);
        Ok(())
    }

    fn run_day(
        &mut self,
        day: u32,
        world: &World,
        design: &TrialDesign,
        out: &mut Vec<CallRecord>,
    ) -> Result<(), SimError> {
        let acting = if day < design.baseline_days {
            &self.random
        } else {
            &self.config
        };
        let mut made = Vec::new();
        let state = self.state.as_ref().expect("state present");
        for &user in &self.users {
            if !world.is_active(user, day) {
                self.cycles.remove(&user);
                continue;
            }
            if self.next_start[&user] == day {
                self.cycles.insert(user, MessageCycle::new(user, day));
                *self.next_start.get_mut(&user).expect("user known") += design.protocol.cadence_days;
            }
            let Some(cycle) = self.cycles.get_mut(&user) else {
                continue;
            };
            if cycle.next_day(&design.protocol) != Some(day) {
                continue;
            }
            let recommended = state.recommend(acting, user, day, &mut self.policy_rng)?;
            let slot = cycle.slot_for_today(recommended, &design.protocol);
            let p = world.probability(user, slot)?;
            let rng = &mut self.outcome_rng;
            for a in cycle.run_day(slot, &design.protocol, |_| rng.gen::<f64>() < p) {
                made.push(attempt_record(user, a, self.arm, design.baseline_days));
            }
            if cycle.is_done(&design.protocol) {
                self.cycles.remove(&user);
            }
        }
        let mut state = self.state.take().expect("state present");
        for r in &made {
            state = state.update(r)?;
        }
        self.state = Some(state);
        out.extend(made);
        Ok(())
    }
}

/// Simulates the trial and returns the labelled call log.
pub fn run_trial(world: &World, design: &TrialDesign) -> Result<CallLog, SimError> {
    Ok(run_trial_detailed(world, design)?.log)
}

/// Simulates baseline days with both arms on uniform-random slots, then
/// intervention days with the treatment arm on its configured policy.
///
/// Each arm draws from its own random streams, so changing the treatment
/// policy leaves the control arm's calls unchanged.
pub fn run_trial_detailed(world: &World, design: &TrialDesign) -> Result<TrialRun, SimError> {
    design.validate()?;
    let (treatment_users, control_users) =
        assign_arms(world.n_users(), design.treatment_share, design.seed);
    let mut arms = [
        ArmSim::new(Arm::Treatment, &treatment_users, &design.treatment, design, 1)?,
        ArmSim::new(Arm::Control, &control_users, &design.control, design, 2)?,
    ];
    let mut records = Vec::new();
    for day in 0..design.total_days() {
        for arm in arms.iter_mut() {
            arm.start_of_day(day, design, &records)?;
            arm.run_day(day, world, design, &mut records)?;
        }
    }
    let end = design.total_days();
    let dropouts: BTreeMap<UserId, u32> = world
        .users()
        .zip(world.dropout_day.iter())
        .filter_map(|(u, d)| d.filter(|&d| d < end).map(|d| (u, d)))
        .collect();
    let users: BTreeSet<UserId> = world.users().collect();
    let log = CallLog::from_parts_unchecked(records, users, dropouts);
    let [t, c] = arms;
    Ok(TrialRun {
        log,
        treatment_users,
        control_users,
        treatment_state: t.state.expect("state present"),
        control_state: c.state.expect("state present"),
    })
}
