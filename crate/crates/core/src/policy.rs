//! Slot-selection policies.
//!
//! * `Random`: uniform over the seven slots (the control arm).
//! * `PhasedMc`: pools outcomes, refits a completed preference matrix at the
//!   end of every phase and samples slots from a Boltzmann distribution over
//!   the user's estimated row. Phase lengths grow geometrically and the
//!   temperature decays geometrically.
//! * `GreedyMc`: uniform for `explore_days`, then fits once and always picks
//!   the estimated best slot.
//! * `PerUserExploit`: picks each user's best slot by their own baseline
//!   pick-up rate, ignoring everybody else.
//!
//! State transitions consume `self` and return the new state.

use std::collections::BTreeMap;
use std::io::Write;

use nalgebra::DMatrix;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{CallLog, CallRecord, SlotId, UserId, N_SLOTS};
use crate::matcomp::{self, MatcompError, ObservationSet, SolverSettings, TuneResult};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PolicyError {
    #[error("user {0} is not covered by this policy state")]
    UnknownUser(UserId),
    #[error("update requires an attempted call")]
    NotAttempted,
    #[error("phase still has {0} calls of budget left")]
    PhaseNotExhausted(u64),
    #[error("invalid policy config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Matcomp(#[from] MatcompError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind {
    Random,
    PhasedMc,
    GreedyMc,
    PerUserExploit,
}

impl PolicyKind {
    pub fn uses_completion(self) -> bool {
        matches!(self, PolicyKind::PhasedMc | PolicyKind::GreedyMc)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolicyConfig {
    pub kind: PolicyKind,
    /// First-call budget of phase 0. `None` means one week of first calls,
    /// i.e. one per user covered by the state.
    pub initial_phase_len: Option<u64>,
    pub phase_growth: f64,
    pub tau0: f64,
    pub decay: f64,
    /// GreedyMc only: days of uniform exploration before the single fit.
    pub explore_days: u32,
    /// Fixed regularisation; when unset lambda is tuned on a recency holdout.
    pub lambda: Option<f64>,
    /// Re-run the grid search at every phase instead of reusing the first
    /// tuned lambda.
    pub retune_each_phase: bool,
    pub matcomp: SolverSettings,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        PolicyConfig {
            kind: PolicyKind::Random,
            initial_phase_len: None,
            phase_growth: 2.0,
            tau0: 0.2,
            decay: 0.8,
            explore_days: 21,
            lambda: None,
            retune_each_phase: true,
            matcomp: SolverSettings::default(),
        }
    }
}

impl PolicyConfig {
    pub fn of_kind(kind: PolicyKind) -> Self {
        PolicyConfig {
            kind,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<(), PolicyError> {
        let bad = |m: String| Err(PolicyError::InvalidConfig(m));
        if self.initial_phase_len == Some(0) {
            return bad("initial_phase_len must be positive".into());
        }
        if !(self.phase_growth >= 1.0) {
            return bad(format!("phase_growth must be >= 1, got {}", self.phase_growth));
        }
        if !(self.tau0 > 0.0) {
            return bad(format!("tau0 must be positive, got {}", self.tau0));
        }
        if !(self.decay > 0.0 && self.decay <= 1.0) {
            return bad(format!("decay must lie in (0, 1], got {}", self.decay));
        }
        if let Some(l) = self.lambda {
            if !(l > 0.0) {
                return bad(format!("lambda must be positive, got {l}"));
            }
        }
        let m = &self.matcomp;
        if m.lambda_grid.is_empty() || m.lambda_grid.iter().any(|l| !(*l > 0.0)) {
            return bad("lambda_grid must be non-empty and positive".into());
        }
        if !(m.holdout_fraction > 0.0 && m.holdout_fraction < 1.0) {
            return bad(format!("holdout_fraction must lie in (0, 1), got {}", m.holdout_fraction));
        }
        if !(m.tol > 0.0) || m.max_iter == 0 {
            return bad("solver tol and max_iter must be positive".into());
        }
        Ok(())
    }

    pub fn phase_budget(&self, initial: u64, phase: u32) -> u64 {
        (initial as f64 * self.phase_growth.powi(phase as i32)).ceil() as u64
    }

    pub fn temperature(&self, phase: u32) -> f64 {
        self.tau0 * self.decay.powi(phase as i32)
    }
}

/// Boltzmann distribution `p_j ∝ exp(x_j / tau)` over a row of estimates.
pub fn boltzmann_probabilities(row: &[f64], tau: f64) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = row.iter().map(|x| ((x - max) / tau).exp()).collect();
    let z: f64 = w.iter().sum();
    w.into_iter().map(|x| x / z).collect()
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax_lowest(row: &[f64]) -> usize {
    let mut best = 0;
    for (k, &x) in row.iter().enumerate() {
        if x > row[best] {
            best = k;
        }
    }
    best
}

fn sample_categorical<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (k, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return k;
        }
    }
    // rounding left u >= acc; take the last slot with positive mass
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(probs.len() - 1)
}

/// The per-user exploit policy `q`: one deterministic slot per user.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ExploitTable {
    pub choice: BTreeMap<UserId, SlotId>,
}

impl ExploitTable {
    /// Slot for `user`; users never seen fall back to slot 1.
    pub fn slot(&self, user: UserId) -> SlotId {
        self.choice.get(&user).copied().unwrap_or(SlotId::from_index(0))
    }
}

/// Fits the per-user exploit policy from baseline calls: each user's slot with
/// the highest empirical pick-up rate among slots they were attempted in.
/// Ties go to the lowest slot; users with no attempts get slot 1.
pub fn fit_per_user_exploit(baseline_log: &CallLog) -> ExploitTable {
    let mut counts: BTreeMap<UserId, [(u32, u32); N_SLOTS]> = BTreeMap::new();
    for u in baseline_log.users() {
        counts.insert(*u, [(0, 0); N_SLOTS]);
    }
    for r in baseline_log.records().iter().filter(|r| r.attempted) {
        let c = &mut counts.entry(r.user).or_insert([(0, 0); N_SLOTS])[r.slot.index()];
        c.0 += r.picked as u32;
        c.1 += 1;
    }
    let choice = counts
        .into_iter()
        .map(|(u, cells)| {
            let mut best: Option<(usize, f64)> = None;
            for (j, &(picks, attempts)) in cells.iter().enumerate() {
                if attempts == 0 {
                    continue;
                }
                let rate = picks as f64 / attempts as f64;
                if best.map_or(true, |(_, b)| rate > b) {
                    best = Some((j, rate));
                }
            }
            (u, SlotId::from_index(best.map_or(0, |(j, _)| j)))
        })
        .collect();
    ExploitTable { choice }
}

/// Record of the last completion run.
#[derive(Debug, Clone, PartialEq)]
pub struct FitSummary {
    pub lambda: f64,
    pub iterations: usize,
    pub converged: bool,
    pub objective: f64,
    pub tuning: Option<TuneResult>,
}

/// Everything a policy has learned so far.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyState {
    users: Vec<UserId>,
    rows: BTreeMap<UserId, usize>,
    estimate: DMatrix<f64>,
    observations: ObservationSet,
    phase_index: u32,
    phase_budget: u64,
    initial_budget: u64,
    temperature: f64,
    lambda: Option<f64>,
    fits: u32,
    last_fit: Option<FitSummary>,
    last_error: Option<MatcompError>,
    exploit: Option<ExploitTable>,
    rng_seed: u64,
}

impl PolicyState {
    /// Fresh state over `users`. The estimate starts flat at 0.5, so a
    /// Boltzmann policy begins uniform.
    pub fn new(
        users: impl IntoIterator<Item = UserId>,
        config: &PolicyConfig,
        rng_seed: u64,
    ) -> Result<Self, PolicyError> {
        config.validate()?;
        let mut users: Vec<UserId> = users.into_iter().collect();
        users.sort();
        users.dedup();
        let rows = users.iter().enumerate().map(|(k, u)| (*u, k)).collect();
        let m = users.len();
        let initial_budget = config.initial_phase_len.unwrap_or(m.max(1) as u64);
        Ok(PolicyState {
            users,
            rows,
            estimate: DMatrix::from_element(m, N_SLOTS, 0.5),
            observations: ObservationSet::new(m, N_SLOTS),
            phase_index: 0,
            phase_budget: initial_budget,
            initial_budget,
            temperature: config.tau0,
            lambda: config.lambda,
            fits: 0,
            last_fit: None,
            last_error: None,
            exploit: None,
            rng_seed,
        })
    }

    pub fn users(&self) -> &[UserId] {
        &self.users
    }

    pub fn row_of(&self, user: UserId) -> Result<usize, PolicyError> {
        self.rows.get(&user).copied().ok_or(PolicyError::UnknownUser(user))
    }

    pub fn estimate(&self) -> &DMatrix<f64> {
        &self.estimate
    }

    pub fn observations(&self) -> &ObservationSet {
        &self.observations
    }

    pub fn phase_index(&self) -> u32 {
        self.phase_index
    }

    pub fn phase_budget(&self) -> u64 {
        self.phase_budget
    }

    pub fn temperature(&self) -> f64 {
        self.temperature
    }

    pub fn lambda(&self) -> Option<f64> {
        self.lambda
    }

    pub fn fits(&self) -> u32 {
        self.fits
    }

    pub fn last_fit(&self) -> Option<&FitSummary> {
        self.last_fit.as_ref()
    }

    /// Solver error from the latest phase change, if it failed.
    pub fn last_error(&self) -> Option<&MatcompError> {
        self.last_error.as_ref()
    }

    pub fn rng_seed(&self) -> u64 {
        self.rng_seed
    }

    pub fn exploit_table(&self) -> Option<&ExploitTable> {
        self.exploit.as_ref()
    }

    /// Boltzmann probabilities over the user's estimated row at the current
    /// temperature.
    pub fn slot_probabilities(&self, user: UserId) -> Result<Vec<f64>, PolicyError> {
        let i = self.row_of(user)?;
        let row: Vec<f64> = self.estimate.row(i).iter().copied().collect();
        Ok(boltzmann_probabilities(&row, self.temperature))
    }

    /// Slot to call `user` on `day`. Ties break toward the lowest slot.
    pub fn recommend<R: Rng + ?Sized>(
        &self,
        config: &PolicyConfig,
        user: UserId,
        day: u32,
        rng: &mut R,
    ) -> Result<SlotId, PolicyError> {
        let i = self.row_of(user)?;
        let j = match config.kind {
            PolicyKind::Random => rng.gen_range(0..N_SLOTS),
            PolicyKind::PhasedMc => {
                let probs = self.slot_probabilities(user)?;
                sample_categorical(&probs, rng)
            }
            PolicyKind::GreedyMc => {
                if day < config.explore_days || self.fits == 0 {
                    rng.gen_range(0..N_SLOTS)
                } else {
                    let row: Vec<f64> = self.estimate.row(i).iter().copied().collect();
                    argmax_lowest(&row)
                }
            }
            PolicyKind::PerUserExploit => {
                return Ok(self
                    .exploit
                    .as_ref()
                    .map_or(SlotId::from_index(0), |t| t.slot(user)))
            }
        };
        Ok(SlotId::from_index(j))
    }

    /// Pools one attempted call. First calls of a day (`retry == 0`) count
    /// against the phase budget.
    pub fn update(mut self, record: &CallRecord) -> Result<Self, PolicyError> {
        if !record.attempted {
            return Err(PolicyError::NotAttempted);
        }
        let i = self.row_of(record.user)?;
        self.observations.pool(
            i,
            record.slot.index(),
            if record.picked { 1.0 } else { 0.0 },
            record.day,
        )?;
        if record.retry == 0 {
            self.phase_budget = self.phase_budget.saturating_sub(1);
        }
        Ok(self)
    }

    /// Ends the current phase early (used when control is handed to the
    /// policy mid-phase).
    pub fn close_phase(mut self) -> Self {
        self.phase_budget = 0;
        self
    }

    /// Whether a completion-based policy should refit before serving `day`.
    pub fn refit_due(&self, config: &PolicyConfig, day: u32) -> bool {
        match config.kind {
            PolicyKind::PhasedMc => self.phase_budget == 0,
            PolicyKind::GreedyMc => self.fits == 0 && day >= config.explore_days,
            _ => false,
        }
    }

    /// Refits the estimate on all pooled observations, clips it to [0, 1]
    /// and moves to the next phase with a grown budget and lower temperature.
    ///
    /// Solver failures do not abort: the previous estimate is kept and the
    /// error is exposed through [`PolicyState::last_error`].
    pub fn advance_phase(mut self, config: &PolicyConfig) -> Result<Self, PolicyError> {
        if self.phase_budget > 0 {
            return Err(PolicyError::PhaseNotExhausted(self.phase_budget));
        }
        match self.fit(config) {
            Ok(summary) => {
                self.lambda = Some(summary.lambda);
                self.last_fit = Some(summary);
                self.last_error = None;
                self.fits += 1;
            }
            Err(e) => self.last_error = Some(e),
        }
        self.phase_index += 1;
        self.phase_budget = config.phase_budget(self.initial_budget, self.phase_index);
        self.temperature = config.temperature(self.phase_index);
        Ok(self)
    }

    fn fit(&mut self, config: &PolicyConfig) -> Result<FitSummary, MatcompError> {
        let s = &config.matcomp;
        let obs = if s.pooled_weights {
            self.observations.clone()
        } else {
            self.observations.with_unit_weights()
        };
        if obs.is_empty() {
            return Err(MatcompError::EmptyObservations);
        }
        let (lambda, tuning) = match (config.lambda, self.lambda) {
            (Some(l), _) => (l, None),
            (None, Some(l)) if !config.retune_each_phase => (l, None),
            _ => {
                let t = matcomp::tune_lambda(&obs, &s.lambda_grid, s.holdout_fraction, s.tol, s.max_iter)?;
                (t.best_lambda, Some(t))
            }
        };
        let fit = matcomp::complete(&obs, lambda, s.tol, s.max_iter)?;
        self.estimate = fit.values.map(|x| x.clamp(0.0, 1.0));
        Ok(FitSummary {
            lambda,
            iterations: fit.iterations,
            converged: fit.converged,
            objective: fit.objective,
            tuning,
        })
    }

    /// Installs a per-user exploit table fitted from `baseline_log`.
    pub fn fit_exploit(mut self, baseline_log: &CallLog) -> Self {
        self.exploit = Some(fit_per_user_exploit(baseline_log));
        self
    }

    /// Writes a `# phase,budget,temperature,lambda` header line followed by
    /// the estimate as CSV.
    pub fn write_snapshot<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(
            w,
            "# phase={},budget={},temperature={},lambda={}",
            self.phase_index,
            self.phase_budget,
            self.temperature,
            self.lambda.map_or("none".to_string(), |l| l.to_string())
        )?;
        matcomp::write_matrix_csv(&self.estimate, w)
    }
}
