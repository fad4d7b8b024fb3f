//! The weekly message cycle and its retry protocol.
//!
//! A message is first attempted up to three times in one slot on its start
//! day, then up to twice a day on each of the next three days, stopping at the
//! first pickup. Each day's slot comes from the policy; same-day retries reuse
//! it. The next message goes out exactly one cadence after the first call.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{Arm, CallLog, CallRecord, Phase, SlotId, UserId, MAX_RETRY, N_SLOTS};
use crate::policy::{PolicyConfig, PolicyError, PolicyState};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ProtocolError {
    #[error("invalid retry protocol: {0}")]
    Invalid(String),
}

/// Attempts allowed per day of a cycle and the message cadence.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetryProtocol {
    pub attempts_per_day: Vec<u8>,
    pub cadence_days: u32,
    /// Reuse the first day's slot on retry days instead of asking the policy
    /// again.
    pub freeze_slot: bool,
}

impl Default for RetryProtocol {
    fn default() -> Self {
        RetryProtocol {
            attempts_per_day: vec![3, 2, 2, 2],
            cadence_days: 7,
            freeze_slot: false,
        }
    }
}

impl RetryProtocol {
    pub fn validate(&self) -> Result<(), ProtocolError> {
        if self.attempts_per_day.is_empty() {
            return Err(ProtocolError::Invalid("no attempt days".into()));
        }
        if let Some(&k) = self
            .attempts_per_day
            .iter()
            .find(|&&k| k == 0 || k > MAX_RETRY + 1)
        {
            return Err(ProtocolError::Invalid(format!(
                "attempts per day must lie in 1..={}, got {k}",
                MAX_RETRY + 1
            )));
        }
        if self.cadence_days < self.attempts_per_day.len() as u32 {
            return Err(ProtocolError::Invalid(
                "cadence shorter than the retry window".into(),
            ));
        }
        Ok(())
    }

    pub fn max_attempts(&self) -> usize {
        self.attempts_per_day.iter().map(|&k| k as usize).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Attempt {
    pub day: u32,
    pub slot: SlotId,
    pub retry: u8,
    pub picked: bool,
}

/// All attempts made for one message.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttemptPlan {
    pub user: UserId,
    pub start_day: u32,
    pub attempts: Vec<Attempt>,
    pub terminated_by_pickup: bool,
    pub next_message_day: u32,
}

impl AttemptPlan {
    /// Attempts made on each day of the cycle, in order.
    pub fn day_signature(&self) -> Vec<u8> {
        let mut sig: Vec<(u32, u8)> = Vec::new();
        for a in &self.attempts {
            match sig.last_mut() {
                Some((d, n)) if *d == a.day => *n += 1,
                _ => sig.push((a.day, 1)),
            }
        }
        sig.into_iter().map(|(_, n)| n).collect()
    }

    pub fn records(&self, arm: Arm, baseline_days: u32) -> Vec<CallRecord> {
        self.attempts
            .iter()
            .map(|a| attempt_record(self.user, a, arm, baseline_days))
            .collect()
    }
}

pub fn attempt_record(user: UserId, a: &Attempt, arm: Arm, baseline_days: u32) -> CallRecord {
    CallRecord {
        user,
        slot: a.slot,
        day: a.day,
        retry: a.retry,
        attempted: true,
        picked: a.picked,
        phase: if a.day < baseline_days {
            Phase::Baseline
        } else {
            Phase::Intervention
        },
        arm,
    }
}

/// Day-by-day state of one message cycle, for drivers that interleave many
/// users per day.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MessageCycle {
    user: UserId,
    start_day: u32,
    day_offset: usize,
    first_slot: Option<SlotId>,
    attempts: Vec<Attempt>,
    picked: bool,
}

impl MessageCycle {
    pub fn new(user: UserId, start_day: u32) -> Self {
        MessageCycle {
            user,
            start_day,
            day_offset: 0,
            first_slot: None,
            attempts: Vec::new(),
            picked: false,
        }
    }

    pub fn user(&self) -> UserId {
        self.user
    }

    pub fn start_day(&self) -> u32 {
        self.start_day
    }

    pub fn is_done(&self, protocol: &RetryProtocol) -> bool {
        self.picked || self.day_offset >= protocol.attempts_per_day.len()
    }

    /// Day on which the next batch of attempts is due, if any.
    pub fn next_day(&self, protocol: &RetryProtocol) -> Option<u32> {
        (!self.is_done(protocol)).then_some(self.start_day + self.day_offset as u32)
    }

    /// Slot to use today given the policy's recommendation.
    pub fn slot_for_today(&self, recommended: SlotId, protocol: &RetryProtocol) -> SlotId {
        match (protocol.freeze_slot, self.first_slot) {
            (true, Some(s)) => s,
            _ => recommended,
        }
    }

    /// Runs today's attempts in `slot`, stopping at the first pickup.
    /// `outcome(retry)` reports whether that attempt was picked.
    pub fn run_day(
        &mut self,
        slot: SlotId,
        protocol: &RetryProtocol,
        mut outcome: impl FnMut(u8) -> bool,
    ) -> &[Attempt] {
        let Some(day) = self.next_day(protocol) else {
            return &[];
        };
        let first = self.attempts.len();
        self.first_slot.get_or_insert(slot);
        for retry in 0..protocol.attempts_per_day[self.day_offset] {
            let picked = outcome(retry);
            self.attempts.push(Attempt {
                day,
                slot,
                retry,
                picked,
            });
            if picked {
                self.picked = true;
                break;
            }
        }
        self.day_offset += 1;
        &self.attempts[first..]
    }

    pub fn into_plan(self, protocol: &RetryProtocol) -> AttemptPlan {
        AttemptPlan {
            user: self.user,
            start_day: self.start_day,
            attempts: self.attempts,
            terminated_by_pickup: self.picked,
            next_message_day: self.start_day + protocol.cadence_days,
        }
    }
}

/// Labels attached to generated records.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CycleLabels {
    pub arm: Arm,
    pub baseline_days: u32,
}

/// Runs one full message cycle for a single user, consulting `policy` each
/// day and feeding every attempt back through `PolicyState::update`.
#[allow(clippy::too_many_arguments)]
pub fn run_message_cycle<R: Rng + ?Sized>(
    user: UserId,
    start_day: u32,
    mut state: PolicyState,
    config: &PolicyConfig,
    protocol: &RetryProtocol,
    labels: CycleLabels,
    mut outcome_source: impl FnMut(UserId, SlotId, u32, u8) -> bool,
    rng: &mut R,
) -> Result<(AttemptPlan, PolicyState), PolicyError> {
    let mut cycle = MessageCycle::new(user, start_day);
    while let Some(day) = cycle.next_day(protocol) {
        let recommended = state.recommend(config, user, day, rng)?;
        let slot = cycle.slot_for_today(recommended, protocol);
        let made = cycle
            .run_day(slot, protocol, |retry| outcome_source(user, slot, day, retry))
            .to_vec();
        for a in &made {
            state = state.update(&attempt_record(user, a, labels.arm, labels.baseline_days))?;
        }
    }
    Ok((cycle.into_plan(protocol), state))
}

/// Number of first calls (`retry == 0`) per slot.
pub fn unique_first_calls(log: &CallLog) -> [u64; N_SLOTS] {
    let mut counts = [0u64; N_SLOTS];
    for r in log.records() {
        if r.attempted && r.retry == 0 {
            counts[r.slot.index()] += 1;
        }
    }
    counts
}
