//! Core call-log types shared by every other module.
//!
//! A [`CallRecord`] is one call attempt `(user, slot, day, retry)` with its
//! attempted/picked flags. Day indices are trial-relative (day 0 is the first
//! baseline day); calendar dates never enter the library.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Number of daily call windows.
pub const N_SLOTS: usize = 7;

/// Maximum same-day retry index (`r = 0` is the first call of the day).
pub const MAX_RETRY: u8 = 2;

pub const LOG_HEADER: [&str; 8] = [
    "user_id", "slot_id", "day", "retry", "attempted", "picked", "phase", "arm",
];
pub const DROPOUT_HEADER: [&str; 2] = ["user_id", "dropout_day"];

#[derive(Debug, Error)]
pub enum DomainError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("row {row}: {message}")]
    MalformedRow { row: u64, message: String },
    #[error("row {row}: duplicate call key (user {user}, slot {slot}, day {day}, retry {retry})")]
    DuplicateKey {
        row: u64,
        user: UserId,
        slot: SlotId,
        day: u32,
        retry: u8,
    },
    #[error("row {row}: call marked picked but not attempted")]
    PickedWithoutAttempt { row: u64 },
    #[error("slot id {0} outside 1..=7")]
    InvalidSlot(i64),
    #[error("retry index {0} exceeds {MAX_RETRY}")]
    InvalidRetry(u8),
    #[error("record references user {0} missing from the user set")]
    UnknownUser(UserId),
    #[error("invalid slot table: {0}")]
    InvalidSlotTable(String),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct UserId(pub u32);

impl fmt::Display for UserId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

/// One of the seven call windows, numbered 1..=7.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub struct SlotId(u8);

impl SlotId {
    pub fn new(id: u8) -> Result<Self, DomainError> {
        if (1..=N_SLOTS as u8).contains(&id) {
            Ok(SlotId(id))
        } else {
            Err(DomainError::InvalidSlot(id as i64))
        }
    }

    /// Slot for a zero-based column index. Panics when `index >= 7`.
    pub fn from_index(index: usize) -> Self {
        assert!(index < N_SLOTS, "slot index {index} out of range");
        SlotId(index as u8 + 1)
    }

    pub fn get(self) -> u8 {
        self.0
    }

    /// Zero-based column index.
    pub fn index(self) -> usize {
        self.0 as usize - 1
    }

    pub fn all() -> impl Iterator<Item = SlotId> {
        (1..=N_SLOTS as u8).map(SlotId)
    }
}

impl TryFrom<u8> for SlotId {
    type Error = DomainError;
    fn try_from(v: u8) -> Result<Self, Self::Error> {
        SlotId::new(v)
    }
}

impl From<SlotId> for u8 {
    fn from(s: SlotId) -> u8 {
        s.0
    }
}

impl fmt::Display for SlotId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

/// Seconds since midnight.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct TimeOfDay(u32);

impl TimeOfDay {
    pub fn hms(h: u32, m: u32, s: u32) -> Self {
        TimeOfDay(h * 3600 + m * 60 + s)
    }

    pub fn seconds(self) -> u32 {
        self.0
    }
}

impl FromStr for TimeOfDay {
    type Err = DomainError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || DomainError::InvalidSlotTable(format!("bad time {s:?}, expected HH:MM:SS"));
        let parts: Vec<&str> = s.trim().split(':').collect();
        if parts.len() != 3 {
            return Err(bad());
        }
        let nums: Vec<u32> = parts
            .iter()
            .map(|p| p.parse::<u32>().map_err(|_| bad()))
            .collect::<Result<_, _>>()?;
        if nums[0] > 23 || nums[1] > 59 || nums[2] > 59 {
            return Err(bad());
        }
        Ok(TimeOfDay::hms(nums[0], nums[1], nums[2]))
    }
}

impl fmt::Display for TimeOfDay {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:02}:{:02}:{:02}",
            self.0 / 3600,
            (self.0 / 60) % 60,
            self.0 % 60
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SlotWindow {
    pub slot: SlotId,
    pub start: TimeOfDay,
    pub end: TimeOfDay,
}

/// Mapping from slot ids to daily time windows, kept in table row order.
///
/// The default table swaps ids 2 and 3 relative to chronological order
/// (id 3 is 08:45-10:45, id 2 is 10:45-12:45). That ordering is data and
/// is preserved as-is.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SlotTable {
    rows: Vec<SlotWindow>,
}

const WINDOW_SECS: u32 = 2 * 3600;

impl Default for SlotTable {
    fn default() -> Self {
        let ids_in_time_order = [1u8, 3, 2, 4, 5, 6, 7];
        let rows = ids_in_time_order
            .iter()
            .enumerate()
            .map(|(k, &id)| {
                let start = TimeOfDay::hms(6, 45, 0).0 + k as u32 * WINDOW_SECS;
                SlotWindow {
                    slot: SlotId(id),
                    start: TimeOfDay(start),
                    end: TimeOfDay(start + WINDOW_SECS),
                }
            })
            .collect();
        SlotTable { rows }
    }
}

impl SlotTable {
    /// Builds a table from rows, checking that all seven ids appear once and
    /// that windows are two hours wide, contiguous and non-overlapping.
    pub fn new(rows: Vec<SlotWindow>) -> Result<Self, DomainError> {
        if rows.len() != N_SLOTS {
            return Err(DomainError::InvalidSlotTable(format!(
                "expected {N_SLOTS} rows, got {}",
                rows.len()
            )));
        }
        let ids: BTreeSet<SlotId> = rows.iter().map(|r| r.slot).collect();
        if ids.len() != N_SLOTS {
            return Err(DomainError::InvalidSlotTable("duplicate slot id".into()));
        }
        let mut sorted = rows.clone();
        sorted.sort_by_key(|r| r.start);
        for w in &sorted {
            if w.end.0 != w.start.0 + WINDOW_SECS {
                return Err(DomainError::InvalidSlotTable(format!(
                    "slot {} window {}-{} is not two hours wide",
                    w.slot, w.start, w.end
                )));
            }
        }
        for pair in sorted.windows(2) {
            if pair[0].end != pair[1].start {
                return Err(DomainError::InvalidSlotTable(format!(
                    "windows of slots {} and {} are not contiguous",
                    pair[0].slot, pair[1].slot
                )));
            }
        }
        Ok(SlotTable { rows })
    }

    /// Reads a `slot_id,start,end` CSV override.
    pub fn from_csv_path(path: &Path) -> Result<Self, DomainError> {
        let file = open(path)?;
        Self::from_csv_reader(file)
    }

    pub fn from_csv_reader<R: Read>(reader: R) -> Result<Self, DomainError> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        expect_header(&mut rdr, &["slot_id", "start", "end"])?;
        let mut rows = Vec::new();
        for rec in rdr.records() {
            let rec = rec?;
            let row = row_number(&rec);
            let field = |k: usize| rec.get(k).ok_or_else(|| malformed(row, "missing field"));
            let id: u8 = field(0)?
                .parse()
                .map_err(|_| malformed(row, "slot_id is not an integer"))?;
            rows.push(SlotWindow {
                slot: SlotId::new(id)?,
                start: field(1)?.parse()?,
                end: field(2)?.parse()?,
            });
        }
        SlotTable::new(rows)
    }

    pub fn rows(&self) -> &[SlotWindow] {
        &self.rows
    }

    pub fn window(&self, slot: SlotId) -> SlotWindow {
        *self
            .rows
            .iter()
            .find(|r| r.slot == slot)
            .expect("validated table holds every slot")
    }

    /// Slot whose half-open window `[start, end)` contains `t`.
    pub fn slot_at(&self, t: TimeOfDay) -> Option<SlotId> {
        self.rows
            .iter()
            .find(|r| r.start <= t && t < r.end)
            .map(|r| r.slot)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Baseline,
    Intervention,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Arm {
    Treatment,
    Control,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Baseline => "baseline",
            Phase::Intervention => "intervention",
        }
    }
}

impl Arm {
    pub fn as_str(self) -> &'static str {
        match self {
            Arm::Treatment => "treatment",
            Arm::Control => "control",
        }
    }
}

impl FromStr for Phase {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "baseline" => Ok(Phase::Baseline),
            "intervention" => Ok(Phase::Intervention),
            other => Err(format!("unknown phase {other:?}")),
        }
    }
}

impl FromStr for Arm {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "treatment" => Ok(Arm::Treatment),
            "control" => Ok(Arm::Control),
            other => Err(format!("unknown arm {other:?}")),
        }
    }
}

/// One call attempt.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CallRecord {
    pub user: UserId,
    pub slot: SlotId,
    pub day: u32,
    pub retry: u8,
    pub attempted: bool,
    pub picked: bool,
    pub phase: Phase,
    pub arm: Arm,
}

/// Unique key of a call.
pub type CallKey = (UserId, SlotId, u32, u8);

impl CallRecord {
    pub fn key(&self) -> CallKey {
        (self.user, self.slot, self.day, self.retry)
    }

    /// Checks the per-record invariants (picked implies attempted, retry <= 2).
    pub fn validate(&self) -> Result<(), DomainError> {
        if self.retry > MAX_RETRY {
            return Err(DomainError::InvalidRetry(self.retry));
        }
        if self.picked && !self.attempted {
            return Err(DomainError::PickedWithoutAttempt { row: 0 });
        }
        Ok(())
    }
}

/// A validated collection of call records.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct CallLog {
    records: Vec<CallRecord>,
    users: BTreeSet<UserId>,
    dropout_day: BTreeMap<UserId, u32>,
}

impl CallLog {
    pub fn new(
        records: Vec<CallRecord>,
        users: BTreeSet<UserId>,
        dropout_day: BTreeMap<UserId, u32>,
    ) -> Result<Self, DomainError> {
        let mut seen = BTreeSet::new();
        for (k, r) in records.iter().enumerate() {
            let row = k as u64 + 1;
            r.validate().map_err(|e| match e {
                DomainError::PickedWithoutAttempt { .. } => {
                    DomainError::PickedWithoutAttempt { row }
                }
                other => other,
            })?;
            if !users.contains(&r.user) {
                return Err(DomainError::UnknownUser(r.user));
            }
            if !seen.insert(r.key()) {
                return Err(DomainError::DuplicateKey {
                    row,
                    user: r.user,
                    slot: r.slot,
                    day: r.day,
                    retry: r.retry,
                });
            }
        }
        Ok(CallLog {
            records,
            users,
            dropout_day,
        })
    }

    /// Builds a log whose user set is exactly the users appearing in `records`.
    pub fn from_records(records: Vec<CallRecord>) -> Result<Self, DomainError> {
        let users = records.iter().map(|r| r.user).collect();
        CallLog::new(records, users, BTreeMap::new())
    }

    /// Constructor for records already known to satisfy every invariant.
    pub(crate) fn from_parts_unchecked(
        records: Vec<CallRecord>,
        users: BTreeSet<UserId>,
        dropout_day: BTreeMap<UserId, u32>,
    ) -> Self {
        debug_assert!(CallLog::new(records.clone(), users.clone(), dropout_day.clone()).is_ok());
        CallLog {
            records,
            users,
            dropout_day,
        }
    }

    pub fn records(&self) -> &[CallRecord] {
        &self.records
    }

    pub fn users(&self) -> &BTreeSet<UserId> {
        &self.users
    }

    pub fn dropout_days(&self) -> &BTreeMap<UserId, u32> {
        &self.dropout_day
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn with_dropouts(mut self, dropout_day: BTreeMap<UserId, u32>) -> Self {
        self.dropout_day = dropout_day;
        self
    }

    /// Last recorded day plus one, or 0 for an empty log.
    pub fn end_day(&self) -> u32 {
        self.records.iter().map(|r| r.day + 1).max().unwrap_or(0)
    }

    /// Keeps the records matching `keep`; user set and dropouts are retained.
    pub fn filter(&self, mut keep: impl FnMut(&CallRecord) -> bool) -> CallLog {
        CallLog {
            records: self.records.iter().filter(|r| keep(r)).copied().collect(),
            users: self.users.clone(),
            dropout_day: self.dropout_day.clone(),
        }
    }

    /// Restricts the log (records and user set) to the given users.
    pub fn restrict_users(&self, keep: &BTreeSet<UserId>) -> CallLog {
        CallLog {
            records: self
                .records
                .iter()
                .filter(|r| keep.contains(&r.user))
                .copied()
                .collect(),
            users: self.users.intersection(keep).copied().collect(),
            dropout_day: self
                .dropout_day
                .iter()
                .filter(|(u, _)| keep.contains(u))
                .map(|(u, d)| (*u, *d))
                .collect(),
        }
    }

    /// Sub-log of one arm; users are those with at least one record in the arm.
    pub fn arm(&self, arm: Arm) -> CallLog {
        let users: BTreeSet<UserId> = self
            .records
            .iter()
            .filter(|r| r.arm == arm)
            .map(|r| r.user)
            .collect();
        let mut log = self.restrict_users(&users);
        log.records.retain(|r| r.arm == arm);
        log
    }

    pub fn total_attempted(&self) -> u64 {
        self.records.iter().filter(|r| r.attempted).count() as u64
    }

    pub fn total_picked(&self) -> u64 {
        self.records.iter().filter(|r| r.picked).count() as u64
    }
}

/// Removes every user who dropped out before the end of the trial.
///
/// The trial end is the last recorded day plus one. Users without a dropout
/// entry, or whose dropout falls on or after the trial end, are kept.
pub fn filter_active(log: &CallLog) -> CallLog {
    let end = log.end_day();
    let active: BTreeSet<UserId> = log
        .users
        .iter()
        .filter(|u| log.dropout_day.get(u).map_or(true, |&d| d >= end))
        .copied()
        .collect();
    log.restrict_users(&active)
}

/// Splits a log into records with `day < baseline_days` and the rest.
pub fn split_by_phase(log: &CallLog, baseline_days: u32) -> (CallLog, CallLog) {
    let (base, rest): (Vec<CallRecord>, Vec<CallRecord>) =
        log.records.iter().partition(|r| r.day < baseline_days);
    (
        CallLog {
            records: base,
            users: log.users.clone(),
            dropout_day: log.dropout_day.clone(),
        },
        CallLog {
            records: rest,
            users: log.users.clone(),
            dropout_day: log.dropout_day.clone(),
        },
    )
}

/// Input format for call-log ingestion. Only the delimiter varies; the header
/// row is mandatory.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LogFormat {
    pub delimiter: u8,
}

impl Default for LogFormat {
    fn default() -> Self {
        LogFormat { delimiter: b',' }
    }
}

fn open(path: &Path) -> Result<std::fs::File, DomainError> {
    std::fs::File::open(path).map_err(|source| DomainError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn malformed(row: u64, message: impl Into<String>) -> DomainError {
    DomainError::MalformedRow {
        row,
        message: message.into(),
    }
}

fn row_number(rec: &csv::StringRecord) -> u64 {
    rec.position().map_or(0, |p| p.line())
}

fn expect_header<R: Read>(rdr: &mut csv::Reader<R>, want: &[&str]) -> Result<(), DomainError> {
    let header = rdr.headers()?.clone();
    let got: Vec<&str> = header.iter().collect();
    if got != want {
        return Err(malformed(
            1,
            format!("expected header {:?}, got {:?}", want.join(","), got.join(",")),
        ));
    }
    Ok(())
}

fn parse_bool(row: u64, name: &str, s: &str) -> Result<bool, DomainError> {
    match s {
        "0" => Ok(false),
        "1" => Ok(true),
        _ => Err(malformed(row, format!("{name} must be 0 or 1, got {s:?}"))),
    }
}

fn parse_num<T: FromStr>(row: u64, name: &str, s: &str) -> Result<T, DomainError> {
    s.parse()
        .map_err(|_| malformed(row, format!("{name} is not a valid integer: {s:?}")))
}

/// Reads and validates a call-log CSV.
pub fn ingest_log(path: &Path, format: LogFormat) -> Result<CallLog, DomainError> {
    read_log(open(path)?, format)
}

pub fn read_log<R: Read>(reader: R, format: LogFormat) -> Result<CallLog, DomainError> {
    let mut rdr = csv::ReaderBuilder::new()
        .delimiter(format.delimiter)
        .from_reader(reader);
    expect_header(&mut rdr, &LOG_HEADER)?;
    let mut records = Vec::new();
    let mut seen = BTreeSet::new();
    for rec in rdr.records() {
        let rec = rec?;
        let row = row_number(&rec);
        if rec.len() != LOG_HEADER.len() {
            return Err(malformed(row, format!("expected 8 fields, got {}", rec.len())));
        }
        let slot_raw: i64 = parse_num(row, "slot_id", &rec[1])?;
        let slot = u8::try_from(slot_raw)
            .ok()
            .and_then(|s| SlotId::new(s).ok())
            .ok_or_else(|| malformed(row, format!("slot_id {slot_raw} outside 1..=7")))?;
        let retry: u8 = parse_num(row, "retry", &rec[3])?;
        if retry > MAX_RETRY {
            return Err(malformed(row, format!("retry {retry} exceeds {MAX_RETRY}")));
        }
        let r = CallRecord {
            user: UserId(parse_num(row, "user_id", &rec[0])?),
            slot,
            day: parse_num(row, "day", &rec[2])?,
            retry,
            attempted: parse_bool(row, "attempted", &rec[4])?,
            picked: parse_bool(row, "picked", &rec[5])?,
            phase: rec[6].parse().map_err(|e: String| malformed(row, e))?,
            arm: rec[7].parse().map_err(|e: String| malformed(row, e))?,
        };
        if r.picked && !r.attempted {
            return Err(DomainError::PickedWithoutAttempt { row });
        }
        if !seen.insert(r.key()) {
            return Err(DomainError::DuplicateKey {
                row,
                user: r.user,
                slot: r.slot,
                day: r.day,
                retry: r.retry,
            });
        }
        records.push(r);
    }
    let users = records.iter().map(|r| r.user).collect();
    Ok(CallLog::from_parts_unchecked(records, users, BTreeMap::new()))
}

/// Reads a `user_id,dropout_day` sidecar.
pub fn ingest_dropouts(path: &Path) -> Result<BTreeMap<UserId, u32>, DomainError> {
    read_dropouts(open(path)?)
}

pub fn read_dropouts<R: Read>(reader: R) -> Result<BTreeMap<UserId, u32>, DomainError> {
    let mut rdr = csv::ReaderBuilder::new().from_reader(reader);
    expect_header(&mut rdr, &DROPOUT_HEADER)?;
    let mut out = BTreeMap::new();
    for rec in rdr.records() {
        let rec = rec?;
        let row = row_number(&rec);
        if rec.len() != 2 {
            return Err(malformed(row, "expected 2 fields"));
        }
        let user = UserId(parse_num(row, "user_id", &rec[0])?);
        let day = parse_num(row, "dropout_day", &rec[1])?;
        if out.insert(user, day).is_some() {
            return Err(malformed(row, format!("duplicate dropout entry for user {user}")));
        }
    }
    Ok(out)
}

/// Reads a log plus an optional dropout sidecar. Dropout users missing from
/// the log are added to its user set.
pub fn ingest_log_with_dropouts(
    log_path: &Path,
    dropout_path: Option<&Path>,
    format: LogFormat,
) -> Result<CallLog, DomainError> {
    let mut log = ingest_log(log_path, format)?;
    if let Some(p) = dropout_path {
        let drops = ingest_dropouts(p)?;
        log.users.extend(drops.keys().copied());
        log.dropout_day = drops;
    }
    Ok(log)
}

pub fn write_log<W: Write>(log: &CallLog, writer: W) -> Result<(), DomainError> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(LOG_HEADER)?;
    for r in &log.records {
        w.write_record([
            r.user.0.to_string(),
            r.slot.0.to_string(),
            r.day.to_string(),
            r.retry.to_string(),
            (r.attempted as u8).to_string(),
            (r.picked as u8).to_string(),
            r.phase.as_str().to_string(),
            r.arm.as_str().to_string(),
        ])?;
    }
    w.flush().map_err(|e| DomainError::Csv(e.into()))?;
    Ok(())
}

pub fn write_dropouts<W: Write>(
    dropouts: &BTreeMap<UserId, u32>,
    writer: W,
) -> Result<(), DomainError> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(DROPOUT_HEADER)?;
    for (u, d) in dropouts {
        w.write_record([u.0.to_string(), d.to_string()])?;
    }
    w.flush().map_err(|e| DomainError::Csv(e.into()))?;
    Ok(())
}

pub fn export_log(log: &CallLog, path: &Path) -> Result<(), DomainError> {
    let file = std::fs::File::create(path).map_err(|source| DomainError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    write_log(log, std::io::BufWriter::new(file))
}

pub fn log_to_csv_string(log: &CallLog) -> String {
    let mut buf = Vec::new();
    write_log(log, &mut buf).expect("writing to memory cannot fail");
    String::from_utf8(buf).expect("csv output is utf-8")
}
