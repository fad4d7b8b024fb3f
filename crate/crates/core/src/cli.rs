//! The `simulate`, `analyze`, `tune` and `replay` workflows behind the
//! `callslot` binary. Each command writes its artifacts into an output
//! directory and returns a short human summary.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::analysis::{
    analyze, pooled_pr, replay, AnalysisError, AnalysisOptions, AnalysisReport, BootstrapCi, CallSet,
    SlotDistribution,
};
use crate::domain::{
    ingest_log_with_dropouts, log_to_csv_string, split_by_phase, write_dropouts, Arm, CallLog, DomainError,
    LogFormat, SlotId, UserId, N_SLOTS,
};
use crate::matcomp::{tune_lambda, MatcompError, ObservationSet, TuneResult};
use crate::policy::fit_per_user_exploit;
use crate::simworld::{generate_world, run_trial, SimError, TrialDesign, WorldConfig};

/// Environment variable naming the default output directory.
pub const OUT_ENV: &str = "CALLSLOT_OUT";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("invalid config field `{field}`: {message}")]
    Config { field: String, message: String },
    #[error("cannot parse config {path}: {message}")]
    ConfigParse { path: PathBuf, message: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Domain(#[from] DomainError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Analysis(#[from] AnalysisError),
    #[error(transparent)]
    Matcomp(#[from] MatcompError),
    #[error("behavior file: {0}")]
    Behavior(String),
    #[error("{0}")]
    Usage(String),
}

fn config_err(field: &str, message: impl Into<String>) -> CliError {
    CliError::Config {
        field: field.into(),
        message: message.into(),
    }
}

/// A full simulation study: world, trial layout, seeds and analysis knobs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrialConfig {
    pub n_seeds: u32,
    /// Seed `k` of the study uses `seed + k` for the world, the trial and the
    /// bootstrap.
    pub seed: u64,
    pub output_dir: Option<PathBuf>,
    pub world: WorldConfig,
    pub trial: TrialDesign,
    pub analysis: AnalysisOptions,
}

impl Default for TrialConfig {
    fn default() -> Self {
        TrialConfig {
            n_seeds: 1,
            seed: 0,
            output_dir: None,
            world: WorldConfig::default(),
            trial: TrialDesign::default(),
            analysis: AnalysisOptions::default(),
        }
    }
}

impl TrialConfig {
    pub fn from_toml_str(s: &str) -> Result<Self, String> {
        toml::from_str(s).map_err(|e| e.to_string())
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|source| CliError::Io {
            path: path.into(),
            source,
        })?;
        let cfg = Self::from_toml_str(&text).map_err(|message| CliError::ConfigParse {
            path: path.into(),
            message,
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if self.n_seeds == 0 {
            return Err(config_err("n_seeds", "must be at least 1"));
        }
        if self.trial.baseline_days == 0 {
            return Err(config_err("trial.baseline_days", "must be positive"));
        }
        if self.trial.intervention_days == 0 {
            return Err(config_err("trial.intervention_days", "must be positive"));
        }
        self.world
            .validate()
            .map_err(|e| config_err("world", e.to_string()))?;
        self.trial
            .treatment
            .validate()
            .map_err(|e| config_err("trial.treatment", e.to_string()))?;
        self.trial
            .control
            .validate()
            .map_err(|e| config_err("trial.control", e.to_string()))?;
        self.trial
            .validate()
            .map_err(|e| config_err("trial", e.to_string()))?;
        let b = &self.analysis.bootstrap;
        if b.resamples == 0 {
            return Err(config_err("analysis.bootstrap.resamples", "must be positive"));
        }
        if !(b.level > 0.0 && b.level < 1.0) {
            return Err(config_err("analysis.bootstrap.level", "must lie in (0, 1)"));
        }
        Ok(())
    }
}

/// Output directory: explicit flag, then config, then `$CALLSLOT_OUT`, then
/// `./callslot-out`.
pub fn resolve_out_dir(flag: Option<&Path>, config: Option<&Path>) -> PathBuf {
    flag.or(config)
        .map(Path::to_path_buf)
        .or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("callslot-out"))
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), CliError> {
    fs::write(path, contents).map_err(|source| CliError::Io {
        path: path.into(),
        source,
    })
}

fn create_dir(path: &Path) -> Result<(), CliError> {
    fs::create_dir_all(path).map_err(|source| CliError::Io {
        path: path.into(),
        source,
    })
}

fn to_json<T: Serialize>(v: &T) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("serializable");
    s.push('\n');
    s
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedRun {
    pub seed: u64,
    pub log_file: String,
    pub dropout_file: String,
    pub report: AnalysisReport,
}

/// Everything `simulate` writes to `report.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationReport {
    pub config: TrialConfig,
    pub runs: Vec<SeedRun>,
}

impl SimulationReport {
    /// One line per seed: pooled rates by arm and phase, mid-tier rates and
    /// p-values.
    pub fn summary_table(&self) -> String {
        let f = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.4}"));
        let p = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.2e}"));
        let mut s = format!(
            "{:>6} {:>8} {:>8} {:>8} {:>8} {:>9} {:>8} {:>8} {:>9}\n",
            "seed", "base_t", "base_c", "int_t", "int_c", "p_int", "mid_t", "mid_c", "p_mid"
        );
        for run in &self.runs {
            let r = &run.report;
            let b = r.pooled.baseline.as_ref();
            let i = r.pooled.intervention.as_ref();
            let mid = r
                .tiers
                .as_ref()
                .and_then(|t| t.rows.iter().find(|row| row.tier == crate::analysis::Tier::Mid))
                .map(|row| &row.comparison);
            s.push_str(&format!(
                "{:>6} {:>8} {:>8} {:>8} {:>8} {:>9} {:>8} {:>8} {:>9}\n",
                run.seed,
                f(b.and_then(|c| c.rate.treatment)),
                f(b.and_then(|c| c.rate.control)),
                f(i.and_then(|c| c.rate.treatment)),
                f(i.and_then(|c| c.rate.control)),
                p(i.and_then(|c| c.p_value)),
                f(mid.and_then(|c| c.rate.treatment)),
                f(mid.and_then(|c| c.rate.control)),
                p(mid.and_then(|c| c.p_value)),
            ));
        }
        s
    }
}

/// Runs one seed of the study and returns its log and report.
pub fn simulate_seed(config: &TrialConfig, k: u32) -> Result<(u64, CallLog, AnalysisReport), CliError> {
    let seed = config.seed + k as u64;
    let world = generate_world(&WorldConfig {
        seed,
        ..config.world.clone()
    })?;
    let design = TrialDesign {
        seed,
        ..config.trial.clone()
    };
    let log = run_trial(&world, &design)?;
    let options = AnalysisOptions {
        seed,
        ..config.analysis
    };
    let report = analyze(&log, design.baseline_days, &options)?;
    Ok((seed, log, report))
}

/// `simulate`: per-seed logs and dropout files, `report.json`,
/// `report.txt` and `call_distribution.csv`. Seeds run concurrently; files
/// are written in seed order.
pub fn cmd_simulate(config: &TrialConfig, out: &Path) -> Result<SimulationReport, CliError> {
    config.validate()?;
    create_dir(out)?;
    let results: Vec<(u64, CallLog, AnalysisReport)> = (0..config.n_seeds)
        .into_par_iter()
        .map(|k| simulate_seed(config, k))
        .collect::<Result<_, _>>()?;
    let mut runs = Vec::with_capacity(results.len());
    let mut text = String::new();
    let mut dist = String::from("seed,slot,treatment,control\n");
    for (seed, log, report) in results {
        let log_file = format!("calls_seed{seed}.csv");
        let dropout_file = format!("dropouts_seed{seed}.csv");
        write_file(&out.join(&log_file), log_to_csv_string(&log))?;
        let mut buf = Vec::new();
        write_dropouts(log.dropout_days(), &mut buf)?;
        write_file(&out.join(&dropout_file), buf)?;
        text.push_str(&format!("== seed {seed} ==\n{}\n", report.to_text()));
        if let Some(pi) = &report.call_distribution {
            for j in 0..N_SLOTS {
                dist.push_str(&format!("{seed},{},{},{}\n", j + 1, pi.treatment[j], pi.control[j]));
            }
        }
        runs.push(SeedRun {
            seed,
            log_file,
            dropout_file,
            report,
        });
    }
    let report = SimulationReport {
        config: config.clone(),
        runs,
    };
    write_file(&out.join("report.json"), to_json(&report))?;
    write_file(&out.join("report.txt"), format!("{}\n{text}", report.summary_table()))?;
    write_file(&out.join("call_distribution.csv"), dist)?;
    Ok(report)
}

/// `analyze`: the full report for an ingested log.
pub fn cmd_analyze(
    log_path: &Path,
    dropout_path: Option<&Path>,
    baseline_days: u32,
    options: &AnalysisOptions,
    out: &Path,
) -> Result<AnalysisReport, CliError> {
    let log = ingest_log_with_dropouts(log_path, dropout_path, LogFormat::default())?;
    let report = analyze(&log, baseline_days, options)?;
    create_dir(out)?;
    write_file(&out.join("report.json"), to_json(&report))?;
    write_file(&out.join("report.txt"), report.to_text())?;
    if let Some(csv) = report.distribution_csv() {
        write_file(&out.join("call_distribution.csv"), csv)?;
    }
    Ok(report)
}

/// Pools a log into a user x slot observation set; rows follow user id order.
pub fn observations_from_log(log: &CallLog) -> Result<(Vec<UserId>, ObservationSet), MatcompError> {
    let users: Vec<UserId> = log
        .records()
        .iter()
        .filter(|r| r.attempted)
        .map(|r| r.user)
        .collect::<std::collections::BTreeSet<_>>()
        .into_iter()
        .collect();
    let row: BTreeMap<UserId, usize> = users.iter().enumerate().map(|(i, &u)| (u, i)).collect();
    let mut obs = ObservationSet::new(users.len(), N_SLOTS);
    for r in log.records().iter().filter(|r| r.attempted) {
        obs.pool(row[&r.user], r.slot.index(), r.picked as u8 as f64, r.day)?;
    }
    Ok((users, obs))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuneReport {
    pub users: usize,
    pub cells: usize,
    pub holdout_fraction: f64,
    pub pooled_weights: bool,
    pub result: TuneResult,
}

pub struct TuneArgs {
    pub grid: Vec<f64>,
    pub holdout_fraction: f64,
    pub baseline_days: u32,
    pub pooled_weights: bool,
    pub tol: f64,
    pub max_iter: usize,
}

/// `tune`: grid-searches lambda on the baseline calls of a log.
pub fn cmd_tune(log_path: &Path, args: &TuneArgs, out: &Path) -> Result<TuneReport, CliError> {
    let log = ingest_log_with_dropouts(log_path, None, LogFormat::default())?;
    let (base, _) = split_by_phase(&log, args.baseline_days);
    let (users, obs) = observations_from_log(&base)?;
    if obs.is_empty() {
        return Err(MatcompError::EmptyObservations.into());
    }
    let obs = if args.pooled_weights { obs } else { obs.with_unit_weights() };
    let result = tune_lambda(&obs, &args.grid, args.holdout_fraction, args.tol, args.max_iter)?;
    let report = TuneReport {
        users: users.len(),
        cells: obs.len(),
        holdout_fraction: args.holdout_fraction,
        pooled_weights: args.pooled_weights,
        result,
    };
    create_dir(out)?;
    write_file(&out.join("tune.json"), to_json(&report))?;
    Ok(report)
}

impl TuneReport {
    pub fn to_text(&self) -> String {
        let mut s = format!(
            "{} users, {} cells, {} held out\n{:>10} {:>10} {:>10}\n",
            self.users, self.cells, self.result.validation_size, "lambda", "rmse", "converged"
        );
        for sc in &self.result.scores {
            s.push_str(&format!("{:>10} {:>10.6} {:>10}\n", sc.lambda, sc.rmse, sc.converged));
        }
        s.push_str(&format!("chosen lambda {}\n", self.result.best_lambda));
        s
    }
}

/// Target policy replayed by `replay`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReplayTarget {
    PerUserExploit,
    Uniform,
}

/// Where the logging policy's slot probabilities come from.
#[derive(Debug, Clone, PartialEq)]
pub enum BehaviorSource {
    AssumeUniform,
    File(PathBuf),
}

/// Reads `slot,prob` rows.
pub fn read_behavior(path: &Path) -> Result<[f64; N_SLOTS], CliError> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| CliError::Behavior(e.to_string()))?;
    let mut b = [None; N_SLOTS];
    for row in rdr.records() {
        let row = row.map_err(|e| CliError::Behavior(e.to_string()))?;
        let parse_err = |what: &str| CliError::Behavior(format!("bad {what} in row {:?}", row));
        let slot: u8 = row.get(0).and_then(|s| s.trim().parse().ok()).ok_or_else(|| parse_err("slot"))?;
        let p: f64 = row.get(1).and_then(|s| s.trim().parse().ok()).ok_or_else(|| parse_err("prob"))?;
        let slot = SlotId::new(slot)?;
        b[slot.index()] = Some(p);
    }
    let mut out = [0.0; N_SLOTS];
    for (j, v) in b.iter().enumerate() {
        out[j] = v.ok_or_else(|| CliError::Behavior(format!("slot {} missing", j + 1)))?;
    }
    let total: f64 = out.iter().sum();
    if (total - 1.0).abs() > 1e-6 {
        return Err(CliError::Behavior(format!("probabilities sum to {total}, not 1")));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayReport {
    pub target: ReplayTarget,
    pub arm: Option<Arm>,
    pub call_set: CallSet,
    pub n_calls: usize,
    pub behavior: [f64; N_SLOTS],
    pub v_q: BootstrapCi,
    pub pooled: BootstrapCi,
}

impl ReplayReport {
    pub fn to_text(&self) -> String {
        format!(
            "|C| = {} ({:?} calls)\nV_q    {:.4} [{:.4}, {:.4}]\npooled {:.4} [{:.4}, {:.4}]\n",
            self.n_calls,
            self.call_set,
            self.v_q.point,
            self.v_q.low,
            self.v_q.high,
            self.pooled.point,
            self.pooled.low,
            self.pooled.high
        )
    }
}

pub struct ReplayArgs {
    pub target: ReplayTarget,
    pub behavior: BehaviorSource,
    /// Restrict to one arm; `None` uses every record.
    pub arm: Option<Arm>,
    pub baseline_days: u32,
    pub options: AnalysisOptions,
}

/// `replay`: fits the target on the baseline split and estimates its value on
/// the intervention split by importance sampling.
pub fn cmd_replay(
    log_path: &Path,
    dropout_path: Option<&Path>,
    args: &ReplayArgs,
    out: &Path,
) -> Result<ReplayReport, CliError> {
    let log = ingest_log_with_dropouts(log_path, dropout_path, LogFormat::default())?;
    let log = crate::domain::filter_active(&log);
    let log = match args.arm {
        Some(arm) => log.arm(arm),
        None => log,
    };
    let behavior = match &args.behavior {
        BehaviorSource::AssumeUniform => SlotDistribution::uniform().0,
        BehaviorSource::File(p) => read_behavior(p)?,
    };
    let (base, int) = split_by_phase(&log, args.baseline_days);
    if int.total_attempted() == 0 {
        return Err(AnalysisError::NoAttempts.into());
    }
    let (v_q, pooled, n_calls) = match args.target {
        ReplayTarget::PerUserExploit => replay(&int, &fit_per_user_exploit(&base), &behavior, &args.options)?,
        ReplayTarget::Uniform => replay(&int, &SlotDistribution(behavior), &behavior, &args.options)?,
    };
    debug_assert!(pooled_pr(&int).is_ok());
    let report = ReplayReport {
        target: args.target,
        arm: args.arm,
        call_set: args.options.is_call_set,
        n_calls,
        behavior,
        v_q,
        pooled,
    };
    create_dir(out)?;
    write_file(&out.join("replay.json"), to_json(&report))?;
    Ok(report)
}
