//! Low-rank matrix completion by nuclear-norm regularisation.
//!
//! [`complete`] minimises
//!
//! ```text
//!   sum_{(i,j) in obs} w_ij (M_ij - Z_ij)^2 + lambda * ||Z||_*
//! ```
//!
//! with proximal gradient steps (soft-impute): fill unobserved cells from the
//! current iterate, take an SVD, shrink the singular values, repeat. With unit
//! weights each step is the classic soft-impute update with threshold
//! `lambda / 2`; pooled weights scale the step by `1 / max_w`, which keeps the
//! objective monotonically non-increasing.

use std::collections::BTreeMap;
use std::io::Write;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MatcompError {
    #[error("observation set is empty")]
    EmptyObservations,
    #[error("index ({i}, {j}) outside {rows}x{cols} matrix")]
    OutOfBounds {
        i: usize,
        j: usize,
        rows: usize,
        cols: usize,
    },
    #[error("observation weight must be >= 1")]
    ZeroWeight,
    #[error("observed value {0} outside [0, 1]")]
    ValueOutOfRange(f64),
    #[error("shape mismatch: observations are {expected:?}, matrix is {got:?}")]
    ShapeMismatch {
        expected: (usize, usize),
        got: (usize, usize),
    },
    #[error("lambda must be positive (zero only with every cell observed), got {0}")]
    InvalidLambda(f64),
    #[error("invalid solver setting: {0}")]
    InvalidSetting(String),
    #[error("holdout split leaves {train} training and {validation} validation entries")]
    DegenerateSplit { train: usize, validation: usize },
    #[error("no lambda in the grid converged within the iteration budget")]
    NoConvergence,
}

/// Pooled outcomes for one cell: the sum of observed values, how many were
/// pooled, and the latest day among them.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub total: f64,
    pub weight: u32,
    pub last_day: u32,
}

impl Observation {
    pub fn value(&self) -> f64 {
        self.total / self.weight as f64
    }
}

/// Observed cells of an `rows x cols` matrix.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ObservationSet {
    rows: usize,
    cols: usize,
    entries: BTreeMap<(usize, usize), Observation>,
}

impl ObservationSet {
    pub fn new(rows: usize, cols: usize) -> Self {
        ObservationSet {
            rows,
            cols,
            entries: BTreeMap::new(),
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, i: usize, j: usize) -> Option<&Observation> {
        self.entries.get(&(i, j))
    }

    pub fn iter(&self) -> impl Iterator<Item = ((usize, usize), &Observation)> {
        self.entries.iter().map(|(k, v)| (*k, v))
    }

    fn check(&self, i: usize, j: usize) -> Result<(), MatcompError> {
        if i >= self.rows || j >= self.cols {
            return Err(MatcompError::OutOfBounds {
                i,
                j,
                rows: self.rows,
                cols: self.cols,
            });
        }
        Ok(())
    }

    /// Sets a cell to `value` pooled from `weight` observations.
    pub fn insert(
        &mut self,
        i: usize,
        j: usize,
        value: f64,
        weight: u32,
        last_day: u32,
    ) -> Result<(), MatcompError> {
        self.check(i, j)?;
        if weight == 0 {
            return Err(MatcompError::ZeroWeight);
        }
        if !(0.0..=1.0).contains(&value) {
            return Err(MatcompError::ValueOutOfRange(value));
        }
        self.entries.insert(
            (i, j),
            Observation {
                total: value * weight as f64,
                weight,
                last_day,
            },
        );
        Ok(())
    }

    /// Pools one more outcome into cell `(i, j)`.
    pub fn pool(&mut self, i: usize, j: usize, outcome: f64, day: u32) -> Result<(), MatcompError> {
        self.check(i, j)?;
        if !(0.0..=1.0).contains(&outcome) {
            return Err(MatcompError::ValueOutOfRange(outcome));
        }
        let cell = self.entries.entry((i, j)).or_insert(Observation {
            total: 0.0,
            weight: 0,
            last_day: day,
        });
        cell.total += outcome;
        cell.weight += 1;
        cell.last_day = cell.last_day.max(day);
        Ok(())
    }

    /// Same cells with every weight reset to one (the unweighted objective).
    pub fn with_unit_weights(&self) -> ObservationSet {
        let entries = self
            .entries
            .iter()
            .map(|(k, o)| {
                (
                    *k,
                    Observation {
                        total: o.value(),
                        weight: 1,
                        last_day: o.last_day,
                    },
                )
            })
            .collect();
        ObservationSet {
            rows: self.rows,
            cols: self.cols,
            entries,
        }
    }

    fn subset<'a>(&self, keys: impl Iterator<Item = &'a (usize, usize)>) -> ObservationSet {
        ObservationSet {
            rows: self.rows,
            cols: self.cols,
            entries: keys.map(|k| (*k, self.entries[k])).collect(),
        }
    }

    pub fn max_weight(&self) -> u32 {
        self.entries.values().map(|o| o.weight).max().unwrap_or(0)
    }

    /// Writes the `i,j,value,weight,last_day` dump.
    pub fn write_csv<W: Write>(&self, writer: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["i", "j", "value", "weight", "last_day"])?;
        for ((i, j), o) in &self.entries {
            w.write_record([
                i.to_string(),
                j.to_string(),
                o.value().to_string(),
                o.weight.to_string(),
                o.last_day.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Solver output.
#[derive(Debug, Clone, PartialEq)]
pub struct CompletedMatrix {
    pub values: DMatrix<f64>,
    pub lambda: f64,
    pub iterations: usize,
    pub objective: f64,
    /// False when `max_iter` was reached before the tolerance was met.
    pub converged: bool,
}

/// Solver knobs with the defaults used throughout the crate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverSettings {
    pub tol: f64,
    pub max_iter: usize,
    pub lambda_grid: Vec<f64>,
    pub holdout_fraction: f64,
    /// Pool repeated outcomes into a weighted mean (true) or weight every
    /// observed cell equally (false).
    pub pooled_weights: bool,
}

impl Default for SolverSettings {
    fn default() -> Self {
        SolverSettings {
            tol: 1e-6,
            max_iter: 500,
            lambda_grid: vec![0.01, 0.03, 0.1, 0.3, 1.0, 3.0, 10.0],
            holdout_fraction: 0.2,
            pooled_weights: true,
        }
    }
}

/// Soft-thresholds the singular values of `m` by `threshold`.
///
/// Returns the shrunk matrix, its singular values (descending) and its
/// nuclear norm.
pub fn shrink_singular_values(m: &DMatrix<f64>, threshold: f64) -> (DMatrix<f64>, Vec<f64>, f64) {
    let (r, c) = m.shape();
    let svd = m.clone().svd(true, true);
    let u = svd.u.expect("u requested");
    let vt = svd.v_t.expect("v_t requested");
    let shrunk: Vec<f64> = svd
        .singular_values
        .iter()
        .map(|s| (s - threshold).max(0.0))
        .collect();
    let mut out = DMatrix::zeros(r, c);
    for (k, &s) in shrunk.iter().enumerate() {
        if s > 0.0 {
            out += s * u.column(k) * vt.row(k);
        }
    }
    let nuclear = shrunk.iter().sum();
    let mut sorted = shrunk;
    sorted.sort_by(|a, b| b.total_cmp(a));
    (out, sorted, nuclear)
}

pub fn nuclear_norm(m: &DMatrix<f64>) -> f64 {
    m.clone().svd(false, false).singular_values.iter().sum()
}

fn weighted_residual(obs: &ObservationSet, z: &DMatrix<f64>) -> f64 {
    obs.iter()
        .map(|((i, j), o)| {
            let d = o.value() - z[(i, j)];
            o.weight as f64 * d * d
        })
        .sum()
}

/// Exact objective `sum w (M - Z)^2 + lambda ||Z||_*`.
pub fn objective_value(
    obs: &ObservationSet,
    z: &DMatrix<f64>,
    lambda: f64,
) -> Result<f64, MatcompError> {
    if z.shape() != obs.shape() {
        return Err(MatcompError::ShapeMismatch {
            expected: obs.shape(),
            got: z.shape(),
        });
    }
    let penalty = if lambda == 0.0 { 0.0 } else { lambda * nuclear_norm(z) };
    Ok(weighted_residual(obs, z) + penalty)
}

fn validate_inputs(obs: &ObservationSet, lambda: f64, tol: f64, max_iter: usize) -> Result<(), MatcompError> {
    if obs.is_empty() {
        return Err(MatcompError::EmptyObservations);
    }
    let full = obs.len() == obs.rows * obs.cols;
    if !(lambda > 0.0 || (lambda == 0.0 && full)) || !lambda.is_finite() {
        return Err(MatcompError::InvalidLambda(lambda));
    }
    if !(tol > 0.0) {
        return Err(MatcompError::InvalidSetting(format!("tol must be positive, got {tol}")));
    }
    if max_iter == 0 {
        return Err(MatcompError::InvalidSetting("max_iter must be positive".into()));
    }
    Ok(())
}

/// Completes `obs` from a zero start.
pub fn complete(
    obs: &ObservationSet,
    lambda: f64,
    tol: f64,
    max_iter: usize,
) -> Result<CompletedMatrix, MatcompError> {
    complete_from(obs, lambda, tol, max_iter, None)
}

/// Completes `obs` starting from `init` (zero matrix when `None`).
pub fn complete_from(
    obs: &ObservationSet,
    lambda: f64,
    tol: f64,
    max_iter: usize,
    init: Option<&DMatrix<f64>>,
) -> Result<CompletedMatrix, MatcompError> {
    let mut trace = |_: f64| {};
    solve(obs, lambda, tol, max_iter, init, &mut trace)
}

/// Like [`complete`], but also returns the objective after every iteration.
pub fn complete_traced(
    obs: &ObservationSet,
    lambda: f64,
    tol: f64,
    max_iter: usize,
) -> Result<(CompletedMatrix, Vec<f64>), MatcompError> {
    let mut trace = Vec::new();
    let out = solve(obs, lambda, tol, max_iter, None, &mut |f| trace.push(f))?;
    Ok((out, trace))
}

fn solve(
    obs: &ObservationSet,
    lambda: f64,
    tol: f64,
    max_iter: usize,
    init: Option<&DMatrix<f64>>,
    trace: &mut dyn FnMut(f64),
) -> Result<CompletedMatrix, MatcompError> {
    validate_inputs(obs, lambda, tol, max_iter)?;
    let (rows, cols) = obs.shape();
    let mut z = match init {
        Some(m) if m.shape() == (rows, cols) => m.clone(),
        Some(m) => {
            return Err(MatcompError::ShapeMismatch {
                expected: (rows, cols),
                got: m.shape(),
            })
        }
        None => DMatrix::zeros(rows, cols),
    };
    let w_max = obs.max_weight() as f64;
    let threshold = lambda / (2.0 * w_max);
    let cells: Vec<(usize, usize, f64, f64)> = obs
        .iter()
        .map(|((i, j), o)| (i, j, o.value(), o.weight as f64 / w_max))
        .collect();

    let mut f_prev = objective_value(obs, &z, lambda)?;
    let mut iterations = 0;
    let mut converged = false;
    while iterations < max_iter {
        iterations += 1;
        let mut y = z.clone();
        for &(i, j, m, step) in &cells {
            y[(i, j)] += step * (m - z[(i, j)]);
        }
        let (next, _, nuclear) = shrink_singular_values(&y, threshold);
        let f_next = weighted_residual(obs, &next) + lambda * nuclear;
        trace(f_next);
        z = next;
        let change = (f_prev - f_next).abs();
        let scale = f_prev.abs().max(f_next.abs());
        f_prev = f_next;
        if change <= tol * scale || scale < 1e-18 {
            converged = true;
            break;
        }
    }
    Ok(CompletedMatrix {
        values: z,
        lambda,
        iterations,
        objective: f_prev,
        converged,
    })
}

/// Validation score of one grid point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LambdaScore {
    pub lambda: f64,
    pub rmse: f64,
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuneResult {
    pub best_lambda: f64,
    /// One score per grid point, in grid order.
    pub scores: Vec<LambdaScore>,
    pub train_size: usize,
    pub validation_size: usize,
}

// splitmix64 finaliser; orders cells that share a recency day.
fn cell_hash(i: usize, j: usize) -> u64 {
    let mut z = (i as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (j as u64).wrapping_add(0x632B_E59B_D9B4_E019);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Splits cells into (train, validation) with the most recent
/// `holdout_fraction` of cells, by `last_day`, held out.
pub fn recency_split(
    obs: &ObservationSet,
    holdout_fraction: f64,
) -> Result<(ObservationSet, ObservationSet), MatcompError> {
    if !(holdout_fraction > 0.0 && holdout_fraction < 1.0) {
        return Err(MatcompError::InvalidSetting(format!(
            "holdout fraction must lie in (0, 1), got {holdout_fraction}"
        )));
    }
    let mut keys: Vec<(usize, usize)> = obs.entries.keys().copied().collect();
    keys.sort_by_key(|&(i, j)| (std::cmp::Reverse(obs.entries[&(i, j)].last_day), cell_hash(i, j)));
    let n = keys.len();
    let n_val = ((holdout_fraction * n as f64).round() as usize).max(1).min(n);
    if n_val == n || n == 0 {
        return Err(MatcompError::DegenerateSplit {
            train: n - n_val.min(n),
            validation: n_val.min(n),
        });
    }
    let val = obs.subset(keys[..n_val].iter());
    let train = obs.subset(keys[n_val..].iter());
    Ok((train, val))
}

/// Root-mean-square error of `z` on the (unweighted) values of `cells`.
pub fn rmse_on(cells: &ObservationSet, z: &DMatrix<f64>) -> f64 {
    let n = cells.len() as f64;
    let sse: f64 = cells
        .iter()
        .map(|((i, j), o)| (o.value() - z[(i, j)]).powi(2))
        .sum();
    (sse / n).sqrt()
}

/// Grid search for lambda on a recency holdout. Ties go to the larger lambda.
pub fn tune_lambda(
    obs: &ObservationSet,
    grid: &[f64],
    holdout_fraction: f64,
    tol: f64,
    max_iter: usize,
) -> Result<TuneResult, MatcompError> {
    if grid.is_empty() {
        return Err(MatcompError::InvalidSetting("lambda grid is empty".into()));
    }
    if let Some(&bad) = grid.iter().find(|l| !(**l > 0.0) || !l.is_finite()) {
        return Err(MatcompError::InvalidLambda(bad));
    }
    let (train, val) = recency_split(obs, holdout_fraction)?;
    let scores: Vec<LambdaScore> = grid
        .par_iter()
        .map(|&lambda| {
            complete(&train, lambda, tol, max_iter).map(|fit| LambdaScore {
                lambda,
                rmse: rmse_on(&val, &fit.values),
                converged: fit.converged,
            })
        })
        .collect::<Result<_, _>>()?;
    if !scores.iter().any(|s| s.converged) {
        return Err(MatcompError::NoConvergence);
    }
    let best = scores
        .iter()
        .fold(None::<&LambdaScore>, |best, s| match best {
            None => Some(s),
            Some(b) if s.rmse < b.rmse || (s.rmse == b.rmse && s.lambda > b.lambda) => Some(s),
            keep => keep,
        })
        .expect("grid is non-empty");
    Ok(TuneResult {
        best_lambda: best.lambda,
        scores,
        train_size: train.len(),
        validation_size: val.len(),
    })
}

/// Writes a dense matrix as CSV, one row per line, no header.
pub fn write_matrix_csv<W: Write>(m: &DMatrix<f64>, mut writer: W) -> std::io::Result<()> {
    for i in 0..m.nrows() {
        let line: Vec<String> = (0..m.ncols()).map(|j| m[(i, j)].to_string()).collect();
        writeln!(writer, "{}", line.join(","))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn full_obs(m: &DMatrix<f64>) -> ObservationSet {
        let mut obs = ObservationSet::new(m.nrows(), m.ncols());
        for i in 0..m.nrows() {
            for j in 0..m.ncols() {
                obs.insert(i, j, m[(i, j)], 1, 0).unwrap();
            }
        }
        obs
    }

    #[test]
    fn shrinkage_of_known_spectrum() {
        let m = DMatrix::from_row_slice(2, 2, &[3.0, 0.0, 0.0, 1.0]);
        let (out, sv, nuc) = shrink_singular_values(&m, 1.0);
        assert!((sv[0] - 2.0).abs() < 1e-12 && sv[1].abs() < 1e-12);
        assert!((nuc - 2.0).abs() < 1e-12);
        assert!((out[(0, 0)] - 2.0).abs() < 1e-12 && out[(1, 1)].abs() < 1e-12);
    }

    #[test]
    fn full_rank_one_with_zero_lambda_is_exact() {
        let u = DMatrix::from_column_slice(6, 1, &[0.1, 0.3, 0.5, 0.7, 0.9, 0.2]);
        let v = DMatrix::from_column_slice(7, 1, &[0.9, 0.8, 0.2, 0.4, 0.6, 1.0, 0.3]);
        let m = &u * v.transpose();
        let fit = complete(&full_obs(&m), 0.0, 1e-6, 500).unwrap();
        assert!((fit.values - m).abs().max() < 1e-8);
    }

    #[test]
    fn objective_trivial_cases() {
        let m = DMatrix::from_row_slice(2, 2, &[0.2, 0.4, 0.6, 0.8]);
        assert_eq!(objective_value(&full_obs(&m), &m, 0.0).unwrap(), 0.0);
        let mut obs = ObservationSet::new(2, 2);
        obs.insert(0, 0, 1.0, 1, 0).unwrap();
        assert_eq!(objective_value(&obs, &DMatrix::zeros(2, 2), 2.0).unwrap(), 1.0);
        assert!(matches!(
            objective_value(&obs, &DMatrix::zeros(3, 2), 1.0),
            Err(MatcompError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn pooling_is_a_running_mean() {
        let mut obs = ObservationSet::new(1, 7);
        obs.pool(0, 2, 1.0, 3).unwrap();
        assert_eq!(obs.get(0, 2).unwrap().value(), 1.0);
        assert_eq!(obs.get(0, 2).unwrap().weight, 1);
        obs.insert(0, 4, 0.5, 2, 1).unwrap();
        obs.pool(0, 4, 0.0, 0).unwrap();
        let o = obs.get(0, 4).unwrap();
        assert_eq!((o.value(), o.weight, o.last_day), (1.0 / 3.0, 3, 1));
        assert!(obs.pool(1, 0, 1.0, 0).is_err());
        assert!(obs.insert(0, 0, 0.5, 0, 0).is_err());
    }

    #[test]
    fn input_errors() {
        let obs = ObservationSet::new(3, 3);
        assert_eq!(complete(&obs, 1.0, 1e-6, 10), Err(MatcompError::EmptyObservations));
        let mut obs = ObservationSet::new(3, 3);
        obs.insert(0, 0, 0.5, 1, 0).unwrap();
        assert!(matches!(complete(&obs, 0.0, 1e-6, 10), Err(MatcompError::InvalidLambda(_))));
        assert!(matches!(complete(&obs, -1.0, 1e-6, 10), Err(MatcompError::InvalidLambda(_))));
    }

    #[test]
    fn iteration_cap_is_flagged_not_failed() {
        let mut obs = ObservationSet::new(4, 4);
        for i in 0..4 {
            obs.insert(i, i, 0.9, 1, 0).unwrap();
            obs.insert(i, (i + 1) % 4, 0.1, 1, 0).unwrap();
        }
        let fit = complete(&obs, 0.01, 1e-15, 3).unwrap();
        assert_eq!(fit.iterations, 3);
        assert!(!fit.converged);
    }

    #[test]
    fn single_point_grid_returns_that_lambda() {
        let mut obs = ObservationSet::new(5, 7);
        for i in 0..5 {
            for j in 0..7 {
                if (i + j) % 2 == 0 {
                    obs.insert(i, j, 0.5, 1, (i * 7 + j) as u32).unwrap();
                }
            }
        }
        let r = tune_lambda(&obs, &[0.3], 0.2, 1e-6, 500).unwrap();
        assert_eq!(r.best_lambda, 0.3);
        assert_eq!(r.scores.len(), 1);
    }

    #[test]
    fn recency_split_holds_out_latest_cells() {
        let mut obs = ObservationSet::new(10, 1);
        for i in 0..10 {
            obs.insert(i, 0, 0.5, 1, i as u32).unwrap();
        }
        let (train, val) = recency_split(&obs, 0.2).unwrap();
        assert_eq!(val.len(), 2);
        assert!(val.get(9, 0).is_some() && val.get(8, 0).is_some());
        assert_eq!(train.len(), 8);

        let mut one = ObservationSet::new(1, 1);
        one.insert(0, 0, 0.5, 1, 0).unwrap();
        assert!(matches!(recency_split(&one, 0.2), Err(MatcompError::DegenerateSplit { .. })));
    }
}
