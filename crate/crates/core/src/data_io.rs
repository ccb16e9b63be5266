//! Return histories and moment files in, results out.
//!
//! Two input formats: a returns CSV (header row of asset labels, first
//! column a period key) where any column containing a missing or
//! non-numeric cell is dropped whole, and the OR-Library single-period
//! portfolio format (asset count; mean and standard deviation per asset;
//! correlation triplets) with configurable unit scaling. Output is a stable
//! JSON schema for solve results.

use crate::model::{ModelError, Moments};
use crate::numerics::SymMatrix;
use crate::upper_level::SolveResult;
use serde::{Deserialize, Serialize};
use std::io::{self, Read, Write};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("file has no data rows")]
    EmptyFile,
    #[error("every asset column contained a missing or non-numeric cell")]
    NoUsableColumns,
    #[error("malformed header: {0}")]
    MalformedHeader(String),
    #[error("line {line}: {message}")]
    MalformedLine { line: usize, message: String },
    #[error("no correlation given for asset pair ({i}, {j})")]
    MissingCorrelation { i: usize, j: usize },
    #[error("correlation {value} for asset pair ({i}, {j}) is outside [-1, 1]")]
    CorrelationOutOfRange { i: usize, j: usize, value: f64 },
    #[error("asset pair ({i}, {j}) has conflicting correlations {first} and {second}")]
    ConflictingCorrelation {
        i: usize,
        j: usize,
        first: f64,
        second: f64,
    },
    #[error("return matrix needs {expected} cells ({periods} periods x {assets} assets), got {got}")]
    ShapeMismatch {
        expected: usize,
        got: usize,
        periods: usize,
        assets: usize,
    },
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// A complete return history: M periods × N assets, row-major, with asset
/// labels and opaque period keys. No gaps — ingestion drops incomplete
/// columns before this type exists.
#[derive(Debug, Clone)]
pub struct ReturnMatrix {
    labels: Vec<String>,
    periods: Vec<String>,
    data: Vec<f64>,
}

impl ReturnMatrix {
    pub fn new(
        labels: Vec<String>,
        periods: Vec<String>,
        data: Vec<f64>,
    ) -> Result<Self, DataError> {
        if periods.is_empty() {
            return Err(DataError::EmptyFile);
        }
        if labels.is_empty() {
            return Err(DataError::NoUsableColumns);
        }
        let expected = labels.len() * periods.len();
        if data.len() != expected {
            return Err(DataError::ShapeMismatch {
                expected,
                got: data.len(),
                periods: periods.len(),
                assets: labels.len(),
            });
        }
        Ok(ReturnMatrix {
            labels,
            periods,
            data,
        })
    }

    /// Bare history with generated labels and period keys, for tests and
    /// synthetic data.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, DataError> {
        let n = rows.first().map_or(0, Vec::len);
        let labels = (1..=n).map(|j| format!("asset_{j}")).collect();
        let periods = (1..=rows.len()).map(|m| m.to_string()).collect();
        let mut data = Vec::with_capacity(n * rows.len());
        for row in rows {
            if row.len() != n {
                return Err(DataError::ShapeMismatch {
                    expected: n,
                    got: row.len(),
                    periods: rows.len(),
                    assets: n,
                });
            }
            data.extend_from_slice(row);
        }
        ReturnMatrix::new(labels, periods, data)
    }

    pub fn n_periods(&self) -> usize {
        self.periods.len()
    }

    pub fn n_assets(&self) -> usize {
        self.labels.len()
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn periods(&self) -> &[String] {
        &self.periods
    }

    /// Returns of every asset in period `m`.
    pub fn row(&self, m: usize) -> &[f64] {
        let n = self.n_assets();
        &self.data[m * n..(m + 1) * n]
    }

    /// Copy of the consecutive period range `[start, start + len)`.
    pub fn window(&self, start: usize, len: usize) -> ReturnMatrix {
        assert!(start + len <= self.n_periods(), "window out of range");
        let n = self.n_assets();
        ReturnMatrix {
            labels: self.labels.clone(),
            periods: self.periods[start..start + len].to_vec(),
            data: self.data[start * n..(start + len) * n].to_vec(),
        }
    }
}

/// Parses a returns CSV. Columns with any empty or non-numeric cell are
/// dropped entirely; the second value returned is how many were dropped.
pub fn parse_returns_csv<R: Read>(source: R) -> Result<(ReturnMatrix, usize), DataError> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(source);
    let header = reader.headers()?.clone();
    let mut rows = Vec::new();
    for record in reader.records() {
        rows.push(record?);
    }
    if rows.is_empty() {
        return Err(DataError::EmptyFile);
    }
    let width = header.len();
    let mut keep = Vec::new();
    'columns: for j in 1..width {
        for row in &rows {
            let complete = row
                .get(j)
                .and_then(|cell| cell.parse::<f64>().ok())
                .is_some_and(f64::is_finite);
            if !complete {
                continue 'columns;
            }
        }
        keep.push(j);
    }
    if keep.is_empty() {
        return Err(DataError::NoUsableColumns);
    }
    let dropped = width - 1 - keep.len();
    let labels = keep.iter().map(|&j| header[j].to_string()).collect();
    let periods = rows
        .iter()
        .map(|row| row.get(0).unwrap_or("").to_string())
        .collect();
    let mut data = Vec::with_capacity(rows.len() * keep.len());
    for row in &rows {
        for &j in &keep {
            data.push(row[j].parse::<f64>().unwrap());
        }
    }
    Ok((ReturnMatrix::new(labels, periods, data)?, dropped))
}

/// Parses the OR-Library single-period portfolio format into moments.
///
/// Layout: first line the asset count N; then N lines of `mean sd`; then
/// `i j rho` correlation triplets (1-indexed). Every off-diagonal pair must
/// appear; the diagonal is implied 1. μ̂ = mean_scale·mean and
/// Σ̂_ij = cov_scale·ρ_ij·sd_i·sd_j, so percent/basis-point unit
/// conventions are the caller's choice.
pub fn parse_orlibrary<R: Read>(
    mut source: R,
    mean_scale: f64,
    cov_scale: f64,
) -> Result<Moments, DataError> {
    let mut text = String::new();
    source.read_to_string(&mut text)?;
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty());

    let (_, header) = lines.next().ok_or(DataError::EmptyFile)?;
    let n: usize = header
        .parse()
        .map_err(|_| DataError::MalformedHeader(header.to_string()))?;
    if n == 0 {
        return Err(DataError::MalformedHeader(header.to_string()));
    }

    let mut means = Vec::with_capacity(n);
    let mut sds = Vec::with_capacity(n);
    for _ in 0..n {
        let (line, text) = lines.next().ok_or(DataError::MalformedLine {
            line: 0,
            message: format!("expected {n} mean/sd lines, file ended early"),
        })?;
        let fields: Vec<f64> = text
            .split_whitespace()
            .map(str::parse)
            .collect::<Result<_, std::num::ParseFloatError>>()
            .map_err(|e| DataError::MalformedLine {
                line,
                message: e.to_string(),
            })?;
        let [mean, sd] = fields[..] else {
            return Err(DataError::MalformedLine {
                line,
                message: format!("expected `mean sd`, got {} fields", fields.len()),
            });
        };
        if !(sd >= 0.0) {
            return Err(DataError::MalformedLine {
                line,
                message: format!("standard deviation {sd} is negative"),
            });
        }
        means.push(mean);
        sds.push(sd);
    }

    // Upper-triangle store: value plus whether it came in (i <= j) order,
    // which wins over the mirrored order when both appear.
    let tri = |lo: usize, hi: usize| hi * (hi + 1) / 2 + lo;
    let mut rho: Vec<Option<(f64, bool)>> = vec![None; n * (n + 1) / 2];
    for (line, text) in lines {
        let fields: Vec<&str> = text.split_whitespace().collect();
        let [i_text, j_text, value_text] = fields[..] else {
            return Err(DataError::MalformedLine {
                line,
                message: format!("expected `i j rho`, got {} fields", fields.len()),
            });
        };
        let parse_index = |s: &str| -> Result<usize, DataError> {
            let idx: usize = s.parse().map_err(|_| DataError::MalformedLine {
                line,
                message: format!("bad asset index `{s}`"),
            })?;
            if idx < 1 || idx > n {
                return Err(DataError::MalformedLine {
                    line,
                    message: format!("asset index {idx} outside 1..={n}"),
                });
            }
            Ok(idx)
        };
        let i = parse_index(i_text)?;
        let j = parse_index(j_text)?;
        let value: f64 = value_text.parse().map_err(|_| DataError::MalformedLine {
            line,
            message: format!("bad correlation `{value_text}`"),
        })?;
        if value.abs() > 1.0 + 1e-12 {
            return Err(DataError::CorrelationOutOfRange { i, j, value });
        }
        let upper = i <= j;
        let (lo, hi) = (i.min(j) - 1, j.max(i) - 1);
        let slot = &mut rho[tri(lo, hi)];
        match *slot {
            None => *slot = Some((value, upper)),
            Some((first, first_upper)) => {
                if (first - value).abs() > 1e-9 {
                    return Err(DataError::ConflictingCorrelation {
                        i: lo + 1,
                        j: hi + 1,
                        first,
                        second: value,
                    });
                }
                if upper && !first_upper {
                    *slot = Some((value, upper));
                }
            }
        }
    }

    for hi in 0..n {
        let slot = &mut rho[tri(hi, hi)];
        match *slot {
            None => *slot = Some((1.0, true)),
            Some((value, _)) if (value - 1.0).abs() > 1e-9 => {
                return Err(DataError::ConflictingCorrelation {
                    i: hi + 1,
                    j: hi + 1,
                    first: 1.0,
                    second: value,
                });
            }
            Some(_) => {}
        }
        for lo in 0..hi {
            if rho[tri(lo, hi)].is_none() {
                return Err(DataError::MissingCorrelation {
                    i: lo + 1,
                    j: hi + 1,
                });
            }
        }
    }

    let mean = means.iter().map(|m| mean_scale * m).collect();
    let covariance = SymMatrix::from_fn(n, |i, j| {
        let (lo, hi) = (i.min(j), i.max(j));
        cov_scale * rho[tri(lo, hi)].unwrap().0 * sds[i] * sds[j]
    });
    Ok(Moments::new(mean, covariance)?)
}

/// The emitted result schema; field names are a stable interface.
#[derive(Debug, Serialize, Deserialize)]
struct ResultRecord {
    obj: f64,
    gap_pct: f64,
    time_s: f64,
    cuts: usize,
    nodes: u64,
    mode: String,
    selection: Vec<usize>,
    weights: Vec<f64>,
}

/// Writes one solve result as a single JSON object followed by a newline.
///
/// `gap_pct` is the proven gap as a percentage of the upper bound,
/// 100·(UB − LB)/max(|UB|, 1e-12); a closed gap emits exactly 0.0. Write
/// failures from the sink are returned verbatim.
pub fn write_result_json<W: Write>(result: &SolveResult, mut sink: W) -> io::Result<()> {
    let record = ResultRecord {
        obj: result.objective,
        gap_pct: 100.0 * result.gap / result.objective.abs().max(1e-12),
        time_s: result.wall_time_s,
        cuts: result.cuts,
        nodes: result.nodes,
        mode: result.mode.to_string(),
        selection: result.selection.indices().to_vec(),
        weights: result.portfolio.weights().to_vec(),
    };
    serde_json::to_writer(&mut sink, &record)?;
    sink.write_all(b"\n")
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn complete_csv_keeps_every_column() {
        let csv = "week,AAA,BBB\n1,0.5,1.5\n2,-0.25,0.0\n3,1.0,2.0\n";
        let (matrix, dropped) = parse_returns_csv(csv.as_bytes()).unwrap();
        assert_eq!(dropped, 0);
        assert_eq!(matrix.n_periods(), 3);
        assert_eq!(matrix.n_assets(), 2);
        assert_eq!(matrix.labels(), &["AAA".to_string(), "BBB".to_string()]);
        assert_eq!(matrix.periods()[2], "3");
        assert_eq!(matrix.row(1), &[-0.25, 0.0]);
    }

    #[test]
    fn column_with_a_gap_is_dropped_whole() {
        let csv = "week,AAA,BBB,CCC\n1,0.5,,2.0\n2,1.0,1.0,3.0\n";
        let (matrix, dropped) = parse_returns_csv(csv.as_bytes()).unwrap();
        assert_eq!(dropped, 1);
        assert_eq!(matrix.n_assets(), 2);
        assert_eq!(matrix.labels(), &["AAA".to_string(), "CCC".to_string()]);
        assert_eq!(matrix.row(0), &[0.5, 2.0]);
    }

    #[test]
    fn degenerate_csv_files_are_named_errors() {
        assert!(matches!(
            parse_returns_csv("week,AAA,BBB\n".as_bytes()),
            Err(DataError::EmptyFile)
        ));
        assert!(matches!(
            parse_returns_csv("week,AAA\n1,oops\n".as_bytes()),
            Err(DataError::NoUsableColumns)
        ));
    }

    #[test]
    fn window_slices_by_period() {
        let matrix = ReturnMatrix::from_rows(&[vec![1.0], vec![2.0], vec![3.0]]).unwrap();
        let tail = matrix.window(1, 2);
        assert_eq!(tail.n_periods(), 2);
        assert_eq!(tail.row(0), &[2.0]);
        assert_eq!(tail.periods(), &["2".to_string(), "3".to_string()]);
    }

    #[test]
    fn orlibrary_scaling_matches_hand_computation() {
        let text = "2\n0.01 0.1\n0.02 0.2\n1 1 1.0\n1 2 0.5\n2 2 1.0\n";
        let m = parse_orlibrary(text.as_bytes(), 100.0, 10000.0).unwrap();
        assert_relative_eq!(m.mean()[0], 1.0, max_relative = 1e-14);
        assert_relative_eq!(m.mean()[1], 2.0, max_relative = 1e-14);
        assert_relative_eq!(m.covariance().get(0, 0), 100.0, max_relative = 1e-14);
        assert_relative_eq!(m.covariance().get(0, 1), 100.0, max_relative = 1e-14);
        assert_relative_eq!(m.covariance().get(1, 1), 400.0, max_relative = 1e-14);
    }

    #[test]
    fn orlibrary_identity_correlations_give_diagonal_covariance() {
        let text = "2\n0.5 3.0\n0.25 2.0\n1 1 1\n1 2 0\n2 2 1\n";
        let m = parse_orlibrary(text.as_bytes(), 1.0, 1.0).unwrap();
        assert_eq!(m.covariance().get(0, 0), 9.0);
        assert_eq!(m.covariance().get(1, 1), 4.0);
        assert_eq!(m.covariance().get(0, 1), 0.0);
    }

    #[test]
    fn orlibrary_rejects_incomplete_or_inconsistent_correlations() {
        let missing = "2\n0.5 1.0\n0.25 1.0\n1 1 1\n2 2 1\n";
        assert!(matches!(
            parse_orlibrary(missing.as_bytes(), 1.0, 1.0),
            Err(DataError::MissingCorrelation { i: 1, j: 2 })
        ));
        let out_of_range = "2\n0.5 1.0\n0.25 1.0\n1 2 1.5\n";
        assert!(matches!(
            parse_orlibrary(out_of_range.as_bytes(), 1.0, 1.0),
            Err(DataError::CorrelationOutOfRange { .. })
        ));
        let conflict = "2\n0.5 1.0\n0.25 1.0\n1 2 0.5\n2 1 0.25\n";
        assert!(matches!(
            parse_orlibrary(conflict.as_bytes(), 1.0, 1.0),
            Err(DataError::ConflictingCorrelation { i: 1, j: 2, .. })
        ));
        assert!(matches!(
            parse_orlibrary("zero\n".as_bytes(), 1.0, 1.0),
            Err(DataError::MalformedHeader(_))
        ));
    }

    #[test]
    fn orlibrary_mirrored_duplicates_prefer_the_upper_triangle() {
        // Both orders given, equal within 1e-9: the (1,2) value sticks.
        let text = "2\n0.5 1.0\n0.25 1.0\n2 1 0.30000000025\n1 2 0.3\n";
        let m = parse_orlibrary(text.as_bytes(), 1.0, 1.0).unwrap();
        assert_eq!(m.covariance().get(0, 1), 0.3);
    }

    fn sample_result(objective: f64, gap: f64) -> SolveResult {
        use crate::model::{Portfolio, Selection};
        use crate::upper_level::{MasterMode, Termination};
        SolveResult {
            selection: Selection::from_indices(5, &[1, 3]).unwrap(),
            portfolio: Portfolio::new(vec![0.0, 0.625, 0.0, 0.375, 0.0]).unwrap(),
            objective,
            gap,
            iterations: 7,
            cuts: 6,
            nodes: 41,
            wall_time_s: 0.125,
            mode: MasterMode::SingleTree,
            termination: Termination::EpsOptimal,
        }
    }

    #[test]
    fn gap_percentage_is_relative_to_the_upper_bound() {
        let mut out = Vec::new();
        write_result_json(&sample_result(3.034, 0.0), &mut out).unwrap();
        let v: serde_json::Value = serde_json::from_slice(&out).unwrap();
        assert_eq!(v["gap_pct"].as_f64().unwrap(), 0.0);
        assert_eq!(v["obj"].as_f64().unwrap(), 3.034);

        out.clear();
        write_result_json(&sample_result(2.0, 1.0), &mut out).unwrap();
        let v: serde_json::Value = serde_json::from_slice(&out).unwrap();
        assert_eq!(v["gap_pct"].as_f64().unwrap(), 50.0);
    }

    #[test]
    fn emitted_json_round_trips_every_numeric_field_exactly() {
        let result = sample_result(0.07344921384, 3.62e-6);
        let mut out = Vec::new();
        write_result_json(&result, &mut out).unwrap();
        assert_eq!(*out.last().unwrap(), b'\n');
        let parsed: ResultRecord = serde_json::from_slice(&out).unwrap();
        assert_eq!(parsed.obj.to_bits(), result.objective.to_bits());
        let expected_gap = 100.0 * result.gap / result.objective.abs().max(1e-12);
        assert_eq!(parsed.gap_pct.to_bits(), expected_gap.to_bits());
        assert_eq!(parsed.time_s.to_bits(), result.wall_time_s.to_bits());
        assert_eq!(parsed.cuts, result.cuts);
        assert_eq!(parsed.nodes, result.nodes);
        assert_eq!(parsed.mode, "single-tree");
        assert_eq!(parsed.selection, vec![1, 3]);
        for (a, b) in parsed.weights.iter().zip(result.portfolio.weights()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn sink_failures_are_surfaced() {
        struct Broken;
        impl Write for Broken {
            fn write(&mut self, _: &[u8]) -> io::Result<usize> {
                Err(io::Error::new(io::ErrorKind::BrokenPipe, "pipe closed"))
            }
            fn flush(&mut self) -> io::Result<()> {
                Ok(())
            }
        }
        let err = write_result_json(&sample_result(1.0, 0.0), Broken).unwrap_err();
        assert_eq!(err.kind(), io::ErrorKind::BrokenPipe);
    }
}
