//! Training-level affinity: averaging, group scores, normalisation and
//! matrix comparison.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Result, TagError};
use crate::probe::{AffinitySample, OptMatrix, ProbeSchedule, StepFilter};
use crate::selector::TaskGroup;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiagonalMode {
    /// Diagonal entries are dropped.
    TrainExcluded,
    ValidationIncluded,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AffinityMatrix {
    n: usize,
    /// `[source][target]`.
    values: OptMatrix,
    coverage: Vec<Vec<usize>>,
    diagonal_mode: DiagonalMode,
}

impl AffinityMatrix {
    /// Builds a matrix from explicit entries (coverage 1 for every present entry).
    pub fn from_values(values: OptMatrix, diagonal_mode: DiagonalMode) -> Result<Self> {
        let n = values.len();
        if n == 0 {
            return Err(TagError::invalid("affinity", "matrix is empty"));
        }
        if let Some(row) = values.iter().find(|r| r.len() != n) {
            return Err(TagError::DimensionMismatch {
                what: "affinity row length",
                expected: n,
                got: row.len(),
            });
        }
        let coverage = values
            .iter()
            .map(|r| r.iter().map(|v| usize::from(v.is_some())).collect())
            .collect();
        Self::from_parts(values, coverage, diagonal_mode)
    }

    fn from_parts(mut values: OptMatrix, coverage: Vec<Vec<usize>>, diagonal_mode: DiagonalMode) -> Result<Self> {
        let n = values.len();
        if values.iter().flatten().flatten().any(|v| !v.is_finite()) {
            return Err(TagError::NonFinite("affinity matrix"));
        }
        let mut coverage = coverage;
        if diagonal_mode == DiagonalMode::TrainExcluded {
            for i in 0..n {
                values[i][i] = None;
                coverage[i][i] = 0;
            }
        }
        Ok(Self {
            n,
            values,
            coverage,
            diagonal_mode,
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn diagonal_mode(&self) -> DiagonalMode {
        self.diagonal_mode
    }

    pub fn get(&self, source: usize, target: usize) -> Option<f64> {
        self.values[source][target]
    }

    pub fn values(&self) -> &OptMatrix {
        &self.values
    }

    pub fn coverage(&self, source: usize, target: usize) -> usize {
        self.coverage[source][target]
    }

    pub fn coverage_matrix(&self) -> &[Vec<usize>] {
        &self.coverage
    }

    /// Returns a copy with a different diagonal policy.
    pub fn with_diagonal_mode(&self, mode: DiagonalMode) -> Self {
        Self::from_parts(self.values.clone(), self.coverage.clone(), mode).expect("finite values")
    }

    /// Applies `f` to every present entry (tests, column shifts).
    pub fn map_entries(&self, mut f: impl FnMut(usize, usize, f64) -> f64) -> Result<Self> {
        let values = self
            .values
            .iter()
            .enumerate()
            .map(|(i, r)| r.iter().enumerate().map(|(j, v)| v.map(|x| f(i, j, x))).collect())
            .collect();
        Self::from_parts(values, self.coverage.clone(), self.diagonal_mode)
    }

    /// `Σ_{i<j} |Z_{i→j} − Z_{j→i}|` over pairs with both entries present.
    pub fn asymmetry(&self) -> f64 {
        let mut total = 0.0;
        for i in 0..self.n {
            for j in (i + 1)..self.n {
                if let (Some(a), Some(b)) = (self.values[i][j], self.values[j][i]) {
                    total += (a - b).abs();
                }
            }
        }
        total
    }

    /// CSV with header `source\target,0,…,n−1`; missing entries are empty fields.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("source\\target");
        for j in 0..self.n {
            write!(s, ",{j}").unwrap();
        }
        s.push('\n');
        for (i, row) in self.values.iter().enumerate() {
            write!(s, "{i}").unwrap();
            for v in row {
                match v {
                    Some(x) => write!(s, ",{x}").unwrap(),
                    None => s.push(','),
                }
            }
            s.push('\n');
        }
        s
    }

    pub fn from_csv(text: &str, diagonal_mode: DiagonalMode) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines.next().ok_or_else(|| TagError::Parse("empty affinity CSV".into()))?;
        let cols: Vec<&str> = header.split(',').collect();
        if cols.first().map(|c| c.trim()) != Some("source\\target") {
            return Err(TagError::Parse(format!("bad affinity header {header:?}")));
        }
        let n = cols.len() - 1;
        for (j, c) in cols[1..].iter().enumerate() {
            if c.trim().parse::<usize>().ok() != Some(j) {
                return Err(TagError::Parse(format!("header column {} should be {j}", j + 1)));
            }
        }
        let mut values = Vec::with_capacity(n);
        for (i, line) in lines.enumerate() {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != n + 1 {
                return Err(TagError::Parse(format!("row {i}: expected {} fields, got {}", n + 1, f.len())));
            }
            if f[0].trim().parse::<usize>().ok() != Some(i) {
                return Err(TagError::Parse(format!("row {i} is labelled {:?}", f[0])));
            }
            let row = f[1..]
                .iter()
                .map(|x| {
                    let x = x.trim();
                    if x.is_empty() {
                        Ok(None)
                    } else {
                        x.parse::<f64>()
                            .map(Some)
                            .map_err(|e| TagError::Parse(format!("row {i}: {e}")))
                    }
                })
                .collect::<Result<Vec<_>>>()?;
            values.push(row);
        }
        if values.len() != n {
            return Err(TagError::Parse(format!("expected {n} rows, got {}", values.len())));
        }
        Self::from_values(values, diagonal_mode)
    }
}

/// Sidecar metadata written next to an affinity CSV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AffinityMetadata {
    pub diagonal_mode: DiagonalMode,
    pub schedule: Option<ProbeSchedule>,
    pub seed: u64,
    pub coverage: Vec<Vec<usize>>,
}

/// Arithmetic mean of the samples that survive `filter`, per (source, target).
///
/// Contributions are summed in step order, so the result does not depend on
/// the order of `samples`.
pub fn average_affinity(
    samples: &[AffinitySample],
    n: usize,
    filter: StepFilter,
    diagonal_mode: DiagonalMode,
) -> Result<AffinityMatrix> {
    let kept: Vec<&AffinitySample> = samples.iter().filter(|s| filter.keeps(s.step)).collect();
    if kept.is_empty() {
        return Err(TagError::EmptyFilter);
    }
    let mut buckets: Vec<Vec<Vec<(usize, f64)>>> = vec![vec![Vec::new(); n]; n];
    for s in kept {
        if s.source >= n || s.target >= n {
            return Err(TagError::UnknownTask(s.source.max(s.target)));
        }
        if let Some(v) = s.value {
            buckets[s.source][s.target].push((s.step, v));
        }
    }
    let mut values = vec![vec![None; n]; n];
    let mut coverage = vec![vec![0; n]; n];
    for i in 0..n {
        for j in 0..n {
            let b = &mut buckets[i][j];
            if b.is_empty() {
                continue;
            }
            b.sort_by(|x, y| x.0.cmp(&y.0).then(x.1.total_cmp(&y.1)));
            let sum: f64 = b.iter().map(|x| x.1).sum();
            values[i][j] = Some(sum / b.len() as f64);
            coverage[i][j] = b.len();
        }
    }
    AffinityMatrix::from_parts(values, coverage, diagonal_mode)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupScore {
    pub group: TaskGroup,
    pub target: usize,
    pub score: Option<f64>,
}

/// Mean affinity of the other group members onto `target`. A singleton is
/// scored by the diagonal entry, which is missing in train mode.
pub fn group_onto_task_score(group: TaskGroup, target: usize, z: &AffinityMatrix) -> Result<GroupScore> {
    if !group.contains(target) || target >= z.n() {
        return Err(TagError::invalid("target", format!("task {target} is not in {group}")));
    }
    let score = if group.len() == 1 {
        match z.diagonal_mode() {
            DiagonalMode::TrainExcluded => None,
            DiagonalMode::ValidationIncluded => z.get(target, target),
        }
    } else {
        let present: Vec<f64> = group
            .iter()
            .filter(|&j| j != target)
            .filter_map(|j| z.get(j, target))
            .collect();
        (!present.is_empty()).then(|| present.iter().sum::<f64>() / present.len() as f64)
    };
    Ok(GroupScore { group, target, score })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormalizedAffinity {
    /// Per target column min-max rescaled to `[0, 1]`.
    pub values: OptMatrix,
    /// Raw `max − min` of each target column.
    pub spreads: Vec<f64>,
    pub degenerate: Vec<bool>,
    /// Target whose spread is at least 4× smaller than every other target's.
    pub weak_signal: Vec<bool>,
}

pub fn normalize_onto_target(z: &AffinityMatrix) -> Result<NormalizedAffinity> {
    let n = z.n();
    let mut values = vec![vec![None; n]; n];
    let mut spreads = vec![0.0; n];
    let mut degenerate = vec![false; n];
    for t in 0..n {
        let col: Vec<(usize, f64)> = (0..n).filter_map(|s| z.get(s, t).map(|v| (s, v))).collect();
        if col.len() < 2 {
            return Err(TagError::SparseColumn {
                target: t,
                present: col.len(),
            });
        }
        let lo = col.iter().map(|c| c.1).fold(f64::INFINITY, f64::min);
        let hi = col.iter().map(|c| c.1).fold(f64::NEG_INFINITY, f64::max);
        spreads[t] = hi - lo;
        degenerate[t] = hi == lo;
        for (s, v) in col {
            values[s][t] = Some(if degenerate[t] { 0.0 } else { (v - lo) / (hi - lo) });
        }
    }
    let weak_signal = (0..n)
        .map(|t| n > 1 && (0..n).filter(|&k| k != t).all(|k| 4.0 * spreads[t] <= spreads[k]))
        .collect();
    Ok(NormalizedAffinity {
        values,
        spreads,
        degenerate,
        weak_signal,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntrySelection {
    All,
    OffDiagonal,
}

/// Pearson correlation over entries present in both matrices.
pub fn matrix_correlation(a: &AffinityMatrix, b: &AffinityMatrix, selection: EntrySelection) -> Result<f64> {
    if a.n() != b.n() {
        return Err(TagError::DimensionMismatch {
            what: "matrix size",
            expected: a.n(),
            got: b.n(),
        });
    }
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for i in 0..a.n() {
        for j in 0..a.n() {
            if selection == EntrySelection::OffDiagonal && i == j {
                continue;
            }
            if let (Some(x), Some(y)) = (a.get(i, j), b.get(i, j)) {
                xs.push(x);
                ys.push(y);
            }
        }
    }
    pearson(&xs, &ys)
}

pub fn pearson(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() || xs.len() < 3 {
        return Err(TagError::Degenerate(format!("need at least 3 paired entries, got {}", xs.len().min(ys.len()))));
    }
    let m = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / m;
    let my = ys.iter().sum::<f64>() / m;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(TagError::Degenerate("zero variance".into()));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(step: usize, source: usize, target: usize, v: f64) -> AffinitySample {
        AffinitySample {
            step,
            source,
            target,
            value: Some(v),
        }
    }

    #[test]
    fn single_sample_average() {
        let z = average_affinity(&[sample(1, 0, 1, 0.4)], 2, StepFilter::All, DiagonalMode::TrainExcluded).unwrap();
        assert_eq!(z.get(0, 1), Some(0.4));
        assert_eq!(z.coverage(0, 1), 1);
        assert_eq!(z.get(1, 0), None);
    }

    #[test]
    fn stride_filter_semantics() {
        let s = [sample(1, 0, 1, 0.2), sample(3, 0, 1, 0.6)];
        let z = average_affinity(&s, 2, StepFilter::EveryK(1), DiagonalMode::TrainExcluded).unwrap();
        assert!((z.get(0, 1).unwrap() - 0.4).abs() < 1e-15);
        assert_eq!(
            average_affinity(&s, 2, StepFilter::EveryK(2), DiagonalMode::TrainExcluded),
            Err(TagError::EmptyFilter)
        );
    }

    #[test]
    fn diagonal_dropped_in_train_mode() {
        let s = [sample(1, 0, 0, 0.9), sample(1, 0, 1, 0.1)];
        let z = average_affinity(&s, 2, StepFilter::All, DiagonalMode::TrainExcluded).unwrap();
        assert_eq!(z.get(0, 0), None);
        let z = average_affinity(&s, 2, StepFilter::All, DiagonalMode::ValidationIncluded).unwrap();
        assert_eq!(z.get(0, 0), Some(0.9));
    }

    fn three_task() -> AffinityMatrix {
        AffinityMatrix::from_values(
            vec![
                vec![None, Some(0.5), Some(0.1)],
                vec![Some(0.2), None, Some(0.3)],
                vec![Some(0.4), Some(-0.1), None],
            ],
            DiagonalMode::TrainExcluded,
        )
        .unwrap()
    }

    #[test]
    fn group_scores() {
        let z = three_task();
        let all = TaskGroup::from_ids(&[0, 1, 2]);
        assert!((group_onto_task_score(all, 0, &z).unwrap().score.unwrap() - 0.3).abs() < 1e-15);
        let pair = TaskGroup::from_ids(&[0, 1]);
        assert_eq!(group_onto_task_score(pair, 0, &z).unwrap().score, z.get(1, 0));
        assert_eq!(group_onto_task_score(TaskGroup::from_ids(&[0]), 0, &z).unwrap().score, None);
        assert!(group_onto_task_score(pair, 2, &z).is_err());
    }

    #[test]
    fn singleton_in_validation_mode_uses_diagonal() {
        let z = AffinityMatrix::from_values(
            vec![vec![Some(0.7), Some(0.1)], vec![Some(0.2), Some(0.6)]],
            DiagonalMode::ValidationIncluded,
        )
        .unwrap();
        assert_eq!(group_onto_task_score(TaskGroup::from_ids(&[1]), 1, &z).unwrap().score, Some(0.6));
    }

    #[test]
    fn normalization_examples() {
        let z = AffinityMatrix::from_values(
            vec![
                vec![Some(0.1), Some(1.0), Some(0.0)],
                vec![Some(0.3), Some(1.0), Some(1.0)],
                vec![Some(0.5), Some(1.0), Some(2.0)],
            ],
            DiagonalMode::ValidationIncluded,
        )
        .unwrap();
        let nz = normalize_onto_target(&z).unwrap();
        let col0: Vec<f64> = (0..3).map(|s| nz.values[s][0].unwrap()).collect();
        assert!((col0[0] - 0.0).abs() < 1e-12 && (col0[1] - 0.5).abs() < 1e-12 && (col0[2] - 1.0).abs() < 1e-12);
        assert!((nz.spreads[0] - 0.4).abs() < 1e-12);
        assert!(nz.degenerate[1]);
        assert!(!nz.degenerate[0]);
        assert!((0..3).all(|s| nz.values[s][1] == Some(0.0)));
    }

    #[test]
    fn weak_signal_flag() {
        // spreads: 0.05, 0.4, 2.0 -> target 0 is ≥4× smaller than every other
        let z = AffinityMatrix::from_values(
            vec![
                vec![Some(0.0), Some(0.0), Some(0.0)],
                vec![Some(0.05), Some(0.4), Some(1.0)],
                vec![Some(0.02), Some(0.1), Some(2.0)],
            ],
            DiagonalMode::ValidationIncluded,
        )
        .unwrap();
        let nz = normalize_onto_target(&z).unwrap();
        assert_eq!(nz.weak_signal, vec![true, false, false]);
    }

    #[test]
    fn sparse_column_rejected() {
        let z = AffinityMatrix::from_values(
            vec![vec![None, Some(0.1)], vec![Some(0.2), None]],
            DiagonalMode::TrainExcluded,
        )
        .unwrap();
        assert!(matches!(normalize_onto_target(&z), Err(TagError::SparseColumn { .. })));
    }

    #[test]
    fn correlation_examples() {
        let a = three_task();
        assert!((matrix_correlation(&a, &a, EntrySelection::All).unwrap() - 1.0).abs() < 1e-12);
        let neg = a.map_entries(|_, _, v| -v).unwrap();
        assert!((matrix_correlation(&a, &neg, EntrySelection::All).unwrap() + 1.0).abs() < 1e-12);
        let flat = a.map_entries(|_, _, _| 0.5).unwrap();
        assert!(matches!(matrix_correlation(&a, &flat, EntrySelection::All), Err(TagError::Degenerate(_))));
    }

    #[test]
    fn csv_round_trip_and_header() {
        let z = three_task();
        let csv = z.to_csv();
        assert!(csv.starts_with("source\\target,0,1,2\n0,,0.5,0.1\n"));
        assert_eq!(AffinityMatrix::from_csv(&csv, DiagonalMode::TrainExcluded).unwrap(), z);
        assert!(AffinityMatrix::from_csv("a,b\n", DiagonalMode::TrainExcluded).is_err());
    }

    #[test]
    fn asymmetry_sum() {
        let z = three_task();
        // |0.5-0.2| + |0.1-0.4| + |0.3+0.1|
        assert!((z.asymmetry() - 1.0).abs() < 1e-12);
    }
}
