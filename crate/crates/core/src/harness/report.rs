//! Evaluation outputs: per-system CSV rows plus a JSON file of aggregates.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::eval::{expected_verdict, ExperimentPlan};
use crate::distributions::{DecodingStrategy, Truncation};
use crate::error::{Error, Result};
use crate::estimators::{StrategyVerdict, Verdict};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub system_id: usize,
    pub true_param: f64,
    pub estimate: f64,
    pub abs_error: f64,
    pub samples_used: usize,
    pub converged: bool,
}

impl EvalRow {
    pub fn new(system_id: usize, true_param: f64, estimate: f64, samples_used: usize, converged: bool) -> Self {
        Self { system_id, true_param, estimate, abs_error: (estimate - true_param).abs(), samples_used, converged }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregates {
    pub n: usize,
    /// Fraction of estimates equal to the truth.
    pub exact_accuracy: f64,
    pub tolerance: f64,
    /// Fraction of estimates within `tolerance` of the truth.
    pub acc_within_tolerance: f64,
    pub mae: f64,
    pub rmse: f64,
    /// Fraction of estimates at or above the truth.
    pub upward_fraction: f64,
    pub mean_samples: f64,
    pub max_samples: usize,
}

impl Aggregates {
    /// `None` for an empty row set.
    pub fn compute(rows: &[EvalRow], tolerance: f64) -> Option<Self> {
        if rows.is_empty() {
            return None;
        }
        let n = rows.len() as f64;
        let frac = |pred: &dyn Fn(&EvalRow) -> bool| rows.iter().filter(|r| pred(r)).count() as f64 / n;
        Some(Self {
            n: rows.len(),
            exact_accuracy: frac(&|r| r.abs_error == 0.0),
            tolerance,
            // The slack absorbs rounding in p estimates that land on the band edge.
            acc_within_tolerance: frac(&|r| r.abs_error <= tolerance + 1e-12),
            mae: rows.iter().map(|r| r.abs_error).sum::<f64>() / n,
            rmse: (rows.iter().map(|r| r.abs_error * r.abs_error).sum::<f64>() / n).sqrt(),
            upward_fraction: frac(&|r| r.estimate >= r.true_param),
            mean_samples: rows.iter().map(|r| r.samples_used as f64).sum::<f64>() / n,
            max_samples: rows.iter().map(|r| r.samples_used).max().unwrap_or(0),
        })
    }
}

/// Contents of the JSON file written next to the CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub plan: ExperimentPlan,
    /// Smallest reportable p given the known distributions (p runs only).
    pub floor: Option<f64>,
    pub aggregates: Aggregates,
    /// Aggregates over systems whose true p exceeds `floor`.
    pub above_floor: Option<Aggregates>,
    /// Mean absolute error over ten equal slices of the parameter range.
    pub error_by_param: Vec<ParamBucket>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamBucket {
    pub lo: f64,
    pub hi: f64,
    pub n: usize,
    pub mae: Option<f64>,
}

fn buckets(range: [f64; 2], rows: &[EvalRow]) -> Vec<ParamBucket> {
    let [lo, hi] = range;
    let count = if lo == hi { 1 } else { 10 };
    let width = (hi - lo) / count as f64;
    (0..count)
        .map(|i| {
            let (b_lo, b_hi) = (lo + i as f64 * width, if i + 1 == count { hi } else { lo + (i + 1) as f64 * width });
            let inside: Vec<f64> = rows
                .iter()
                .filter(|r| r.true_param >= b_lo && (r.true_param < b_hi || (i + 1 == count && r.true_param <= b_hi)))
                .map(|r| r.abs_error)
                .collect();
            let mae = (!inside.is_empty()).then(|| inside.iter().sum::<f64>() / inside.len() as f64);
            ParamBucket { lo: b_lo, hi: b_hi, n: inside.len(), mae }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    pub summary: EvalSummary,
}

impl EvalReport {
    pub fn new(plan: ExperimentPlan, rows: Vec<EvalRow>, floor: Option<f64>) -> Result<Self> {
        let summary = summarize(plan, &rows, floor)?;
        Ok(Self { rows, summary })
    }

    pub fn aggregates(&self) -> &Aggregates {
        &self.summary.aggregates
    }

    /// Writes `<stem>.csv` and `<stem>.json` into `dir`.
    pub fn write(&self, dir: &Path, stem: &str) -> Result<(PathBuf, PathBuf)> {
        fs::create_dir_all(dir)?;
        let csv_path = dir.join(format!("{stem}.csv"));
        let json_path = dir.join(format!("{stem}.json"));
        write_csv(&csv_path, &self.rows)?;
        write_json(&json_path, &self.summary)?;
        Ok((csv_path, json_path))
    }

    /// Reads a report back and checks the stored aggregates against the rows.
    pub fn load(csv_path: &Path, json_path: &Path) -> Result<Self> {
        let rows: Vec<EvalRow> = read_csv(csv_path)?;
        for r in &rows {
            if r.abs_error != (r.estimate - r.true_param).abs() {
                return Err(Error::Report(format!("row {} has an inconsistent abs_error", r.system_id)));
            }
        }
        let stored: EvalSummary = serde_json::from_str(&fs::read_to_string(json_path)?)?;
        let recomputed = summarize(stored.plan.clone(), &rows, stored.floor)?;
        if recomputed != stored {
            return Err(Error::Report(format!(
                "aggregates in {} do not match the rows of {}",
                json_path.display(),
                csv_path.display()
            )));
        }
        Ok(Self { rows, summary: stored })
    }
}

fn summarize(plan: ExperimentPlan, rows: &[EvalRow], floor: Option<f64>) -> Result<EvalSummary> {
    let aggregates = Aggregates::compute(rows, plan.tolerance).ok_or_else(|| Error::Report("no rows".into()))?;
    let above_floor = floor.and_then(|f| {
        let above: Vec<EvalRow> = rows.iter().filter(|r| r.true_param > f).cloned().collect();
        Aggregates::compute(&above, plan.tolerance)
    });
    let error_by_param = buckets(plan.param_range, rows);
    Ok(EvalSummary { plan, floor, aggregates, above_floor, error_by_param })
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

fn read_csv<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<std::result::Result<_, _>>()?)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscriminationRow {
    pub system_id: usize,
    pub strategy: String,
    pub true_param: f64,
    pub verdict: Verdict,
    /// Empty when both hypotheses explain the setting equally well.
    pub expected: Option<Verdict>,
    pub ratio: f64,
    pub unique_large: usize,
    pub unique_small: usize,
    pub samples_used: usize,
}

impl DiscriminationRow {
    pub fn new(system_id: usize, strategy: &DecodingStrategy, small_vocab: usize, v: &StrategyVerdict) -> Self {
        let (name, param) = match strategy.truncation {
            Truncation::Argmax => ("top_k", 1.0),
            Truncation::TopK { k } => ("top_k", k as f64),
            Truncation::TopP { p } => ("top_p", p),
        };
        Self {
            system_id,
            strategy: name.to_string(),
            true_param: param,
            verdict: v.verdict,
            expected: expected_verdict(strategy, small_vocab),
            ratio: v.ratio,
            unique_large: v.large.unique,
            unique_small: v.small.unique,
            samples_used: v.samples_used(),
        }
    }
}

/// Verdict counts for one (strategy, parameter) setting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SettingSummary {
    pub strategy: String,
    pub param: f64,
    pub expected: Option<Verdict>,
    pub trials: usize,
    pub top_k: usize,
    pub top_p: usize,
    pub indeterminate: usize,
    pub accuracy: Option<f64>,
    /// Mean unique-count ratio, large prompt over small.
    pub mean_ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscriminationSummary {
    pub plan: ExperimentPlan,
    /// Correct verdicts over settings where one hypothesis is right.
    pub accuracy: Option<f64>,
    pub settings: Vec<SettingSummary>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiscriminationReport {
    pub rows: Vec<DiscriminationRow>,
    pub summary: DiscriminationSummary,
}

impl DiscriminationReport {
    pub fn new(plan: ExperimentPlan, rows: Vec<DiscriminationRow>) -> Self {
        let summary = summarize_verdicts(plan, &rows);
        Self { rows, summary }
    }

    pub fn write(&self, dir: &Path, stem: &str) -> Result<(PathBuf, PathBuf)> {
        fs::create_dir_all(dir)?;
        let csv_path = dir.join(format!("{stem}.csv"));
        let json_path = dir.join(format!("{stem}.json"));
        write_csv(&csv_path, &self.rows)?;
        write_json(&json_path, &self.summary)?;
        Ok((csv_path, json_path))
    }

    pub fn load(csv_path: &Path, json_path: &Path) -> Result<Self> {
        let rows: Vec<DiscriminationRow> = read_csv(csv_path)?;
        let stored: DiscriminationSummary = serde_json::from_str(&fs::read_to_string(json_path)?)?;
        if summarize_verdicts(stored.plan.clone(), &rows) != stored {
            return Err(Error::Report(format!("summary in {} does not match the rows", json_path.display())));
        }
        Ok(Self { rows, summary: stored })
    }

    pub fn setting(&self, strategy: &str, param: f64) -> Option<&SettingSummary> {
        self.summary.settings.iter().find(|s| s.strategy == strategy && s.param == param)
    }
}

fn summarize_verdicts(plan: ExperimentPlan, rows: &[DiscriminationRow]) -> DiscriminationSummary {
    let mut settings: Vec<SettingSummary> = Vec::new();
    for r in rows {
        let i = match settings.iter().position(|s| s.strategy == r.strategy && s.param == r.true_param) {
            Some(i) => i,
            None => {
                settings.push(SettingSummary {
                    strategy: r.strategy.clone(),
                    param: r.true_param,
                    expected: r.expected,
                    trials: 0,
                    top_k: 0,
                    top_p: 0,
                    indeterminate: 0,
                    accuracy: None,
                    mean_ratio: 0.0,
                });
                settings.len() - 1
            }
        };
        let s = &mut settings[i];
        s.trials += 1;
        s.mean_ratio += r.ratio;
        match r.verdict {
            Verdict::TopK => s.top_k += 1,
            Verdict::TopP => s.top_p += 1,
            Verdict::Indeterminate => s.indeterminate += 1,
        }
    }
    for s in &mut settings {
        s.mean_ratio /= s.trials as f64;
        s.accuracy = s.expected.map(|e| {
            let hits = match e {
                Verdict::TopK => s.top_k,
                Verdict::TopP => s.top_p,
                Verdict::Indeterminate => s.indeterminate,
            };
            hits as f64 / s.trials as f64
        });
    }
    let decisive: Vec<&DiscriminationRow> =
        rows.iter().filter(|r| matches!(r.expected, Some(Verdict::TopK | Verdict::TopP))).collect();
    let accuracy = (!decisive.is_empty())
        .then(|| decisive.iter().filter(|r| Some(r.verdict) == r.expected).count() as f64 / decisive.len() as f64);
    DiscriminationSummary { plan, accuracy, settings }
}

#[cfg(test)]
mod tests {
    use approx::assert_abs_diff_eq;

    use super::*;
    use crate::harness::eval::ExperimentKind;

    fn rows() -> Vec<EvalRow> {
        vec![
            EvalRow::new(0, 10.0, 10.0, 600, true),
            EvalRow::new(1, 20.0, 17.0, 6400, false),
            EvalRow::new(2, 30.0, 36.0, 6400, false),
        ]
    }

    #[test]
    fn aggregates_by_hand() {
        let a = Aggregates::compute(&rows(), 5.0).unwrap();
        assert_eq!(a.n, 3);
        assert_abs_diff_eq!(a.exact_accuracy, 1.0 / 3.0);
        assert_abs_diff_eq!(a.acc_within_tolerance, 2.0 / 3.0);
        assert_abs_diff_eq!(a.mae, 3.0);
        assert_abs_diff_eq!(a.rmse, 15.0f64.sqrt(), epsilon = 1e-12);
        assert_abs_diff_eq!(a.upward_fraction, 2.0 / 3.0);
        assert_eq!(a.max_samples, 6400);
        assert!(Aggregates::compute(&[], 1.0).is_none());
    }

    #[test]
    fn round_trip_and_tamper_detection() {
        let dir = tempfile::tempdir().unwrap();
        let plan = ExperimentPlan::for_kind(ExperimentKind::P);
        let rows = vec![EvalRow::new(0, 0.1234567, 0.1301, 6000, true), EvalRow::new(1, 0.05, 0.081, 6000, true)];
        let report = EvalReport::new(plan, rows, Some(0.0811)).unwrap();
        assert_eq!(report.summary.above_floor.as_ref().unwrap().n, 1);
        let buckets = &report.summary.error_by_param;
        assert_eq!(buckets.len(), 10);
        assert_eq!((buckets[0].n, buckets[1].n, buckets[2].n), (1, 1, 0));
        assert_eq!(buckets[2].mae, None);
        let (csv_path, json_path) = report.write(dir.path(), "eval_p").unwrap();
        let header = fs::read_to_string(&csv_path).unwrap();
        assert!(header.starts_with("system_id,true_param,estimate,abs_error,samples_used,converged\n"));
        assert_eq!(EvalReport::load(&csv_path, &json_path).unwrap(), report);

        let tampered = header.replace("0.1301", "0.1302");
        fs::write(&csv_path, tampered).unwrap();
        assert!(matches!(EvalReport::load(&csv_path, &json_path), Err(Error::Report(_))));
    }
}
