//! Compares a finished run directory with the accuracy and convergence statements.

use std::path::Path;

use anyhow::{bail, Result};
use patchlab::eval::AccuracyReport;
use patchlab::{Method, Tier};

use crate::run::{read_json, RunRecord, Summary, TheoryRecord};

/// Gradient-norm threshold used when a CutMix run has no `grad_tol`.
pub const DEFAULT_STATIONARY_TOL: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq)]
pub struct Verdict {
    pub run: String,
    pub clause: String,
    pub measured: String,
    pub expected: String,
    pub pass: bool,
}

fn verdict(run: &str, clause: &str, measured: f64, expected: String, pass: bool) -> Verdict {
    Verdict {
        run: run.to_string(),
        clause: clause.to_string(),
        measured: format!("{measured:.4}"),
        expected,
        pass,
    }
}

fn near(run: &str, clause: &str, measured: f64, target: f64, tol: f64) -> Verdict {
    verdict(run, clause, measured, format!("{target:.3} ± {tol}"), (measured - target).abs() <= tol)
}

fn perfect(run: &str, clause: &str, measured: Option<f64>) -> Verdict {
    let m = measured.unwrap_or(f64::NAN);
    verdict(run, clause, m, "1.0".into(), m == 1.0)
}

pub fn check_run(record: &RunRecord, acc: &AccuracyReport, theory: &TheoryRecord) -> Vec<Verdict> {
    let run = record.label.as_str();
    let predicted = theory
        .predicted_accuracy
        .iter()
        .find(|(m, _)| *m == record.method)
        .map_or(f64::NAN, |p| p.1);
    let mut out = Vec::new();
    match record.method {
        Method::Erm => {
            out.push(perfect(run, "perfectly fits training set", acc.train_acc));
            out.push(near(run, "test accuracy 1 - ½ρ(rare ∪ extreme)", acc.test.rate, predicted, 0.03));
            let unlearned = acc.pooled(&[Tier::Rare, Tier::Extreme]);
            out.push(near(run, "random on (extremely) rare data", unlearned.rate, 0.5, 0.03));
        }
        Method::Cutout => {
            out.push(perfect(run, "perfectly fits augmented data", acc.aug_acc));
            out.push(perfect(run, "perfectly fits original training data", acc.train_acc));
            out.push(near(run, "test accuracy 1 - ½ρ(extreme)", acc.test.rate, predicted, 0.02));
            let unlearned = acc.pooled(&[Tier::Extreme]);
            out.push(near(run, "random on extremely rare data", unlearned.rate, 0.5, 0.04));
        }
        Method::CutMix => {
            let tol = record.grad_tol.unwrap_or(DEFAULT_STATIONARY_TOL);
            out.push(verdict(
                run,
                "finds a near stationary point",
                record.final_grad_norm,
                format!("<= {tol:e}"),
                record.final_grad_norm <= tol,
            ));
            out.push(perfect(run, "perfectly fits original training data", acc.train_acc));
            out.push(verdict(run, "almost perfectly classifies test data", acc.test.rate, ">= 0.99".into(), acc.test.rate >= 0.99));
            if let Some(u) = &record.uniformity {
                out.push(verdict(
                    run,
                    "uniform patch contributions (max |y z - z*| / z*)",
                    u.relative_deviation,
                    format!("<= {}", record.uniform_band),
                    u.relative_deviation <= record.uniform_band,
                ));
            }
        }
    }
    if let Some(dec) = record.coeff_decreases {
        let monotone = record.method != Method::CutMix;
        out.push(Verdict {
            run: run.to_string(),
            clause: if monotone { "coefficients non-decreasing" } else { "coefficients move non-monotonically" }.into(),
            measured: format!("{dec} decreases"),
            expected: if monotone { "0 decreases" } else { ">= 1 decrease" }.into(),
            pass: if monotone { dec == 0 } else { dec > 0 },
        });
    }
    out
}

pub fn check_dir(dir: &Path) -> Result<Vec<Verdict>> {
    let summary_path = dir.join("summary.json");
    if !summary_path.exists() {
        bail!("no runs found in {}", dir.display());
    }
    let summary: Summary = read_json(&summary_path)?;
    if summary.runs.is_empty() {
        bail!("no runs found in {}", dir.display());
    }
    let theory: TheoryRecord = read_json(&dir.join("theory.json"))?;
    let mut out = Vec::new();
    for label in &summary.runs {
        let record: RunRecord = read_json(&dir.join(label).join("run.json"))?;
        let acc: AccuracyReport = read_json(&dir.join(label).join("accuracy.json"))?;
        out.extend(check_run(&record, &acc, &theory));
    }
    Ok(out)
}

pub fn format_table(verdicts: &[Verdict]) -> String {
    let width = |f: &dyn Fn(&Verdict) -> usize, title: usize| verdicts.iter().map(f).max().unwrap_or(0).max(title);
    let w_run = width(&|v| v.run.chars().count(), 3);
    let w_clause = width(&|v| v.clause.chars().count(), 6);
    let w_meas = width(&|v| v.measured.chars().count(), 8);
    let mut out = format!("{:<w_run$}  {:<w_clause$}  {:>w_meas$}  {:<14}  result\n", "run", "clause", "measured", "expected");
    for v in verdicts {
        let pad = |s: &str, w: usize| format!("{s}{}", " ".repeat(w.saturating_sub(s.chars().count())));
        out.push_str(&format!(
            "{}  {}  {:>w_meas$}  {}  {}\n",
            pad(&v.run, w_run),
            pad(&v.clause, w_clause),
            v.measured,
            pad(&v.expected, 14),
            if v.pass { "PASS" } else { "FAIL" }
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_directory_reports_no_runs() {
        let dir = tempfile::tempdir().unwrap();
        let err = check_dir(dir.path()).unwrap_err().to_string();
        assert!(err.contains("no runs found"), "{err}");
    }

    #[test]
    fn table_has_one_line_per_verdict() {
        let v = vec![
            verdict("erm", "a", 1.0, "1.0".into(), true),
            verdict("cutmix", "longer clause", 0.5, ">= 0.99".into(), false),
        ];
        let table = format_table(&v);
        assert_eq!(table.lines().count(), 3);
        assert!(table.lines().nth(2).unwrap().ends_with("FAIL"));
    }
}
