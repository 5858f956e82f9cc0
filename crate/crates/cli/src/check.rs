//! Acceptance checks that can be decided from a predictions file and its
//! ground truth.

use pedloc::height_model::HeightMixture;

use crate::error::Result;
use crate::report::{bin_rows, calibration, Matched};

/// Bins in `[CHECK_RANGE.0, CHECK_RANGE.1)` take part in the per-bin checks.
pub const CHECK_RANGE: (f64, f64) = (5.0, 30.0);
pub const CHECK_BIN_WIDTH: f64 = 5.0;
/// `ALE / ê` per bin must fall in this band.
pub const ALE_BAND: (f64, f64) = (0.8, 2.0);
/// Mean `b / ê` per bin must fall in this band.
pub const SPREAD_BAND: (f64, f64) = (0.7, 1.6);
/// Percent of ground truths inside `μ ± b`.
pub const COVERAGE_BAND: (f64, f64) = (55.0, 75.0);

#[derive(Debug, Clone, PartialEq)]
pub struct CheckLine {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl std::fmt::Display for CheckLine {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let verdict = if self.passed { "PASS" } else { "FAIL" };
        write!(f, "[{verdict}] {}: {}", self.name, self.detail)
    }
}

fn within(x: f64, (lo, hi): (f64, f64)) -> bool {
    x >= lo && x <= hi
}

/// Per-bin accuracy and spread against the task error, aleatoric coverage
/// and the ordering of combined and aleatoric coverage.
pub fn prediction_checks(matched: &Matched, mix: &HeightMixture) -> Result<Vec<CheckLine>> {
    let mut lines = Vec::new();
    for row in bin_rows(matched, mix, CHECK_BIN_WIDTH)? {
        if row.d_lo < CHECK_RANGE.0 || row.d_hi > CHECK_RANGE.1 {
            continue;
        }
        let label = format!("{}-{} m", row.d_lo, row.d_hi);
        let (Some(ale), Some(b), Some(e)) = (row.ale, row.mean_b, row.e_hat) else {
            lines.push(CheckLine {
                name: format!("ale {label}"),
                passed: false,
                detail: "no matched instances".into(),
            });
            continue;
        };
        lines.push(CheckLine {
            name: format!("ale {label}"),
            passed: within(ale / e, ALE_BAND),
            detail: format!(
                "ALE {ale:.3} m = {:.2}·ê (band {}–{}·ê, n = {})",
                ale / e,
                ALE_BAND.0,
                ALE_BAND.1,
                row.n
            ),
        });
        lines.push(CheckLine {
            name: format!("spread {label}"),
            passed: within(b / e, SPREAD_BAND),
            detail: format!(
                "mean b {b:.3} m = {:.2}·ê (band {}–{}·ê)",
                b / e,
                SPREAD_BAND.0,
                SPREAD_BAND.1
            ),
        });
    }
    let cal = calibration(matched, mix)?;
    lines.push(CheckLine {
        name: "aleatoric coverage".into(),
        passed: within(cal.aleatoric.recall, COVERAGE_BAND),
        detail: format!(
            "{:.1}% inside μ ± b (band {}–{}%)",
            cal.aleatoric.recall, COVERAGE_BAND.0, COVERAGE_BAND.1
        ),
    });
    lines.push(CheckLine {
        name: "combined coverage".into(),
        passed: cal.combined.recall >= cal.aleatoric.recall,
        detail: format!(
            "{:.1}% inside μ ± σ, aleatoric {:.1}%",
            cal.combined.recall, cal.aleatoric.recall
        ),
    });
    Ok(lines)
}
