//! The matrix comparison table.

use std::fmt;

use modalfuse::metrics::memory_accuracy_ratio;
use serde::{Deserialize, Serialize};

/// One cell of the matrix. `dice` and `accuracy` are the held-out patch
/// scores of the best epoch; `ratio` is accuracy per parameter relative to
/// the baseline row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub point: String,
    pub function: String,
    pub dice: Option<f64>,
    pub accuracy: Option<f64>,
    pub params: usize,
    pub ratio: Option<f64>,
    pub run: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failed: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResultsTable {
    pub rows: Vec<ResultRow>,
}

impl ResultsTable {
    /// Fills in the ratio column against the `none/none` row.
    pub fn with_ratios(mut rows: Vec<ResultRow>) -> Self {
        let base = rows
            .iter()
            .find(|r| r.point == "none")
            .and_then(|r| r.accuracy.map(|a| (a, r.params)));
        for r in &mut rows {
            r.ratio = match (base, r.accuracy) {
                (Some((ab, pb)), Some(a)) => memory_accuracy_ratio(a, r.params, ab, pb).ok(),
                _ => None,
            };
        }
        ResultsTable { rows }
    }

    pub fn baseline(&self) -> Option<&ResultRow> {
        self.rows.iter().find(|r| r.point == "none")
    }
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "failed".into(), |x| format!("{x:.4}"))
}

impl fmt::Display for ResultsTable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<8} {:<8} {:>8} {:>8} {:>10} {:>8}", "point", "function", "dice", "accuracy", "params", "ratio")?;
        for r in &self.rows {
            writeln!(
                f,
                "{:<8} {:<8} {:>8} {:>8} {:>10} {:>8}",
                r.point,
                r.function,
                cell(r.dice),
                cell(r.accuracy),
                r.params,
                cell(r.ratio)
            )?;
        }
        Ok(())
    }
}
