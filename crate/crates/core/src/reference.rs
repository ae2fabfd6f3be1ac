//! Published results on the original child-activity study, kept as read-only
//! reference values for report rendering. Nothing here is used as an
//! expected output of this implementation.

use std::fmt::Write;

use serde::{Deserialize, Serialize};

use crate::error::Result;

const REFERENCE_JSON: &str = include_str!("../data/reference_tables.json");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActivityWindows {
    pub category: String,
    pub activity: String,
    pub windows: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowCounts {
    /// One total per label, in label order.
    pub categories: Vec<u64>,
    pub activities: Vec<ActivityWindows>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RmseRow {
    pub method: String,
    pub per_class: Vec<f64>,
    pub overall: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferencePanel {
    pub labels: Vec<String>,
    pub window_counts: WindowCounts,
    pub summary_confusion_counts: Vec<Vec<u64>>,
    /// Row-normalized percentages; the diagonal is per-class recall.
    pub summary_confusion_percent: Vec<Vec<f64>>,
    pub ann_voting_confusion_percent: Vec<Vec<f64>>,
    pub rmse: Vec<RmseRow>,
}

impl ReferencePanel {
    pub fn load() -> Result<Self> {
        Ok(serde_json::from_str(REFERENCE_JSON)?)
    }

    pub fn summary_recall_percent(&self) -> Vec<f64> {
        diagonal(&self.summary_confusion_percent)
    }

    pub fn ann_voting_recall_percent(&self) -> Vec<f64> {
        diagonal(&self.ann_voting_confusion_percent)
    }

    pub fn rmse_row(&self, method: &str) -> Option<&RmseRow> {
        self.rmse.iter().find(|r| r.method == method)
    }

    /// Plain-text rendering. Percentages use two decimals and RMSE four, the
    /// precision the values were published with.
    pub fn render(&self) -> String {
        let mut out = String::new();
        let header: String = self.labels.iter().map(|l| format!("{l:>10}")).collect();

        out.push_str("Reference: 12-second windows per category\n");
        for (label, count) in self.labels.iter().zip(&self.window_counts.categories) {
            let _ = writeln!(out, "  {label:<6}{count:>8}");
        }

        for (title, matrix) in [
            ("Reference: cluster-summary confusion (%), recall on the diagonal", &self.summary_confusion_percent),
            ("Reference: ANN voting confusion (%), recall on the diagonal", &self.ann_voting_confusion_percent),
        ] {
            let _ = writeln!(out, "\n{title}\n  {:<6}{header}", "");
            for (label, row) in self.labels.iter().zip(matrix) {
                let cells: String = row.iter().map(|v| format!("{v:>10.2}")).collect();
                let _ = writeln!(out, "  {label:<6}{cells}");
            }
        }

        let _ = writeln!(out, "\nReference: MET RMSE by class\n  {:<20}{header}{:>10}", "", "Overall");
        for row in &self.rmse {
            let cells: String = row.per_class.iter().map(|v| format!("{v:>10.4}")).collect();
            let _ = writeln!(out, "  {:<20}{cells}{:>10.4}", row.method, row.overall);
        }
        out
    }
}

fn diagonal(matrix: &[Vec<f64>]) -> Vec<f64> {
    matrix.iter().enumerate().map(|(i, row)| row[i]).collect()
}
