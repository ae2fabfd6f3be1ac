//! Fixed-length bout summaries: the share of a bout's windows that the mixture
//! assigns to each component.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{BoutFeatures, FeatureTable, WindowFeatures};
use crate::par::{self, Execution};
use crate::vbgmm::MixtureModel;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryVector {
    pub bout_id: String,
    pub ratios: Vec<f64>,
    pub window_count: usize,
}

impl SummaryVector {
    pub fn dim(&self) -> usize {
        self.ratios.len()
    }
}

/// Builds the ratio vector from hard assignments. Each ratio is `count / n`
/// computed directly, so equal counts give bit-identical ratios.
pub fn summary_from_assignments(bout_id: &str, assignments: &[usize], k: usize) -> Result<SummaryVector> {
    if assignments.is_empty() {
        return Err(Error::InvalidInput(format!("bout has no windows: `{bout_id}`")));
    }
    let mut counts = vec![0usize; k];
    for &a in assignments {
        if a >= k {
            return Err(Error::InvalidInput(format!(
                "assignment {a} out of range for {k} components"
            )));
        }
        counts[a] += 1;
    }
    let n = assignments.len();
    Ok(SummaryVector {
        bout_id: bout_id.to_string(),
        ratios: counts.iter().map(|&c| c as f64 / n as f64).collect(),
        window_count: n,
    })
}

pub fn summarize_windows(bout_id: &str, windows: &[WindowFeatures], model: &MixtureModel) -> Result<SummaryVector> {
    let assignments = windows
        .iter()
        .map(|w| model.assign(&w.values))
        .collect::<Result<Vec<_>>>()?;
    summary_from_assignments(bout_id, &assignments, model.k_effective())
}

pub fn summarize_bout(bout: &BoutFeatures, model: &MixtureModel) -> Result<SummaryVector> {
    summarize_windows(&bout.bout_id, &bout.windows, model)
}

/// One summary per bout of `features`, in table order.
pub fn summarize_corpus(features: &FeatureTable, model: &MixtureModel, exec: Execution) -> Result<Vec<SummaryVector>> {
    if features.dim != model.dim() {
        return Err(Error::DimensionMismatch {
            expected: model.dim(),
            got: features.dim,
        });
    }
    par::try_map(exec, &features.bouts, |b| summarize_bout(b, model))
}

/// Writes `bout_id,window_count,r1..rK`.
pub fn write_summaries_csv<W: Write>(summaries: &[SummaryVector], writer: W) -> Result<()> {
    let k = summaries.first().map_or(0, SummaryVector::dim);
    let mut out = csv::Writer::from_writer(writer);
    let mut header = vec!["bout_id".to_string(), "window_count".to_string()];
    header.extend((1..=k).map(|i| format!("r{i}")));
    out.write_record(&header)?;
    for s in summaries {
        if s.dim() != k {
            return Err(Error::DimensionMismatch {
                expected: k,
                got: s.dim(),
            });
        }
        let mut record = vec![s.bout_id.clone(), s.window_count.to_string()];
        record.extend(s.ratios.iter().map(|r| r.to_string()));
        out.write_record(&record)?;
    }
    out.flush().map_err(|e| Error::io("summary table", e))?;
    Ok(())
}
