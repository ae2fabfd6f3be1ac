//! Per-class linear regression of per-window MET targets.
//!
//! A design row is `[1, f1..fW]` for window-only models and
//! `[1, f1..fW, r1..rK]` for models that also see the bout summary. Every
//! window of a bout shares the same summary block. A suite holds one model
//! per class, fitted on that class's windows only, and routes each bout to a
//! model by its (predicted) class.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::classify::MlpModel;
use crate::dataset::CategoryLabel;
use crate::error::{Error, Result};

pub const SUITE_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    Sum,
    #[default]
    Mean,
}

impl Aggregation {
    pub fn apply(self, values: &[f64]) -> f64 {
        let total: f64 = values.iter().sum();
        match self {
            Aggregation::Sum => total,
            Aggregation::Mean => total / values.len() as f64,
        }
    }
}

impl std::str::FromStr for Aggregation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sum" => Ok(Aggregation::Sum),
            "mean" => Ok(Aggregation::Mean),
            other => Err(Error::config("aggregation", format!("expected `sum` or `mean`, got `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DesignMode {
    Augmented,
    WindowOnly,
}

/// `[1, window..., summary...]`.
pub fn build_design_row(window: &[f64], summary: Option<&[f64]>) -> Vec<f64> {
    let mut row = Vec::with_capacity(1 + window.len() + summary.map_or(0, <[f64]>::len));
    row.push(1.0);
    row.extend_from_slice(window);
    if let Some(s) = summary {
        row.extend_from_slice(s);
    }
    row
}

/// Minimum-norm least-squares solution of `rows * beta = targets` via SVD.
/// Singular values below `max(n, p) * eps * s_max` count as zero.
/// One refinement pass on the residual follows the first solve.
pub fn fit_ols(rows: &[Vec<f64>], targets: &[f64]) -> Result<Vec<f64>> {
    let n = rows.len();
    if n == 0 {
        return Err(Error::InvalidInput("least squares needs at least one row".into()));
    }
    if targets.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: targets.len(),
        });
    }
    let p = rows[0].len();
    if p == 0 {
        return Err(Error::InvalidInput("design rows have zero width".into()));
    }
    if let Some(bad) = rows.iter().find(|r| r.len() != p) {
        return Err(Error::DimensionMismatch {
            expected: p,
            got: bad.len(),
        });
    }
    if rows.iter().flatten().chain(targets).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("least-squares input".into()));
    }
    let x = DMatrix::from_fn(n, p, |i, j| rows[i][j]);
    let y = DVector::from_column_slice(targets);
    let svd = x.clone().svd(true, true);
    let s_max = svd.singular_values.max();
    let eps = n.max(p) as f64 * f64::EPSILON * s_max;
    let solve = |rhs: &DVector<f64>| {
        svd.solve(rhs, eps)
            .map_err(|e| Error::Consistency(format!("least-squares solve failed: {e}")))
    };
    let mut beta = solve(&y)?;
    // one step of iterative refinement on the residual
    let residual = &y - &x * &beta;
    beta += solve(&residual)?;
    Ok(beta.iter().copied().collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearModel {
    /// Class name, or `all` for a model shared by every class.
    pub class_label: String,
    pub mode: DesignMode,
    pub beta: Vec<f64>,
}

impl LinearModel {
    /// Applies the model to the first `beta.len()` entries of `row`, so a
    /// window-only model also accepts a full augmented row.
    pub fn predict(&self, row: &[f64]) -> Result<f64> {
        if row.len() < self.beta.len() {
            return Err(Error::DimensionMismatch {
                expected: self.beta.len(),
                got: row.len(),
            });
        }
        Ok(self.beta.iter().zip(row).map(|(b, x)| b * x).sum())
    }
}

/// One bout's regression inputs.
#[derive(Debug, Clone, Copy)]
pub struct RegressionBout<'a> {
    pub label: &'a CategoryLabel,
    pub windows: &'a [Vec<f64>],
    pub summary: Option<&'a [f64]>,
    pub targets: &'a [f64],
}

impl RegressionBout<'_> {
    pub fn design_rows(&self) -> Vec<Vec<f64>> {
        self.windows.iter().map(|w| build_design_row(w, self.summary)).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionSuite {
    pub format_version: u32,
    pub mode: DesignMode,
    pub aggregation: Aggregation,
    pub feature_dim: usize,
    pub summary_dim: usize,
    pub models: BTreeMap<String, LinearModel>,
}

impl RegressionSuite {
    pub fn design_width(&self) -> usize {
        1 + self.feature_dim + self.summary_dim
    }

    pub fn model(&self, class: &CategoryLabel) -> Result<&LinearModel> {
        self.models
            .get(class.as_str())
            .ok_or_else(|| Error::InvalidInput(format!("no regression model for class `{class}`")))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let suite: RegressionSuite = serde_json::from_str(text)?;
        if suite.format_version != SUITE_FORMAT_VERSION {
            return Err(Error::InvalidInput(format!(
                "unsupported regression format version {}",
                suite.format_version
            )));
        }
        Ok(suite)
    }
}

fn check_bouts(bouts: &[RegressionBout<'_>], mode: DesignMode) -> Result<(usize, usize)> {
    let first = bouts
        .first()
        .ok_or_else(|| Error::InvalidInput("no training bouts for regression".into()))?;
    let feature_dim = first.windows.first().map_or(0, Vec::len);
    let summary_dim = match mode {
        DesignMode::Augmented => first
            .summary
            .map(<[f64]>::len)
            .ok_or_else(|| Error::InvalidInput("augmented regression needs bout summaries".into()))?,
        DesignMode::WindowOnly => 0,
    };
    for b in bouts {
        if b.windows.len() != b.targets.len() {
            return Err(Error::DimensionMismatch {
                expected: b.windows.len(),
                got: b.targets.len(),
            });
        }
        if let Some(bad) = b.windows.iter().find(|w| w.len() != feature_dim) {
            return Err(Error::DimensionMismatch {
                expected: feature_dim,
                got: bad.len(),
            });
        }
        if mode == DesignMode::Augmented && b.summary.map(<[f64]>::len) != Some(summary_dim) {
            return Err(Error::DimensionMismatch {
                expected: summary_dim,
                got: b.summary.map_or(0, <[f64]>::len),
            });
        }
    }
    Ok((feature_dim, summary_dim))
}

fn design(bouts: &[&RegressionBout<'_>], mode: DesignMode) -> (Vec<Vec<f64>>, Vec<f64>) {
    let mut rows = Vec::new();
    let mut ys = Vec::new();
    for b in bouts {
        let summary = match mode {
            DesignMode::Augmented => b.summary,
            DesignMode::WindowOnly => None,
        };
        rows.extend(b.windows.iter().map(|w| build_design_row(w, summary)));
        ys.extend_from_slice(b.targets);
    }
    (rows, ys)
}

/// Fits one model per class in `label_set` on that class's windows, using
/// the labels carried by `bouts` (the true labels during training). A class
/// with fewer windows than the augmented design width gets a window-only
/// model instead, and a warning names it.
pub fn fit_n_regression(
    bouts: &[RegressionBout<'_>],
    label_set: &[CategoryLabel],
    mode: DesignMode,
    aggregation: Aggregation,
) -> Result<(RegressionSuite, Vec<String>)> {
    let (feature_dim, summary_dim) = check_bouts(bouts, mode)?;
    let width = 1 + feature_dim + summary_dim;
    let mut models = BTreeMap::new();
    let mut warnings = Vec::new();
    for label in label_set {
        let members: Vec<&RegressionBout<'_>> = bouts.iter().filter(|b| b.label == label).collect();
        let windows: usize = members.iter().map(|b| b.windows.len()).sum();
        if windows == 0 {
            return Err(Error::MissingClass(label.to_string()));
        }
        let class_mode = if mode == DesignMode::Augmented && windows < width {
            let message = format!(
                "class `{label}` has {windows} training windows, fewer than the design width {width}; using a window-only model"
            );
            log::warn!("{message}");
            warnings.push(message);
            DesignMode::WindowOnly
        } else {
            mode
        };
        let (rows, ys) = design(&members, class_mode);
        models.insert(
            label.to_string(),
            LinearModel {
                class_label: label.to_string(),
                mode: class_mode,
                beta: fit_ols(&rows, &ys)?,
            },
        );
    }
    Ok((
        RegressionSuite {
            format_version: SUITE_FORMAT_VERSION,
            mode,
            aggregation,
            feature_dim,
            summary_dim,
            models,
        },
        warnings,
    ))
}

/// One window-only model over every class.
pub fn fit_pooled_regression(bouts: &[RegressionBout<'_>]) -> Result<LinearModel> {
    check_bouts(bouts, DesignMode::WindowOnly)?;
    let all: Vec<&RegressionBout<'_>> = bouts.iter().collect();
    let (rows, ys) = design(&all, DesignMode::WindowOnly);
    Ok(LinearModel {
        class_label: "all".into(),
        mode: DesignMode::WindowOnly,
        beta: fit_ols(&rows, &ys)?,
    })
}

/// Per-window predictions of one model, clamped at 0.
pub fn window_predictions(model: &LinearModel, windows: &[Vec<f64>], summary: Option<&[f64]>) -> Result<Vec<f64>> {
    windows
        .iter()
        .map(|w| Ok(model.predict(&build_design_row(w, summary))?.max(0.0)))
        .collect()
}

/// Routes the bout to the model of `predicted_class` and aggregates its
/// clamped per-window predictions.
pub fn predict_bout_met(
    suite: &RegressionSuite,
    predicted_class: &CategoryLabel,
    windows: &[Vec<f64>],
    summary: Option<&[f64]>,
    aggregation: Aggregation,
) -> Result<f64> {
    if windows.is_empty() {
        return Err(Error::InvalidInput("bout has no windows".into()));
    }
    if suite.mode == DesignMode::Augmented && summary.map(<[f64]>::len) != Some(suite.summary_dim) {
        return Err(Error::DimensionMismatch {
            expected: suite.summary_dim,
            got: summary.map_or(0, <[f64]>::len),
        });
    }
    let model = suite.model(predicted_class)?;
    let summary = if suite.mode == DesignMode::Augmented { summary } else { None };
    Ok(aggregation.apply(&window_predictions(model, windows, summary)?))
}

/// Same aggregation for a single pooled model.
pub fn predict_pooled_met(model: &LinearModel, windows: &[Vec<f64>], aggregation: Aggregation) -> Result<f64> {
    if windows.is_empty() {
        return Err(Error::InvalidInput("bout has no windows".into()));
    }
    Ok(aggregation.apply(&window_predictions(model, windows, None)?))
}

/// Applies the linear-output network to each window, clamps at 0 and
/// aggregates.
pub fn predict_ann_regression(model: &MlpModel, windows: &[Vec<f64>], aggregation: Aggregation) -> Result<f64> {
    if windows.is_empty() {
        return Err(Error::InvalidInput("bout has no windows".into()));
    }
    let values = windows
        .iter()
        .map(|w| Ok(model.predict_value(w)?.max(0.0)))
        .collect::<Result<Vec<f64>>>()?;
    Ok(aggregation.apply(&values))
}
