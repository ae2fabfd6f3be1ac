//! Leave-one-subject-out evaluation of the cluster-summary pipeline and the
//! baselines it is compared against.
//!
//! Every stage (standardizers, mixture, networks, regressions) is refitted
//! inside each fold from that fold's training bouts only. Window features are
//! computed once for the whole corpus, since featurizing a bout looks at
//! nothing but that bout.
//!
//! Classification is scored per bout. A window-weighted confusion matrix,
//! where each bout counts once per window, is reported alongside.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::io::Write;
use std::str::FromStr;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::classify::{self, ClassPrediction, MlpConfig, MlpModel};
use crate::dataset::{loso_fold_indices, CategoryLabel, Corpus, FoldIndices};
use crate::error::{Error, Result};
use crate::features::{featurize, FeatureTable};
use crate::par::{self, Execution};
use crate::reference::ReferencePanel;
use crate::regress::{self, Aggregation, DesignMode, LinearModel, RegressionBout, RegressionSuite};
use crate::summarize::{summarize_windows, SummaryVector};
use crate::vbgmm::{self, FitOptions, MixtureModel, MixturePrior};

pub const REPORT_FORMAT_VERSION: u32 = 1;

/// Root mean squared difference.
pub fn rmse(predicted: &[f64], actual: &[f64]) -> Result<f64> {
    if predicted.len() != actual.len() {
        return Err(Error::DimensionMismatch {
            expected: actual.len(),
            got: predicted.len(),
        });
    }
    if actual.is_empty() {
        return Err(Error::InvalidInput("rmse of empty vectors".into()));
    }
    let sse: f64 = predicted.iter().zip(actual).map(|(p, a)| (p - a) * (p - a)).sum();
    Ok((sse / actual.len() as f64).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Mixture summaries, summary classifier, augmented per-class regression.
    ClusterSummary,
    /// Window classifier with majority voting.
    AnnVoting,
    /// One window-only linear regression for every class.
    LinregLocal,
    /// Window-only per-class regression routed by the voting classifier.
    FiveregAnn,
    /// Linear-output network on window features.
    AnnRegression,
    /// Reports the true label and true MET; an upper bound for the harness.
    Oracle,
}

impl Method {
    pub const ALL: [Method; 5] = [
        Method::ClusterSummary,
        Method::AnnVoting,
        Method::LinregLocal,
        Method::FiveregAnn,
        Method::AnnRegression,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::ClusterSummary => "cluster_summary",
            Method::AnnVoting => "ann_voting",
            Method::LinregLocal => "linreg_local",
            Method::FiveregAnn => "fivereg_ann",
            Method::AnnRegression => "ann_regression",
            Method::Oracle => "oracle",
        }
    }

    pub fn classifies(self) -> bool {
        matches!(
            self,
            Method::ClusterSummary | Method::AnnVoting | Method::FiveregAnn | Method::Oracle
        )
    }

    pub fn regresses(self) -> bool {
        !matches!(self, Method::AnnVoting)
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [Method::Oracle]
            .into_iter()
            .chain(Method::ALL)
            .find(|m| m.name() == s)
            .ok_or_else(|| {
                let known: Vec<&str> = Method::ALL.iter().map(|m| m.name()).collect();
                Error::config("methods", format!("unknown method `{s}` (known: {})", known.join(", ")))
            })
    }
}

/// Mixture prior and fitting knobs. The prior mean is the origin and the
/// Wishart scale the identity, both in standardized feature space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MixtureSettings {
    pub k_max: usize,
    pub dirichlet_alpha0: f64,
    pub mean_scale_beta0: f64,
    /// Wishart degrees of freedom; `None` means feature dimension + 1.
    pub wishart_dof_nu0: Option<f64>,
    pub tol: f64,
    pub max_iter: usize,
    pub delete_moves: bool,
    pub delete_iterations: usize,
}

impl Default for MixtureSettings {
    fn default() -> Self {
        let options = FitOptions::default();
        MixtureSettings {
            k_max: 20,
            dirichlet_alpha0: 1e-3,
            mean_scale_beta0: 1.0,
            wishart_dof_nu0: None,
            tol: options.tol,
            max_iter: options.max_iter,
            delete_moves: options.delete_moves,
            delete_iterations: options.delete_iterations,
        }
    }
}

impl MixtureSettings {
    pub fn prior(&self, dim: usize) -> MixturePrior {
        let mut prior = MixturePrior::default_for(dim).with_k_max(self.k_max);
        prior.dirichlet_alpha0 = self.dirichlet_alpha0;
        prior.mean_scale_beta0 = self.mean_scale_beta0;
        if let Some(nu) = self.wishart_dof_nu0 {
            prior.wishart_dof_nu0 = nu;
        }
        prior
    }

    pub fn options(&self, seed: u64) -> FitOptions {
        FitOptions {
            tol: self.tol,
            max_iter: self.max_iter,
            delete_moves: self.delete_moves,
            delete_iterations: self.delete_iterations,
            ..FitOptions::default()
        }
        .with_seed(seed)
    }

    pub fn validate(&self, dim: usize) -> Result<()> {
        if self.max_iter == 0 {
            return Err(Error::config("gmm.max_iter", "must be positive"));
        }
        if !(self.tol.is_finite() && self.tol >= 0.0) {
            return Err(Error::config("gmm.tol", "must be nonnegative"));
        }
        self.prior(dim.max(1)).validate().map_err(|e| match e {
            Error::Config { key, message } => Error::Config {
                key: format!("gmm.{key}"),
                message,
            },
            other => other,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluationConfig {
    pub window_length: usize,
    /// Base seed; folds and stages derive their own seeds from it.
    pub seed: u64,
    pub gmm: MixtureSettings,
    pub mlp: MlpConfig,
    /// Design of the cluster-summary regressions. Window-only drops the
    /// summary block and serves as an ablation.
    pub regression_mode: DesignMode,
    pub aggregation: Aggregation,
    /// How folds and per-bout work are scheduled. Never changes results and
    /// is left out of the fingerprint.
    #[serde(skip)]
    pub execution: Execution,
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        EvaluationConfig {
            window_length: crate::dataset::DEFAULT_WINDOW_LENGTH,
            seed: 7,
            gmm: MixtureSettings::default(),
            mlp: MlpConfig::default(),
            regression_mode: DesignMode::Augmented,
            aggregation: Aggregation::Mean,
            execution: Execution::default(),
        }
    }
}

impl EvaluationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window_length < 2 {
            return Err(Error::config("window_length", "must be at least 2"));
        }
        self.gmm.validate(1)?;
        self.mlp.validate().map_err(|e| match e {
            Error::Config { key, message } => Error::Config {
                key: format!("mlp.{key}"),
                message,
            },
            other => other,
        })
    }
}

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

/// Seed of fold `fold` derived from the base seed.
pub fn fold_seed(base: u64, fold: usize) -> u64 {
    base ^ (fold as u64 + 1).wrapping_mul(GOLDEN)
}

/// Stage seeds below a fold (or full-corpus) seed.
#[derive(Debug, Clone, Copy)]
struct StageSeeds {
    mixture: u64,
    summary_mlp: u64,
    window_mlp: u64,
    regression_mlp: u64,
}

impl StageSeeds {
    fn from(seed: u64) -> Self {
        StageSeeds {
            mixture: seed,
            summary_mlp: seed.wrapping_add(1),
            window_mlp: seed.wrapping_add(2),
            regression_mlp: seed.wrapping_add(3),
        }
    }
}

/// Lowercase hex SHA-256 of `bytes`.
pub fn sha256_hex(bytes: &[u8]) -> String {
    hex(&Sha256::digest(bytes))
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().fold(String::with_capacity(bytes.len() * 2), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

/// SHA-256 over every bout's id, subject, label, signal and targets.
pub fn corpus_digest(corpus: &Corpus) -> String {
    let mut hasher = Sha256::new();
    for label in corpus.label_set() {
        hasher.update(label.as_str().as_bytes());
        hasher.update([0]);
    }
    hasher.update((corpus.window_length() as u64).to_le_bytes());
    for bout in corpus.bouts() {
        hash_bout_key(&mut hasher, &bout.bout_id, &bout.subject_id);
        hasher.update(bout.activity_class.as_str().as_bytes());
        hasher.update([0]);
        hasher.update((bout.signal.samples() as u64).to_le_bytes());
        hasher.update((bout.signal.axes() as u64).to_le_bytes());
        for v in bout.signal.as_slice() {
            hasher.update(v.to_le_bytes());
        }
        match &bout.targets {
            Some(t) => {
                hasher.update([1]);
                t.iter().for_each(|v| hasher.update(v.to_le_bytes()));
            }
            None => hasher.update([0]),
        }
    }
    hex(&hasher.finalize())
}

fn hash_bout_key(hasher: &mut Sha256, bout_id: &str, subject_id: &str) {
    hasher.update(bout_id.as_bytes());
    hasher.update([0]);
    hasher.update(subject_id.as_bytes());
    hasher.update([0]);
}

/// Fingerprint of a run: the method, the full configuration (minus the
/// execution mode) and the corpus digest.
pub fn config_fingerprint(method: Method, config: &EvaluationConfig, corpus_digest: &str) -> Result<String> {
    let mut hasher = Sha256::new();
    hasher.update(method.name().as_bytes());
    hasher.update([0]);
    hasher.update(serde_json::to_vec(config)?);
    hasher.update([0]);
    hasher.update(corpus_digest.as_bytes());
    Ok(hex(&hasher.finalize()))
}

/// Fingerprint of the bouts a fold trained on.
pub fn train_fingerprint(corpus: &Corpus, train: &[usize]) -> String {
    let mut hasher = Sha256::new();
    for &i in train {
        let b = &corpus.bouts()[i];
        hash_bout_key(&mut hasher, &b.bout_id, &b.subject_id);
    }
    hex(&hasher.finalize())
}

/// Inputs shared by every fold: the corpus, its window features and derived
/// per-bout views.
pub struct Prepared<'a> {
    pub corpus: &'a Corpus,
    pub features: FeatureTable,
    rows: Vec<Vec<Vec<f64>>>,
    classes: Vec<usize>,
    /// Window classifiers shared by the methods that vote, keyed by the
    /// training fingerprint, seed and network settings.
    window_classifiers: Mutex<HashMap<(String, u64, String), MlpModel>>,
}

impl<'a> Prepared<'a> {
    pub fn new(corpus: &'a Corpus, config: &EvaluationConfig) -> Result<Self> {
        if corpus.window_length() != config.window_length {
            return Err(Error::config(
                "window_length",
                format!(
                    "corpus was validated with window length {}, config asks for {}",
                    corpus.window_length(),
                    config.window_length
                ),
            ));
        }
        let features = featurize(corpus, config.window_length, config.execution)?;
        Ok(Self::from_features(corpus, features))
    }

    pub fn from_features(corpus: &'a Corpus, features: FeatureTable) -> Self {
        let rows = features
            .bouts
            .iter()
            .map(|b| b.windows.iter().map(|w| w.values.clone()).collect())
            .collect();
        Prepared {
            corpus,
            features,
            rows,
            classes: corpus.class_indices(),
            window_classifiers: Mutex::new(HashMap::new()),
        }
    }

    pub fn rows(&self, bout: usize) -> &[Vec<f64>] {
        &self.rows[bout]
    }

    fn label(&self, bout: usize) -> &CategoryLabel {
        &self.corpus.bouts()[bout].activity_class
    }

    fn targets(&self, bout: usize) -> Option<&[f64]> {
        self.corpus.bouts()[bout].targets.as_deref()
    }

    fn labels(&self) -> &[CategoryLabel] {
        self.corpus.label_set()
    }

    fn window_rows(&self, bouts: &[usize]) -> Vec<Vec<f64>> {
        bouts.iter().flat_map(|&i| self.rows[i].iter().cloned()).collect()
    }

    fn window_labels(&self, bouts: &[usize]) -> Vec<CategoryLabel> {
        bouts
            .iter()
            .flat_map(|&i| std::iter::repeat_n(self.label(i).clone(), self.rows[i].len()))
            .collect()
    }

    fn window_targets(&self, bouts: &[usize]) -> Result<Vec<f64>> {
        let mut out = Vec::new();
        for &i in bouts {
            out.extend_from_slice(self.targets(i).ok_or_else(missing_targets)?);
        }
        Ok(out)
    }

    fn regression_bouts<'s>(&'s self, bouts: &[usize], summaries: Option<&'s [SummaryVector]>) -> Result<Vec<RegressionBout<'s>>> {
        bouts
            .iter()
            .enumerate()
            .map(|(j, &i)| {
                Ok(RegressionBout {
                    label: self.label(i),
                    windows: &self.rows[i],
                    summary: summaries.map(|s| s[j].ratios.as_slice()),
                    targets: self.targets(i).ok_or_else(missing_targets)?,
                })
            })
            .collect()
    }
}

fn missing_targets() -> Error {
    Error::InvalidInput("regression needs per-window MET targets on every bout".into())
}

/// The full cluster-summary pipeline fitted on one set of bouts.
#[derive(Debug, Clone)]
pub struct ClusterSummaryModel {
    pub mixture: MixtureModel,
    pub classifier: MlpModel,
    /// Absent when the corpus carries no MET targets.
    pub suite: Option<RegressionSuite>,
    pub warnings: Vec<String>,
    pub train_summaries: Vec<SummaryVector>,
}

/// A bout-level prediction.
#[derive(Debug, Clone)]
pub struct BoutPrediction {
    pub class: Option<ClassPrediction>,
    pub met: Option<f64>,
}

impl ClusterSummaryModel {
    /// Fits mixture, summary classifier and augmented regression suite on
    /// the bouts at `train`.
    pub fn fit(prep: &Prepared<'_>, train: &[usize], config: &EvaluationConfig, seed: u64) -> Result<Self> {
        let seeds = StageSeeds::from(seed);
        let dim = prep.features.dim;
        let rows = prep.window_rows(train);
        let mixture = vbgmm::fit(&rows, &config.gmm.prior(dim), &config.gmm.options(seeds.mixture))?;
        let train_summaries = summaries_for(prep, train, &mixture, config.execution)?;
        let inputs: Vec<Vec<f64>> = train_summaries.iter().map(|s| s.ratios.clone()).collect();
        let labels: Vec<CategoryLabel> = train.iter().map(|&i| prep.label(i).clone()).collect();
        let classifier = classify::train_mlp(
            &inputs,
            &labels,
            prep.labels(),
            &config.mlp.clone().with_seed(seeds.summary_mlp),
        )?;
        let (suite, warnings) = if prep.corpus.has_targets() {
            let summaries = (config.regression_mode == DesignMode::Augmented).then_some(train_summaries.as_slice());
            let bouts = prep.regression_bouts(train, summaries)?;
            let (suite, warnings) =
                regress::fit_n_regression(&bouts, prep.labels(), config.regression_mode, config.aggregation)?;
            (Some(suite), warnings)
        } else {
            (None, Vec::new())
        };
        Ok(ClusterSummaryModel {
            mixture,
            classifier,
            suite,
            warnings,
            train_summaries,
        })
    }

    pub fn summarize(&self, bout_id: &str, rows: &[Vec<f64>]) -> Result<SummaryVector> {
        let assignments = rows
            .iter()
            .map(|r| self.mixture.assign(r))
            .collect::<Result<Vec<_>>>()?;
        crate::summarize::summary_from_assignments(bout_id, &assignments, self.mixture.k_effective())
    }

    pub fn predict(&self, bout_id: &str, rows: &[Vec<f64>], aggregation: Aggregation) -> Result<(SummaryVector, BoutPrediction)> {
        let summary = self.summarize(bout_id, rows)?;
        let class = self.classifier.predict(&summary.ratios)?;
        let met = match &self.suite {
            Some(suite) => Some(regress::predict_bout_met(
                suite,
                &class.label,
                rows,
                Some(&summary.ratios),
                aggregation,
            )?),
            None => None,
        };
        Ok((
            summary,
            BoutPrediction {
                class: Some(class),
                met,
            },
        ))
    }
}

fn summaries_for(prep: &Prepared<'_>, bouts: &[usize], model: &MixtureModel, exec: Execution) -> Result<Vec<SummaryVector>> {
    par::try_map(exec, bouts, |&i| {
        summarize_windows(&prep.features.bouts[i].bout_id, &prep.features.bouts[i].windows, model)
    })
}

/// Fit quality of the per-class regressions with and without the summary
/// block. Training errors are per window, routed by the true class and not
/// clamped, which is exactly what least squares minimizes. Test errors are
/// per bout, routed by the summary classifier, as in the evaluation proper.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RegressionDiagnostics {
    pub train_windows: usize,
    pub train_rmse_augmented: f64,
    pub train_rmse_window_only: f64,
    pub test_bouts: usize,
    pub test_rmse_augmented: f64,
    pub test_rmse_window_only: f64,
}

#[derive(Debug, Clone, Default)]
struct DiagnosticSums {
    train_windows: usize,
    train_sse_augmented: f64,
    train_sse_window_only: f64,
    test_pairs_augmented: Vec<(f64, f64)>,
    test_pairs_window_only: Vec<(f64, f64)>,
}

fn training_sse(suite: &RegressionSuite, bouts: &[RegressionBout<'_>], augmented: bool) -> Result<f64> {
    let mut sse = 0.0;
    for b in bouts {
        let model = suite.model(b.label)?;
        let summary = if augmented { b.summary } else { None };
        for (w, y) in b.windows.iter().zip(b.targets) {
            let r = model.predict(&regress::build_design_row(w, summary))? - y;
            sse += r * r;
        }
    }
    Ok(sse)
}

/// One bout's result within a fold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoutOutcome {
    pub bout_id: String,
    pub subject_id: String,
    pub fold: usize,
    pub window_count: usize,
    pub actual: usize,
    pub predicted: Option<usize>,
    pub met_actual: Option<f64>,
    pub met_predicted: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldSummary {
    pub fold: usize,
    pub subject_id: String,
    pub train_bouts: usize,
    pub test_bouts: usize,
    pub train_fingerprint: String,
    pub k_effective: Option<usize>,
}

struct FoldResult {
    summary: FoldSummary,
    outcomes: Vec<BoutOutcome>,
    diagnostics: Option<DiagnosticSums>,
}

fn run_fold(prep: &Prepared<'_>, method: Method, config: &EvaluationConfig, index: usize, fold: &FoldIndices) -> Result<FoldResult> {
    let seed = fold_seed(config.seed, index);
    let seeds = StageSeeds::from(seed);
    let has_targets = prep.corpus.has_targets();
    let mut k_effective = None;
    let mut diagnostics = None;

    let predictions: Vec<BoutPrediction> = match method {
        Method::Oracle => fold
            .test
            .iter()
            .map(|&i| BoutPrediction {
                class: None,
                met: prep.targets(i).map(|t| config.aggregation.apply(t)),
            })
            .collect(),
        Method::ClusterSummary => {
            let model = ClusterSummaryModel::fit(prep, &fold.train, config, seed)?;
            k_effective = Some(model.mixture.k_effective());
            let out = fold
                .test
                .iter()
                .map(|&i| Ok(model.predict(&prep.features.bouts[i].bout_id, prep.rows(i), config.aggregation)?.1))
                .collect::<Result<Vec<_>>>()?;
            if let Some(suite) = &model.suite {
                diagnostics = Some(regression_diagnostics(prep, fold, config, &model, suite, &out)?);
            }
            out
        }
        Method::AnnVoting | Method::FiveregAnn => {
            let classifier = train_window_classifier(prep, &fold.train, &config.mlp, seeds.window_mlp)?;
            let suite = if method == Method::FiveregAnn && has_targets {
                let bouts = prep.regression_bouts(&fold.train, None)?;
                Some(regress::fit_n_regression(&bouts, prep.labels(), DesignMode::WindowOnly, config.aggregation)?.0)
            } else {
                None
            };
            fold.test
                .iter()
                .map(|&i| {
                    let rows: Vec<&[f64]> = prep.rows(i).iter().map(Vec::as_slice).collect();
                    let class = classify::vote(&classifier, &rows)?;
                    let met = match &suite {
                        Some(s) => Some(regress::predict_bout_met(s, &class.label, prep.rows(i), None, config.aggregation)?),
                        None => None,
                    };
                    Ok(BoutPrediction { class: Some(class), met })
                })
                .collect::<Result<_>>()?
        }
        Method::LinregLocal => {
            let model: Option<LinearModel> = if has_targets {
                Some(regress::fit_pooled_regression(&prep.regression_bouts(&fold.train, None)?)?)
            } else {
                None
            };
            fold.test
                .iter()
                .map(|&i| {
                    Ok(BoutPrediction {
                        class: None,
                        met: match &model {
                            Some(m) => Some(regress::predict_pooled_met(m, prep.rows(i), config.aggregation)?),
                            None => None,
                        },
                    })
                })
                .collect::<Result<_>>()?
        }
        Method::AnnRegression => {
            let model = if has_targets {
                let rows = prep.window_rows(&fold.train);
                let targets = prep.window_targets(&fold.train)?;
                Some(classify::train_mlp_regressor(
                    &rows,
                    &targets,
                    &config.mlp.clone().with_seed(seeds.regression_mlp),
                )?)
            } else {
                None
            };
            fold.test
                .iter()
                .map(|&i| {
                    Ok(BoutPrediction {
                        class: None,
                        met: match &model {
                            Some(m) => Some(regress::predict_ann_regression(m, prep.rows(i), config.aggregation)?),
                            None => None,
                        },
                    })
                })
                .collect::<Result<_>>()?
        }
    };

    let outcomes = fold
        .test
        .iter()
        .zip(predictions)
        .map(|(&i, p)| {
            let bout = &prep.corpus.bouts()[i];
            let predicted = match method {
                Method::Oracle => Some(prep.classes[i]),
                _ => p.class.map(|c| c.index),
            };
            BoutOutcome {
                bout_id: bout.bout_id.clone(),
                subject_id: bout.subject_id.clone(),
                fold: index,
                window_count: prep.rows(i).len(),
                actual: prep.classes[i],
                predicted,
                met_actual: prep.targets(i).map(|t| config.aggregation.apply(t)),
                met_predicted: p.met,
            }
        })
        .collect();

    Ok(FoldResult {
        summary: FoldSummary {
            fold: index,
            subject_id: fold.subject_id.clone(),
            train_bouts: fold.train.len(),
            test_bouts: fold.test.len(),
            train_fingerprint: train_fingerprint(prep.corpus, &fold.train),
            k_effective,
        },
        outcomes,
        diagnostics,
    })
}

fn train_window_classifier(prep: &Prepared<'_>, train: &[usize], config: &MlpConfig, seed: u64) -> Result<MlpModel> {
    let key = (train_fingerprint(prep.corpus, train), seed, serde_json::to_string(config)?);
    if let Some(model) = prep.window_classifiers.lock().expect("cache lock").get(&key) {
        return Ok(model.clone());
    }
    let model = classify::train_mlp(
        &prep.window_rows(train),
        &prep.window_labels(train),
        prep.labels(),
        &config.clone().with_seed(seed),
    )?;
    prep.window_classifiers.lock().expect("cache lock").insert(key, model.clone());
    Ok(model)
}

fn regression_diagnostics(
    prep: &Prepared<'_>,
    fold: &FoldIndices,
    config: &EvaluationConfig,
    model: &ClusterSummaryModel,
    augmented: &RegressionSuite,
    predictions: &[BoutPrediction],
) -> Result<DiagnosticSums> {
    let train_aug = prep.regression_bouts(&fold.train, Some(&model.train_summaries))?;
    let train_win = prep.regression_bouts(&fold.train, None)?;
    let (window_only, _) = regress::fit_n_regression(&train_win, prep.labels(), DesignMode::WindowOnly, config.aggregation)?;
    let mut sums = DiagnosticSums {
        train_windows: train_win.iter().map(|b| b.windows.len()).sum(),
        train_sse_augmented: training_sse(augmented, &train_aug, augmented.mode == DesignMode::Augmented)?,
        train_sse_window_only: training_sse(&window_only, &train_win, false)?,
        ..DiagnosticSums::default()
    };
    for (&i, p) in fold.test.iter().zip(predictions) {
        let actual = config.aggregation.apply(prep.targets(i).ok_or_else(missing_targets)?);
        let label = &p.class.as_ref().expect("summary classifier prediction").label;
        let win = regress::predict_bout_met(&window_only, label, prep.rows(i), None, config.aggregation)?;
        let aug = p.met.expect("augmented prediction");
        sums.test_pairs_augmented.push((aug, actual));
        sums.test_pairs_window_only.push((win, actual));
    }
    Ok(sums)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassificationScores {
    /// Bout counts, rows actual and columns predicted.
    pub confusion: Vec<Vec<u64>>,
    /// Same, each bout weighted by its window count.
    pub window_confusion: Vec<Vec<u64>>,
    /// `None` for classes without test bouts.
    pub recall_per_class: Vec<Option<f64>>,
    pub window_recall_per_class: Vec<Option<f64>>,
    /// Fraction of all bouts classified correctly.
    pub overall_recall: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionScores {
    /// `None` for classes without test bouts.
    pub rmse_per_class: Vec<Option<f64>>,
    pub rmse_overall: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub format_version: u32,
    pub method: Method,
    pub labels: Vec<CategoryLabel>,
    pub aggregation: Aggregation,
    pub fold_count: usize,
    pub config_fingerprint: String,
    pub classification: Option<ClassificationScores>,
    pub regression: Option<RegressionScores>,
    pub diagnostics: Option<RegressionDiagnostics>,
    pub folds: Vec<FoldSummary>,
    pub outcomes: Vec<BoutOutcome>,
}

fn recall(matrix: &[Vec<u64>]) -> Vec<Option<f64>> {
    matrix
        .iter()
        .enumerate()
        .map(|(k, row)| {
            let total: u64 = row.iter().sum();
            (total > 0).then(|| row[k] as f64 / total as f64)
        })
        .collect()
}

fn score_classification(outcomes: &[BoutOutcome], classes: usize) -> Option<ClassificationScores> {
    let mut confusion = vec![vec![0u64; classes]; classes];
    let mut window_confusion = vec![vec![0u64; classes]; classes];
    for o in outcomes {
        let p = o.predicted?;
        confusion[o.actual][p] += 1;
        window_confusion[o.actual][p] += o.window_count as u64;
    }
    let correct: u64 = (0..classes).map(|k| confusion[k][k]).sum();
    Some(ClassificationScores {
        recall_per_class: recall(&confusion),
        window_recall_per_class: recall(&window_confusion),
        overall_recall: correct as f64 / outcomes.len() as f64,
        confusion,
        window_confusion,
    })
}

fn score_regression(outcomes: &[BoutOutcome], classes: usize) -> Result<Option<RegressionScores>> {
    let mut pairs: Vec<(usize, f64, f64)> = Vec::with_capacity(outcomes.len());
    for o in outcomes {
        match (o.met_predicted, o.met_actual) {
            (Some(p), Some(a)) => pairs.push((o.actual, p, a)),
            _ => return Ok(None),
        }
    }
    let per_class = (0..classes)
        .map(|k| {
            let (p, a): (Vec<f64>, Vec<f64>) = pairs.iter().filter(|t| t.0 == k).map(|t| (t.1, t.2)).unzip();
            if a.is_empty() {
                Ok(None)
            } else {
                rmse(&p, &a).map(Some)
            }
        })
        .collect::<Result<Vec<_>>>()?;
    let (p, a): (Vec<f64>, Vec<f64>) = pairs.iter().map(|t| (t.1, t.2)).unzip();
    Ok(Some(RegressionScores {
        rmse_per_class: per_class,
        rmse_overall: rmse(&p, &a)?,
    }))
}

fn pooled_rmse(pairs: &[(f64, f64)]) -> Result<f64> {
    let (p, a): (Vec<f64>, Vec<f64>) = pairs.iter().copied().unzip();
    rmse(&p, &a)
}

fn merge_diagnostics(parts: Vec<DiagnosticSums>) -> Result<Option<RegressionDiagnostics>> {
    if parts.is_empty() {
        return Ok(None);
    }
    let mut total = DiagnosticSums::default();
    for d in parts {
        total.train_windows += d.train_windows;
        total.train_sse_augmented += d.train_sse_augmented;
        total.train_sse_window_only += d.train_sse_window_only;
        total.test_pairs_augmented.extend(d.test_pairs_augmented);
        total.test_pairs_window_only.extend(d.test_pairs_window_only);
    }
    let n = total.train_windows as f64;
    Ok(Some(RegressionDiagnostics {
        train_windows: total.train_windows,
        train_rmse_augmented: (total.train_sse_augmented / n).sqrt(),
        train_rmse_window_only: (total.train_sse_window_only / n).sqrt(),
        test_bouts: total.test_pairs_augmented.len(),
        test_rmse_augmented: pooled_rmse(&total.test_pairs_augmented)?,
        test_rmse_window_only: pooled_rmse(&total.test_pairs_window_only)?,
    }))
}

/// Leave-one-subject-out evaluation of `method`.
pub fn run_loso(corpus: &Corpus, method: Method, config: &EvaluationConfig) -> Result<EvaluationReport> {
    config.validate()?;
    let prep = Prepared::new(corpus, config)?;
    let folds = loso_fold_indices(corpus)?;
    run_prepared(&prep, &folds, method, config)
}

/// As [`run_loso`], with features and folds supplied by the caller.
pub fn run_prepared(prep: &Prepared<'_>, folds: &[FoldIndices], method: Method, config: &EvaluationConfig) -> Result<EvaluationReport> {
    let results = par::try_map_indexed(config.execution, folds.len(), |i| {
        run_fold(prep, method, config, i, &folds[i]).map_err(|e| Error::Fold {
            fold: i,
            subject: folds[i].subject_id.clone(),
            source: Box::new(e),
        })
    })?;

    let classes = prep.labels().len();
    let mut outcomes = Vec::new();
    let mut summaries = Vec::new();
    let mut diagnostics = Vec::new();
    for r in results {
        outcomes.extend(r.outcomes);
        summaries.push(r.summary);
        diagnostics.extend(r.diagnostics);
    }
    let digest = corpus_digest(prep.corpus);
    Ok(EvaluationReport {
        format_version: REPORT_FORMAT_VERSION,
        method,
        labels: prep.labels().to_vec(),
        aggregation: config.aggregation,
        fold_count: folds.len(),
        config_fingerprint: config_fingerprint(method, config, &digest)?,
        classification: if method.classifies() {
            score_classification(&outcomes, classes)
        } else {
            None
        },
        regression: if method.regresses() {
            score_regression(&outcomes, classes)?
        } else {
            None
        },
        diagnostics: merge_diagnostics(diagnostics)?,
        folds: summaries,
        outcomes,
    })
}

/// Side-by-side recall and RMSE of several methods on the same folds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub labels: Vec<CategoryLabel>,
    pub reports: Vec<EvaluationReport>,
    pub reference: ReferencePanel,
}

pub fn compare_methods(corpus: &Corpus, methods: &[Method], config: &EvaluationConfig) -> Result<Comparison> {
    config.validate()?;
    if methods.is_empty() {
        return Err(Error::config("methods", "at least one method is required"));
    }
    let prep = Prepared::new(corpus, config)?;
    let folds = loso_fold_indices(corpus)?;
    let reports = methods
        .iter()
        .map(|&m| run_prepared(&prep, &folds, m, config))
        .collect::<Result<Vec<_>>>()?;
    Ok(Comparison {
        labels: corpus.label_set().to_vec(),
        reports,
        reference: ReferencePanel::load()?,
    })
}

fn cell(value: Option<f64>, scale: f64, digits: usize) -> String {
    match value {
        Some(v) => format!("{:>10.*}", digits, v * scale),
        None => format!("{:>10}", "-"),
    }
}

impl Comparison {
    /// Text table of per-class recall (%) and RMSE per method, followed by the
    /// reference panel.
    pub fn render(&self) -> String {
        let mut out = String::new();
        let header: String = self.labels.iter().map(|l| format!("{:>10}", l.as_str())).collect();
        let _ = writeln!(out, "Recall (%) by class, bout level\n  {:<18}{header}{:>10}", "", "Overall");
        for r in &self.reports {
            match &r.classification {
                Some(c) => {
                    let cells: String = c.recall_per_class.iter().map(|v| cell(*v, 100.0, 2)).collect();
                    let _ = writeln!(out, "  {:<18}{cells}{}", r.method.name(), cell(Some(c.overall_recall), 100.0, 2));
                }
                None => {
                    let _ = writeln!(out, "  {:<18}{:>10}", r.method.name(), "n/a");
                }
            }
        }
        let _ = writeln!(out, "\nMET RMSE by class\n  {:<18}{header}{:>10}", "", "Overall");
        for r in &self.reports {
            match &r.regression {
                Some(g) => {
                    let cells: String = g.rmse_per_class.iter().map(|v| cell(*v, 1.0, 4)).collect();
                    let _ = writeln!(out, "  {:<18}{cells}{}", r.method.name(), cell(Some(g.rmse_overall), 1.0, 4));
                }
                None => {
                    let _ = writeln!(out, "  {:<18}{:>10}", r.method.name(), "n/a");
                }
            }
        }
        out.push('\n');
        out.push_str(&self.reference.render());
        out
    }
}

/// `actual,<label>...` with one row per actual class.
pub fn write_confusion_csv<W: Write>(labels: &[CategoryLabel], matrix: &[Vec<u64>], writer: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(writer);
    let mut header = vec!["actual".to_string()];
    header.extend(labels.iter().map(|l| l.to_string()));
    out.write_record(&header)?;
    for (label, row) in labels.iter().zip(matrix) {
        let mut record = vec![label.to_string()];
        record.extend(row.iter().map(u64::to_string));
        out.write_record(&record)?;
    }
    out.flush().map_err(|e| Error::io("confusion table", e))?;
    Ok(())
}

/// `class,rmse` per class plus an `Overall` row. Classes without test bouts
/// get an empty cell.
pub fn write_rmse_csv<W: Write>(labels: &[CategoryLabel], scores: &RegressionScores, writer: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(writer);
    out.write_record(["class", "rmse"])?;
    for (label, v) in labels.iter().zip(&scores.rmse_per_class) {
        out.write_record([label.to_string(), v.map(|x| x.to_string()).unwrap_or_default()])?;
    }
    out.write_record(["Overall".to_string(), scores.rmse_overall.to_string()])?;
    out.flush().map_err(|e| Error::io("rmse table", e))?;
    Ok(())
}
