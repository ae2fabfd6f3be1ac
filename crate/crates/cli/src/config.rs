//! The TOML pipeline configuration. Every section is optional and unknown
//! keys are rejected.
//!
//! ```toml
//! window_length = 12
//! seed = 7
//!
//! [synthetic]          # generator settings, used when no corpus is given
//! subjects = 10
//!
//! [gmm]
//! k_max = 20
//!
//! [mlp]
//! epochs = 500
//!
//! [regression]
//! mode = "augmented"   # or "window_only"
//! aggregation = "mean" # or "sum"
//!
//! [evaluation]
//! methods = ["cluster_summary", "ann_voting"]
//!
//! [io]
//! corpus = "data/"     # omit to generate a synthetic corpus
//! out = "out/"
//! ```

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use tsummary::classify::MlpConfig;
use tsummary::dataset::{SyntheticConfig, DEFAULT_WINDOW_LENGTH};
use tsummary::evaluate::{EvaluationConfig, Method, MixtureSettings};
use tsummary::par::Execution;
use tsummary::regress::{Aggregation, DesignMode};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RegressionSettings {
    pub mode: DesignMode,
    pub aggregation: Aggregation,
}

impl Default for RegressionSettings {
    fn default() -> Self {
        RegressionSettings {
            mode: DesignMode::Augmented,
            aggregation: Aggregation::Mean,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluationSettings {
    pub methods: Vec<Method>,
}

impl Default for EvaluationSettings {
    fn default() -> Self {
        EvaluationSettings {
            methods: Method::ALL.to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IoSettings {
    pub corpus: Option<PathBuf>,
    pub out: PathBuf,
}

impl Default for IoSettings {
    fn default() -> Self {
        IoSettings {
            corpus: None,
            out: PathBuf::from("out"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub window_length: usize,
    pub seed: u64,
    /// `synthetic.window_length` is always replaced by the top-level value.
    pub synthetic: SyntheticConfig,
    pub gmm: MixtureSettings,
    pub mlp: MlpConfig,
    pub regression: RegressionSettings,
    pub evaluation: EvaluationSettings,
    pub io: IoSettings,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            window_length: DEFAULT_WINDOW_LENGTH,
            seed: 7,
            synthetic: SyntheticConfig::default(),
            gmm: MixtureSettings::default(),
            mlp: MlpConfig::default(),
            regression: RegressionSettings::default(),
            evaluation: EvaluationSettings::default(),
            io: IoSettings::default(),
        }
    }
}

/// Command-line values that take precedence over the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub window_length: Option<usize>,
    pub methods: Option<Vec<Method>>,
    pub aggregation: Option<Aggregation>,
    pub out: Option<PathBuf>,
    pub corpus: Option<PathBuf>,
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| anyhow::anyhow!("invalid config: {}", e.message().trim()).context(describe_span(text, e.span())))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        Self::from_toml(&text).with_context(|| format!("in {}", path.display()))
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(seed) = o.seed {
            self.seed = seed;
        }
        if let Some(w) = o.window_length {
            self.window_length = w;
        }
        if let Some(m) = &o.methods {
            self.evaluation.methods = m.clone();
        }
        if let Some(a) = o.aggregation {
            self.regression.aggregation = a;
        }
        if let Some(out) = &o.out {
            self.io.out = out.clone();
        }
        if let Some(c) = &o.corpus {
            self.io.corpus = Some(c.clone());
        }
        self.synthetic.window_length = self.window_length;
    }

    /// Checks every section; the error names the first offending key.
    pub fn validate(&self) -> Result<()> {
        self.evaluation_config(Execution::Sequential).validate()?;
        if self.io.corpus.is_none() {
            self.synthetic
                .validate()
                .map_err(|e| prefix_key(e, "synthetic"))?;
        }
        if self.evaluation.methods.is_empty() {
            anyhow::bail!("invalid config `evaluation.methods`: at least one method is required");
        }
        Ok(())
    }

    pub fn evaluation_config(&self, execution: Execution) -> EvaluationConfig {
        EvaluationConfig {
            window_length: self.window_length,
            seed: self.seed,
            gmm: self.gmm.clone(),
            mlp: self.mlp.clone(),
            regression_mode: self.regression.mode,
            aggregation: self.regression.aggregation,
            execution,
        }
    }
}

fn prefix_key(e: tsummary::Error, section: &str) -> tsummary::Error {
    match e {
        tsummary::Error::Config { key, message } => tsummary::Error::Config {
            key: format!("{section}.{key}"),
            message,
        },
        other => other,
    }
}

fn describe_span(text: &str, span: Option<std::ops::Range<usize>>) -> String {
    match span {
        Some(span) => {
            let line = text[..span.start.min(text.len())].matches('\n').count() + 1;
            format!("at line {line}")
        }
        None => "in config".to_string(),
    }
}
