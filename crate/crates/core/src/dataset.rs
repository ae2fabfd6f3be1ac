//! Bouts, corpora, the on-disk corpus format, the synthetic generator and
//! leave-one-subject-out folds.
//!
//! # Corpus format
//!
//! A corpus directory holds `manifest.csv` plus one signal CSV per bout.
//!
//! ```text
//! # labels: Sed,LHH,MtV,Walk,Run
//! # provenance: synthetic corpus
//! # seed: 7
//! bout_id,subject_id,label,file
//! s01_Sed_0,s01,Sed,bouts/s01_Sed_0.csv
//! ```
//!
//! The `#` lines are optional. `labels` fixes the label order; without it the
//! order of first appearance in the manifest is used. Signal files have the
//! header `t,axis1,...,axisA[,met]`. The optional `met` column carries the
//! per-window target on the first row of each window and is blank elsewhere.
//! Files that repeat the target on every row of a window are accepted too.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::weighted::WeightedIndex;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Samples per window unless configured otherwise (12 one-second samples).
pub const DEFAULT_WINDOW_LENGTH: usize = 12;

/// The five activity categories of the reference setting, in canonical order.
pub const STANDARD_LABELS: [&str; 5] = ["Sed", "LHH", "MtV", "Walk", "Run"];

pub const MANIFEST_FILE: &str = "manifest.csv";

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CategoryLabel(String);

impl CategoryLabel {
    pub fn new(name: impl Into<String>) -> Self {
        CategoryLabel(name.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    pub fn standard_set() -> Vec<CategoryLabel> {
        STANDARD_LABELS.iter().map(|s| CategoryLabel::new(*s)).collect()
    }
}

impl fmt::Display for CategoryLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for CategoryLabel {
    fn from(s: &str) -> Self {
        CategoryLabel::new(s)
    }
}

/// Row-major `samples x axes` matrix of counts, one row per second.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Signal {
    samples: usize,
    axes: usize,
    data: Vec<f64>,
}

impl Signal {
    pub fn new(samples: usize, axes: usize, data: Vec<f64>) -> Result<Self> {
        if axes == 0 {
            return Err(Error::InvalidInput("signal must have at least one axis".into()));
        }
        if data.len() != samples * axes {
            return Err(Error::DimensionMismatch {
                expected: samples * axes,
                got: data.len(),
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("signal".into()));
        }
        Ok(Signal {
            samples,
            axes,
            data,
        })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let axes = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != axes) {
            return Err(Error::InvalidInput("ragged signal rows".into()));
        }
        Signal::new(rows.len(), axes, rows.concat())
    }

    pub fn samples(&self) -> usize {
        self.samples
    }

    pub fn axes(&self) -> usize {
        self.axes
    }

    pub fn get(&self, t: usize, axis: usize) -> f64 {
        self.data[t * self.axes + axis]
    }

    pub fn row(&self, t: usize) -> &[f64] {
        &self.data[t * self.axes..(t + 1) * self.axes]
    }

    /// Rows `start..end` as one contiguous row-major slice.
    pub fn rows(&self, start: usize, end: usize) -> &[f64] {
        &self.data[start * self.axes..end * self.axes]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }
}

/// One variable-length recording of a single activity by one subject.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bout {
    pub bout_id: String,
    pub subject_id: String,
    pub activity_class: CategoryLabel,
    pub signal: Signal,
    /// Per-window MET values, one per full window.
    pub targets: Option<Vec<f64>>,
}

impl Bout {
    pub fn new(
        bout_id: impl Into<String>,
        subject_id: impl Into<String>,
        activity_class: CategoryLabel,
        signal: Signal,
        targets: Option<Vec<f64>>,
        window_length: usize,
    ) -> Result<Self> {
        let bout = Bout {
            bout_id: bout_id.into(),
            subject_id: subject_id.into(),
            activity_class,
            signal,
            targets,
        };
        bout.validate(window_length)?;
        Ok(bout)
    }

    pub fn window_count(&self, window_length: usize) -> usize {
        self.signal.samples() / window_length
    }

    pub fn validate(&self, window_length: usize) -> Result<()> {
        if self.bout_id.is_empty() {
            return Err(Error::InvalidInput("empty bout_id".into()));
        }
        if self.subject_id.is_empty() {
            return Err(Error::InvalidInput(format!(
                "bout `{}` has an empty subject_id",
                self.bout_id
            )));
        }
        if window_length < 2 {
            return Err(Error::InvalidInput("window_length must be at least 2".into()));
        }
        if self.signal.samples() < window_length {
            return Err(Error::InvalidInput(format!(
                "bout shorter than one window: `{}` has {} < {window_length} samples",
                self.bout_id,
                self.signal.samples()
            )));
        }
        if let Some(targets) = &self.targets {
            let windows = self.window_count(window_length);
            if targets.len() != windows {
                return Err(Error::InvalidInput(format!(
                    "bout `{}` has {} targets for {windows} windows",
                    self.bout_id,
                    targets.len()
                )));
            }
            if targets.iter().any(|t| !t.is_finite() || *t < 0.0) {
                return Err(Error::InvalidInput(format!(
                    "bout `{}` has a negative or non-finite target",
                    self.bout_id
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub description: String,
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Corpus {
    bouts: Vec<Bout>,
    axis_count: usize,
    label_set: Vec<CategoryLabel>,
    window_length: usize,
    pub provenance: Provenance,
}

impl Corpus {
    pub fn new(
        bouts: Vec<Bout>,
        label_set: Vec<CategoryLabel>,
        window_length: usize,
        provenance: Provenance,
    ) -> Result<Self> {
        let axis_count = bouts
            .first()
            .map(|b| b.signal.axes())
            .ok_or_else(|| Error::InvalidInput("corpus has no bouts".into()))?;
        if label_set.len() < 2 {
            return Err(Error::InvalidInput("label set needs at least two labels".into()));
        }
        for (i, label) in label_set.iter().enumerate() {
            if label_set[..i].contains(label) {
                return Err(Error::InvalidInput(format!("duplicate label `{label}`")));
            }
        }
        let mut seen = std::collections::HashSet::new();
        for bout in &bouts {
            bout.validate(window_length)?;
            if bout.signal.axes() != axis_count {
                return Err(Error::InvalidInput(format!(
                    "bout `{}` has {} axes, corpus has {axis_count}",
                    bout.bout_id,
                    bout.signal.axes()
                )));
            }
            if !label_set.contains(&bout.activity_class) {
                return Err(Error::InvalidInput(format!(
                    "bout `{}` has unknown label `{}`",
                    bout.bout_id, bout.activity_class
                )));
            }
            if !seen.insert(bout.bout_id.as_str()) {
                return Err(Error::InvalidInput(format!(
                    "duplicate bout_id `{}`",
                    bout.bout_id
                )));
            }
        }
        Ok(Corpus {
            bouts,
            axis_count,
            label_set,
            window_length,
            provenance,
        })
    }

    pub fn bouts(&self) -> &[Bout] {
        &self.bouts
    }

    pub fn axis_count(&self) -> usize {
        self.axis_count
    }

    pub fn label_set(&self) -> &[CategoryLabel] {
        &self.label_set
    }

    pub fn window_length(&self) -> usize {
        self.window_length
    }

    pub fn label_index(&self, label: &CategoryLabel) -> Option<usize> {
        self.label_set.iter().position(|l| l == label)
    }

    /// Class index of every bout, in corpus order.
    pub fn class_indices(&self) -> Vec<usize> {
        self.bouts
            .iter()
            .map(|b| self.label_index(&b.activity_class).expect("validated label"))
            .collect()
    }

    /// Distinct subject ids in sorted order.
    pub fn subjects(&self) -> Vec<String> {
        let mut subjects: Vec<String> = self.bouts.iter().map(|b| b.subject_id.clone()).collect();
        subjects.sort();
        subjects.dedup();
        subjects
    }

    pub fn has_targets(&self) -> bool {
        self.bouts.iter().all(|b| b.targets.is_some())
    }

    /// A corpus made of the bouts at `indices`, sharing this corpus' labels.
    pub fn subset(&self, indices: &[usize]) -> Result<Corpus> {
        let bouts = indices.iter().map(|&i| self.bouts[i].clone()).collect();
        Corpus::new(
            bouts,
            self.label_set.clone(),
            self.window_length,
            self.provenance.clone(),
        )
    }
}

// ---------------------------------------------------------------------------
// Loading and saving

fn load_err(file: &Path, line: u64, message: impl Into<String>) -> Error {
    Error::Load {
        file: file.to_path_buf(),
        line,
        message: message.into(),
    }
}

fn manifest_path(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join(MANIFEST_FILE)
    } else {
        path.to_path_buf()
    }
}

/// Reads a corpus from a directory containing `manifest.csv` (or from the
/// manifest path itself) and validates every bout.
pub fn load_corpus(path: &Path, window_length: usize) -> Result<Corpus> {
    let manifest = manifest_path(path);
    let base = manifest.parent().map(Path::to_path_buf).unwrap_or_default();
    let text = fs::read_to_string(&manifest).map_err(|e| Error::io(&manifest, e))?;

    let mut declared_labels: Option<Vec<CategoryLabel>> = None;
    let mut provenance = Provenance::default();
    for (i, line) in text.lines().enumerate() {
        let Some(comment) = line.strip_prefix('#') else {
            continue;
        };
        let Some((key, value)) = comment.split_once(':') else {
            continue;
        };
        let value = value.trim();
        match key.trim() {
            "labels" => {
                declared_labels = Some(
                    value
                        .split(',')
                        .map(|s| CategoryLabel::new(s.trim()))
                        .collect(),
                )
            }
            "provenance" => provenance.description = value.to_string(),
            "seed" => {
                provenance.seed = Some(value.parse().map_err(|_| {
                    load_err(&manifest, i as u64 + 1, format!("bad seed `{value}`"))
                })?)
            }
            _ => {}
        }
    }

    let mut reader = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_reader(text.as_bytes());
    let headers = reader.headers()?.clone();
    let expected = ["bout_id", "subject_id", "label", "file"];
    if headers.iter().collect::<Vec<_>>() != expected {
        return Err(load_err(
            &manifest,
            1,
            format!("manifest header must be `{}`", expected.join(",")),
        ));
    }

    let mut bouts = Vec::new();
    let mut seen_labels: Vec<CategoryLabel> = Vec::new();
    for record in reader.records() {
        let record = record?;
        let line = record.position().map_or(0, |p| p.line());
        if record.len() != 4 {
            return Err(load_err(&manifest, line, "expected 4 fields"));
        }
        let label = CategoryLabel::new(&record[2]);
        match &declared_labels {
            Some(labels) if !labels.contains(&label) => {
                return Err(load_err(&manifest, line, format!("unknown label `{label}`")));
            }
            _ => {}
        }
        if !seen_labels.contains(&label) {
            seen_labels.push(label.clone());
        }
        let file = base.join(&record[3]);
        let (signal, targets) = load_signal(&file, window_length)?;
        let bout = Bout::new(&record[0], &record[1], label, signal, targets, window_length)
            .map_err(|e| load_err(&manifest, line, e.to_string()))?;
        if let Some(first) = bouts.first() {
            let first: &Bout = first;
            if first.signal.axes() != bout.signal.axes() {
                return Err(load_err(
                    &file,
                    1,
                    format!(
                        "inconsistent axis count: {} here, {} in `{}`",
                        bout.signal.axes(),
                        first.signal.axes(),
                        first.bout_id
                    ),
                ));
            }
        }
        bouts.push(bout);
    }

    let label_set = declared_labels.unwrap_or(seen_labels);
    Corpus::new(bouts, label_set, window_length, provenance)
        .map_err(|e| load_err(&manifest, 0, e.to_string()))
}

fn load_signal(file: &Path, window_length: usize) -> Result<(Signal, Option<Vec<f64>>)> {
    let text = fs::read_to_string(file).map_err(|e| Error::io(file, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .flexible(false)
        .from_reader(text.as_bytes());
    let headers = reader.headers()?.clone();
    let names: Vec<&str> = headers.iter().collect();
    if names.first() != Some(&"t") {
        return Err(load_err(file, 1, "signal header must start with `t`"));
    }
    let has_met = names.last() == Some(&"met");
    let axes = names.len() - 1 - usize::from(has_met);
    if axes == 0 {
        return Err(load_err(file, 1, "signal has no axis columns"));
    }
    for (a, name) in names[1..=axes].iter().enumerate() {
        if *name != format!("axis{}", a + 1) {
            return Err(load_err(
                file,
                1,
                format!("expected column `axis{}`, found `{name}`", a + 1),
            ));
        }
    }

    let mut data = Vec::new();
    let mut met_cells: Vec<(u64, Option<f64>)> = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            load_err(file, line, e.to_string())
        })?;
        let line = record.position().map_or(0, |p| p.line());
        let parse = |cell: &str, column: &str| -> Result<f64> {
            let v: f64 = cell.trim().parse().map_err(|_| {
                load_err(file, line, format!("row {line}: non-numeric {column} `{cell}`"))
            })?;
            if v.is_finite() {
                Ok(v)
            } else {
                Err(load_err(file, line, format!("row {line}: non-finite {column}")))
            }
        };
        parse(&record[0], "t")?;
        for a in 0..axes {
            data.push(parse(&record[a + 1], &format!("axis{}", a + 1))?);
        }
        if has_met {
            let cell = record[axes + 1].trim();
            let met = if cell.is_empty() {
                None
            } else {
                Some(parse(cell, "met")?)
            };
            met_cells.push((line, met));
        }
    }
    let samples = data.len() / axes;
    if samples < window_length {
        return Err(load_err(
            file,
            0,
            format!("bout shorter than one window ({samples} < {window_length} samples)"),
        ));
    }
    let signal = Signal::new(samples, axes, data).map_err(|e| load_err(file, 0, e.to_string()))?;

    let targets = if has_met {
        let windows = samples / window_length;
        let mut targets = Vec::with_capacity(windows);
        for w in 0..windows {
            let cells = &met_cells[w * window_length..(w + 1) * window_length];
            let value = cells.iter().find_map(|(_, v)| *v).ok_or_else(|| {
                load_err(file, cells[0].0, format!("window {w} has no met value"))
            })?;
            if value < 0.0 {
                return Err(load_err(file, cells[0].0, "negative met value"));
            }
            targets.push(value);
        }
        Some(targets)
    } else {
        None
    };
    Ok((signal, targets))
}

/// Writes `manifest.csv` and `bouts/<bout_id>.csv` under `dir`.
pub fn save_corpus(corpus: &Corpus, dir: &Path) -> Result<()> {
    let bout_dir = dir.join("bouts");
    fs::create_dir_all(&bout_dir).map_err(|e| Error::io(&bout_dir, e))?;

    let mut manifest = String::new();
    let labels: Vec<&str> = corpus.label_set.iter().map(CategoryLabel::as_str).collect();
    manifest.push_str(&format!("# labels: {}\n", labels.join(",")));
    if !corpus.provenance.description.is_empty() {
        let one_line = corpus.provenance.description.replace('\n', " ");
        manifest.push_str(&format!("# provenance: {one_line}\n"));
    }
    if let Some(seed) = corpus.provenance.seed {
        manifest.push_str(&format!("# seed: {seed}\n"));
    }
    manifest.push_str("bout_id,subject_id,label,file\n");

    let window_length = corpus.window_length;
    for bout in &corpus.bouts {
        let rel = format!("bouts/{}.csv", bout.bout_id);
        manifest.push_str(&format!(
            "{},{},{},{rel}\n",
            bout.bout_id, bout.subject_id, bout.activity_class
        ));

        let axes = bout.signal.axes();
        let mut out = String::from("t");
        for a in 1..=axes {
            out.push_str(&format!(",axis{a}"));
        }
        if bout.targets.is_some() {
            out.push_str(",met");
        }
        out.push('\n');
        for t in 0..bout.signal.samples() {
            out.push_str(&t.to_string());
            for v in bout.signal.row(t) {
                out.push_str(&format!(",{v}"));
            }
            if let Some(targets) = &bout.targets {
                out.push(',');
                if t % window_length == 0 {
                    if let Some(met) = targets.get(t / window_length) {
                        out.push_str(&met.to_string());
                    }
                }
            }
            out.push('\n');
        }
        let path = dir.join(&rel);
        fs::write(&path, out).map_err(|e| Error::io(&path, e))?;
    }
    let path = dir.join(MANIFEST_FILE);
    fs::write(&path, manifest).map_err(|e| Error::io(&path, e))
}

// ---------------------------------------------------------------------------
// Synthetic corpora

/// A count-generating regime: every sample on axis `a` is
/// `gain[a] * (mean + amplitude * sin(2 pi t / period + phase)) + N(0, (gain[a] * std)^2)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Regime {
    pub name: String,
    pub mean: f64,
    pub std: f64,
    #[serde(default)]
    pub amplitude: f64,
    #[serde(default = "default_period")]
    pub period: f64,
}

fn default_period() -> f64 {
    4.0
}

/// Per-class generation rule. Each window of a bout draws one regime from
/// `regime_weights`; its MET target is
/// `met_intercept + met_slope * (mean count of the window) / 1000 + N(0, met_noise^2)`,
/// floored at zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassSpec {
    pub label: String,
    pub regime_weights: Vec<f64>,
    pub met_intercept: f64,
    pub met_slope: f64,
    pub met_noise: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticConfig {
    pub subjects: usize,
    /// Bouts per class per subject.
    pub bouts_per_class: usize,
    pub min_minutes: usize,
    pub max_minutes: usize,
    /// Up to this many extra samples appended to each bout, so lengths are not
    /// multiples of the window length.
    pub max_extra_samples: usize,
    pub window_length: usize,
    pub axis_gains: Vec<f64>,
    pub regimes: Vec<Regime>,
    pub classes: Vec<ClassSpec>,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        let regime = |name: &str, mean, std, amplitude, period| Regime {
            name: name.to_string(),
            mean,
            std,
            amplitude,
            period,
        };
        let class = |label: &str, weights: [f64; 5], intercept, slope, noise| ClassSpec {
            label: label.to_string(),
            regime_weights: weights.to_vec(),
            met_intercept: intercept,
            met_slope: slope,
            met_noise: noise,
        };
        SyntheticConfig {
            subjects: 10,
            bouts_per_class: 4,
            min_minutes: 2,
            max_minutes: 6,
            max_extra_samples: 59,
            window_length: DEFAULT_WINDOW_LENGTH,
            axis_gains: vec![1.0, 0.7, 0.5],
            regimes: vec![
                regime("still", 5.0, 3.0, 0.0, 4.0),
                regime("light", 150.0, 60.0, 20.0, 6.0),
                regime("moderate", 600.0, 180.0, 150.0, 4.0),
                regime("stride", 1500.0, 150.0, 300.0, 2.0),
                regime("sprint", 2800.0, 350.0, 600.0, 2.0),
            ],
            classes: vec![
                class("Sed", [0.9, 0.1, 0.0, 0.0, 0.0], 1.2, 0.5, 0.1),
                class("LHH", [0.2, 0.6, 0.2, 0.0, 0.0], 2.0, 1.5, 0.3),
                class("MtV", [0.0, 0.3, 0.5, 0.2, 0.0], 3.0, 1.2, 0.4),
                class("Walk", [0.0, 0.0, 0.1, 0.8, 0.1], 2.5, 1.0, 0.3),
                class("Run", [0.0, 0.0, 0.0, 0.45, 0.55], 4.0, 1.5, 0.5),
            ],
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = |key: &str, v: usize| {
            if v == 0 {
                Err(Error::config(key, "must be positive"))
            } else {
                Ok(())
            }
        };
        positive("subjects", self.subjects)?;
        positive("bouts_per_class", self.bouts_per_class)?;
        positive("min_minutes", self.min_minutes)?;
        positive("max_minutes", self.max_minutes)?;
        if self.max_minutes < self.min_minutes {
            return Err(Error::config("max_minutes", "must be at least min_minutes"));
        }
        if self.window_length < 2 {
            return Err(Error::config("window_length", "must be at least 2"));
        }
        if self.axis_gains.is_empty() {
            return Err(Error::config("axis_gains", "needs at least one axis"));
        }
        if self.axis_gains.iter().any(|g| !(g.is_finite() && *g > 0.0)) {
            return Err(Error::config("axis_gains", "gains must be positive"));
        }
        if self.regimes.is_empty() {
            return Err(Error::config("regimes", "needs at least one regime"));
        }
        for r in &self.regimes {
            if !(r.std.is_finite() && r.std > 0.0) {
                return Err(Error::config("regimes.std", format!("regime `{}`: must be positive", r.name)));
            }
            if !(r.period.is_finite() && r.period > 0.0) {
                return Err(Error::config("regimes.period", format!("regime `{}`: must be positive", r.name)));
            }
            if !r.mean.is_finite() || !r.amplitude.is_finite() {
                return Err(Error::config("regimes.mean", format!("regime `{}`: must be finite", r.name)));
            }
        }
        if self.classes.len() < 2 {
            return Err(Error::config("classes", "needs at least two classes"));
        }
        for c in &self.classes {
            if c.regime_weights.len() != self.regimes.len() {
                return Err(Error::config(
                    "classes.regime_weights",
                    format!("class `{}`: need one weight per regime", c.label),
                ));
            }
            if c.regime_weights.iter().any(|w| !(w.is_finite() && *w >= 0.0))
                || c.regime_weights.iter().sum::<f64>() <= 0.0
            {
                return Err(Error::config(
                    "classes.regime_weights",
                    format!("class `{}`: weights must be nonnegative with a positive sum", c.label),
                ));
            }
            if !(c.met_noise.is_finite() && c.met_noise >= 0.0) {
                return Err(Error::config("classes.met_noise", format!("class `{}`: must be nonnegative", c.label)));
            }
            if !c.met_intercept.is_finite() || !c.met_slope.is_finite() {
                return Err(Error::config("classes.met_intercept", format!("class `{}`: must be finite", c.label)));
            }
        }
        Ok(())
    }

    /// Expected count on `axis` for bouts of class `class` (the regime-weighted
    /// mean; oscillations average out over whole periods).
    pub fn expected_class_mean(&self, class: usize, axis: usize) -> f64 {
        let spec = &self.classes[class];
        let total: f64 = spec.regime_weights.iter().sum();
        let mean: f64 = spec
            .regime_weights
            .iter()
            .zip(&self.regimes)
            .map(|(w, r)| w * r.mean)
            .sum();
        self.axis_gains[axis] * mean / total
    }
}

/// Generates a corpus: subjects outermost, then classes, then bouts. Equal
/// `(config, seed)` always yields an equal corpus.
pub fn generate_synthetic(config: &SyntheticConfig, seed: u64) -> Result<Corpus> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let window = config.window_length;
    let axes = config.axis_gains.len();
    let class_regimes: Vec<WeightedIndex<f64>> = config
        .classes
        .iter()
        .map(|c| WeightedIndex::new(&c.regime_weights).expect("validated weights"))
        .collect();
    let minutes = Uniform::new_inclusive(config.min_minutes, config.max_minutes)
        .map_err(|e| Error::config("min_minutes", e.to_string()))?;
    let extra = Uniform::new_inclusive(0, config.max_extra_samples)
        .map_err(|e| Error::config("max_extra_samples", e.to_string()))?;
    let std_normal = Normal::new(0.0, 1.0).expect("unit normal");

    let mut bouts = Vec::with_capacity(config.subjects * config.classes.len() * config.bouts_per_class);
    for s in 0..config.subjects {
        let subject_id = format!("s{:02}", s + 1);
        for (c, spec) in config.classes.iter().enumerate() {
            for b in 0..config.bouts_per_class {
                let samples = minutes.sample(&mut rng) * 60 + extra.sample(&mut rng);
                let windows = samples / window;
                let phases: Vec<f64> = (0..axes)
                    .map(|_| rng.random::<f64>() * std::f64::consts::TAU)
                    .collect();
                let mut data = Vec::with_capacity(samples * axes);
                let mut targets = Vec::with_capacity(windows);
                let mut start = 0;
                while start < samples {
                    let end = (start + window).min(samples);
                    let regime = &config.regimes[class_regimes[c].sample(&mut rng)];
                    let mut total = 0.0;
                    for t in start..end {
                        for (a, gain) in config.axis_gains.iter().enumerate() {
                            let wave = regime.amplitude
                                * (std::f64::consts::TAU * t as f64 / regime.period + phases[a]).sin();
                            let noise: f64 = std_normal.sample(&mut rng);
                            let v = gain * (regime.mean + wave) + gain * regime.std * noise;
                            total += v;
                            data.push(v);
                        }
                    }
                    if end - start == window {
                        let mean_count = total / (window * axes) as f64;
                        let noise: f64 = std_normal.sample(&mut rng);
                        let met = spec.met_intercept
                            + spec.met_slope * mean_count / 1000.0
                            + spec.met_noise * noise;
                        targets.push(met.max(0.0));
                    }
                    start = end;
                }
                let signal = Signal::new(samples, axes, data)?;
                bouts.push(Bout::new(
                    format!("{subject_id}_{}_{b}", spec.label),
                    subject_id.clone(),
                    CategoryLabel::new(&spec.label),
                    signal,
                    Some(targets),
                    window,
                )?);
            }
        }
    }
    let labels = config.classes.iter().map(|c| CategoryLabel::new(&c.label)).collect();
    Corpus::new(
        bouts,
        labels,
        window,
        Provenance {
            description: "synthetic corpus".to_string(),
            seed: Some(seed),
        },
    )
}

// ---------------------------------------------------------------------------
// Leave-one-subject-out folds

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FoldIndices {
    pub subject_id: String,
    /// Bout indices into the parent corpus, in corpus order.
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct Fold {
    pub subject_id: String,
    pub train: Corpus,
    pub test: Corpus,
}

/// One fold per distinct subject (sorted by subject id), as bout indices.
pub fn loso_fold_indices(corpus: &Corpus) -> Result<Vec<FoldIndices>> {
    let mut by_subject: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, bout) in corpus.bouts().iter().enumerate() {
        by_subject.entry(bout.subject_id.as_str()).or_default().push(i);
    }
    if by_subject.len() < 2 {
        return Err(Error::InvalidInput("LOSO requires ≥2 subjects".into()));
    }
    Ok(by_subject
        .into_iter()
        .map(|(subject, test)| {
            let train = (0..corpus.bouts().len())
                .filter(|i| corpus.bouts()[*i].subject_id != subject)
                .collect();
            FoldIndices {
                subject_id: subject.to_string(),
                train,
                test,
            }
        })
        .collect())
}

pub fn loso_folds(corpus: &Corpus) -> Result<Vec<Fold>> {
    loso_fold_indices(corpus)?
        .into_iter()
        .map(|f| {
            Ok(Fold {
                subject_id: f.subject_id,
                train: corpus.subset(&f.train)?,
                test: corpus.subset(&f.test)?,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp_bout(id: &str, subject: &str, label: &str, samples: usize, axes: usize) -> Bout {
        let data = (0..samples * axes).map(|i| i as f64).collect();
        let signal = Signal::new(samples, axes, data).unwrap();
        let targets = Some(vec![1.5; samples / DEFAULT_WINDOW_LENGTH]);
        Bout::new(id, subject, label.into(), signal, targets, DEFAULT_WINDOW_LENGTH).unwrap()
    }

    fn tiny_corpus() -> Corpus {
        let bouts = vec![
            ramp_bout("a1", "a", "Sed", 60, 3),
            ramp_bout("b1", "b", "Run", 120, 3),
            ramp_bout("c1", "c", "Sed", 30, 3),
            ramp_bout("a2", "a", "Run", 24, 3),
        ];
        Corpus::new(
            bouts,
            vec!["Sed".into(), "Run".into()],
            DEFAULT_WINDOW_LENGTH,
            Provenance::default(),
        )
        .unwrap()
    }

    #[test]
    fn short_bout_rejected() {
        let signal = Signal::new(10, 3, vec![0.0; 30]).unwrap();
        let err = Bout::new("x", "s", "Sed".into(), signal, None, 12).unwrap_err();
        assert!(err.to_string().contains("bout shorter than one window"), "{err}");
    }

    #[test]
    fn corpus_rejects_unknown_label_and_mixed_axes() {
        let bouts = vec![ramp_bout("a1", "a", "Sed", 60, 3), ramp_bout("b1", "b", "Jog", 60, 3)];
        assert!(Corpus::new(bouts, vec!["Sed".into(), "Run".into()], 12, Provenance::default()).is_err());
        let bouts = vec![ramp_bout("a1", "a", "Sed", 60, 3), ramp_bout("b1", "b", "Sed", 60, 2)];
        assert!(Corpus::new(bouts, vec!["Sed".into(), "Run".into()], 12, Provenance::default()).is_err());
    }

    #[test]
    fn negative_target_rejected() {
        let signal = Signal::new(24, 1, vec![0.0; 24]).unwrap();
        assert!(Bout::new("x", "s", "Sed".into(), signal, Some(vec![1.0, -0.1]), 12).is_err());
    }

    #[test]
    fn loso_partitions_by_subject() {
        let corpus = tiny_corpus();
        let folds = loso_folds(&corpus).unwrap();
        assert_eq!(folds.len(), 3);
        assert_eq!(folds[0].subject_id, "a");
        let test_ids: Vec<&str> = folds[0].test.bouts().iter().map(|b| b.bout_id.as_str()).collect();
        assert_eq!(test_ids, ["a1", "a2"]);
        for fold in &folds {
            assert_eq!(fold.train.bouts().len() + fold.test.bouts().len(), 4);
            for b in fold.train.bouts() {
                assert_ne!(b.subject_id, fold.subject_id);
            }
        }
    }

    #[test]
    fn every_bout_in_exactly_one_test_fold() {
        let corpus = tiny_corpus();
        let mut counts = vec![0; corpus.bouts().len()];
        for f in loso_fold_indices(&corpus).unwrap() {
            for i in f.test {
                counts[i] += 1;
            }
        }
        assert!(counts.iter().all(|&c| c == 1));
    }

    #[test]
    fn loso_needs_two_subjects() {
        let bouts = vec![ramp_bout("a1", "a", "Sed", 60, 3), ramp_bout("a2", "a", "Run", 60, 3)];
        let corpus = Corpus::new(bouts, vec!["Sed".into(), "Run".into()], 12, Provenance::default()).unwrap();
        let err = loso_folds(&corpus).unwrap_err();
        assert!(err.to_string().contains("LOSO requires ≥2 subjects"));
    }

    #[test]
    fn loso_with_184_subjects() {
        let bouts: Vec<Bout> = (0..184)
            .map(|s| ramp_bout(&format!("b{s}"), &format!("p{s:03}"), if s % 2 == 0 { "Sed" } else { "Run" }, 24, 1))
            .collect();
        let corpus = Corpus::new(bouts, vec!["Sed".into(), "Run".into()], 12, Provenance::default()).unwrap();
        assert_eq!(loso_fold_indices(&corpus).unwrap().len(), 184);
    }

    #[test]
    fn synthetic_counts_and_labels() {
        let config = SyntheticConfig::default();
        let corpus = generate_synthetic(&config, 7).unwrap();
        assert_eq!(corpus.bouts().len(), 200);
        assert_eq!(corpus.axis_count(), 3);
        assert_eq!(corpus.subjects().len(), 10);
        assert_eq!(corpus.label_set(), CategoryLabel::standard_set().as_slice());
        assert!(corpus.has_targets());
    }

    #[test]
    fn synthetic_is_deterministic() {
        let config = SyntheticConfig::default();
        let a = generate_synthetic(&config, 7).unwrap();
        let b = generate_synthetic(&config, 7).unwrap();
        assert_eq!(a, b);
        let c = generate_synthetic(&config, 8).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn synthetic_sed_mean_within_three_standard_errors() {
        let config = SyntheticConfig::default();
        let corpus = generate_synthetic(&config, 7).unwrap();
        // Windows are i.i.d. given the class, so use per-window means.
        let window_means: Vec<f64> = corpus
            .bouts()
            .iter()
            .filter(|b| b.activity_class.as_str() == "Sed")
            .flat_map(|b| {
                (0..b.window_count(12)).map(move |w| {
                    (w * 12..(w + 1) * 12).map(|t| b.signal.get(t, 0)).sum::<f64>() / 12.0
                })
            })
            .collect();
        let n = window_means.len() as f64;
        let mean = window_means.iter().sum::<f64>() / n;
        let var = window_means.iter().map(|m| (m - mean).powi(2)).sum::<f64>() / (n - 1.0);
        let se = (var / n).sqrt();
        let expected = config.expected_class_mean(0, 0);
        assert!((mean - expected).abs() < 3.0 * se, "mean {mean} expected {expected} se {se}");
    }

    #[test]
    fn bad_synthetic_config_names_key() {
        let config = SyntheticConfig {
            subjects: 0,
            ..SyntheticConfig::default()
        };
        match generate_synthetic(&config, 1) {
            Err(Error::Config { key, .. }) => assert_eq!(key, "subjects"),
            other => panic!("unexpected {other:?}"),
        }
    }
}
