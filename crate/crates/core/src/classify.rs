//! One-hidden-layer perceptron (tanh hidden units) with either a softmax
//! classification head or a single linear output for regression, trained by
//! seeded mini-batch gradient descent. Also the per-window voting classifier.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::CategoryLabel;
use crate::error::{Error, Result};
use crate::features::WindowFeatures;
use crate::par::{self, Execution};
use crate::vbgmm::{argmax_lowest, Standardizer};

pub const MLP_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MlpConfig {
    pub hidden_dim: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub l2: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Fraction of examples held out for early stopping. 0 disables it.
    pub validation_fraction: f64,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
}

impl Default for MlpConfig {
    fn default() -> Self {
        MlpConfig {
            hidden_dim: 25,
            epochs: 500,
            learning_rate: 0.01,
            l2: 1e-4,
            batch_size: 32,
            seed: 0,
            validation_fraction: 0.0,
            patience: 20,
        }
    }
}

impl MlpConfig {
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden_dim == 0 {
            return Err(Error::config("hidden_dim", "must be positive"));
        }
        if self.epochs == 0 {
            return Err(Error::config("epochs", "must be positive"));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::config("learning_rate", "must be positive and finite"));
        }
        if !(self.l2.is_finite() && self.l2 >= 0.0) {
            return Err(Error::config("l2", "must be nonnegative and finite"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be positive"));
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return Err(Error::config("validation_fraction", "must lie in [0, 1)"));
        }
        Ok(())
    }
}

/// Output layer and loss.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Head {
    /// Softmax over `labels` with cross-entropy loss.
    Softmax { labels: Vec<CategoryLabel> },
    /// One linear output with loss `(y_hat - y)^2 / 2`.
    Linear,
}

impl Head {
    fn outputs(&self) -> usize {
        match self {
            Head::Softmax { labels } => labels.len(),
            Head::Linear => 1,
        }
    }
}

/// Raw parameters. Matrices are row-major, `w1` is `hidden x input` and `w2`
/// is `output x hidden`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Network {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub output_dim: usize,
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
}

/// A training target, matching the head.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Target {
    Class(usize),
    Value(f64),
}

impl Network {
    pub fn zeros(input_dim: usize, hidden_dim: usize, output_dim: usize) -> Self {
        Network {
            input_dim,
            hidden_dim,
            output_dim,
            w1: vec![0.0; hidden_dim * input_dim],
            b1: vec![0.0; hidden_dim],
            w2: vec![0.0; output_dim * hidden_dim],
            b2: vec![0.0; output_dim],
        }
    }

    /// Uniform Xavier initialization of both weight matrices, zero biases.
    pub fn xavier<R: Rng>(input_dim: usize, hidden_dim: usize, output_dim: usize, rng: &mut R) -> Self {
        let mut net = Network::zeros(input_dim, hidden_dim, output_dim);
        let l1 = (6.0 / (input_dim + hidden_dim) as f64).sqrt();
        let l2 = (6.0 / (hidden_dim + output_dim) as f64).sqrt();
        net.w1.iter_mut().for_each(|w| *w = rng.random_range(-l1..l1));
        net.w2.iter_mut().for_each(|w| *w = rng.random_range(-l2..l2));
        net
    }

    pub fn parameter_count(&self) -> usize {
        self.w1.len() + self.b1.len() + self.w2.len() + self.b2.len()
    }

    /// All parameters in the order w1, b1, w2, b2.
    pub fn parameters(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.parameter_count());
        out.extend_from_slice(&self.w1);
        out.extend_from_slice(&self.b1);
        out.extend_from_slice(&self.w2);
        out.extend_from_slice(&self.b2);
        out
    }

    pub fn set_parameters(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.parameter_count(), "parameter count");
        let (a, rest) = flat.split_at(self.w1.len());
        let (b, rest) = rest.split_at(self.b1.len());
        let (c, d) = rest.split_at(self.w2.len());
        self.w1.copy_from_slice(a);
        self.b1.copy_from_slice(b);
        self.w2.copy_from_slice(c);
        self.b2.copy_from_slice(d);
    }

    fn hidden(&self, x: &[f64], h: &mut [f64]) {
        for (j, hj) in h.iter_mut().enumerate() {
            let row = &self.w1[j * self.input_dim..(j + 1) * self.input_dim];
            let a: f64 = row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + self.b1[j];
            *hj = a.tanh();
        }
    }

    fn output(&self, h: &[f64], z: &mut [f64]) {
        for (o, zo) in z.iter_mut().enumerate() {
            let row = &self.w2[o * self.hidden_dim..(o + 1) * self.hidden_dim];
            *zo = row.iter().zip(h).map(|(w, v)| w * v).sum::<f64>() + self.b2[o];
        }
    }

    /// Pre-activation outputs (logits for a softmax head).
    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        let mut h = vec![0.0; self.hidden_dim];
        let mut z = vec![0.0; self.output_dim];
        self.hidden(x, &mut h);
        self.output(&h, &mut z);
        z
    }

    fn weight_norm_sq(&self) -> f64 {
        self.w1.iter().chain(&self.w2).map(|w| w * w).sum()
    }

    /// Mean loss over the batch plus `l2 / 2` times the squared norm of the
    /// weight matrices (biases are not penalized).
    pub fn loss(&self, head: &Head, inputs: &[&[f64]], targets: &[Target], l2: f64) -> f64 {
        let data: f64 = inputs
            .iter()
            .zip(targets)
            .map(|(x, t)| example_loss(head, &self.forward(x), *t))
            .sum::<f64>()
            / inputs.len() as f64;
        data + 0.5 * l2 * self.weight_norm_sq()
    }

    /// Loss as in [`Network::loss`] and its gradient, flattened in
    /// [`Network::parameters`] order.
    pub fn loss_and_gradient(&self, head: &Head, inputs: &[&[f64]], targets: &[Target], l2: f64) -> (f64, Vec<f64>) {
        let (d, hd, od) = (self.input_dim, self.hidden_dim, self.output_dim);
        let mut grad = vec![0.0; self.parameter_count()];
        let (g_w1, rest) = grad.split_at_mut(hd * d);
        let (g_b1, rest) = rest.split_at_mut(hd);
        let (g_w2, g_b2) = rest.split_at_mut(od * hd);
        let scale = 1.0 / inputs.len() as f64;
        let mut h = vec![0.0; hd];
        let mut z = vec![0.0; od];
        let mut dz = vec![0.0; od];
        let mut da = vec![0.0; hd];
        let mut loss = 0.0;
        for (x, t) in inputs.iter().zip(targets) {
            self.hidden(x, &mut h);
            self.output(&h, &mut z);
            loss += example_loss(head, &z, *t);
            output_delta(head, &z, *t, &mut dz);
            for o in 0..od {
                let g = dz[o] * scale;
                g_b2[o] += g;
                for j in 0..hd {
                    g_w2[o * hd + j] += g * h[j];
                }
            }
            for j in 0..hd {
                let back: f64 = (0..od).map(|o| self.w2[o * hd + j] * dz[o]).sum();
                da[j] = back * (1.0 - h[j] * h[j]) * scale;
            }
            for j in 0..hd {
                g_b1[j] += da[j];
                let row = &mut g_w1[j * d..(j + 1) * d];
                for (g, v) in row.iter_mut().zip(x.iter()) {
                    *g += da[j] * v;
                }
            }
        }
        for (g, w) in g_w1.iter_mut().zip(&self.w1) {
            *g += l2 * w;
        }
        for (g, w) in g_w2.iter_mut().zip(&self.w2) {
            *g += l2 * w;
        }
        (loss * scale + 0.5 * l2 * self.weight_norm_sq(), grad)
    }

    fn apply_step(&mut self, grad: &[f64], learning_rate: f64) {
        let mut offset = 0;
        for block in [&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2] {
            for (p, g) in block.iter_mut().zip(&grad[offset..]) {
                *p -= learning_rate * g;
            }
            offset += block.len();
        }
    }
}

/// Numerically stable softmax; equal logits give exactly equal shares.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

fn log_softmax_at(logits: &[f64], index: usize) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
    logits[index] - lse
}

fn example_loss(head: &Head, z: &[f64], target: Target) -> f64 {
    match (head, target) {
        (Head::Softmax { .. }, Target::Class(c)) => -log_softmax_at(z, c),
        (Head::Linear, Target::Value(y)) => 0.5 * (z[0] - y) * (z[0] - y),
        _ => panic!("target does not match head"),
    }
}

fn output_delta(head: &Head, z: &[f64], target: Target, dz: &mut [f64]) {
    match (head, target) {
        (Head::Softmax { .. }, Target::Class(c)) => {
            dz.copy_from_slice(&softmax(z));
            dz[c] -= 1.0;
        }
        (Head::Linear, Target::Value(y)) => dz[0] = z[0] - y,
        _ => panic!("target does not match head"),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassPrediction {
    pub label: CategoryLabel,
    pub index: usize,
    pub probabilities: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpModel {
    pub format_version: u32,
    pub head: Head,
    pub network: Network,
    pub standardizer: Standardizer,
    pub config: MlpConfig,
    /// Mean training loss after each epoch.
    pub training_log: Vec<f64>,
    pub seed: u64,
}

impl MlpModel {
    pub fn input_dim(&self) -> usize {
        self.network.input_dim
    }

    pub fn labels(&self) -> Option<&[CategoryLabel]> {
        match &self.head {
            Head::Softmax { labels } => Some(labels),
            Head::Linear => None,
        }
    }

    fn check_input(&self, input: &[f64]) -> Result<Vec<f64>> {
        if input.len() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.input_dim(),
                got: input.len(),
            });
        }
        Ok(self.standardizer.transform(input))
    }

    pub fn predict(&self, input: &[f64]) -> Result<ClassPrediction> {
        let Head::Softmax { labels } = &self.head else {
            return Err(Error::InvalidInput("predict needs a classification model".into()));
        };
        let x = self.check_input(input)?;
        let probabilities = softmax(&self.network.forward(&x));
        let index = argmax_lowest(&probabilities);
        Ok(ClassPrediction {
            label: labels[index].clone(),
            index,
            probabilities,
        })
    }

    pub fn predict_value(&self, input: &[f64]) -> Result<f64> {
        if self.head != Head::Linear {
            return Err(Error::InvalidInput("predict_value needs a regression model".into()));
        }
        let x = self.check_input(input)?;
        Ok(self.network.forward(&x)[0])
    }

    pub fn predict_rows(&self, rows: &[Vec<f64>], exec: Execution) -> Result<Vec<ClassPrediction>> {
        par::try_map(exec, rows, |r| self.predict(r))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let model: MlpModel = serde_json::from_str(text)?;
        if model.format_version != MLP_FORMAT_VERSION {
            return Err(Error::InvalidInput(format!(
                "unsupported network format version {}",
                model.format_version
            )));
        }
        let n = &model.network;
        if n.w1.len() != n.hidden_dim * n.input_dim
            || n.b1.len() != n.hidden_dim
            || n.w2.len() != n.output_dim * n.hidden_dim
            || n.b2.len() != n.output_dim
            || n.output_dim != model.head.outputs()
            || model.standardizer.dim() != n.input_dim
        {
            return Err(Error::InvalidInput("network shapes are inconsistent".into()));
        }
        Ok(model)
    }
}

fn check_rows(inputs: &[Vec<f64>]) -> Result<usize> {
    let dim = inputs
        .first()
        .map(Vec::len)
        .ok_or_else(|| Error::InvalidInput("no training examples".into()))?;
    if dim == 0 {
        return Err(Error::InvalidInput("training inputs have zero width".into()));
    }
    for row in inputs {
        if row.len() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                got: row.len(),
            });
        }
        if row.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("network training inputs".into()));
        }
    }
    Ok(dim)
}

/// Trains a softmax classifier over `label_set`. Every label must occur in
/// `labels`.
pub fn train_mlp(
    inputs: &[Vec<f64>],
    labels: &[CategoryLabel],
    label_set: &[CategoryLabel],
    config: &MlpConfig,
) -> Result<MlpModel> {
    if inputs.len() != labels.len() {
        return Err(Error::DimensionMismatch {
            expected: inputs.len(),
            got: labels.len(),
        });
    }
    let mut targets = Vec::with_capacity(labels.len());
    for label in labels {
        let c = label_set
            .iter()
            .position(|l| l == label)
            .ok_or_else(|| Error::InvalidInput(format!("label `{label}` is not in the label set")))?;
        targets.push(Target::Class(c));
    }
    for (c, label) in label_set.iter().enumerate() {
        if !targets.contains(&Target::Class(c)) {
            return Err(Error::MissingClass(label.to_string()));
        }
    }
    let head = Head::Softmax {
        labels: label_set.to_vec(),
    };
    train(inputs, &targets, head, config)
}

/// Trains the linear-output variant on real-valued targets.
pub fn train_mlp_regressor(inputs: &[Vec<f64>], targets: &[f64], config: &MlpConfig) -> Result<MlpModel> {
    if inputs.len() != targets.len() {
        return Err(Error::DimensionMismatch {
            expected: inputs.len(),
            got: targets.len(),
        });
    }
    if targets.iter().any(|t| !t.is_finite()) {
        return Err(Error::NonFinite("network regression targets".into()));
    }
    let targets: Vec<Target> = targets.iter().map(|&t| Target::Value(t)).collect();
    train(inputs, &targets, Head::Linear, config)
}

fn train(inputs: &[Vec<f64>], targets: &[Target], head: Head, config: &MlpConfig) -> Result<MlpModel> {
    config.validate()?;
    let dim = check_rows(inputs)?;
    let standardizer = Standardizer::fit(inputs)?;
    let x: Vec<Vec<f64>> = inputs.iter().map(|r| standardizer.transform(r)).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut network = Network::xavier(dim, config.hidden_dim, head.outputs(), &mut rng);

    let mut order: Vec<usize> = (0..x.len()).collect();
    let held_out = (config.validation_fraction * x.len() as f64).floor() as usize;
    let (mut train_idx, val_idx) = if held_out > 0 && held_out < x.len() {
        order.shuffle(&mut rng);
        let val = order.split_off(x.len() - held_out);
        (order, val)
    } else {
        (order, Vec::new())
    };
    let val_inputs: Vec<&[f64]> = val_idx.iter().map(|&i| x[i].as_slice()).collect();
    let val_targets: Vec<Target> = val_idx.iter().map(|&i| targets[i]).collect();
    let mut best: Option<(f64, Network)> = None;
    let mut stale = 0;

    let mut log = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        train_idx.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in train_idx.chunks(config.batch_size) {
            let bx: Vec<&[f64]> = batch.iter().map(|&i| x[i].as_slice()).collect();
            let bt: Vec<Target> = batch.iter().map(|&i| targets[i]).collect();
            let (loss, grad) = network.loss_and_gradient(&head, &bx, &bt, config.l2);
            if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::Divergence(format!("network loss became non-finite at epoch {epoch}")));
            }
            total += loss * batch.len() as f64;
            network.apply_step(&grad, config.learning_rate);
        }
        log.push(total / train_idx.len() as f64);

        if !val_idx.is_empty() {
            let val = network.loss(&head, &val_inputs, &val_targets, 0.0);
            if best.as_ref().is_none_or(|(b, _)| val < *b) {
                best = Some((val, network.clone()));
                stale = 0;
            } else {
                stale += 1;
                if stale >= config.patience {
                    break;
                }
            }
        }
    }
    if let Some((_, net)) = best {
        network = net;
    }
    Ok(MlpModel {
        format_version: MLP_FORMAT_VERSION,
        head,
        network,
        standardizer,
        config: config.clone(),
        training_log: log,
        seed: config.seed,
    })
}

/// Majority vote over per-window predictions. A tie between labels with the
/// same vote count goes to the tied label with the largest summed
/// probability, then to the lowest index. Reported probabilities are the
/// vote shares.
pub fn classify_bout_voting(model: &MlpModel, windows: &[WindowFeatures]) -> Result<ClassPrediction> {
    let rows: Vec<&[f64]> = windows.iter().map(|w| w.values.as_slice()).collect();
    vote(model, &rows)
}

pub fn vote(model: &MlpModel, rows: &[&[f64]]) -> Result<ClassPrediction> {
    let labels = model
        .labels()
        .ok_or_else(|| Error::InvalidInput("voting needs a classification model".into()))?;
    if rows.is_empty() {
        return Err(Error::InvalidInput("bout has no windows".into()));
    }
    let c = labels.len();
    let mut votes = vec![0usize; c];
    let mut summed = vec![0.0; c];
    for row in rows {
        let p = model.predict(row)?;
        votes[p.index] += 1;
        for (s, q) in summed.iter_mut().zip(&p.probabilities) {
            *s += q;
        }
    }
    let top = *votes.iter().max().expect("nonempty label set");
    let mut index = usize::MAX;
    for k in (0..c).filter(|&k| votes[k] == top) {
        if index == usize::MAX || summed[k] > summed[index] {
            index = k;
        }
    }
    let n = rows.len() as f64;
    Ok(ClassPrediction {
        label: labels[index].clone(),
        index,
        probabilities: votes.iter().map(|&v| v as f64 / n).collect(),
    })
}
