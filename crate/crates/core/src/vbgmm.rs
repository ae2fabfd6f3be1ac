//! Variational Bayesian Gaussian mixture.
//!
//! The model places a symmetric Dirichlet prior on the mixing weights and a
//! Gaussian-Wishart prior on each component's mean and precision, and is fitted
//! by coordinate ascent: responsibilities given the variational posterior, then
//! the posterior given the responsibilities. Each pass cannot lower the
//! evidence lower bound (ELBO), which is recorded per iteration and checked.
//! With a small Dirichlet concentration, components that explain no data
//! collapse towards zero weight and are pruned once the fit converges, which
//! leaves the effective component count K.
//!
//! Fitting happens on z-scored features. The prior (`mean_prior`,
//! `wishart_scale_w0`) lives in that standardized space, while the reported
//! means and covariances are mapped back to the original feature space.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::{digamma, ln_gamma};

use crate::error::{Error, Result};
use crate::par::{self, Execution};

pub const MODEL_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixturePrior {
    /// Truncation level: number of components the fit starts with.
    pub k_max: usize,
    pub dirichlet_alpha0: f64,
    pub mean_prior: Vec<f64>,
    pub mean_scale_beta0: f64,
    pub wishart_dof_nu0: f64,
    /// Row-major `dim x dim`.
    pub wishart_scale_w0: Vec<f64>,
}

impl MixturePrior {
    /// `k_max = 20`, `alpha0 = 1e-3`, `beta0 = 1`, `nu0 = dim + 1`, `W0 = I`,
    /// prior mean at the origin of the standardized space.
    pub fn default_for(dim: usize) -> Self {
        let mut w0 = vec![0.0; dim * dim];
        for i in 0..dim {
            w0[i * dim + i] = 1.0;
        }
        MixturePrior {
            k_max: 20,
            dirichlet_alpha0: 1e-3,
            mean_prior: vec![0.0; dim],
            mean_scale_beta0: 1.0,
            wishart_dof_nu0: dim as f64 + 1.0,
            wishart_scale_w0: w0,
        }
    }

    pub fn with_k_max(mut self, k_max: usize) -> Self {
        self.k_max = k_max;
        self
    }

    pub fn dim(&self) -> usize {
        self.mean_prior.len()
    }

    pub fn validate(&self) -> Result<()> {
        let dim = self.dim();
        if dim == 0 {
            return Err(Error::config("mean_prior", "dimension must be positive"));
        }
        if self.k_max == 0 {
            return Err(Error::config("k_max", "must be at least 1"));
        }
        if !(self.dirichlet_alpha0.is_finite() && self.dirichlet_alpha0 > 0.0) {
            return Err(Error::config("dirichlet_alpha0", "must be positive"));
        }
        if !(self.mean_scale_beta0.is_finite() && self.mean_scale_beta0 > 0.0) {
            return Err(Error::config("mean_scale_beta0", "must be positive"));
        }
        if !(self.wishart_dof_nu0.is_finite() && self.wishart_dof_nu0 > dim as f64 - 1.0) {
            return Err(Error::config("wishart_dof_nu0", format!("must exceed dim - 1 = {}", dim - 1)));
        }
        if self.mean_prior.iter().any(|v| !v.is_finite()) {
            return Err(Error::config("mean_prior", "must be finite"));
        }
        if self.wishart_scale_w0.len() != dim * dim {
            return Err(Error::config("wishart_scale_w0", format!("must have {} entries", dim * dim)));
        }
        let w0 = DMatrix::from_row_slice(dim, dim, &self.wishart_scale_w0);
        if (&w0 - w0.transpose()).abs().max() > 1e-12 * w0.abs().max().max(1.0) || w0.cholesky().is_none() {
            return Err(Error::config("wishart_scale_w0", "must be symmetric positive definite"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitOptions {
    /// Convergence threshold on the relative ELBO change.
    pub tol: f64,
    pub max_iter: usize,
    pub seed: u64,
    /// Components whose expected weight falls below this are pruned.
    /// `None` means `1 / (10 N)`.
    pub weight_floor: Option<f64>,
    /// Minimum eigenvalue of every reported covariance.
    pub covariance_floor: f64,
    /// Largest ELBO decrease tolerated between iterations before the fit is
    /// declared inconsistent.
    pub elbo_slack: f64,
    /// After convergence, try emptying each surviving component in turn and
    /// keep the result whenever the ELBO goes up. Escapes the local optima
    /// where one true cluster is shared by several components.
    pub delete_moves: bool,
    /// Coordinate-ascent passes spent on each delete trial.
    pub delete_iterations: usize,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            tol: 1e-6,
            max_iter: 500,
            seed: 0,
            weight_floor: None,
            covariance_floor: 1e-6,
            elbo_slack: 1e-8,
            delete_moves: true,
            delete_iterations: 25,
        }
    }
}

impl FitOptions {
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }
}

/// Per-feature z-scoring fitted on training windows. Zero-variance features
/// keep a unit scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    pub fn fit(rows: &[Vec<f64>]) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        if dim == 0 {
            return Err(Error::InvalidInput("cannot standardize empty data".into()));
        }
        let n = rows.len() as f64;
        let mut mean = vec![0.0; dim];
        for row in rows {
            if row.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    got: row.len(),
                });
            }
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; dim];
        for row in rows {
            for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let std = var
            .into_iter()
            .map(|s| {
                let sd = (s / n).sqrt();
                if sd > 0.0 && sd.is_finite() {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
        Ok(Standardizer { mean, std })
    }

    pub fn identity(dim: usize) -> Self {
        Standardizer {
            mean: vec![0.0; dim],
            std: vec![1.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn transform(&self, row: &[f64]) -> Vec<f64> {
        row.iter()
            .zip(&self.mean)
            .zip(&self.std)
            .map(|((v, m), s)| (v - m) / s)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Responsibilities {
    pub gamma: Vec<f64>,
}

impl Responsibilities {
    /// Index of the largest responsibility, lowest index on ties.
    pub fn argmax(&self) -> usize {
        argmax_lowest(&self.gamma)
    }
}

/// Index of the maximum, preferring the lowest index among equal values.
pub fn argmax_lowest(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Cached Cholesky factor of one component covariance.
#[derive(Debug, Clone, PartialEq)]
struct GaussianCache {
    /// Row-major lower-triangular factor.
    chol: Vec<f64>,
    log_norm: f64,
}

impl GaussianCache {
    fn new(dim: usize, covariance: &[f64]) -> Result<Self> {
        let cov = DMatrix::from_row_slice(dim, dim, covariance);
        let chol = cov
            .cholesky()
            .ok_or_else(|| Error::Consistency("component covariance is not positive definite".into()))?;
        let l = chol.l();
        let log_det: f64 = (0..dim).map(|i| l[(i, i)].ln()).sum::<f64>() * 2.0;
        let mut flat = vec![0.0; dim * dim];
        for i in 0..dim {
            for j in 0..=i {
                flat[i * dim + j] = l[(i, j)];
            }
        }
        Ok(GaussianCache {
            chol: flat,
            log_norm: -0.5 * (dim as f64 * (2.0 * PI).ln() + log_det),
        })
    }

    fn log_pdf(&self, mean: &[f64], x: &[f64], scratch: &mut [f64]) -> f64 {
        let dim = mean.len();
        // forward substitution L z = x - mean
        let mut quad = 0.0;
        for i in 0..dim {
            let row = &self.chol[i * dim..i * dim + i + 1];
            let mut acc = x[i] - mean[i];
            for j in 0..i {
                acc -= row[j] * scratch[j];
            }
            let z = acc / row[i];
            scratch[i] = z;
            quad += z * z;
        }
        self.log_norm - 0.5 * quad
    }
}

/// The fitted mixture, reported in the original feature space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "MixtureModelFile", into = "MixtureModelFile")]
pub struct MixtureModel {
    weights: Vec<f64>,
    means: Vec<Vec<f64>>,
    covariances: Vec<Vec<f64>>,
    standardizer: Standardizer,
    elbo_trace: Vec<f64>,
    seed: u64,
    iterations: usize,
    converged: bool,
    cache: Vec<GaussianCache>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct MixtureModelFile {
    format_version: u32,
    k_effective: usize,
    dim: usize,
    weights: Vec<f64>,
    means: Vec<Vec<f64>>,
    /// Each covariance row-major.
    covariances: Vec<Vec<f64>>,
    standardizer: Standardizer,
    seed: u64,
    iterations: usize,
    converged: bool,
    elbo_trace: Vec<f64>,
}

impl From<MixtureModel> for MixtureModelFile {
    fn from(m: MixtureModel) -> Self {
        MixtureModelFile {
            format_version: MODEL_FORMAT_VERSION,
            k_effective: m.weights.len(),
            dim: m.dim(),
            weights: m.weights,
            means: m.means,
            covariances: m.covariances,
            standardizer: m.standardizer,
            seed: m.seed,
            iterations: m.iterations,
            converged: m.converged,
            elbo_trace: m.elbo_trace,
        }
    }
}

impl TryFrom<MixtureModelFile> for MixtureModel {
    type Error = Error;

    fn try_from(f: MixtureModelFile) -> Result<Self> {
        if f.format_version != MODEL_FORMAT_VERSION {
            return Err(Error::InvalidInput(format!(
                "unsupported mixture model format version {}",
                f.format_version
            )));
        }
        if f.k_effective != f.weights.len() || f.dim != f.standardizer.dim() {
            return Err(Error::InvalidInput("mixture model header does not match its contents".into()));
        }
        let mut model = MixtureModel::from_parts(f.weights, f.means, f.covariances, f.standardizer)?;
        model.elbo_trace = f.elbo_trace;
        model.seed = f.seed;
        model.iterations = f.iterations;
        model.converged = f.converged;
        Ok(model)
    }
}

impl MixtureModel {
    /// Builds a model from explicit parameters (covariances row-major). Weights
    /// are renormalized to sum to one.
    pub fn from_parts(
        weights: Vec<f64>,
        means: Vec<Vec<f64>>,
        covariances: Vec<Vec<f64>>,
        standardizer: Standardizer,
    ) -> Result<Self> {
        let k = weights.len();
        let dim = standardizer.dim();
        if k == 0 || means.len() != k || covariances.len() != k {
            return Err(Error::InvalidInput("mixture needs matching, nonempty weights/means/covariances".into()));
        }
        if weights.iter().any(|w| !(w.is_finite() && *w > 0.0)) {
            return Err(Error::InvalidInput("mixture weights must be positive".into()));
        }
        for (m, c) in means.iter().zip(&covariances) {
            if m.len() != dim {
                return Err(Error::DimensionMismatch { expected: dim, got: m.len() });
            }
            if c.len() != dim * dim {
                return Err(Error::DimensionMismatch { expected: dim * dim, got: c.len() });
            }
        }
        let total: f64 = weights.iter().sum();
        let weights = weights.into_iter().map(|w| w / total).collect();
        let cache = covariances
            .iter()
            .map(|c| GaussianCache::new(dim, c))
            .collect::<Result<Vec<_>>>()?;
        Ok(MixtureModel {
            weights,
            means,
            covariances,
            standardizer,
            elbo_trace: Vec::new(),
            seed: 0,
            iterations: 0,
            converged: false,
            cache,
        })
    }

    pub fn k_effective(&self) -> usize {
        self.weights.len()
    }

    pub fn dim(&self) -> usize {
        self.standardizer.dim()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn means(&self) -> &[Vec<f64>] {
        &self.means
    }

    /// Row-major covariance of each component.
    pub fn covariances(&self) -> &[Vec<f64>] {
        &self.covariances
    }

    pub fn standardizer(&self) -> &Standardizer {
        &self.standardizer
    }

    pub fn elbo_trace(&self) -> &[f64] {
        &self.elbo_trace
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn iterations(&self) -> usize {
        self.iterations
    }

    pub fn converged(&self) -> bool {
        self.converged
    }

    fn check_dim(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                got: x.len(),
            });
        }
        Ok(())
    }

    /// `ln pi_k + ln N(x | mu_k, Sigma_k)` for every component.
    pub fn log_scores(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_dim(x)?;
        let mut scratch = vec![0.0; self.dim()];
        Ok(self
            .cache
            .iter()
            .zip(&self.means)
            .zip(&self.weights)
            .map(|((c, m), w)| w.ln() + c.log_pdf(m, x, &mut scratch))
            .collect())
    }

    pub fn responsibilities(&self, x: &[f64]) -> Result<Responsibilities> {
        let scores = self.log_scores(x)?;
        let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let unnormalized: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
        let total: f64 = unnormalized.iter().sum();
        Ok(Responsibilities {
            gamma: unnormalized.into_iter().map(|e| e / total).collect(),
        })
    }

    /// Hard cluster index (0-based) of `x`: the component with the largest
    /// responsibility, lowest index on ties.
    pub fn assign(&self, x: &[f64]) -> Result<usize> {
        Ok(self.responsibilities(x)?.argmax())
    }

    pub fn log_density(&self, x: &[f64]) -> Result<f64> {
        Ok(log_sum_exp(&self.log_scores(x)?))
    }

    pub fn assign_rows(&self, rows: &[Vec<f64>], exec: Execution) -> Result<Vec<usize>> {
        par::try_map(exec, rows, |x| self.assign(x))
    }
}

// ---------------------------------------------------------------------------
// Fitting

/// Sufficient statistics of the current responsibilities.
struct Stats {
    nk: Vec<f64>,
    xbar: Vec<DVector<f64>>,
    /// Responsibility-weighted scatter divided by `nk`.
    cov: Vec<DMatrix<f64>>,
}

/// Variational posterior q(pi) q(mu, Lambda).
struct Posterior {
    alpha: Vec<f64>,
    beta: Vec<f64>,
    nu: Vec<f64>,
    mean: Vec<DVector<f64>>,
    /// Wishart scale matrix W_k.
    scale: Vec<DMatrix<f64>>,
    scale_inv: Vec<DMatrix<f64>>,
    ln_det_scale: Vec<f64>,
    /// Row-major upper factor U with W_k = U^T U.
    scale_upper: Vec<Vec<f64>>,
}

struct PriorMats {
    dim: usize,
    alpha0: f64,
    beta0: f64,
    nu0: f64,
    m0: DVector<f64>,
    w0_inv: DMatrix<f64>,
    ln_b0: f64,
}

const TINY: f64 = 1e-300;

fn ln_wishart_norm(ln_det_w: f64, nu: f64, dim: usize) -> f64 {
    let d = dim as f64;
    let mut ln_gamma_d = d * (d - 1.0) / 4.0 * PI.ln();
    for i in 1..=dim {
        ln_gamma_d += ln_gamma((nu + 1.0 - i as f64) / 2.0);
    }
    -0.5 * nu * ln_det_w - (0.5 * nu * d * 2f64.ln() + ln_gamma_d)
}

fn expected_ln_det_precision(ln_det_w: f64, nu: f64, dim: usize) -> f64 {
    let mut acc = dim as f64 * 2f64.ln() + ln_det_w;
    for i in 1..=dim {
        acc += digamma((nu + 1.0 - i as f64) / 2.0);
    }
    acc
}

fn ln_dirichlet_norm(alpha: &[f64]) -> f64 {
    ln_gamma(alpha.iter().sum()) - alpha.iter().map(|a| ln_gamma(*a)).sum::<f64>()
}

fn quad_form(m: &DMatrix<f64>, v: &DVector<f64>) -> f64 {
    (v.transpose() * m * v)[(0, 0)]
}

fn trace_product(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    a.component_mul(&b.transpose()).sum()
}

fn symmetrize(m: &mut DMatrix<f64>) {
    let t = m.transpose();
    *m += t;
    *m *= 0.5;
}

fn compute_stats(x: &[DVector<f64>], resp: &[f64], k: usize) -> Stats {
    let dim = x[0].len();
    let mut nk = vec![0.0; k];
    let mut sums = vec![DVector::zeros(dim); k];
    for (n, point) in x.iter().enumerate() {
        for c in 0..k {
            let r = resp[n * k + c];
            if r > 0.0 {
                nk[c] += r;
                sums[c].axpy(r, point, 1.0);
            }
        }
    }
    let xbar: Vec<DVector<f64>> = sums
        .into_iter()
        .zip(&nk)
        .map(|(s, &n)| if n > TINY { s / n } else { DVector::zeros(dim) })
        .collect();
    let mut cov = vec![DMatrix::zeros(dim, dim); k];
    let mut diff = DVector::zeros(dim);
    for (n, point) in x.iter().enumerate() {
        for c in 0..k {
            let r = resp[n * k + c];
            if r > 0.0 {
                diff.copy_from(point);
                diff -= &xbar[c];
                cov[c].ger(r, &diff, &diff, 1.0);
            }
        }
    }
    for (c, s) in cov.iter_mut().enumerate() {
        if nk[c] > TINY {
            *s /= nk[c];
        } else {
            s.fill(0.0);
        }
        symmetrize(s);
    }
    Stats { nk, xbar, cov }
}

fn update_posterior(prior: &PriorMats, stats: &Stats) -> Result<Posterior> {
    let k = stats.nk.len();
    let dim = prior.dim;
    let mut post = Posterior {
        alpha: Vec::with_capacity(k),
        beta: Vec::with_capacity(k),
        nu: Vec::with_capacity(k),
        mean: Vec::with_capacity(k),
        scale: Vec::with_capacity(k),
        scale_inv: Vec::with_capacity(k),
        ln_det_scale: Vec::with_capacity(k),
        scale_upper: Vec::with_capacity(k),
    };
    for c in 0..k {
        let nk = stats.nk[c];
        let beta = prior.beta0 + nk;
        let mean = (&prior.m0 * prior.beta0 + &stats.xbar[c] * nk) / beta;
        let offset = &stats.xbar[c] - &prior.m0;
        let mut scale_inv = &prior.w0_inv
            + &stats.cov[c] * nk
            + (&offset * offset.transpose()) * (prior.beta0 * nk / (prior.beta0 + nk));
        symmetrize(&mut scale_inv);
        let chol_inv = scale_inv
            .clone()
            .cholesky()
            .ok_or_else(|| Error::Consistency("posterior Wishart scale lost positive definiteness".into()))?;
        let ln_det_inv: f64 = (0..dim).map(|i| chol_inv.l()[(i, i)].ln()).sum::<f64>() * 2.0;
        let mut scale = chol_inv.inverse();
        symmetrize(&mut scale);
        let chol = scale
            .clone()
            .cholesky()
            .ok_or_else(|| Error::Consistency("posterior Wishart scale lost positive definiteness".into()))?;
        let l = chol.l();
        let mut upper = vec![0.0; dim * dim];
        for i in 0..dim {
            for j in i..dim {
                upper[i * dim + j] = l[(j, i)];
            }
        }
        post.alpha.push(prior.alpha0 + nk);
        post.beta.push(beta);
        post.nu.push(prior.nu0 + nk);
        post.mean.push(mean);
        post.scale.push(scale);
        post.scale_inv.push(scale_inv);
        post.ln_det_scale.push(-ln_det_inv);
        post.scale_upper.push(upper);
    }
    Ok(post)
}

struct Expectations {
    ln_pi: Vec<f64>,
    ln_lambda: Vec<f64>,
}

fn expectations(post: &Posterior, dim: usize) -> Expectations {
    let alpha_sum: f64 = post.alpha.iter().sum();
    let psi_sum = digamma(alpha_sum);
    Expectations {
        ln_pi: post.alpha.iter().map(|a| digamma(*a) - psi_sum).collect(),
        ln_lambda: post
            .ln_det_scale
            .iter()
            .zip(&post.nu)
            .map(|(ld, nu)| expected_ln_det_precision(*ld, *nu, dim))
            .collect(),
    }
}

/// Optimal q(Z) given the current posterior; returns row-major `N x K`.
/// Components flagged in `excluded` receive no responsibility.
fn e_step(x: &[DVector<f64>], post: &Posterior, exp: &Expectations, excluded: &[bool]) -> Vec<f64> {
    let k = post.alpha.len();
    let dim = x[0].len();
    let ln_2pi = (2.0 * PI).ln();
    let consts: Vec<f64> = (0..k)
        .map(|c| exp.ln_pi[c] + 0.5 * exp.ln_lambda[c] - 0.5 * dim as f64 * ln_2pi - 0.5 * dim as f64 / post.beta[c])
        .collect();
    let mut resp = vec![0.0; x.len() * k];
    let mut diff = vec![0.0; dim];
    for (n, point) in x.iter().enumerate() {
        let row = &mut resp[n * k..(n + 1) * k];
        for c in 0..k {
            if excluded[c] {
                row[c] = f64::NEG_INFINITY;
                continue;
            }
            for (d, (p, m)) in diff.iter_mut().zip(point.iter().zip(post.mean[c].iter())) {
                *d = p - m;
            }
            let upper = &post.scale_upper[c];
            let mut quad = 0.0;
            for i in 0..dim {
                let mut acc = 0.0;
                for j in i..dim {
                    acc += upper[i * dim + j] * diff[j];
                }
                quad += acc * acc;
            }
            row[c] = consts[c] - 0.5 * post.nu[c] * quad;
        }
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        for v in row.iter_mut() {
            *v /= total;
        }
    }
    resp
}

fn elbo(prior: &PriorMats, stats: &Stats, post: &Posterior, resp: &[f64]) -> f64 {
    let k = post.alpha.len();
    let dim = prior.dim;
    let d = dim as f64;
    let ln_2pi = (2.0 * PI).ln();
    let exp = expectations(post, dim);

    let mut ln_p_x = 0.0;
    let mut ln_p_z = 0.0;
    let mut ln_p_mu_lambda = 0.0;
    let mut ln_q_mu_lambda = 0.0;
    for c in 0..k {
        let nk = stats.nk[c];
        let w = &post.scale[c];
        let nu = post.nu[c];
        let beta = post.beta[c];
        let ln_lambda = exp.ln_lambda[c];

        let dx = &stats.xbar[c] - &post.mean[c];
        ln_p_x += 0.5
            * nk
            * (ln_lambda - d / beta - nu * trace_product(&stats.cov[c], w) - nu * quad_form(w, &dx) - d * ln_2pi);
        ln_p_z += nk * exp.ln_pi[c];

        let dm = &post.mean[c] - &prior.m0;
        ln_p_mu_lambda += 0.5
            * (d * (prior.beta0 / (2.0 * PI)).ln() + ln_lambda
                - d * prior.beta0 / beta
                - prior.beta0 * nu * quad_form(w, &dm))
            + 0.5 * (prior.nu0 - d - 1.0) * ln_lambda
            - 0.5 * nu * trace_product(&prior.w0_inv, w);

        let ln_b = ln_wishart_norm(post.ln_det_scale[c], nu, dim);
        let entropy = -ln_b - 0.5 * (nu - d - 1.0) * ln_lambda + 0.5 * nu * d;
        ln_q_mu_lambda += 0.5 * ln_lambda + 0.5 * d * (beta / (2.0 * PI)).ln() - 0.5 * d - entropy;
    }
    ln_p_mu_lambda += k as f64 * prior.ln_b0;

    let alpha0 = vec![prior.alpha0; k];
    let sum_ln_pi: f64 = exp.ln_pi.iter().sum();
    let ln_p_pi = ln_dirichlet_norm(&alpha0) + (prior.alpha0 - 1.0) * sum_ln_pi;
    let ln_q_pi = post
        .alpha
        .iter()
        .zip(&exp.ln_pi)
        .map(|(a, lp)| (a - 1.0) * lp)
        .sum::<f64>()
        + ln_dirichlet_norm(&post.alpha);
    let ln_q_z: f64 = resp.iter().filter(|r| **r > 0.0).map(|r| r * r.ln()).sum();

    ln_p_x + ln_p_z + ln_p_pi + ln_p_mu_lambda - ln_q_z - ln_q_pi - ln_q_mu_lambda
}

struct State {
    stats: Stats,
    post: Posterior,
    elbo: f64,
}

struct Fitter<'a> {
    x: &'a [DVector<f64>],
    prior: PriorMats,
    k: usize,
    options: &'a FitOptions,
}

impl Fitter<'_> {
    fn state(&self, resp: Vec<f64>) -> Result<State> {
        let stats = compute_stats(self.x, &resp, self.k);
        let post = update_posterior(&self.prior, &stats)?;
        let elbo = elbo(&self.prior, &stats, &post, &resp);
        if !elbo.is_finite() {
            return Err(Error::NonFinite("ELBO".into()));
        }
        Ok(State { stats, post, elbo })
    }

    /// One coordinate-ascent pass: responsibilities, then posterior.
    fn step(&self, state: &State, excluded: &[bool]) -> Result<State> {
        let exp = expectations(&state.post, self.prior.dim);
        self.state(e_step(self.x, &state.post, &exp, excluded))
    }

    fn expected_weight(&self, state: &State, c: usize) -> f64 {
        state.post.alpha[c] / state.post.alpha.iter().sum::<f64>()
    }

    /// Runs coordinate ascent until the relative ELBO change drops below
    /// `tol` or `max_iter` passes are spent, appending each ELBO to `trace`.
    fn ascend(&self, mut state: State, max_iter: usize, trace: &mut Vec<f64>) -> Result<(State, usize, bool)> {
        let no_exclusions = vec![false; self.k];
        for it in 1..=max_iter {
            let next = self.step(&state, &no_exclusions)?;
            if next.elbo < state.elbo - self.options.elbo_slack {
                return Err(Error::Consistency(format!(
                    "ELBO decreased from {} to {} at iteration {it}",
                    state.elbo, next.elbo
                )));
            }
            trace.push(next.elbo);
            let done = (next.elbo - state.elbo).abs() <= self.options.tol * next.elbo.abs();
            state = next;
            if done {
                return Ok((state, it, true));
            }
        }
        Ok((state, max_iter, false))
    }
}

/// k-means++ seeding followed by hard nearest-center responsibilities.
const LLOYD_ITERATIONS: usize = 20;

fn seed_responsibilities(x: &[DVector<f64>], k: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let n = x.len();
    let mut centers: Vec<usize> = vec![rng.random_range(0..n)];
    let mut dist: Vec<f64> = x.iter().map(|p| (p - &x[centers[0]]).norm_squared()).collect();
    while centers.len() < k {
        let total: f64 = dist.iter().sum();
        let next = if total > 0.0 {
            let target = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut chosen = n - 1;
            for (i, d) in dist.iter().enumerate() {
                acc += d;
                if acc > target && *d > 0.0 {
                    chosen = i;
                    break;
                }
            }
            chosen
        } else {
            rng.random_range(0..n)
        };
        centers.push(next);
        for (d, p) in dist.iter_mut().zip(x) {
            *d = d.min((p - &x[next]).norm_squared());
        }
    }
    let mut means: Vec<DVector<f64>> = centers.iter().map(|&c| x[c].clone()).collect();
    let nearest = |means: &[DVector<f64>], p: &DVector<f64>| {
        let scores: Vec<f64> = means.iter().map(|m| -(p - m).norm_squared()).collect();
        argmax_lowest(&scores)
    };
    let mut labels: Vec<usize> = x.iter().map(|p| nearest(&means, p)).collect();
    // Lloyd refinement; a center that loses all its points keeps its position
    for _ in 0..LLOYD_ITERATIONS {
        let mut sums = vec![DVector::zeros(x[0].len()); k];
        let mut counts = vec![0usize; k];
        for (p, &l) in x.iter().zip(&labels) {
            sums[l] += p;
            counts[l] += 1;
        }
        for ((m, s), &c) in means.iter_mut().zip(sums).zip(&counts) {
            if c > 0 {
                *m = s / c as f64;
            }
        }
        let next: Vec<usize> = x.iter().map(|p| nearest(&means, p)).collect();
        if next == labels {
            break;
        }
        labels = next;
    }
    let mut resp = vec![0.0; n * k];
    for (i, &l) in labels.iter().enumerate() {
        resp[i * k + l] = 1.0;
    }
    resp
}

/// Fits the mixture to `rows` (one feature vector per window).
pub fn fit(rows: &[Vec<f64>], prior: &MixturePrior, options: &FitOptions) -> Result<MixtureModel> {
    prior.validate()?;
    let dim = prior.dim();
    if rows.len() < prior.k_max {
        return Err(Error::InvalidInput(format!(
            "need at least k_max = {} rows, got {}",
            prior.k_max,
            rows.len()
        )));
    }
    for row in rows {
        if row.len() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                got: row.len(),
            });
        }
        if row.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("mixture training features".into()));
        }
    }
    if !(options.tol.is_finite() && options.tol >= 0.0) {
        return Err(Error::config("tol", "must be nonnegative"));
    }

    let standardizer = Standardizer::fit(rows)?;
    let x: Vec<DVector<f64>> = rows
        .iter()
        .map(|r| DVector::from_vec(standardizer.transform(r)))
        .collect();
    let n = x.len();
    let k = prior.k_max;

    let w0 = DMatrix::from_row_slice(dim, dim, &prior.wishart_scale_w0);
    let w0_chol = w0.clone().cholesky().expect("validated prior");
    let ln_det_w0 = (0..dim).map(|i| w0_chol.l()[(i, i)].ln()).sum::<f64>() * 2.0;
    let pm = PriorMats {
        dim,
        alpha0: prior.dirichlet_alpha0,
        beta0: prior.mean_scale_beta0,
        nu0: prior.wishart_dof_nu0,
        m0: DVector::from_column_slice(&prior.mean_prior),
        w0_inv: w0_chol.inverse(),
        ln_b0: ln_wishart_norm(ln_det_w0, prior.wishart_dof_nu0, dim),
    };

    let fitter = Fitter {
        x: &x,
        prior: pm,
        k,
        options,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
    let initial = fitter.state(seed_responsibilities(&x, k, &mut rng))?;
    let mut trace = vec![initial.elbo];
    let (mut state, mut iterations, mut converged) = fitter.ascend(initial, options.max_iter, &mut trace)?;

    if options.delete_moves {
        let floor = options.weight_floor.unwrap_or(1.0 / (10.0 * n as f64));
        let mut attempts = 0;
        let mut accepted = false;
        'moves: loop {
            let mut alive: Vec<usize> = (0..k).filter(|&c| fitter.expected_weight(&state, c) >= floor).collect();
            if alive.len() <= 1 {
                break;
            }
            alive.sort_by(|a, b| state.stats.nk[*a].total_cmp(&state.stats.nk[*b]));
            for j in alive {
                if attempts >= 4 * k {
                    break 'moves;
                }
                attempts += 1;
                let mut excluded = vec![false; k];
                excluded[j] = true;
                let candidate = fitter.step(&state, &excluded)?;
                let mut local = vec![candidate.elbo];
                let (candidate, its, _) = fitter.ascend(candidate, options.delete_iterations, &mut local)?;
                iterations += its + 1;
                if candidate.elbo > state.elbo {
                    log::trace!("deleted component {j}: ELBO {} -> {}", state.elbo, candidate.elbo);
                    trace.push(candidate.elbo);
                    state = candidate;
                    accepted = true;
                    continue 'moves;
                }
            }
            break;
        }
        if accepted {
            let (polished, its, conv) = fitter.ascend(state, options.max_iter, &mut trace)?;
            state = polished;
            iterations += its;
            converged = conv;
        }
    }
    let post = state.post;

    let alpha_sum: f64 = post.alpha.iter().sum();
    let expected_weights: Vec<f64> = post.alpha.iter().map(|a| a / alpha_sum).collect();
    let floor = options.weight_floor.unwrap_or(1.0 / (10.0 * n as f64));
    let mut keep: Vec<usize> = (0..k).filter(|&c| expected_weights[c] >= floor).collect();
    if keep.is_empty() {
        keep.push(argmax_lowest(&expected_weights));
    }

    let scales = DMatrix::from_diagonal(&DVector::from_column_slice(&standardizer.std));
    let mut weights = Vec::with_capacity(keep.len());
    let mut means = Vec::with_capacity(keep.len());
    let mut covariances = Vec::with_capacity(keep.len());
    for &c in &keep {
        weights.push(expected_weights[c]);
        means.push(
            post.mean[c]
                .iter()
                .zip(&standardizer.std)
                .zip(&standardizer.mean)
                .map(|((z, s), m)| z * s + m)
                .collect(),
        );
        // inverse of the expected precision nu_k W_k
        let cov_std = &post.scale_inv[c] / post.nu[c];
        let mut cov = &scales * cov_std * &scales;
        symmetrize(&mut cov);
        let eig = cov.symmetric_eigen();
        let floored = eig.eigenvalues.map(|v| v.max(options.covariance_floor));
        let mut cov = &eig.eigenvectors * DMatrix::from_diagonal(&floored) * eig.eigenvectors.transpose();
        symmetrize(&mut cov);
        covariances.push(cov.transpose().as_slice().to_vec());
    }

    let mut model = MixtureModel::from_parts(weights, means, covariances, standardizer)?;
    model.elbo_trace = trace;
    model.seed = options.seed;
    model.iterations = iterations;
    model.converged = converged;
    log::debug!(
        "mixture fit: n={n} k_max={k} k_effective={} iterations={iterations} converged={converged}",
        model.k_effective()
    );
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, Normal};

    fn blob(center: &[f64], std: f64, n: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
        let normal = Normal::new(0.0, std).unwrap();
        (0..n)
            .map(|_| center.iter().map(|c| c + normal.sample(rng)).collect())
            .collect()
    }

    fn two_component_1d(mu: [f64; 2], var: [f64; 2], w: [f64; 2]) -> MixtureModel {
        MixtureModel::from_parts(
            w.to_vec(),
            vec![vec![mu[0]], vec![mu[1]]],
            vec![vec![var[0]], vec![var[1]]],
            Standardizer::identity(1),
        )
        .unwrap()
    }

    #[test]
    fn single_tight_gaussian_gives_one_component() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let data = blob(&[2.0, -1.0], 0.05, 500, &mut rng);
        let prior = MixturePrior::default_for(2).with_k_max(10);
        let model = fit(&data, &prior, &FitOptions::default().with_seed(1)).unwrap();
        assert_eq!(model.k_effective(), 1);
        let sum: f64 = model.weights().iter().sum();
        assert!((sum - 1.0).abs() < 1e-9);
    }

    #[test]
    fn identical_points_collapse_without_singularity() {
        let data = vec![vec![4.0, 4.0, -1.0]; 100];
        let prior = MixturePrior::default_for(3).with_k_max(5);
        let model = fit(&data, &prior, &FitOptions::default()).unwrap();
        assert_eq!(model.k_effective(), 1);
        let cov = DMatrix::from_row_slice(3, 3, &model.covariances()[0]);
        let eig = cov.symmetric_eigen();
        assert!(eig.eigenvalues.iter().all(|v| *v >= 1e-6 * (1.0 - 1e-9)));
        assert_eq!(model.assign(&[4.0, 4.0, -1.0]).unwrap(), 0);
    }

    #[test]
    fn fit_is_deterministic_and_elbo_monotone() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut data = blob(&[0.0, 0.0], 1.0, 150, &mut rng);
        data.extend(blob(&[5.0, 1.0], 0.7, 150, &mut rng));
        let prior = MixturePrior::default_for(2).with_k_max(6);
        let a = fit(&data, &prior, &FitOptions::default().with_seed(5)).unwrap();
        let b = fit(&data, &prior, &FitOptions::default().with_seed(5)).unwrap();
        assert_eq!(a, b);
        for pair in a.elbo_trace().windows(2) {
            assert!(pair[1] >= pair[0] - 1e-8, "{pair:?}");
        }
    }

    #[test]
    fn fit_rejects_bad_input() {
        let prior = MixturePrior::default_for(2).with_k_max(3);
        assert!(fit(&vec![vec![0.0, 1.0]; 2], &prior, &FitOptions::default()).is_err());
        let mut data = vec![vec![0.0, 1.0]; 10];
        data[3][1] = f64::NAN;
        assert!(matches!(fit(&data, &prior, &FitOptions::default()), Err(Error::NonFinite(_))));
        assert!(fit(&vec![vec![0.0]; 10], &prior, &FitOptions::default()).is_err());
    }

    #[test]
    fn symmetric_point_splits_evenly() {
        let model = two_component_1d([-1.0, 1.0], [1.0, 1.0], [0.5, 0.5]);
        let r = model.responsibilities(&[0.0]).unwrap();
        assert_eq!(r.gamma, vec![0.5, 0.5]);
        assert_eq!(model.assign(&[0.0]).unwrap(), 0);
    }

    #[test]
    fn far_component_gets_no_responsibility() {
        let model = two_component_1d([0.0, 50.0], [1.0, 1.0], [0.5, 0.5]);
        let r = model.responsibilities(&[0.0]).unwrap();
        assert!(r.gamma[0] >= 1.0 - 1e-12);
    }

    #[test]
    fn standard_normal_log_density_at_zero() {
        let model = MixtureModel::from_parts(vec![1.0], vec![vec![0.0]], vec![vec![1.0]], Standardizer::identity(1))
            .unwrap();
        let ld = model.log_density(&[0.0]).unwrap();
        assert!((ld + 0.5 * (2.0 * PI).ln()).abs() < 1e-15);
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let model = two_component_1d([0.0, 1.0], [1.0, 1.0], [0.5, 0.5]);
        assert!(matches!(model.responsibilities(&[0.0, 1.0]), Err(Error::DimensionMismatch { .. })));
        assert!(model.assign(&[]).is_err());
        assert!(model.log_density(&[1.0, 2.0]).is_err());
    }

    #[test]
    fn extreme_inputs_stay_finite() {
        let model = two_component_1d([0.0, 3.0], [1e-6, 2.0], [0.3, 0.7]);
        for x in [-1e6, -1.0, 0.0, 1e6] {
            let r = model.responsibilities(&[x]).unwrap();
            assert!(r.gamma.iter().all(|g| g.is_finite()));
            assert!((r.gamma.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            assert!(model.log_density(&[x]).unwrap().is_finite());
        }
    }

    #[test]
    fn serde_round_trip_preserves_queries() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let data = blob(&[1.0, 2.0, 3.0], 0.5, 60, &mut rng);
        let model = fit(&data, &MixturePrior::default_for(3).with_k_max(4), &FitOptions::default()).unwrap();
        let json = serde_json::to_string(&model).unwrap();
        assert!(json.contains("\"format_version\":1"));
        let back: MixtureModel = serde_json::from_str(&json).unwrap();
        assert_eq!(back, model);
    }

    #[test]
    fn argmax_prefers_lowest_index() {
        assert_eq!(argmax_lowest(&[0.7, 0.3]), 0);
        assert_eq!(argmax_lowest(&[0.5, 0.5]), 0);
        assert_eq!(argmax_lowest(&[0.1, 0.45, 0.45]), 1);
    }
}
