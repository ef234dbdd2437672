//! Few-shot generative classifier: per-class Monte-Carlo estimation of the
//! conditional noise-prediction error, turned into a Bayes posterior under
//! a uniform class prior.
//!
//! With shared pairs (the default) one set of (t, eps) draws is reused for
//! every candidate class, so per-class errors are paired estimates and
//! their differences have reduced variance.

use serde::{Deserialize, Serialize};

use crate::denoiser::{ConditionEmbedding, Denoiser};
use crate::error::{Error, Result};
use crate::prompt::ClassPrompt;
use crate::rng::{stream_rng, streams};
use crate::schedule::{add_noise, sample_pairs, NoiseSchedule, TimestepNoisePair};
use crate::tensor::Tensor;

/// Monte-Carlo estimation settings.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ClassifierConfig {
    /// Number of (t, eps) pairs per class estimate.
    pub n_mc: usize,
    /// Reuse one pair set across all candidate classes.
    pub shared_pairs: bool,
    pub seed: u64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            n_mc: 128,
            shared_pairs: true,
            seed: 0,
        }
    }
}

impl ClassifierConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_mc == 0 {
            return Err(Error::InvalidArgument("n_mc must be >= 1".into()));
        }
        Ok(())
    }
}

/// Squared errors per (candidate class, Monte-Carlo pair) with row means.
#[derive(Debug, Clone)]
pub struct ErrorMatrix {
    per_pair: Vec<Vec<f64>>,
    means: Vec<f64>,
}

impl ErrorMatrix {
    pub fn new(per_pair: Vec<Vec<f64>>) -> Result<Self> {
        if per_pair.is_empty() || per_pair[0].is_empty() {
            return Err(Error::InvalidArgument("error matrix needs at least one class and one pair".into()));
        }
        let width = per_pair[0].len();
        for row in &per_pair {
            if row.len() != width {
                return Err(Error::ShapeMismatch {
                    context: "error matrix rows",
                    expected: vec![width],
                    got: vec![row.len()],
                });
            }
            if row.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
                return Err(Error::InvalidArgument("error matrix entries must be finite and >= 0".into()));
            }
        }
        let means = per_pair
            .iter()
            .map(|row| row.iter().sum::<f64>() / row.len() as f64)
            .collect();
        Ok(Self { per_pair, means })
    }

    pub fn per_pair(&self) -> &[Vec<f64>] {
        &self.per_pair
    }

    pub fn means(&self) -> &[f64] {
        &self.means
    }
}

/// Classification outcome for one query.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClassifierReport {
    /// Candidate class ids in evaluation order.
    pub class_ids: Vec<usize>,
    /// Predicted class id (argmin of mean errors; ties to the lowest index).
    pub predicted: usize,
    /// Uniform-prior posterior over the candidates, in candidate order.
    pub posterior: Vec<f64>,
    /// Mean Monte-Carlo error per candidate.
    pub error_means: Vec<f64>,
    /// Seed the (t, eps) pairs were drawn from.
    pub pairs_seed: u64,
}

/// One JSON-lines row of a classification report.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QueryRecord {
    pub query_id: usize,
    /// Ground-truth label when known (folder labels or synthetic splits).
    pub true_label: Option<String>,
    pub predicted_label: String,
    pub class_names: Vec<String>,
    pub error_means: Vec<f64>,
    pub posterior: Vec<f64>,
    pub pairs_seed: u64,
}

impl QueryRecord {
    pub fn from_report(query_id: usize, true_label: Option<String>, class_names: &[String], report: &ClassifierReport) -> Self {
        Self {
            query_id,
            true_label,
            predicted_label: class_names[report
                .class_ids
                .iter()
                .position(|&id| id == report.predicted)
                .expect("predicted id comes from the candidate list")]
            .clone(),
            class_names: class_names.to_vec(),
            error_means: report.error_means.clone(),
            posterior: report.posterior.clone(),
            pairs_seed: report.pairs_seed,
        }
    }
}

/// Mean squared noise-prediction error of one candidate over the pairs.
pub fn class_error<D: Denoiser>(
    x: &Tensor,
    embedding: &ConditionEmbedding,
    pairs: &[TimestepNoisePair],
    model: &D,
    schedule: &NoiseSchedule,
) -> Result<f64> {
    if !model.is_frozen() {
        return Err(Error::NotFrozen("classification"));
    }
    if pairs.is_empty() {
        return Err(Error::InvalidArgument("class_error needs at least one pair".into()));
    }
    let mut acc = 0.0f64;
    for pair in pairs {
        acc += pair_error(x, embedding, pair, model, schedule)?;
    }
    Ok(acc / pairs.len() as f64)
}

fn pair_error<D: Denoiser>(
    x: &Tensor,
    embedding: &ConditionEmbedding,
    pair: &TimestepNoisePair,
    model: &D,
    schedule: &NoiseSchedule,
) -> Result<f64> {
    let noised = add_noise(x, &pair.eps, pair.t, schedule)?;
    let predicted = model.predict(&noised.xt, pair.t, embedding)?;
    crate::tensor::mse(&pair.eps, &predicted)
}

/// Uniform-prior posterior from per-class mean errors, in the numerically
/// stable relative form `p_i = 1 / sum_j exp(err_i - err_j)`. Adding any
/// constant to all errors leaves the result unchanged.
pub fn posterior(errors: &[f64]) -> Result<Vec<f64>> {
    if errors.is_empty() {
        return Err(Error::InvalidArgument("posterior needs at least one class".into()));
    }
    if errors.iter().any(|e| !e.is_finite()) {
        return Err(Error::NonFinite("posterior input errors".into()));
    }
    Ok(errors
        .iter()
        .map(|&e_i| {
            let denom: f64 = errors.iter().map(|&e_j| (e_i - e_j).exp()).sum();
            1.0 / denom
        })
        .collect())
}

/// Direct softmax-over-negated-errors route via a log-sum-exp; kept solely
/// to cross-check the relative form, which is the canonical path.
pub fn posterior_log_sum_exp(errors: &[f64]) -> Result<Vec<f64>> {
    if errors.is_empty() {
        return Err(Error::InvalidArgument("posterior needs at least one class".into()));
    }
    if errors.iter().any(|e| !e.is_finite()) {
        return Err(Error::NonFinite("posterior input errors".into()));
    }
    let max_neg = errors.iter().map(|&e| -e).fold(f64::NEG_INFINITY, f64::max);
    let lse = max_neg
        + errors
            .iter()
            .map(|&e| (-e - max_neg).exp())
            .sum::<f64>()
            .ln();
    Ok(errors.iter().map(|&e| (-e - lse).exp()).collect())
}

/// Index of the smallest mean error; ties break to the lowest index.
pub fn argmin_error(means: &[f64]) -> usize {
    let mut best = 0;
    for (i, &m) in means.iter().enumerate().skip(1) {
        if m < means[best] {
            best = i;
        }
    }
    best
}

/// Builds the error matrix for one query over all candidate prompts.
///
/// With `shared_pairs` one pair set serves every candidate; otherwise each
/// candidate draws its own pairs from a per-candidate stream.
pub fn error_matrix<D: Denoiser>(
    x: &Tensor,
    prompts: &[ClassPrompt],
    cfg: &ClassifierConfig,
    model: &D,
    schedule: &NoiseSchedule,
) -> Result<ErrorMatrix> {
    cfg.validate()?;
    if prompts.is_empty() {
        return Err(Error::InvalidArgument("classification needs at least one prompt".into()));
    }
    let dim = model.latent_dim();
    let mut rows = Vec::with_capacity(prompts.len());
    if cfg.shared_pairs {
        let mut rng = stream_rng(cfg.seed, streams::CLASSIFIER);
        let pairs = sample_pairs(cfg.n_mc, schedule.t_max(), dim, &mut rng)?;
        for prompt in prompts {
            let row = pairs
                .iter()
                .map(|pair| pair_error(x, &prompt.embedding, pair, model, schedule))
                .collect::<Result<Vec<f64>>>()?;
            rows.push(row);
        }
    } else {
        for (index, prompt) in prompts.iter().enumerate() {
            let mut rng = stream_rng(cfg.seed, streams::CLASSIFIER_INDEP_BASE + index as u64);
            let pairs = sample_pairs(cfg.n_mc, schedule.t_max(), dim, &mut rng)?;
            let row = pairs
                .iter()
                .map(|pair| pair_error(x, &prompt.embedding, pair, model, schedule))
                .collect::<Result<Vec<f64>>>()?;
            rows.push(row);
        }
    }
    ErrorMatrix::new(rows)
}

/// Classifies one latent against the candidate prompts.
pub fn classify<D: Denoiser>(
    x: &Tensor,
    prompts: &[ClassPrompt],
    cfg: &ClassifierConfig,
    model: &D,
    schedule: &NoiseSchedule,
) -> Result<ClassifierReport> {
    if !model.is_frozen() {
        return Err(Error::NotFrozen("classification"));
    }
    let matrix = error_matrix(x, prompts, cfg, model, schedule)?;
    let post = posterior(matrix.means())?;
    let predicted_index = argmin_error(matrix.means());
    Ok(ClassifierReport {
        class_ids: prompts.iter().map(|p| p.class_id).collect(),
        predicted: prompts[predicted_index].class_id,
        posterior: post,
        error_means: matrix.means().to_vec(),
        pairs_seed: cfg.seed,
    })
}
