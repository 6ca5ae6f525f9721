//! Residual adaptation of the topology posterior against a bound-induced
//! surrogate, plus the transfer-complexity statistic and the bound itself.
//!
//! The posterior's scores are the prior center's scores plus a learnable
//! residual. Training minimizes the Monte Carlo task risk plus a KL pull
//! toward the prior and an L1 pull toward sparse residual edits. The risk
//! term is differentiated with the straight-through estimator through the
//! relaxed sampler; the KL term and a smoothed L1 have exact gradients.

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{FeasibilityMask, WeightedTopology};
use crate::posterior::{
    distribution_from_scores, kl_divergence, logistic, sample_relaxed, EdgePosterior, EdgeScores,
    RelaxationConfig,
};

/// Probability clamp applied before mapping a prior center into score space.
pub const PROB_CLAMP: f64 = 1e-4;

/// Smoothing constant inside `sqrt(r^2 + L1_SMOOTHING)`.
pub const L1_SMOOTHING: f64 = 1e-8;

/// How a `[0,1]` prior center combines with the residual.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ScoreSpace {
    /// Scores are `logit(clamp(center))`; the prior's edge probabilities
    /// reproduce the center.
    #[default]
    Logit,
    /// Scores are the raw center values; a center near one is only a mildly
    /// positive logit.
    Probability,
}

/// Residual-training configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lambda_kl: f64,
    pub lambda_r: f64,
    pub learning_rate: f64,
    pub steps: usize,
    pub relaxation: RelaxationConfig,
    pub score_space: ScoreSpace,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda_kl: 0.1,
            lambda_r: 0.01,
            learning_rate: 0.05,
            steps: 300,
            relaxation: RelaxationConfig::default(),
            score_space: ScoreSpace::Logit,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lambda_kl < 0.0 || self.lambda_r < 0.0 {
            return Err(Error::config("train.lambda", "weights must be >= 0".to_string()));
        }
        if self.learning_rate <= 0.0 {
            return Err(Error::config("train.learning_rate", "must be > 0".to_string()));
        }
        self.relaxation.validate()
    }
}

/// Constants entering the transfer bound and the consolidation gates.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TransferParams {
    pub c_a: f64,
    pub c_sigma: f64,
    pub tau_u: f64,
    pub tau_kappa: f64,
    pub delta: f64,
}

impl Default for TransferParams {
    fn default() -> Self {
        TransferParams {
            c_a: 0.1,
            c_sigma: 0.1,
            tau_u: 0.5,
            tau_kappa: 1.0,
            delta: 0.05,
        }
    }
}

impl TransferParams {
    pub fn validate(&self) -> Result<()> {
        if self.c_a < 0.0 || self.c_sigma < 0.0 {
            return Err(Error::config("transfer.c", "constants must be >= 0".to_string()));
        }
        if !(0.0..=1.0).contains(&self.tau_u) {
            return Err(Error::config("transfer.tau_u", "must lie in [0,1]".to_string()));
        }
        if self.tau_kappa < 0.0 {
            return Err(Error::config("transfer.tau_kappa", "must be >= 0".to_string()));
        }
        if !(0.0 < self.delta && self.delta < 1.0) {
            return Err(Error::config("transfer.delta", "must lie in (0,1)".to_string()));
        }
        Ok(())
    }
}

/// The few-shot examples available at one stage.
#[derive(Debug, Clone)]
pub struct SupportSet<X> {
    pub examples: Vec<X>,
}

impl<X> SupportSet<X> {
    pub fn new(examples: Vec<X>) -> Result<Self> {
        if examples.is_empty() {
            return Err(Error::EmptySupport);
        }
        Ok(Self { examples })
    }

    pub fn size(&self) -> usize {
        self.examples.len()
    }
}

/// Scores a hard topology on one task example with a loss in `[0,1]`.
///
/// `loss_grad_at` supplies the edge-wise derivative the straight-through
/// estimator propagates; the default is the per-edge flip difference, which
/// is defined for any black-box loss. Oracles with a natural continuous
/// extension should override `loss_soft` (and may override the gradient).
pub trait UtilityOracle {
    type Example;

    fn loss(&self, topology: &Array2<u8>, example: &Self::Example) -> f64;

    /// Loss of a relaxed topology with entries in `[0,1]`. Defaults to
    /// thresholding at one half.
    fn loss_soft(&self, weights: &Array2<f64>, example: &Self::Example) -> f64 {
        let hard = weights.mapv(|w| (w > 0.5) as u8);
        self.loss(&hard, example)
    }

    /// Derivative of the loss with respect to each feasible edge, evaluated
    /// at a hard topology. Default: the flip difference
    /// `loss(B with edge on) - loss(B with edge off)`.
    fn loss_grad_at(
        &self,
        topology: &Array2<u8>,
        mask: &FeasibilityMask,
        example: &Self::Example,
    ) -> Array2<f64> {
        let n = topology.nrows();
        let mut grad = Array2::zeros((n, n));
        let mut work = topology.clone();
        for (i, j) in mask.feasible_edges() {
            let orig = work[[i, j]];
            work[[i, j]] = 1;
            let on = self.loss(&work, example);
            work[[i, j]] = 0;
            let off = self.loss(&work, example);
            work[[i, j]] = orig;
            grad[[i, j]] = on - off;
        }
        grad
    }
}

/// Map a prior center into score space so the residual can be added.
pub fn prior_scores(center: &WeightedTopology, space: ScoreSpace) -> EdgeScores {
    let n = center.n();
    let scores = Array2::from_shape_fn((n, n), |(i, j)| {
        if !center.mask.is_allowed(i, j) {
            return 0.0;
        }
        match space {
            ScoreSpace::Logit => {
                let w = center.weights[[i, j]].clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
                (w / (1.0 - w)).ln()
            }
            ScoreSpace::Probability => center.weights[[i, j]],
        }
    });
    EdgeScores {
        scores,
        mask: center.mask.clone(),
    }
}

fn check_residual(residual: &Array2<f64>, mask: &FeasibilityMask) -> Result<()> {
    let n = mask.n();
    if residual.nrows() != n || residual.ncols() != n {
        return Err(Error::dim(format!(
            "residual {}x{} does not match mask size {n}",
            residual.nrows(),
            residual.ncols()
        )));
    }
    for i in 0..n {
        for j in 0..n {
            if !mask.is_allowed(i, j) && residual[[i, j]] != 0.0 {
                return Err(Error::ResidualOnMasked(i, j));
            }
        }
    }
    Ok(())
}

fn checked_loss<O: UtilityOracle>(oracle: &O, topology: &Array2<u8>, example: &O::Example) -> Result<f64> {
    let l = oracle.loss(topology, example);
    if !(0.0..=1.0).contains(&l) {
        return Err(Error::OracleContract(l));
    }
    Ok(l)
}

/// Monte Carlo estimate of the expected loss under the posterior: hard
/// samples from the relaxed sampler averaged over the support set.
pub fn empirical_risk<O: UtilityOracle, R: Rng>(
    scores: &EdgeScores,
    support: &SupportSet<O::Example>,
    oracle: &O,
    relaxation: &RelaxationConfig,
    rng: &mut R,
) -> Result<f64> {
    relaxation.validate()?;
    if support.examples.is_empty() {
        return Err(Error::EmptySupport);
    }
    let mut acc = 0.0;
    for _ in 0..relaxation.mc_samples {
        let (_, hard) = sample_relaxed(scores, relaxation, rng);
        for example in &support.examples {
            acc += checked_loss(oracle, &hard, example)?;
        }
    }
    Ok(acc / (relaxation.mc_samples * support.size()) as f64)
}

/// Full surrogate value at a given residual: empirical risk of the posterior
/// plus `lambda_kl * KL(q || p)` plus `lambda_r * |R|_1` over feasible
/// entries (true absolute values, not the smoothed form).
pub fn training_loss<O: UtilityOracle, R: Rng>(
    residual: &Array2<f64>,
    prior_center: &WeightedTopology,
    support: &SupportSet<O::Example>,
    oracle: &O,
    config: &TrainConfig,
    rng: &mut R,
) -> Result<f64> {
    config.validate()?;
    check_residual(residual, &prior_center.mask)?;
    let p_scores = prior_scores(prior_center, config.score_space);
    let q_scores = EdgeScores {
        scores: &p_scores.scores + residual,
        mask: p_scores.mask.clone(),
    };
    let risk = empirical_risk(&q_scores, support, oracle, &config.relaxation, rng)?;
    let q = distribution_from_scores(&q_scores)?;
    let p = distribution_from_scores(&p_scores)?;
    let kl = kl_divergence(&q, &p)?;
    let l1: f64 = prior_center
        .mask
        .feasible_edges()
        .into_iter()
        .map(|(i, j)| residual[[i, j]].abs())
        .sum();
    Ok(risk + config.lambda_kl * kl + config.lambda_r * l1)
}

/// Value and gradient of the differentiable regularizer
/// `lambda_kl * KL(q || p) + lambda_r * sum sqrt(r^2 + eps)`.
///
/// The KL gradient is exact: with `q = logistic(z_p + r)` the derivative per
/// edge is `r * q * (1 - q)`.
pub fn regularizer_value_grad(
    residual: &Array2<f64>,
    p_scores: &EdgeScores,
    lambda_kl: f64,
    lambda_r: f64,
) -> (f64, Array2<f64>) {
    let n = p_scores.n();
    let mut value = 0.0;
    let mut grad = Array2::zeros((n, n));
    for (i, j) in p_scores.mask.feasible_edges() {
        let r = residual[[i, j]];
        let zp = p_scores.scores[[i, j]];
        let q = logistic(zp + r);
        let p = logistic(zp);
        let mut kl = 0.0;
        if q > 0.0 {
            kl += q * (q / p).ln();
        }
        if q < 1.0 {
            kl += (1.0 - q) * ((1.0 - q) / (1.0 - p)).ln();
        }
        let smooth = (r * r + L1_SMOOTHING).sqrt();
        value += lambda_kl * kl + lambda_r * smooth;
        grad[[i, j]] = lambda_kl * r * q * (1.0 - q) + lambda_r * r / smooth;
    }
    (value, grad)
}

/// Straight-through gradient of the Monte Carlo risk for one batch of
/// samples, together with the risk value. Gradients flow through the soft
/// sample: each feasible edge receives
/// `dloss/dB * soft * (1 - soft) / temperature`.
fn risk_value_grad<O: UtilityOracle, R: Rng>(
    q_scores: &EdgeScores,
    support: &SupportSet<O::Example>,
    oracle: &O,
    relaxation: &RelaxationConfig,
    rng: &mut R,
) -> Result<(f64, Array2<f64>)> {
    let n = q_scores.n();
    let mut risk = 0.0;
    let mut grad = Array2::zeros((n, n));
    let edges = q_scores.mask.feasible_edges();
    for _ in 0..relaxation.mc_samples {
        let (soft, hard) = sample_relaxed(q_scores, relaxation, rng);
        for example in &support.examples {
            risk += checked_loss(oracle, &hard, example)?;
            let g = oracle.loss_grad_at(&hard, &q_scores.mask, example);
            for &(i, j) in &edges {
                let s = soft[[i, j]];
                grad[[i, j]] += g[[i, j]] * s * (1.0 - s) / relaxation.temperature;
            }
        }
    }
    let scale = (relaxation.mc_samples * support.size()) as f64;
    risk /= scale;
    grad.mapv_inplace(|v| v / scale);
    Ok((risk, grad))
}

/// Gradient descent on the residual from zero initialization. Returns the
/// final residual and the per-step surrogate value (risk plus true-KL plus
/// true-L1, before that step's update). Fresh sampling noise is drawn every
/// step. Masked entries stay exactly zero.
pub fn train_residual<O: UtilityOracle, R: Rng>(
    prior_center: &WeightedTopology,
    support: &SupportSet<O::Example>,
    oracle: &O,
    config: &TrainConfig,
    rng: &mut R,
) -> Result<(Array2<f64>, Vec<f64>)> {
    config.validate()?;
    let p_scores = prior_scores(prior_center, config.score_space);
    let p_dist = distribution_from_scores(&p_scores)?;
    let n = prior_center.n();
    let edges = prior_center.mask.feasible_edges();
    let mut residual = Array2::<f64>::zeros((n, n));
    let mut trace = Vec::with_capacity(config.steps);

    for step in 0..config.steps {
        let q_scores = EdgeScores {
            scores: &p_scores.scores + &residual,
            mask: p_scores.mask.clone(),
        };
        let (risk, risk_grad) = risk_value_grad(&q_scores, support, oracle, &config.relaxation, rng)?;
        let (_, reg_grad) =
            regularizer_value_grad(&residual, &p_scores, config.lambda_kl, config.lambda_r);
        let q_dist = distribution_from_scores(&q_scores)?;
        let kl = kl_divergence(&q_dist, &p_dist)?;
        let l1: f64 = edges.iter().map(|&(i, j)| residual[[i, j]].abs()).sum();
        let loss = risk + config.lambda_kl * kl + config.lambda_r * l1;
        if !loss.is_finite() {
            return Err(Error::Divergence(step));
        }
        trace.push(loss);
        for &(i, j) in &edges {
            residual[[i, j]] -= config.learning_rate * (risk_grad[[i, j]] + reg_grad[[i, j]]);
        }
    }
    Ok((residual, trace))
}

/// Transfer complexity `KL(q || p) + c_A * A + c_sigma * sigma` used for
/// memory gating.
pub fn transfer_complexity(
    q: &EdgePosterior,
    p: &EdgePosterior,
    alignment_cost: f64,
    dispersion: f64,
    params: &TransferParams,
) -> Result<f64> {
    let kl = kl_divergence(q, p)?;
    Ok(kl + params.c_a * alignment_cost + params.c_sigma * dispersion)
}

/// Right-hand side of the transfer bound:
/// `risk + sqrt((KL + ln(2 M sqrt(s) / delta)) / (2 s)) + c_A A + c_sigma sigma`.
pub fn pac_bayes_bound(
    empirical_risk: f64,
    q: &EdgePosterior,
    p: &EdgePosterior,
    s_t: usize,
    bank_size: usize,
    alignment_cost: f64,
    dispersion: f64,
    params: &TransferParams,
) -> Result<f64> {
    params.validate()?;
    if s_t == 0 {
        return Err(Error::config("s_t", "support size must be >= 1".to_string()));
    }
    if bank_size == 0 {
        return Err(Error::config("bank_size", "must be >= 1".to_string()));
    }
    let kl = kl_divergence(q, p)?;
    let s = s_t as f64;
    let log_term = (2.0 * bank_size as f64 * s.sqrt() / params.delta).ln();
    Ok(empirical_risk
        + ((kl + log_term) / (2.0 * s)).sqrt()
        + params.c_a * alignment_cost
        + params.c_sigma * dispersion)
}
