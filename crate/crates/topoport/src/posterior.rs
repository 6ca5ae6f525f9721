//! Edge-factorized stochastic topologies.
//!
//! A score matrix under a feasibility mask induces a Gibbs distribution over
//! feasible graphs weighted by `exp(<Z, B>)`. Because the score couples to
//! the adjacency through an inner product and feasibility is edge-wise, the
//! distribution factorizes into independent Bernoulli edges with parameter
//! `logistic(Z[i,j])`; the enumeration form survives only as a test oracle.
//! This gives closed-form KL divergence, an exact argmax (the positive-score
//! edge set), and cheap relaxed sampling via the straight-through
//! Gumbel-Sigmoid estimator.

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{FeasibilityMask, WeightedTopology};

/// A masked edge-score matrix. Entries on forbidden positions are ignored by
/// every operation.
#[derive(Debug, Clone)]
pub struct EdgeScores {
    pub scores: Array2<f64>,
    pub mask: FeasibilityMask,
}

impl EdgeScores {
    pub fn new(scores: Array2<f64>, mask: FeasibilityMask) -> Result<Self> {
        if scores.nrows() != mask.n() || scores.ncols() != mask.n() {
            return Err(Error::dim(format!(
                "scores {}x{} do not match mask size {}",
                scores.nrows(),
                scores.ncols(),
                mask.n()
            )));
        }
        Ok(Self { scores, mask })
    }

    pub fn n(&self) -> usize {
        self.scores.nrows()
    }
}

/// Edge-factorized Bernoulli distribution over feasible graphs.
#[derive(Debug, Clone, PartialEq)]
pub struct EdgePosterior {
    pub edge_probs: Array2<f64>,
    pub mask: FeasibilityMask,
}

/// Gumbel-Sigmoid relaxation parameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct RelaxationConfig {
    pub temperature: f64,
    pub mc_samples: usize,
    pub seed: u64,
}

impl Default for RelaxationConfig {
    fn default() -> Self {
        RelaxationConfig {
            temperature: 0.5,
            mc_samples: 8,
            seed: 0,
        }
    }
}

impl RelaxationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.temperature <= 0.0 {
            return Err(Error::config(
                "relaxation.temperature",
                "must be > 0".to_string(),
            ));
        }
        if self.mc_samples == 0 {
            return Err(Error::config(
                "relaxation.mc_samples",
                "must be positive".to_string(),
            ));
        }
        Ok(())
    }
}

#[inline]
pub(crate) fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Bernoulli parameters induced by the scores: `logistic(score)` on feasible
/// entries, exactly zero elsewhere. Errors on a non-finite feasible score.
pub fn distribution_from_scores(scores: &EdgeScores) -> Result<EdgePosterior> {
    let n = scores.n();
    let mut probs = Array2::zeros((n, n));
    for i in 0..n {
        for j in 0..n {
            if scores.mask.is_allowed(i, j) {
                let z = scores.scores[[i, j]];
                if !z.is_finite() {
                    return Err(Error::NonFiniteScore(i, j));
                }
                probs[[i, j]] = logistic(z);
            }
        }
    }
    Ok(EdgePosterior {
        edge_probs: probs,
        mask: scores.mask.clone(),
    })
}

/// KL divergence between two edge-factorized distributions sharing a mask:
/// the sum of per-edge Bernoulli divergences.
pub fn kl_divergence(q: &EdgePosterior, p: &EdgePosterior) -> Result<f64> {
    if q.mask != p.mask {
        return Err(Error::MaskMismatch);
    }
    let n = q.mask.n();
    let mut total = 0.0;
    for i in 0..n {
        for j in 0..n {
            if q.mask.is_allowed(i, j) {
                total += bernoulli_kl(q.edge_probs[[i, j]], p.edge_probs[[i, j]]);
            }
        }
    }
    Ok(total.max(0.0))
}

#[inline]
fn bernoulli_kl(q: f64, p: f64) -> f64 {
    let mut kl = 0.0;
    if q > 0.0 {
        kl += q * (q / p).ln();
    }
    if q < 1.0 {
        kl += (1.0 - q) * ((1.0 - q) / (1.0 - p)).ln();
    }
    kl
}

/// One relaxed draw: per feasible edge, logistic noise is added to the score
/// and squashed at the given temperature; the hard sample thresholds the
/// soft value at one half. Masked edges stay at zero in both outputs.
///
/// Straight-through contract: forward computation may use the hard sample
/// while gradients flow through the soft one.
pub fn sample_relaxed<R: Rng>(
    scores: &EdgeScores,
    config: &RelaxationConfig,
    rng: &mut R,
) -> (Array2<f64>, Array2<u8>) {
    let n = scores.n();
    let mut soft = Array2::zeros((n, n));
    let mut hard = Array2::zeros((n, n));
    for i in 0..n {
        for j in 0..n {
            if scores.mask.is_allowed(i, j) {
                let u: f64 = rng.random::<f64>().clamp(1e-15, 1.0 - 1e-15);
                // Difference of two Gumbels is logistic noise.
                let noise = u.ln() - (1.0 - u).ln();
                let s = logistic((scores.scores[[i, j]] + noise) / config.temperature);
                soft[[i, j]] = s;
                hard[[i, j]] = (s > 0.5) as u8;
            }
        }
    }
    (soft, hard)
}

/// The exact argmax of the edge-factorized distribution: include an edge iff
/// its score is strictly positive. A score of exactly zero resolves to
/// exclusion.
pub fn execution_topology(scores: &EdgeScores) -> Array2<u8> {
    let n = scores.n();
    Array2::from_shape_fn((n, n), |(i, j)| {
        (scores.mask.is_allowed(i, j) && scores.scores[[i, j]] > 0.0) as u8
    })
}

/// Expected adjacency under the edge-factorized distribution; equal to the
/// Bernoulli parameters.
pub fn posterior_mean(scores: &EdgeScores) -> Result<WeightedTopology> {
    let dist = distribution_from_scores(scores)?;
    WeightedTopology::new(dist.edge_probs, dist.mask)
}

#[cfg(test)]
pub(crate) mod enumeration {
    //! Exact graph-level distribution by enumerating the feasible space.

    use super::*;

    /// All feasible graphs with their normalized Gibbs probabilities
    /// `exp(<Z, B>) / sum exp(<Z, B'>)`.
    pub fn gibbs_distribution(scores: &EdgeScores) -> Vec<(Array2<u8>, f64)> {
        let edges = scores.mask.feasible_edges();
        let n = scores.n();
        let mut graphs = Vec::with_capacity(1 << edges.len());
        let mut weights = Vec::with_capacity(1 << edges.len());
        for bits in 0u64..(1 << edges.len()) {
            let mut b = Array2::<u8>::zeros((n, n));
            let mut inner = 0.0;
            for (k, &(i, j)) in edges.iter().enumerate() {
                if bits >> k & 1 == 1 {
                    b[[i, j]] = 1;
                    inner += scores.scores[[i, j]];
                }
            }
            graphs.push(b);
            weights.push(inner.exp());
        }
        let z: f64 = weights.iter().sum();
        graphs
            .into_iter()
            .zip(weights)
            .map(|(g, w)| (g, w / z))
            .collect()
    }

    /// Probability of one graph under the edge-factorized form.
    pub fn factorized_prob(posterior: &EdgePosterior, graph: &Array2<u8>) -> f64 {
        let mut p = 1.0;
        for (i, j) in posterior.mask.feasible_edges() {
            let q = posterior.edge_probs[[i, j]];
            p *= if graph[[i, j]] == 1 { q } else { 1.0 - q };
        }
        p
    }
}
