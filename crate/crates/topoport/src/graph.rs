//! Attributed directed topologies, feasibility masks, and structural metrics.
//!
//! A communication topology is a directed graph over agents. Every graph in
//! this crate carries a [`FeasibilityMask`] that says which directed edges are
//! permitted at all; self-loops are never permitted. Binary graphs
//! ([`AttributedTopology`]) pair the adjacency with per-agent attribute
//! vectors and a node measure used for transport alignment. Weighted graphs
//! ([`WeightedTopology`]) hold edge strengths in `[0,1]` and are used for
//! scaffolds, projected prior centers, and posterior means.

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance for checking that a node measure sums to one.
pub const MEASURE_TOL: f64 = 1e-9;

/// Which directed edges are permitted. Entry `(i, j)` is `true` iff the edge
/// `i -> j` may exist. The diagonal is always forbidden.
#[derive(Debug, Clone, PartialEq)]
pub struct FeasibilityMask {
    allowed: Array2<bool>,
}

impl FeasibilityMask {
    /// Build a mask from an explicit boolean matrix.
    ///
    /// Fails if the matrix is not square, permits a self-loop, or (for
    /// `n >= 2`) permits no edge at all.
    pub fn new(allowed: Array2<bool>) -> Result<Self> {
        let n = allowed.nrows();
        if allowed.ncols() != n {
            return Err(Error::dim(format!(
                "mask must be square, got {}x{}",
                n,
                allowed.ncols()
            )));
        }
        for i in 0..n {
            if allowed[[i, i]] {
                return Err(Error::SelfLoop(i));
            }
        }
        if n >= 2 && !allowed.iter().any(|&a| a) {
            return Err(Error::EmptyMask);
        }
        Ok(Self { allowed })
    }

    /// The mask permitting every off-diagonal edge.
    pub fn full(n: usize) -> Self {
        let allowed = Array2::from_shape_fn((n, n), |(i, j)| i != j);
        Self { allowed }
    }

    pub fn n(&self) -> usize {
        self.allowed.nrows()
    }

    #[inline]
    pub fn is_allowed(&self, i: usize, j: usize) -> bool {
        self.allowed[[i, j]]
    }

    /// Number of permitted edges.
    pub fn feasible_count(&self) -> usize {
        self.allowed.iter().filter(|&&a| a).count()
    }

    /// Permitted edge positions in row-major order.
    pub fn feasible_edges(&self) -> Vec<(usize, usize)> {
        let n = self.n();
        let mut out = Vec::new();
        for i in 0..n {
            for j in 0..n {
                if self.allowed[[i, j]] {
                    out.push((i, j));
                }
            }
        }
        out
    }

    pub fn as_matrix(&self) -> &Array2<bool> {
        &self.allowed
    }
}

/// A task-side attributed directed graph: binary adjacency, per-agent
/// attribute rows, and a probability measure over agents.
#[derive(Debug, Clone, PartialEq)]
pub struct AttributedTopology {
    pub adjacency: Array2<u8>,
    pub attributes: Array2<f64>,
    pub node_measure: Array1<f64>,
    pub mask: FeasibilityMask,
}

impl AttributedTopology {
    pub fn n(&self) -> usize {
        self.adjacency.nrows()
    }

    pub fn attr_dim(&self) -> usize {
        self.attributes.ncols()
    }
}

/// A `[0,1]`-weighted directed graph under a feasibility mask. Weights on
/// forbidden entries are exactly zero.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightedTopology {
    pub weights: Array2<f64>,
    pub mask: FeasibilityMask,
}

impl WeightedTopology {
    /// Build a weighted topology, zeroing forbidden entries and validating
    /// that every weight lies in `[0,1]`.
    pub fn new(mut weights: Array2<f64>, mask: FeasibilityMask) -> Result<Self> {
        let n = mask.n();
        if weights.nrows() != n || weights.ncols() != n {
            return Err(Error::dim(format!(
                "weights {}x{} do not match mask size {}",
                weights.nrows(),
                weights.ncols(),
                n
            )));
        }
        for i in 0..n {
            for j in 0..n {
                if !mask.is_allowed(i, j) {
                    weights[[i, j]] = 0.0;
                } else {
                    let w = weights[[i, j]];
                    if !(0.0..=1.0).contains(&w) {
                        return Err(Error::WeightOutOfRange(i, j, w));
                    }
                }
            }
        }
        Ok(Self { weights, mask })
    }

    /// Uniform weight on every permitted edge.
    pub fn constant(value: f64, mask: FeasibilityMask) -> Result<Self> {
        let n = mask.n();
        Self::new(Array2::from_elem((n, n), value), mask)
    }

    pub fn n(&self) -> usize {
        self.weights.nrows()
    }
}

/// Check every invariant of an attributed topology, reporting the first
/// violation found.
pub fn validate(topology: &AttributedTopology) -> Result<()> {
    let n = topology.n();
    if topology.adjacency.ncols() != n {
        return Err(Error::dim(format!(
            "adjacency must be square, got {}x{}",
            n,
            topology.adjacency.ncols()
        )));
    }
    if topology.mask.n() != n {
        return Err(Error::dim(format!(
            "mask size {} does not match adjacency size {}",
            topology.mask.n(),
            n
        )));
    }
    for i in 0..n {
        if topology.adjacency[[i, i]] != 0 {
            return Err(Error::SelfLoop(i));
        }
    }
    for i in 0..n {
        for j in 0..n {
            let b = topology.adjacency[[i, j]];
            if b > 1 {
                return Err(Error::NonBinaryAdjacency(i, j));
            }
            if b == 1 && !topology.mask.is_allowed(i, j) {
                return Err(Error::MaskViolation(i, j));
            }
        }
    }
    validate_measure(&topology.node_measure)?;
    if topology.node_measure.len() != n {
        return Err(Error::dim(format!(
            "measure length {} does not match {} agents",
            topology.node_measure.len(),
            n
        )));
    }
    if topology.attributes.nrows() != n {
        return Err(Error::dim(format!(
            "attribute matrix has {} rows for {} agents",
            topology.attributes.nrows(),
            n
        )));
    }
    Ok(())
}

/// Check that a vector is a probability measure (nonnegative, sums to one).
pub fn validate_measure(measure: &Array1<f64>) -> Result<()> {
    for (i, &m) in measure.iter().enumerate() {
        if m < 0.0 {
            return Err(Error::NegativeMeasure(i));
        }
    }
    let sum: f64 = measure.sum();
    if (sum - 1.0).abs() > MEASURE_TOL {
        return Err(Error::MeasureNotNormalized(sum));
    }
    Ok(())
}

/// Normalized Hamming distance between two binary matrices, counted over the
/// mask's permitted entries only.
pub fn structural_distance(
    a: &Array2<u8>,
    b: &Array2<u8>,
    mask: &FeasibilityMask,
) -> Result<f64> {
    let n = mask.n();
    if a.nrows() != n || a.ncols() != n || b.nrows() != n || b.ncols() != n {
        return Err(Error::dim(format!(
            "matrices must be {n}x{n} to match the mask"
        )));
    }
    let mut feasible = 0usize;
    let mut differing = 0usize;
    for i in 0..n {
        for j in 0..n {
            if mask.is_allowed(i, j) {
                feasible += 1;
                if a[[i, j]] != b[[i, j]] {
                    differing += 1;
                }
            }
        }
    }
    if feasible == 0 {
        return Err(Error::EmptyMask);
    }
    Ok(differing as f64 / feasible as f64)
}

/// The uniform probability measure on `n` agents.
pub fn uniform_measure(n: usize) -> Array1<f64> {
    assert!(n >= 1, "measure needs at least one agent");
    Array1::from_elem(n, 1.0 / n as f64)
}

/// Flat serialization record for an attributed topology. Matrices are stored
/// row-major; the mask stores permitted entries as `1`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GraphRecord {
    pub n: usize,
    pub d: usize,
    pub adjacency: Vec<u8>,
    pub attributes: Vec<f64>,
    pub measure: Vec<f64>,
    pub mask: Vec<u8>,
}

impl GraphRecord {
    pub fn from_topology(t: &AttributedTopology) -> Self {
        GraphRecord {
            n: t.n(),
            d: t.attr_dim(),
            adjacency: t.adjacency.iter().copied().collect(),
            attributes: t.attributes.iter().copied().collect(),
            measure: t.node_measure.iter().copied().collect(),
            mask: t.mask.as_matrix().iter().map(|&a| a as u8).collect(),
        }
    }

    pub fn into_topology(self) -> Result<AttributedTopology> {
        let GraphRecord {
            n,
            d,
            adjacency,
            attributes,
            measure,
            mask,
        } = self;
        let adjacency = Array2::from_shape_vec((n, n), adjacency)
            .map_err(|e| Error::dim(e.to_string()))?;
        let attributes = Array2::from_shape_vec((n, d), attributes)
            .map_err(|e| Error::dim(e.to_string()))?;
        let node_measure = Array1::from_vec(measure);
        let mask_mat = Array2::from_shape_vec((n, n), mask)
            .map_err(|e| Error::dim(e.to_string()))?
            .mapv(|v| v != 0);
        let topology = AttributedTopology {
            adjacency,
            attributes,
            node_measure,
            mask: FeasibilityMask::new(mask_mat)?,
        };
        validate(&topology)?;
        Ok(topology)
    }
}
