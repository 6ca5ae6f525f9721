//! Factorized prior bank: storage, retrieval, projection into the current
//! agent space, and selective consolidation of validated posterior evidence.
//!
//! Each atom keeps a consensus structure, prototype attributes, and a node
//! measure, so it can be aligned to any task by fused Gromov-Wasserstein
//! transport regardless of agent count or labeling. Retrieval scores every
//! atom by alignment cost corrected by dispersion and historical utility.
//! Consolidation either refines the retrieved atom by exponential moving
//! average, spawns a new atom for structurally novel evidence, or discards
//! low-utility evidence outright.

use ndarray::{Array1, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fgw::{fgw_solve, AlignmentResult, Coupling, FgwConfig, Scaffold};
use crate::graph::{validate_measure, FeasibilityMask, WeightedTopology};

/// A factorized memory entry: consensus structure `S` (entries in `[0,1]`,
/// zero diagonal), prototype attributes, and a node measure.
#[derive(Debug, Clone, PartialEq)]
pub struct PriorAtom {
    pub consensus: Array2<f64>,
    pub attributes: Array2<f64>,
    pub measure: Array1<f64>,
}

impl PriorAtom {
    pub fn new(consensus: Array2<f64>, attributes: Array2<f64>, measure: Array1<f64>) -> Result<Self> {
        let n = consensus.nrows();
        if consensus.ncols() != n {
            return Err(Error::dim(format!(
                "consensus must be square, got {}x{}",
                n,
                consensus.ncols()
            )));
        }
        for i in 0..n {
            if consensus[[i, i]] != 0.0 {
                return Err(Error::SelfLoop(i));
            }
            for j in 0..n {
                let v = consensus[[i, j]];
                if !(0.0..=1.0).contains(&v) {
                    return Err(Error::WeightOutOfRange(i, j, v));
                }
            }
        }
        if attributes.nrows() != n {
            return Err(Error::dim(format!(
                "atom attributes have {} rows for {} nodes",
                attributes.nrows(),
                n
            )));
        }
        if measure.len() != n {
            return Err(Error::dim(format!(
                "atom measure length {} for {} nodes",
                measure.len(),
                n
            )));
        }
        validate_measure(&measure)?;
        Ok(Self {
            consensus,
            attributes,
            measure,
        })
    }

    pub fn n(&self) -> usize {
        self.consensus.nrows()
    }
}

/// Retrieval metadata kept next to each atom.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AtomMetadata {
    pub mean_utility: f64,
    pub dispersion: f64,
    pub update_count: u64,
}

#[derive(Debug, Clone)]
pub struct BankEntry {
    pub atom: PriorAtom,
    pub meta: AtomMetadata,
}

/// Ordered collection of prior atoms with a capacity bound.
#[derive(Debug, Clone)]
pub struct PriorBank {
    entries: Vec<BankEntry>,
    capacity: usize,
}

impl PriorBank {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::config("bank_capacity", "must be positive".to_string()));
        }
        Ok(Self {
            entries: Vec::new(),
            capacity,
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn entries(&self) -> &[BankEntry] {
        &self.entries
    }

    pub fn entry(&self, index: usize) -> &BankEntry {
        &self.entries[index]
    }

    /// Append an atom, evicting the lowest-value atom if the bank would
    /// exceed capacity. Returns the index of the evicted atom, if any.
    pub fn push(&mut self, atom: PriorAtom, meta: AtomMetadata, lambda_sigma: f64) -> Option<usize> {
        self.entries.push(BankEntry { atom, meta });
        if self.entries.len() <= self.capacity {
            return None;
        }
        // Retain atoms with high historical utility and low dispersion:
        // evict the minimizer of (utility - lambda_sigma * dispersion),
        // oldest first on ties.
        let mut worst = 0usize;
        let mut worst_score = f64::INFINITY;
        for (idx, entry) in self.entries.iter().enumerate() {
            let score = entry.meta.mean_utility - lambda_sigma * entry.meta.dispersion;
            if score < worst_score {
                worst_score = score;
                worst = idx;
            }
        }
        self.entries.remove(worst);
        Some(worst)
    }
}

/// Weights of the retrieval rule `cost + lambda_sigma * dispersion -
/// lambda_u * utility`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct RetrievalConfig {
    pub lambda_sigma: f64,
    pub lambda_u: f64,
    /// Rank atoms by the alignment cost with the entropy term stripped.
    pub use_unregularized_cost: bool,
    pub fgw: FgwConfig,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        RetrievalConfig {
            lambda_sigma: 0.1,
            lambda_u: 0.1,
            use_unregularized_cost: false,
            fgw: FgwConfig::default(),
        }
    }
}

impl RetrievalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lambda_sigma < 0.0 {
            return Err(Error::config("retrieval.lambda_sigma", "must be >= 0".to_string()));
        }
        if self.lambda_u < 0.0 {
            return Err(Error::config("retrieval.lambda_u", "must be >= 0".to_string()));
        }
        self.fgw.validate()
    }
}

/// Result of scoring the whole bank against a scaffold.
#[derive(Debug, Clone)]
pub struct Retrieval {
    pub index: usize,
    pub alignment: AlignmentResult,
    pub score: f64,
}

/// Align the scaffold against every atom and return the atom minimizing
/// `cost + lambda_sigma * dispersion - lambda_u * utility`. Ties break
/// toward the lowest index.
pub fn retrieve(bank: &PriorBank, scaffold: &Scaffold, config: &RetrievalConfig) -> Result<Retrieval> {
    config.validate()?;
    if bank.is_empty() {
        return Err(Error::EmptyBank);
    }
    let mut best: Option<Retrieval> = None;
    for (index, entry) in bank.entries.iter().enumerate() {
        let alignment = fgw_solve(scaffold, &entry.atom, &config.fgw)?;
        let cost = if config.use_unregularized_cost {
            alignment.cost_unregularized
        } else {
            alignment.cost
        };
        let score =
            cost + config.lambda_sigma * entry.meta.dispersion - config.lambda_u * entry.meta.mean_utility;
        let better = match &best {
            None => true,
            Some(current) => score < current.score,
        };
        if better {
            best = Some(Retrieval {
                index,
                alignment,
                score,
            });
        }
    }
    Ok(best.expect("bank checked non-empty"))
}

/// Project an atom's consensus structure into the current agent space:
/// row-normalize the coupling and form `C = T~ S T~^T`, then zero the
/// diagonal and any masked-out entry.
pub fn project_prior(
    atom: &PriorAtom,
    coupling: &Coupling,
    task_measure: &Array1<f64>,
    mask: &FeasibilityMask,
) -> Result<WeightedTopology> {
    let nt = task_measure.len();
    if coupling.plan.nrows() != nt || coupling.plan.ncols() != atom.n() {
        return Err(Error::dim(format!(
            "coupling {}x{} does not connect {} agents to {} prototype nodes",
            coupling.plan.nrows(),
            coupling.plan.ncols(),
            nt,
            atom.n()
        )));
    }
    if mask.n() != nt {
        return Err(Error::dim(format!(
            "mask size {} does not match {} agents",
            mask.n(),
            nt
        )));
    }
    let normalized = normalize_rows(&coupling.plan, task_measure, "row")?;
    let mut center = normalized.dot(&atom.consensus).dot(&normalized.t());
    finalize_projection(&mut center, mask);
    WeightedTopology::new(center, mask.clone())
}

/// Transport a task-side posterior mean back to the atom space:
/// `Q = diag(nu)^-1 T^T`, `S~ = Q B Q^T`, diagonal zeroed.
pub fn reverse_transport(coupling: &Coupling, posterior_mean: &WeightedTopology) -> Result<Array2<f64>> {
    let nt = coupling.plan.nrows();
    if posterior_mean.n() != nt {
        return Err(Error::dim(format!(
            "posterior mean is {}x{} but the coupling has {} task rows",
            posterior_mean.n(),
            posterior_mean.n(),
            nt
        )));
    }
    let transposed = coupling.plan.t().to_owned();
    let normalized = normalize_rows(&transposed, &coupling.col_marginal, "column")?;
    let mut back = normalized.dot(&posterior_mean.weights).dot(&normalized.t());
    let nm = back.nrows();
    for i in 0..nm {
        back[[i, i]] = 0.0;
        for j in 0..nm {
            back[[i, j]] = back[[i, j]].clamp(0.0, 1.0);
        }
    }
    Ok(back)
}

fn normalize_rows(plan: &Array2<f64>, measure: &Array1<f64>, side: &'static str) -> Result<Array2<f64>> {
    let mut out = plan.clone();
    for (i, mut row) in out.axis_iter_mut(Axis(0)).enumerate() {
        let mass = measure[i];
        if mass > 0.0 {
            row.mapv_inplace(|t| t / mass);
        } else if row.iter().any(|&t| t > 0.0) {
            return Err(Error::ZeroMassSupport { side, index: i });
        }
    }
    Ok(out)
}

fn finalize_projection(center: &mut Array2<f64>, mask: &FeasibilityMask) {
    let n = center.nrows();
    for i in 0..n {
        for j in 0..n {
            if i == j || !mask.is_allowed(i, j) {
                center[[i, j]] = 0.0;
            } else {
                center[[i, j]] = center[[i, j]].clamp(0.0, 1.0);
            }
        }
    }
}

/// Validated posterior evidence offered to the bank after a stage.
#[derive(Debug, Clone)]
pub struct Evidence<'a> {
    pub posterior_mean: &'a WeightedTopology,
    pub utility: f64,
    pub alignment: &'a AlignmentResult,
    pub task_attributes: &'a Array2<f64>,
    pub task_measure: &'a Array1<f64>,
}

/// Gates controlling consolidation, plus the eviction weight.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ConsolidationGates {
    pub tau_u: f64,
    pub tau_kappa: f64,
    pub lambda_sigma: f64,
}

impl Default for ConsolidationGates {
    fn default() -> Self {
        ConsolidationGates {
            tau_u: 0.5,
            tau_kappa: 1.0,
            lambda_sigma: 0.1,
        }
    }
}

/// What `consolidate` did with the evidence.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConsolidateAction {
    /// Utility gate failed; the bank is untouched.
    Discard,
    /// Evidence absorbed into the retrieved atom by EMA.
    Refine,
    /// Evidence started a new atom; `evicted` names the atom dropped to
    /// respect capacity, if any.
    Spawn { evicted: Option<usize> },
}

impl ConsolidateAction {
    pub fn tag(&self) -> &'static str {
        match self {
            ConsolidateAction::Discard => "discard",
            ConsolidateAction::Refine => "refine",
            ConsolidateAction::Spawn { .. } => "spawn",
        }
    }
}

/// Apply the selective update rule:
/// utility below `tau_u` discards; utility at or above `tau_u` refines the
/// retrieved atom when `kappa_t <= tau_kappa` and spawns a new atom
/// otherwise.
pub fn consolidate(
    bank: &mut PriorBank,
    m_t: usize,
    evidence: &Evidence,
    eta: f64,
    gates: &ConsolidationGates,
    kappa_t: f64,
    fgw: &FgwConfig,
) -> Result<ConsolidateAction> {
    if !(0.0..=1.0).contains(&eta) {
        return Err(Error::config("eta", format!("{eta} not in [0,1]")));
    }
    if m_t >= bank.len() {
        return Err(Error::dim(format!(
            "atom index {m_t} out of range for bank of {}",
            bank.len()
        )));
    }
    if evidence.utility < gates.tau_u {
        return Ok(ConsolidateAction::Discard);
    }

    if kappa_t <= gates.tau_kappa {
        // Refine: EMA on consensus and utility, then dispersion as an EMA of
        // the structural deviation between the transported evidence and the
        // updated consensus.
        let transported = reverse_transport(&evidence.alignment.coupling, evidence.posterior_mean)?;
        let entry = &mut bank.entries[m_t];
        let updated = entry
            .atom
            .consensus
            .iter()
            .zip(transported.iter())
            .map(|(&s, &t)| (1.0 - eta) * s + eta * t)
            .collect::<Vec<f64>>();
        let n = entry.atom.n();
        entry.atom.consensus = Array2::from_shape_vec((n, n), updated).expect("shape preserved");
        entry.meta.mean_utility = (1.0 - eta) * entry.meta.mean_utility + eta * evidence.utility;
        let deviation = structural_deviation(&transported, &entry.atom, fgw)?;
        entry.meta.dispersion = (1.0 - eta) * entry.meta.dispersion + eta * deviation;
        entry.meta.update_count += 1;
        return Ok(ConsolidateAction::Refine);
    }

    // Spawn: the validated posterior summary becomes a new atom in the
    // current task space.
    let atom = PriorAtom::new(
        evidence.posterior_mean.weights.clone(),
        evidence.task_attributes.clone(),
        evidence.task_measure.clone(),
    )?;
    let meta = AtomMetadata {
        mean_utility: evidence.utility,
        dispersion: 0.0,
        update_count: 0,
    };
    let evicted = bank.push(atom, meta, gates.lambda_sigma);
    Ok(ConsolidateAction::Spawn { evicted })
}

/// Unregularized alignment cost between a candidate structure and an atom's
/// consensus, with the atom's own attributes and measure on both sides, so
/// only structure contributes.
fn structural_deviation(candidate: &Array2<f64>, atom: &PriorAtom, fgw: &FgwConfig) -> Result<f64> {
    let scaffold = Scaffold {
        structure: candidate.clone(),
        attributes: atom.attributes.clone(),
        measure: atom.measure.clone(),
    };
    let result = fgw_solve(&scaffold, atom, &fgw.without_entropy())?;
    Ok(result.cost.max(0.0))
}

/// Base-stage initialization parameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct BankInitConfig {
    /// Posterior samples drawn as atom candidates.
    pub samples: usize,
    /// Highest-utility candidates kept for clustering.
    pub top_k: usize,
    /// Single-linkage merge threshold on the pairwise alignment cost.
    pub cluster_threshold: f64,
}

impl Default for BankInitConfig {
    fn default() -> Self {
        BankInitConfig {
            samples: 32,
            top_k: 8,
            cluster_threshold: 0.05,
        }
    }
}

/// Build the initial bank from scored base-stage topologies: cluster the
/// top-k by unregularized pairwise alignment cost (single linkage), then
/// store one atom per cluster with the entrywise-mean consensus, the mean
/// member utility, and the mean member deviation from the consensus.
pub fn init_from_topologies(
    capacity: usize,
    candidates: &[(Array2<u8>, f64)],
    attributes: &Array2<f64>,
    measure: &Array1<f64>,
    init: &BankInitConfig,
    fgw: &FgwConfig,
    lambda_sigma: f64,
) -> Result<PriorBank> {
    let mut bank = PriorBank::new(capacity)?;
    if candidates.is_empty() {
        return Ok(bank);
    }
    let mut order: Vec<usize> = (0..candidates.len()).collect();
    order.sort_by(|&a, &b| candidates[b].1.total_cmp(&candidates[a].1).then(a.cmp(&b)));
    order.truncate(init.top_k.max(1));

    let kept: Vec<(Array2<f64>, f64)> = order
        .iter()
        .map(|&i| (candidates[i].0.mapv(|v| v as f64), candidates[i].1))
        .collect();

    // Pairwise unregularized alignment costs between kept structures.
    let k = kept.len();
    let mut dist = Array2::zeros((k, k));
    let plain = fgw.without_entropy();
    for a in 0..k {
        for b in (a + 1)..k {
            let scaffold = Scaffold {
                structure: kept[a].0.clone(),
                attributes: attributes.clone(),
                measure: measure.clone(),
            };
            let atom = PriorAtom::new(kept[b].0.clone(), attributes.clone(), measure.clone())?;
            let cost = fgw_solve(&scaffold, &atom, &plain)?.cost.max(0.0);
            dist[[a, b]] = cost;
            dist[[b, a]] = cost;
        }
    }

    let clusters = single_linkage(&dist, init.cluster_threshold);
    for members in clusters {
        let n = kept[0].0.nrows();
        let mut consensus = Array2::<f64>::zeros((n, n));
        let mut utility = 0.0;
        for &m in &members {
            consensus = consensus + &kept[m].0;
            utility += kept[m].1;
        }
        let count = members.len() as f64;
        consensus.mapv_inplace(|v| v / count);
        for i in 0..n {
            consensus[[i, i]] = 0.0;
        }
        utility /= count;
        let atom = PriorAtom::new(consensus, attributes.clone(), measure.clone())?;
        let mut dispersion = 0.0;
        for &m in &members {
            dispersion += structural_deviation(&kept[m].0, &atom, fgw)?;
        }
        dispersion /= count;
        let meta = AtomMetadata {
            mean_utility: utility.clamp(0.0, 1.0),
            dispersion,
            update_count: 0,
        };
        bank.push(atom, meta, lambda_sigma);
    }
    Ok(bank)
}

/// Single-linkage clustering with a merge threshold; returns clusters as
/// index lists in first-seen order.
fn single_linkage(dist: &Array2<f64>, threshold: f64) -> Vec<Vec<usize>> {
    let k = dist.nrows();
    let mut parent: Vec<usize> = (0..k).collect();
    fn find(parent: &mut Vec<usize>, mut x: usize) -> usize {
        while parent[x] != x {
            parent[x] = parent[parent[x]];
            x = parent[x];
        }
        x
    }
    for a in 0..k {
        for b in (a + 1)..k {
            if dist[[a, b]] <= threshold {
                let (ra, rb) = (find(&mut parent, a), find(&mut parent, b));
                if ra != rb {
                    let lo = ra.min(rb);
                    let hi = ra.max(rb);
                    parent[hi] = lo;
                }
            }
        }
    }
    let mut clusters: Vec<Vec<usize>> = Vec::new();
    let mut roots: Vec<usize> = Vec::new();
    for x in 0..k {
        let r = find(&mut parent, x);
        match roots.iter().position(|&root| root == r) {
            Some(pos) => clusters[pos].push(x),
            None => {
                roots.push(r);
                clusters.push(vec![x]);
            }
        }
    }
    clusters
}

/// Serialization mirror for bank snapshots.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BankSnapshot {
    pub capacity: usize,
    pub atoms: Vec<AtomRecord>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AtomRecord {
    pub n: usize,
    pub d: usize,
    pub consensus: Vec<f64>,
    pub attributes: Vec<f64>,
    pub measure: Vec<f64>,
    pub mean_utility: f64,
    pub dispersion: f64,
    pub update_count: u64,
}

impl BankSnapshot {
    pub fn from_bank(bank: &PriorBank) -> Self {
        BankSnapshot {
            capacity: bank.capacity,
            atoms: bank
                .entries
                .iter()
                .map(|e| AtomRecord {
                    n: e.atom.n(),
                    d: e.atom.attributes.ncols(),
                    consensus: e.atom.consensus.iter().copied().collect(),
                    attributes: e.atom.attributes.iter().copied().collect(),
                    measure: e.atom.measure.iter().copied().collect(),
                    mean_utility: e.meta.mean_utility,
                    dispersion: e.meta.dispersion,
                    update_count: e.meta.update_count,
                })
                .collect(),
        }
    }

    pub fn into_bank(self) -> Result<PriorBank> {
        let mut bank = PriorBank::new(self.capacity)?;
        for rec in self.atoms {
            let consensus = Array2::from_shape_vec((rec.n, rec.n), rec.consensus)
                .map_err(|e| Error::dim(e.to_string()))?;
            let attributes = Array2::from_shape_vec((rec.n, rec.d), rec.attributes)
                .map_err(|e| Error::dim(e.to_string()))?;
            let measure = Array1::from_vec(rec.measure);
            let atom = PriorAtom::new(consensus, attributes, measure)?;
            let meta = AtomMetadata {
                mean_utility: rec.mean_utility,
                dispersion: rec.dispersion,
                update_count: rec.update_count,
            };
            bank.entries.push(BankEntry { atom, meta });
        }
        Ok(bank)
    }
}
