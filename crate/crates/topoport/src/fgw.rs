//! Entropic fused Gromov-Wasserstein alignment between a task-side scaffold
//! graph and a prior atom.
//!
//! The discrepancy being minimized over couplings `T` with marginals
//! `(mu, nu)` is
//!
//! ```text
//! (1 - rho) <C_X, T>  +  rho * sum_{i,i',j,j'} (B[i,i'] - S[j,j'])^2 T[i,j] T[i',j']
//!                     +  eps * sum_{i,j} T[i,j] (ln T[i,j] - 1)
//! ```
//!
//! where `C_X` holds squared Euclidean distances between agent attributes,
//! `B` is the scaffold structure, and `S` the atom's consensus structure.
//! The linear term matches agents to prototype nodes by function; the
//! quadratic term matches directed relations to directed relations; the
//! entropy term smooths the coupling.
//!
//! The solver is a conditional-gradient loop: linearize the quadratic term
//! at the current plan, solve the entropic linear subproblem with log-domain
//! Sinkhorn iterations, then take the best step along the segment between
//! the current plan and the subproblem solution. Because the step size zero
//! is always a candidate, the objective never increases across outer
//! iterations. When `eps = 0` the subproblem is solved with an annealed
//! surrogate temperature so the plan sharpens toward an unregularized
//! optimum.
//!
//! The quadratic term and its gradient use the tensor-contraction
//! decomposition for squared-loss costs, so nothing in the hot path is
//! O(N^4); the definitional quadruple loop lives in the test oracle only.

use ndarray::{Array1, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::bank::PriorAtom;
use crate::error::{Error, Result};
use crate::graph::{validate_measure, WeightedTopology};

/// Tolerance on coupling marginals.
pub const MARGINAL_TOL: f64 = 1e-6;

/// Task-side view used for alignment: scaffold structure, agent attributes,
/// and the node measure.
#[derive(Debug, Clone)]
pub struct Scaffold {
    pub structure: Array2<f64>,
    pub attributes: Array2<f64>,
    pub measure: Array1<f64>,
}

impl Scaffold {
    pub fn new(
        topology: &WeightedTopology,
        attributes: Array2<f64>,
        measure: Array1<f64>,
    ) -> Result<Self> {
        let n = topology.n();
        if attributes.nrows() != n {
            return Err(Error::dim(format!(
                "scaffold attributes have {} rows for {} agents",
                attributes.nrows(),
                n
            )));
        }
        if measure.len() != n {
            return Err(Error::dim(format!(
                "scaffold measure length {} for {} agents",
                measure.len(),
                n
            )));
        }
        validate_measure(&measure)?;
        Ok(Self {
            structure: topology.weights.clone(),
            attributes,
            measure,
        })
    }

    pub fn n(&self) -> usize {
        self.structure.nrows()
    }
}

/// A transport plan with its prescribed marginals.
#[derive(Debug, Clone)]
pub struct Coupling {
    pub plan: Array2<f64>,
    pub row_marginal: Array1<f64>,
    pub col_marginal: Array1<f64>,
}

impl Coupling {
    /// Validate nonnegativity and that the plan's row/column sums match the
    /// prescribed marginals within [`MARGINAL_TOL`].
    pub fn new(plan: Array2<f64>, row_marginal: Array1<f64>, col_marginal: Array1<f64>) -> Result<Self> {
        if plan.nrows() != row_marginal.len() || plan.ncols() != col_marginal.len() {
            return Err(Error::dim(format!(
                "plan {}x{} does not fit marginals {} and {}",
                plan.nrows(),
                plan.ncols(),
                row_marginal.len(),
                col_marginal.len()
            )));
        }
        if plan.iter().any(|&t| t < 0.0) {
            return Err(Error::dim("plan has a negative entry"));
        }
        let row_dev = max_abs_diff(&plan.sum_axis(Axis(1)), &row_marginal);
        if row_dev > MARGINAL_TOL {
            return Err(Error::MarginalMismatch {
                side: "row",
                deviation: row_dev,
            });
        }
        let col_dev = max_abs_diff(&plan.sum_axis(Axis(0)), &col_marginal);
        if col_dev > MARGINAL_TOL {
            return Err(Error::MarginalMismatch {
                side: "column",
                deviation: col_dev,
            });
        }
        Ok(Self {
            plan,
            row_marginal,
            col_marginal,
        })
    }
}

fn max_abs_diff(a: &Array1<f64>, b: &Array1<f64>) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// Solver configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct FgwConfig {
    /// Semantic-structural trade-off in `[0,1]`; 0 is attributes only,
    /// 1 is structure only.
    pub rho: f64,
    /// Entropy weight, `>= 0`. Zero requests an unregularized solution.
    pub epsilon: f64,
    /// Conditional-gradient iterations.
    pub outer_iters: usize,
    /// Sinkhorn iterations per subproblem.
    pub inner_iters: usize,
    /// Convergence threshold on the max-norm plan change.
    pub tol: f64,
}

impl Default for FgwConfig {
    fn default() -> Self {
        FgwConfig {
            rho: 0.5,
            epsilon: 0.01,
            outer_iters: 50,
            inner_iters: 200,
            tol: 1e-7,
        }
    }
}

impl FgwConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.rho) {
            return Err(Error::config("fgw.rho", format!("{} not in [0,1]", self.rho)));
        }
        if self.epsilon < 0.0 {
            return Err(Error::config("fgw.epsilon", "must be >= 0".to_string()));
        }
        if self.tol <= 0.0 {
            return Err(Error::config("fgw.tol", "must be > 0".to_string()));
        }
        if self.outer_iters == 0 || self.inner_iters == 0 {
            return Err(Error::config("fgw.iters", "iteration counts must be positive".to_string()));
        }
        Ok(())
    }

    /// Same configuration with the entropy weight removed. Used for
    /// dispersion statistics and bank clustering, which are defined at
    /// `eps = 0`.
    pub fn without_entropy(&self) -> Self {
        FgwConfig {
            epsilon: 0.0,
            ..self.clone()
        }
    }
}

/// Outcome of one alignment solve.
#[derive(Debug, Clone)]
pub struct AlignmentResult {
    pub coupling: Coupling,
    /// Objective value at the returned plan, including the entropy term.
    pub cost: f64,
    /// Objective value at the returned plan with the entropy term removed.
    pub cost_unregularized: f64,
    pub converged: bool,
    pub iterations_used: usize,
}

/// Squared Euclidean distances between attribute rows: entry `(i, j)` is
/// `|x_i - y_j|^2`.
pub fn attr_cost_matrix(task_attrs: &Array2<f64>, atom_attrs: &Array2<f64>) -> Result<Array2<f64>> {
    if task_attrs.ncols() != atom_attrs.ncols() {
        return Err(Error::dim(format!(
            "attribute dimensions differ: {} vs {}",
            task_attrs.ncols(),
            atom_attrs.ncols()
        )));
    }
    let (nt, nm) = (task_attrs.nrows(), atom_attrs.nrows());
    let mut cost = Array2::zeros((nt, nm));
    for i in 0..nt {
        for j in 0..nm {
            let mut acc = 0.0;
            for k in 0..task_attrs.ncols() {
                let d = task_attrs[[i, k]] - atom_attrs[[j, k]];
                acc += d * d;
            }
            cost[[i, j]] = acc;
        }
    }
    Ok(cost)
}

/// Squared difference between a scaffold relation and a consensus relation.
#[inline]
pub fn relational_cost(b: f64, s: f64) -> f64 {
    (b - s) * (b - s)
}

/// Entropy regularizer `sum T (ln T - 1)` with the `0 ln 0 = 0` convention.
pub fn entropy(plan: &Array2<f64>) -> f64 {
    plan.iter()
        .map(|&t| if t > 0.0 { t * (t.ln() - 1.0) } else { 0.0 })
        .sum()
}

/// Quadratic relational term evaluated through the squared-loss
/// decomposition. Exact for any nonnegative plan because it contracts
/// against the plan's actual row and column sums.
fn quad_value(b: &Array2<f64>, s: &Array2<f64>, plan: &Array2<f64>) -> f64 {
    bilinear(b, s, plan, plan)
}

/// Bilinear extension of the quadratic term:
/// `sum (B[i,i'] - S[j,j'])^2 U[i,j] V[i',j']`.
fn bilinear(b: &Array2<f64>, s: &Array2<f64>, u: &Array2<f64>, v: &Array2<f64>) -> f64 {
    let b2 = b.mapv(|x| x * x);
    let s2 = s.mapv(|x| x * x);
    let ur = u.sum_axis(Axis(1));
    let vr = v.sum_axis(Axis(1));
    let uc = u.sum_axis(Axis(0));
    let vc = v.sum_axis(Axis(0));
    let term_b = ur.dot(&b2.dot(&vr));
    let term_s = uc.dot(&s2.dot(&vc));
    let cross = (u * &b.dot(v).dot(&s.t())).sum();
    term_b + term_s - 2.0 * cross
}

/// Gradient of the quadratic relational term with respect to the plan.
fn quad_grad(b: &Array2<f64>, s: &Array2<f64>, plan: &Array2<f64>) -> Array2<f64> {
    let b2 = b.mapv(|x| x * x);
    let s2 = s.mapv(|x| x * x);
    let r = plan.sum_axis(Axis(1));
    let c = plan.sum_axis(Axis(0));
    let b2r = b2.dot(&r);
    let b2tr = b2.t().dot(&r);
    let s2c = s2.dot(&c);
    let s2tc = s2.t().dot(&c);
    let m1 = b.dot(plan).dot(&s.t());
    let m2 = b.t().dot(plan).dot(s);
    let (nt, nm) = plan.dim();
    Array2::from_shape_fn((nt, nm), |(k, l)| {
        b2r[k] + b2tr[k] + s2c[l] + s2tc[l] - 2.0 * (m1[[k, l]] + m2[[k, l]])
    })
}

fn objective_raw(
    cx: &Array2<f64>,
    b: &Array2<f64>,
    s: &Array2<f64>,
    plan: &Array2<f64>,
    config: &FgwConfig,
) -> f64 {
    let linear = (cx * plan).sum();
    (1.0 - config.rho) * linear + config.rho * quad_value(b, s, plan) + config.epsilon * entropy(plan)
}

/// Evaluate the fused objective at a given coupling.
///
/// The coupling's marginals must match the scaffold and atom measures within
/// [`MARGINAL_TOL`].
pub fn fgw_objective(
    scaffold: &Scaffold,
    atom: &PriorAtom,
    coupling: &Coupling,
    config: &FgwConfig,
) -> Result<f64> {
    config.validate()?;
    check_marginals(coupling, &scaffold.measure, &atom.measure)?;
    let cx = attr_cost_matrix(&scaffold.attributes, &atom.attributes)?;
    Ok(objective_raw(
        &cx,
        &scaffold.structure,
        &atom.consensus,
        &coupling.plan,
        config,
    ))
}

fn check_marginals(coupling: &Coupling, mu: &Array1<f64>, nu: &Array1<f64>) -> Result<()> {
    let row_dev = max_abs_diff(&coupling.plan.sum_axis(Axis(1)), mu);
    if row_dev > MARGINAL_TOL {
        return Err(Error::MarginalMismatch {
            side: "row",
            deviation: row_dev,
        });
    }
    let col_dev = max_abs_diff(&coupling.plan.sum_axis(Axis(0)), nu);
    if col_dev > MARGINAL_TOL {
        return Err(Error::MarginalMismatch {
            side: "column",
            deviation: col_dev,
        });
    }
    Ok(())
}

/// Log-domain Sinkhorn for the entropic linear subproblem
/// `min <G, T> + eps * sum T (ln T - 1)` over the transport polytope.
/// Rows and columns with zero mass are excluded from the scaling and carry
/// zero plan mass.
fn sinkhorn_log(
    cost: &Array2<f64>,
    mu: &Array1<f64>,
    nu: &Array1<f64>,
    eps: f64,
    max_iters: usize,
) -> Array2<f64> {
    let (nt, nm) = cost.dim();
    let row_support: Vec<usize> = (0..nt).filter(|&i| mu[i] > 0.0).collect();
    let col_support: Vec<usize> = (0..nm).filter(|&j| nu[j] > 0.0).collect();
    let mut f = Array1::<f64>::zeros(nt);
    let mut g = Array1::<f64>::zeros(nm);

    // eps * logsumexp(values / eps), folded so huge ratios never overflow.
    let scaled_lse = |values: &[f64]| -> f64 {
        let m = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = values.iter().map(|&v| ((v - m) / eps).exp()).sum();
        m + eps * sum.ln()
    };

    let mut buf = Vec::with_capacity(nt.max(nm));
    for _ in 0..max_iters {
        for &i in &row_support {
            buf.clear();
            for &j in &col_support {
                buf.push(g[j] - cost[[i, j]]);
            }
            f[i] = eps * mu[i].ln() - scaled_lse(&buf);
        }
        let mut col_err = 0.0_f64;
        for &j in &col_support {
            buf.clear();
            for &i in &row_support {
                buf.push(f[i] - cost[[i, j]]);
            }
            let lse = scaled_lse(&buf);
            let new_g = eps * nu[j].ln() - lse;
            // Column marginal before this update: exp((g_j + lse - g_new_j)/eps) * nu_j.
            col_err = col_err.max((((g[j] - new_g) / eps).exp() - 1.0).abs() * nu[j]);
            g[j] = new_g;
        }
        if col_err < 1e-13 {
            break;
        }
    }

    let mut plan = Array2::zeros((nt, nm));
    for &i in &row_support {
        for &j in &col_support {
            plan[[i, j]] = ((f[i] + g[j] - cost[[i, j]]) / eps).exp();
        }
    }
    plan
}

/// Project a nonnegative plan onto the exact transport polytope: scale rows
/// and columns down to their targets, then distribute the leftover mass as a
/// rank-one correction.
fn round_to_polytope(mut plan: Array2<f64>, mu: &Array1<f64>, nu: &Array1<f64>) -> Array2<f64> {
    let (nt, nm) = plan.dim();
    for i in 0..nt {
        let rs: f64 = plan.row(i).sum();
        if rs > mu[i] && rs > 0.0 {
            let scale = mu[i] / rs;
            for j in 0..nm {
                plan[[i, j]] *= scale;
            }
        }
    }
    for j in 0..nm {
        let cs: f64 = plan.column(j).sum();
        if cs > nu[j] && cs > 0.0 {
            let scale = nu[j] / cs;
            for i in 0..nt {
                plan[[i, j]] *= scale;
            }
        }
    }
    let err_r: Array1<f64> = (0..nt).map(|i| (mu[i] - plan.row(i).sum()).max(0.0)).collect();
    let err_c: Array1<f64> = (0..nm).map(|j| (nu[j] - plan.column(j).sum()).max(0.0)).collect();
    let total: f64 = err_c.sum();
    if total > 0.0 {
        for i in 0..nt {
            if err_r[i] > 0.0 {
                for j in 0..nm {
                    plan[[i, j]] += err_r[i] * err_c[j] / total;
                }
            }
        }
    }
    plan
}

/// Minimize the full objective along the segment `T + alpha (T_dir - T)`,
/// `alpha` in `[0,1]`. The non-entropy part is an exact quadratic in
/// `alpha`; the entropy part is sampled on a grid and refined by
/// golden-section search. Returns `(alpha, value)`.
fn line_search(
    cx: &Array2<f64>,
    b: &Array2<f64>,
    s: &Array2<f64>,
    plan: &Array2<f64>,
    dir: &Array2<f64>,
    config: &FgwConfig,
) -> (f64, f64) {
    let delta = dir - plan;
    let lin0 = (cx * plan).sum();
    let dlin = (cx * &delta).sum();
    let q0 = bilinear(b, s, plan, plan);
    let qb = bilinear(b, s, plan, &delta) + bilinear(b, s, &delta, plan);
    let qa = bilinear(b, s, &delta, &delta);
    let rho = config.rho;
    let base = |alpha: f64| -> f64 {
        (1.0 - rho) * (lin0 + alpha * dlin) + rho * (q0 + alpha * qb + alpha * alpha * qa)
    };

    if config.epsilon == 0.0 {
        // Pure quadratic: closed-form interior candidate plus the endpoints.
        let a2 = rho * qa;
        let a1 = (1.0 - rho) * dlin + rho * qb;
        let mut candidates = vec![0.0, 1.0];
        if a2 > 0.0 {
            candidates.push((-a1 / (2.0 * a2)).clamp(0.0, 1.0));
        }
        return candidates
            .into_iter()
            .map(|a| (a, base(a)))
            .min_by(|x, y| x.1.total_cmp(&y.1))
            .unwrap();
    }

    let eval = |alpha: f64| -> f64 {
        let blended = plan + &(alpha * &delta);
        base(alpha) + config.epsilon * entropy(&blended)
    };
    let grid = 32;
    let (mut best_a, mut best_v) = (0.0, eval(0.0));
    for k in 1..=grid {
        let a = k as f64 / grid as f64;
        let v = eval(a);
        if v < best_v {
            best_a = a;
            best_v = v;
        }
    }
    // Golden-section refinement around the winning grid cell.
    let mut lo = (best_a - 1.0 / grid as f64).max(0.0);
    let mut hi = (best_a + 1.0 / grid as f64).min(1.0);
    let phi = 0.5 * (3.0 - 5.0_f64.sqrt());
    for _ in 0..40 {
        let a1 = lo + phi * (hi - lo);
        let a2 = hi - phi * (hi - lo);
        if eval(a1) < eval(a2) {
            hi = a2;
        } else {
            lo = a1;
        }
    }
    let mid = 0.5 * (lo + hi);
    let vm = eval(mid);
    if vm < best_v {
        (mid, vm)
    } else {
        (best_a, best_v)
    }
}

/// Solve the alignment problem and return the objective value at every outer
/// iteration (index 0 is the initial product plan).
pub fn fgw_solve_traced(
    scaffold: &Scaffold,
    atom: &PriorAtom,
    config: &FgwConfig,
) -> Result<(AlignmentResult, Vec<f64>)> {
    config.validate()?;
    validate_measure(&scaffold.measure)?;
    validate_measure(&atom.measure)?;
    let cx = attr_cost_matrix(&scaffold.attributes, &atom.attributes)?;
    let b = &scaffold.structure;
    let s = &atom.consensus;
    let mu = &scaffold.measure;
    let nu = &atom.measure;

    let mut plan = Array2::from_shape_fn((mu.len(), nu.len()), |(i, j)| mu[i] * nu[j]);
    let annealed = config.epsilon == 0.0;
    let mut trace = vec![objective_raw(&cx, b, s, &plan, config)];
    let mut converged = false;
    let mut iterations_used = 0;

    for it in 0..config.outer_iters {
        iterations_used = it + 1;
        let grad = quad_grad(b, s, &plan);
        let linearized = Array2::from_shape_fn(plan.dim(), |(i, j)| {
            (1.0 - config.rho) * cx[[i, j]] + config.rho * grad[[i, j]]
        });
        let eps_sub = if annealed {
            let spread = linearized
                .iter()
                .cloned()
                .fold(f64::NEG_INFINITY, f64::max)
                - linearized.iter().cloned().fold(f64::INFINITY, f64::min);
            let spread = if spread > 0.0 { spread } else { 1.0 };
            spread * (0.1 * 0.5_f64.powi(it as i32)).max(1e-13)
        } else {
            config.epsilon
        };
        let dir = round_to_polytope(
            sinkhorn_log(&linearized, mu, nu, eps_sub, config.inner_iters),
            mu,
            nu,
        );
        let (alpha, value) = line_search(&cx, b, s, &plan, &dir, config);
        let mut change = 0.0_f64;
        if alpha > 0.0 {
            for (p, d) in plan.iter_mut().zip(dir.iter()) {
                let step = alpha * (d - *p);
                change = change.max(step.abs());
                *p += step;
            }
        }
        trace.push(value.min(*trace.last().unwrap()));
        // In annealed mode the direction only sharpens once the surrogate
        // temperature has decayed, so early iterations must not bail out.
        let fully_annealed = !annealed || 0.1 * 0.5_f64.powi(it as i32) <= 1e-12;
        if change < config.tol && fully_annealed {
            converged = true;
            break;
        }
    }

    let cost = objective_raw(&cx, b, s, &plan, config);
    let cost_unregularized = cost - config.epsilon * entropy(&plan);
    let coupling = Coupling {
        plan,
        row_marginal: mu.clone(),
        col_marginal: nu.clone(),
    };
    Ok((
        AlignmentResult {
            coupling,
            cost,
            cost_unregularized,
            converged,
            iterations_used,
        },
        trace,
    ))
}

/// Solve the alignment problem between a scaffold and a prior atom.
pub fn fgw_solve(scaffold: &Scaffold, atom: &PriorAtom, config: &FgwConfig) -> Result<AlignmentResult> {
    fgw_solve_traced(scaffold, atom, config).map(|(result, _)| result)
}


#[cfg(test)]
mod tests {
    use super::test_oracles::*;
    use super::*;
    use crate::bank::PriorAtom;
    use crate::graph::{uniform_measure, FeasibilityMask};
    use ndarray::array;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn random_scaffold(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Scaffold {
        let structure = Array2::from_shape_fn((n, n), |(i, j)| {
            if i == j {
                0.0
            } else {
                (rng.random::<f64>() < 0.4) as u8 as f64
            }
        });
        let attributes = Array2::from_shape_fn((n, d), |_| rng.random::<f64>() * 2.0 - 1.0);
        Scaffold {
            structure,
            attributes,
            measure: uniform_measure(n),
        }
    }

    fn atom_of(scaffold: &Scaffold) -> PriorAtom {
        PriorAtom::new(
            scaffold.structure.clone(),
            scaffold.attributes.clone(),
            scaffold.measure.clone(),
        )
        .unwrap()
    }

    fn random_atom(rng: &mut ChaCha8Rng, n: usize, d: usize) -> PriorAtom {
        let s = random_scaffold(rng, n, d);
        atom_of(&s)
    }

    fn product_coupling(mu: &Array1<f64>, nu: &Array1<f64>) -> Coupling {
        let plan = Array2::from_shape_fn((mu.len(), nu.len()), |(i, j)| mu[i] * nu[j]);
        Coupling::new(plan, mu.clone(), nu.clone()).unwrap()
    }

    #[test]
    fn attr_cost_identical_rows_is_zero() {
        let x = array![[1.0, 2.0]];
        let c = attr_cost_matrix(&x, &x).unwrap();
        assert_eq!(c[[0, 0]], 0.0);
    }

    #[test]
    fn attr_cost_three_four_five() {
        let a = array![[0.0, 0.0]];
        let b = array![[3.0, 4.0]];
        assert_eq!(attr_cost_matrix(&a, &b).unwrap()[[0, 0]], 25.0);
    }

    #[test]
    fn attr_cost_matches_double_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = Array2::from_shape_fn((3, 2), |_| rng.random::<f64>());
        let b = Array2::from_shape_fn((2, 2), |_| rng.random::<f64>());
        let c = attr_cost_matrix(&a, &b).unwrap();
        for i in 0..3 {
            for j in 0..2 {
                let mut acc = 0.0;
                for k in 0..2 {
                    acc += (a[[i, k]] - b[[j, k]]).powi(2);
                }
                assert!((c[[i, j]] - acc).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn attr_cost_rejects_dim_mismatch() {
        let a = Array2::<f64>::zeros((2, 3));
        let b = Array2::<f64>::zeros((2, 2));
        assert!(attr_cost_matrix(&a, &b).is_err());
    }

    #[test]
    fn relational_cost_values() {
        assert_eq!(relational_cost(1.0, 1.0), 0.0);
        assert_eq!(relational_cost(1.0, 0.0), 1.0);
        assert!((relational_cost(0.5, 0.25) - 0.0625).abs() < 1e-15);
    }

    #[test]
    fn objective_zero_at_perfect_self_alignment() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let scaffold = random_scaffold(&mut rng, 4, 3);
        let atom = atom_of(&scaffold);
        let n = scaffold.n();
        let plan = Array2::from_shape_fn((n, n), |(i, j)| {
            if i == j {
                scaffold.measure[i]
            } else {
                0.0
            }
        });
        let coupling = Coupling::new(plan, scaffold.measure.clone(), atom.measure.clone()).unwrap();
        let config = FgwConfig {
            epsilon: 0.0,
            ..FgwConfig::default()
        };
        let value = fgw_objective(&scaffold, &atom, &coupling, &config).unwrap();
        assert!(value.abs() < 1e-12, "self-alignment objective {value}");
    }

    #[test]
    fn objective_rho_zero_equals_frobenius_inner_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let scaffold = random_scaffold(&mut rng, 4, 3);
        let atom = random_atom(&mut rng, 3, 3);
        let coupling = product_coupling(&scaffold.measure, &atom.measure);
        let config = FgwConfig {
            rho: 0.0,
            epsilon: 0.5,
            ..FgwConfig::default()
        };
        let value = fgw_objective(&scaffold, &atom, &coupling, &config).unwrap();
        let cx = attr_cost_matrix(&scaffold.attributes, &atom.attributes).unwrap();
        let direct = (&cx * &coupling.plan).sum() + 0.5 * entropy(&coupling.plan);
        assert!((value - direct).abs() < 1e-12);
    }

    #[test]
    fn objective_matches_quadruple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..10 {
            let nt = rng.random_range(2..=4);
            let nm = rng.random_range(2..=4);
            let scaffold = random_scaffold(&mut rng, nt, 2);
            let atom = random_atom(&mut rng, nm, 2);
            let coupling = product_coupling(&scaffold.measure, &atom.measure);
            let config = FgwConfig {
                rho: rng.random::<f64>(),
                epsilon: 0.01,
                ..FgwConfig::default()
            };
            let fast = fgw_objective(&scaffold, &atom, &coupling, &config).unwrap();
            let cx = attr_cost_matrix(&scaffold.attributes, &atom.attributes).unwrap();
            let brute = objective_brute(
                &cx,
                &scaffold.structure,
                &atom.consensus,
                &coupling.plan,
                &config,
            );
            assert!(
                (fast - brute).abs() < 1e-10,
                "decomposed {fast} vs brute {brute}"
            );
        }
    }

    #[test]
    fn quad_grad_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let scaffold = random_scaffold(&mut rng, 3, 2);
        let atom = random_atom(&mut rng, 3, 2);
        // Random interior plan; the gradient identity does not need feasibility.
        let mut plan = Array2::from_shape_fn((3, 3), |_| rng.random::<f64>() * 0.2 + 0.05);
        let grad = quad_grad(&scaffold.structure, &atom.consensus, &plan);
        let h = 1e-6;
        for i in 0..3 {
            for j in 0..3 {
                let orig = plan[[i, j]];
                plan[[i, j]] = orig + h;
                let up = quad_value(&scaffold.structure, &atom.consensus, &plan);
                plan[[i, j]] = orig - h;
                let dn = quad_value(&scaffold.structure, &atom.consensus, &plan);
                plan[[i, j]] = orig;
                let fd = (up - dn) / (2.0 * h);
                assert!(
                    (grad[[i, j]] - fd).abs() < 1e-5,
                    "grad[{i},{j}] = {} vs fd {}",
                    grad[[i, j]],
                    fd
                );
            }
        }
    }

    #[test]
    fn solve_self_alignment_cost_vanishes_without_entropy() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for rho in [0.0, 0.3, 0.5, 0.9] {
            let scaffold = random_scaffold(&mut rng, 5, 3);
            let atom = atom_of(&scaffold);
            let config = FgwConfig {
                rho,
                epsilon: 0.0,
                ..FgwConfig::default()
            };
            let result = fgw_solve(&scaffold, &atom, &config).unwrap();
            assert!(
                result.cost <= 1e-6,
                "rho={rho}: self-alignment cost {}",
                result.cost
            );
        }
    }

    #[test]
    fn solve_rho_zero_matches_reference_sinkhorn() {
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let scaffold = random_scaffold(&mut rng, 4, 3);
        let atom = random_atom(&mut rng, 3, 3);
        let config = FgwConfig {
            rho: 0.0,
            epsilon: 0.05,
            ..FgwConfig::default()
        };
        let result = fgw_solve(&scaffold, &atom, &config).unwrap();
        let cx = attr_cost_matrix(&scaffold.attributes, &atom.attributes).unwrap();
        let reference = sinkhorn_reference(&cx, &scaffold.measure, &atom.measure, 0.05, 5000);
        let ref_cost = (&cx * &reference).sum() + 0.05 * entropy(&reference);
        assert!(
            (result.cost - ref_cost).abs() < 1e-6,
            "solver {} vs reference {}",
            result.cost,
            ref_cost
        );
        for (a, b) in result.coupling.plan.iter().zip(reference.iter()) {
            assert!((a - b).abs() < 1e-5, "plan mismatch {a} vs {b}");
        }
    }

    #[test]
    fn solve_two_node_beats_grid_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let scaffold = random_scaffold(&mut rng, 2, 2);
        let atom = random_atom(&mut rng, 2, 2);
        let config = FgwConfig {
            rho: 0.5,
            epsilon: 0.0,
            ..FgwConfig::default()
        };
        let result = fgw_solve(&scaffold, &atom, &config).unwrap();
        // With mu = nu = (1/2, 1/2) the polytope is one-dimensional:
        // T(theta) = [[theta, 1/2-theta], [1/2-theta, theta]].
        let cx = attr_cost_matrix(&scaffold.attributes, &atom.attributes).unwrap();
        let mut best = f64::INFINITY;
        for k in 0..=1000 {
            let theta = 0.5 * k as f64 / 1000.0;
            let plan = array![[theta, 0.5 - theta], [0.5 - theta, theta]];
            let value = objective_brute(&cx, &scaffold.structure, &atom.consensus, &plan, &config);
            best = best.min(value);
        }
        assert!(
            result.cost <= best + 1e-4,
            "solver {} vs grid best {}",
            result.cost,
            best
        );
    }

    #[test]
    fn solve_marginals_feasible_on_random_problems() {
        let mut rng = ChaCha8Rng::seed_from_u64(37);
        for _ in 0..10 {
            let nt = rng.random_range(2..=8);
            let nm = rng.random_range(2..=8);
            let scaffold = random_scaffold(&mut rng, nt, 3);
            let atom = random_atom(&mut rng, nm, 3);
            let result = fgw_solve(&scaffold, &atom, &FgwConfig::default()).unwrap();
            let c = &result.coupling;
            let row_dev = max_abs_diff(&c.plan.sum_axis(Axis(1)), &c.row_marginal);
            let col_dev = max_abs_diff(&c.plan.sum_axis(Axis(0)), &c.col_marginal);
            assert!(row_dev < 1e-6 && col_dev < 1e-6, "{row_dev} {col_dev}");
            assert!(c.plan.iter().all(|&t| t >= 0.0));
        }
    }

    #[test]
    fn solve_monotone_descent_with_entropy() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        for _ in 0..5 {
            let scaffold = random_scaffold(&mut rng, 5, 3);
            let atom = random_atom(&mut rng, 4, 3);
            let (_, trace) = fgw_solve_traced(&scaffold, &atom, &FgwConfig::default()).unwrap();
            for w in trace.windows(2) {
                assert!(w[1] <= w[0] + 1e-10, "ascent step: {} -> {}", w[0], w[1]);
            }
        }
    }

    #[test]
    fn solve_cost_equals_objective_at_coupling() {
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        let scaffold = random_scaffold(&mut rng, 4, 3);
        let atom = random_atom(&mut rng, 5, 3);
        let result = fgw_solve(&scaffold, &atom, &FgwConfig::default()).unwrap();
        let recomputed =
            fgw_objective(&scaffold, &atom, &result.coupling, &FgwConfig::default()).unwrap();
        assert!((result.cost - recomputed).abs() < 1e-8);
    }

    #[test]
    fn attribute_scaling_scales_linear_objective_quadratically() {
        let mut rng = ChaCha8Rng::seed_from_u64(47);
        for _ in 0..5 {
            let scaffold = random_scaffold(&mut rng, 3, 2);
            let atom = random_atom(&mut rng, 4, 2);
            let coupling = product_coupling(&scaffold.measure, &atom.measure);
            let config = FgwConfig {
                rho: 0.0,
                epsilon: 0.0,
                ..FgwConfig::default()
            };
            let base = fgw_objective(&scaffold, &atom, &coupling, &config).unwrap();
            let k = 2.0;
            let scaled_scaffold = Scaffold {
                attributes: scaffold.attributes.mapv(|x| k * x),
                ..scaffold.clone()
            };
            let scaled_atom = PriorAtom::new(
                atom.consensus.clone(),
                atom.attributes.mapv(|x| k * x),
                atom.measure.clone(),
            )
            .unwrap();
            let scaled =
                fgw_objective(&scaled_scaffold, &scaled_atom, &coupling, &config).unwrap();
            assert!(
                (scaled - k * k * base).abs() < 1e-9 * (1.0 + base.abs()),
                "{scaled} vs {}",
                k * k * base
            );
        }
    }

    #[test]
    fn zero_mass_rows_get_zero_plan_mass() {
        let mut rng = ChaCha8Rng::seed_from_u64(53);
        let mut scaffold = random_scaffold(&mut rng, 3, 2);
        scaffold.measure = array![0.5, 0.5, 0.0];
        let atom = random_atom(&mut rng, 3, 2);
        let result = fgw_solve(&scaffold, &atom, &FgwConfig::default()).unwrap();
        for j in 0..3 {
            assert_eq!(result.coupling.plan[[2, j]], 0.0);
        }
    }

    #[test]
    fn objective_rejects_marginal_mismatch() {
        let mut rng = ChaCha8Rng::seed_from_u64(59);
        let scaffold = random_scaffold(&mut rng, 3, 2);
        let atom = random_atom(&mut rng, 3, 2);
        let bad = Coupling {
            plan: Array2::from_elem((3, 3), 0.2),
            row_marginal: scaffold.measure.clone(),
            col_marginal: atom.measure.clone(),
        };
        assert!(matches!(
            fgw_objective(&scaffold, &atom, &bad, &FgwConfig::default()),
            Err(Error::MarginalMismatch { .. })
        ));
    }

    #[test]
    fn mask_aware_constructors_reject_bad_inputs() {
        let mask = FeasibilityMask::full(3);
        let w = WeightedTopology::constant(0.5, mask).unwrap();
        let attrs = Array2::zeros((2, 2));
        assert!(Scaffold::new(&w, attrs, uniform_measure(3)).is_err());
    }
}
