//! Fully coupled solver: the continuation family in the coupling level
//! `l ∈ [0, 1]`, sweep operators, adaptive level steps and diagnostics in
//! the contraction norm.
//!
//! At level `l` (with `s = ±1` per [`Mode`]) the coefficients are
//!
//! ```text
//! drift    = (1 − l)(−s c₂′ G*y) + l b(u) + φ
//! diffusion= (1 − l)(−s c₂′ G*z) + l σ(u) + ψ
//! driver   = (1 − l)( s c₂  G x) + l f(u) + γ
//! terminal = l Φ(x) + (1 − l) G x + ξ
//! ```
//!
//! Level 0 is linear and solved by [`crate::linear_fbsde`]. Each further
//! level `l = l₀ + δ` is solved by iterating the anchored map: given `U`,
//! solve the level-`l₀` problem, linearized at the accepted level-`l₀`
//! solution, with the level difference evaluated at `U` moved into the
//! forcing. Its contraction factor shrinks with `δ`, which is what the
//! adaptive step control acts on.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::affine::{
    stack, AffineConstants, AffineError, AffineFactorization, AffineJacobians, NodeConstants,
    NodeJacobian,
};
use crate::algebra::{CoeffError, CoefficientSet, GStructure};
use crate::chain::{represent_martingale, DiscreteChainTree};
use crate::field::{Forcing, NodeForcing, SolutionField};
use crate::linear_fbsde::{solve_linear, DefectKind, LinearError, LinearFBSDEProblem, LinearResidual};
use crate::Mode;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SolverError {
    #[error("invalid problem: {0}")]
    Invalid(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Coefficient(#[from] CoeffError),
    #[error(transparent)]
    Linear(#[from] LinearError),
    #[error(transparent)]
    Affine(#[from] AffineError),
    #[error("implicit step did not converge at node {node} (last change {change:e})")]
    InnerFixedPoint { node: usize, change: f64 },
    #[error("sweeps diverged at level {level} (sweep {sweep}, ratio {ratio:.3})")]
    Diverged { level: f64, sweep: usize, ratio: f64 },
    #[error("non-finite values at level {level} after sweep {sweep}")]
    NonFinite { level: f64, sweep: usize },
    #[error("level {level} not converged after {sweeps} sweeps (last squared contraction norm {last:e})")]
    MaxSweeps { level: f64, sweeps: usize, last: f64 },
    #[error(
        "continuation stalled at level {level} with step {delta} below the minimum; the problem may violate monotonicity (run `check`): {cause}"
    )]
    DeltaMin { level: f64, delta: f64, cause: String },
    #[error("final residual {value:e} exceeds {tol:e} at node {node}")]
    Residual { value: f64, tol: f64, node: usize },
}

impl SolverError {
    /// Failures that a smaller continuation step may cure.
    fn is_recoverable(&self) -> bool {
        matches!(
            self,
            SolverError::Coefficient(_)
                | SolverError::Affine(AffineError::Singular { .. })
                | SolverError::InnerFixedPoint { .. }
                | SolverError::Diverged { .. }
                | SolverError::NonFinite { .. }
                | SolverError::MaxSweeps { .. }
        )
    }
}

/// Coupled problem on a tree.
#[derive(Debug, Clone)]
pub struct FBSDEProblem {
    pub coeffs: CoefficientSet,
    pub g: GStructure,
    pub x0: DVector<f64>,
    pub mode: Mode,
    pub c2: f64,
    pub c2_prime: f64,
    pub tree: Arc<DiscreteChainTree>,
    pub forcing: NodeForcing,
}

impl FBSDEProblem {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        coeffs: CoefficientSet,
        g: GStructure,
        x0: DVector<f64>,
        mode: Mode,
        c2: f64,
        c2_prime: f64,
        tree: Arc<DiscreteChainTree>,
        forcing: &Forcing,
    ) -> Result<Self, SolverError> {
        let node_forcing = forcing.materialize(&tree, g.n(), g.m());
        Self::with_node_forcing(coeffs, g, x0, mode, c2, c2_prime, tree, node_forcing)
    }

    #[allow(clippy::too_many_arguments)]
    pub fn with_node_forcing(
        coeffs: CoefficientSet,
        g: GStructure,
        x0: DVector<f64>,
        mode: Mode,
        c2: f64,
        c2_prime: f64,
        tree: Arc<DiscreteChainTree>,
        forcing: NodeForcing,
    ) -> Result<Self, SolverError> {
        let (n, m, d) = coeffs.dims();
        if g.n() != n || g.m() != m {
            return Err(SolverError::Invalid(format!(
                "G is {}x{}, coefficients have n = {n}, m = {m}",
                g.m(),
                g.n()
            )));
        }
        if tree.states() != d {
            return Err(SolverError::Invalid(format!(
                "coefficients use d = {d}, tree has {} states",
                tree.states()
            )));
        }
        if x0.len() != n || x0.iter().any(|v| !v.is_finite()) {
            return Err(SolverError::Invalid(format!("x0 must be a finite vector of length {n}")));
        }
        for (name, c) in [("c2", c2), ("c2'", c2_prime)] {
            if !(c > 0.0) || !c.is_finite() {
                return Err(SolverError::Invalid(format!("{name} = {c} must be positive")));
            }
        }
        forcing.check(&tree, n, m).map_err(SolverError::Invalid)?;
        Ok(Self {
            coeffs,
            g,
            x0,
            mode,
            c2,
            c2_prime,
            tree,
            forcing,
        })
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        self.coeffs.dims()
    }

    pub fn with_x0(&self, x0: DVector<f64>) -> Self {
        Self { x0, ..self.clone() }
    }

    pub fn with_forcing(&self, forcing: NodeForcing) -> Self {
        Self {
            forcing,
            ..self.clone()
        }
    }

    /// The level-0 problem as a linear problem (`λ = 1`).
    pub fn level_zero(&self) -> Result<LinearFBSDEProblem, SolverError> {
        Ok(LinearFBSDEProblem::with_node_forcing(
            self.mode,
            self.c2,
            self.c2_prime,
            1.0,
            self.g.clone(),
            self.x0.clone(),
            self.forcing.clone(),
            self.tree.clone(),
        )?)
    }

    fn node_time_state(&self, v: usize) -> (f64, usize) {
        (self.tree.time(self.tree.level_of(v)), self.tree.state_of(v))
    }

    /// Level-`l` drift, diffusion and driver at an internal node.
    pub fn level_coefficients(
        &self,
        l: f64,
        v: usize,
        x: &DVector<f64>,
        y: &DVector<f64>,
        z: &DMatrix<f64>,
    ) -> Result<(DVector<f64>, DMatrix<f64>, DVector<f64>), CoeffError> {
        let (t, s) = self.node_time_state(v);
        let sign = self.mode.sign();
        let gm = self.g.g();
        let gt = gm.transpose();
        let lin = 1.0 - l;
        let mut drift = &self.forcing.phi[v] - (&gt * y) * (lin * sign * self.c2_prime);
        let mut diff = &self.forcing.psi[v] - (&gt * z) * (lin * sign * self.c2_prime);
        let mut driver = &self.forcing.gamma[v] + (gm * x) * (lin * sign * self.c2);
        if l != 0.0 {
            drift += self.coeffs.eval_b(t, s, x, y, z)? * l;
            diff += self.coeffs.eval_sigma(t, s, x, y, z)? * l;
            driver += self.coeffs.eval_f(t, s, x, y, z)? * l;
        }
        Ok((drift, diff, driver))
    }

    /// Level-`l` terminal value at a leaf.
    pub fn level_terminal(&self, l: f64, v: usize, x: &DVector<f64>) -> Result<DVector<f64>, CoeffError> {
        let mut out = &self.forcing.xi[self.tree.leaf_index(v)] + (self.g.g() * x) * (1.0 - l);
        if l != 0.0 {
            out += self.coeffs.eval_phi(self.tree.state_of(v), x)? * l;
        }
        Ok(out)
    }
}

/// Scalarization of the matrix measure `d⟨M,M⟩` in the contraction norm.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum NormWeight {
    /// `tr Q`.
    #[default]
    Trace,
    /// Largest eigenvalue of `Q`.
    MaxEigenvalue,
}

/// Sweep operator used inside a level.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum SweepKind {
    /// Level-`l₀` linearization at the previous accepted solution.
    #[default]
    Anchored,
    /// Linearization of the target level at the warm start.
    Chord,
    /// Forward pass with frozen `(Y, Z)`, then backward pass with the new `X`.
    Decoupled,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ContinuationConfig {
    pub delta_init: f64,
    pub delta_min: f64,
    pub grow: f64,
    pub shrink: f64,
    /// Stop when both the square root of the contraction norm and the sup
    /// norm of successive differences are below this.
    pub tol: f64,
    pub max_sweeps: usize,
    /// A level whose measured ratio exceeds this is rejected.
    pub max_ratio: f64,
    /// Levels converging within this many sweeps grow the step.
    pub fast_sweeps: usize,
    pub residual_tol: f64,
    pub weight: NormWeight,
    pub sweep: SweepKind,
    pub inner_tol: f64,
    pub inner_max_iter: usize,
    pub inner_damping: f64,
}

impl Default for ContinuationConfig {
    fn default() -> Self {
        Self {
            delta_init: 0.5,
            delta_min: 1.0 / 64.0,
            grow: 2.0,
            shrink: 0.5,
            tol: 1e-10,
            max_sweeps: 200,
            max_ratio: 0.9,
            fast_sweeps: 12,
            residual_tol: 1e-8,
            weight: NormWeight::Trace,
            sweep: SweepKind::Anchored,
            inner_tol: 1e-12,
            inner_max_iter: 50,
            inner_damping: 1.0,
        }
    }
}

impl ContinuationConfig {
    pub fn validate(&self) -> Result<(), SolverError> {
        let bad = |msg: String| Err(SolverError::Config(msg));
        if !(self.delta_min > 0.0 && self.delta_min <= self.delta_init && self.delta_init <= 1.0) {
            return bad(format!(
                "need 0 < delta_min <= delta_init <= 1, got {} and {}",
                self.delta_min, self.delta_init
            ));
        }
        if !(self.grow >= 1.0) || !(self.shrink > 0.0 && self.shrink < 1.0) {
            return bad("grow must be >= 1 and shrink in (0, 1)".into());
        }
        if !(self.tol > 0.0) || !(self.residual_tol > 0.0) || !(self.inner_tol > 0.0) {
            return bad("tolerances must be positive".into());
        }
        if self.max_sweeps == 0 || self.inner_max_iter == 0 {
            return bad("iteration limits must be positive".into());
        }
        if !(self.max_ratio > 0.0 && self.max_ratio < 1.0) {
            return bad(format!("max_ratio = {} must lie in (0, 1)", self.max_ratio));
        }
        if !(self.inner_damping > 0.0 && self.inner_damping <= 1.0) {
            return bad(format!("inner_damping = {} must lie in (0, 1]", self.inner_damping));
        }
        Ok(())
    }
}

/// Sweep statistics of one attempted level.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LevelStats {
    pub level: f64,
    pub delta: f64,
    pub accepted: bool,
    pub sweeps: usize,
    /// Contraction norm of each successive difference.
    pub norms: Vec<f64>,
    /// Quotients of successive norms.
    pub ratios: Vec<f64>,
    pub failure: Option<String>,
}

impl LevelStats {
    /// Last measured ratio, `0` when the first sweep already met the
    /// tolerance.
    pub fn last_ratio(&self) -> f64 {
        self.ratios.last().copied().unwrap_or(0.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConvergenceReport {
    pub converged: bool,
    pub sweep: SweepKind,
    pub levels: Vec<LevelStats>,
    pub total_sweeps: usize,
    pub final_residual: LinearResidual,
}

/// Increments used by the sweeps: compensated `ΔM`, or raw `Δm = e_i − e_s`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Noise {
    Compensated,
    Raw,
}

/// One decoupling iteration at level `l`: forward pass for `X` with `(Y, Z)`
/// from `current`, then backward pass for `(Y, Z)` with the new `X` and an
/// implicit driver.
pub fn picard_sweep(
    problem: &FBSDEProblem,
    l: f64,
    current: &SolutionField,
    config: &ContinuationConfig,
) -> Result<SolutionField, SolverError> {
    decoupled_sweep(problem, l, current, config, Noise::Compensated)
}

/// Same as [`picard_sweep`]. With [`Noise::Raw`] the problem's coefficients
/// must already be in chain-driven form (see [`crate::to_chain_driven`]);
/// the linear part and the forcing are converted here.
pub fn decoupled_sweep(
    problem: &FBSDEProblem,
    l: f64,
    current: &SolutionField,
    config: &ContinuationConfig,
    noise: Noise,
) -> Result<SolutionField, SolverError> {
    let tree = &*problem.tree;
    let (n, m, d) = problem.dims();
    let dt = tree.dt();
    let sign = problem.mode.sign();
    let cp = problem.c2_prime;
    let mut next = SolutionField::zeros(tree, n, m);
    next.x[0] = problem.x0.clone();
    for v in tree.internal_nodes() {
        let (mut drift, diff, _) =
            problem.level_coefficients(l, v, &next.x[v], &current.y[v], &current.z[v])?;
        let tr = tree.transition_at(v);
        let s = tree.state_of(v);
        if noise == Noise::Raw {
            let lin_diff = &problem.forcing.psi[v] - (problem.g.g().transpose() * &current.z[v]) * ((1.0 - l) * sign * cp);
            drift -= lin_diff * &tr.rates;
        }
        let base = &next.x[v] + drift * dt;
        for (i, c) in tree.children(v).enumerate() {
            next.x[c] = match noise {
                Noise::Compensated => &base + &diff * &tr.increments[i],
                Noise::Raw => {
                    let mut jump = &base + diff.column(i);
                    jump -= diff.column(s);
                    jump
                }
            };
        }
    }
    for v in tree.leaves() {
        next.y[v] = problem.level_terminal(l, v, &next.x[v])?;
    }
    for k in (0..tree.steps()).rev() {
        let range = tree.level_nodes(k);
        let start = range.start;
        let level: Vec<Result<(DVector<f64>, DMatrix<f64>), SolverError>> = range
            .into_par_iter()
            .map(|v| {
                let tr = tree.transition_at(v);
                let values: Vec<DVector<f64>> = tree.children(v).map(|c| next.y[c].clone()).collect();
                let rep = represent_martingale(&values, tr);
                let x = &next.x[v];
                let z = &rep.z;
                let mut y = current.y[v].clone();
                let mut change = f64::INFINITY;
                for _ in 0..config.inner_max_iter {
                    let (_, _, mut driver) = problem.level_coefficients(l, v, x, &y, z)?;
                    let target = match noise {
                        Noise::Compensated => &rep.mean + driver * dt,
                        Noise::Raw => {
                            driver += (z * &tr.rates) * (1.0 - l);
                            let mut drift_dm = tr.probs.clone();
                            drift_dm[tree.state_of(v)] -= 1.0;
                            &rep.mean + driver * dt - z * drift_dm
                        }
                    };
                    let updated = &y * (1.0 - config.inner_damping) + target * config.inner_damping;
                    change = (&updated - &y).amax();
                    y = updated;
                    if change <= config.inner_tol * y.amax().max(1.0) {
                        break;
                    }
                }
                if !(change <= config.inner_tol * y.amax().max(1.0)) {
                    return Err(SolverError::InnerFixedPoint { node: v, change });
                }
                Ok((y, rep.z))
            })
            .collect();
        for (i, r) in level.into_iter().enumerate() {
            let (y, z) = r?;
            next.y[start + i] = y;
            next.z[start + i] = z;
        }
    }
    let _ = d;
    Ok(next)
}

/// Linearization of the level-`l₀` coefficients at a field, factorized for
/// repeated solves.
pub struct Anchor {
    pub level: f64,
    jac: AffineJacobians,
    factor: AffineFactorization,
}

impl Anchor {
    pub fn new(problem: &FBSDEProblem, level: f64, at: &SolutionField) -> Result<Self, SolverError> {
        let jac = level_jacobians(problem, level, at)?;
        let (n, m, _) = problem.dims();
        let factor = AffineFactorization::new(&problem.tree, n, m, &jac)?;
        Ok(Self { level, jac, factor })
    }

    /// One application of the anchored map at level `l`.
    pub fn sweep(
        &self,
        problem: &FBSDEProblem,
        l: f64,
        current: &SolutionField,
    ) -> Result<SolutionField, SolverError> {
        let tree = &*problem.tree;
        let nodes: Vec<Result<NodeConstants, SolverError>> = tree
            .internal_nodes()
            .into_par_iter()
            .map(|v| {
                let (x, y, z) = (&current.x[v], &current.y[v], &current.z[v]);
                let (drift, diff, driver) = problem.level_coefficients(l, v, x, y, z)?;
                let u = stack(x, y, z);
                let nj = &self.jac.nodes[v];
                Ok(NodeConstants {
                    drift: drift - &nj.drift * &u,
                    diffusion: DVector::from_column_slice(diff.as_slice()) - &nj.diffusion * &u,
                    driver: driver - &nj.driver * &u,
                })
            })
            .collect();
        let nodes = nodes.into_iter().collect::<Result<Vec<_>, _>>()?;
        let leaf_start = tree.leaves().start;
        let terminal = tree
            .leaves()
            .map(|v| {
                let x = &current.x[v];
                Ok(problem.level_terminal(l, v, x)? - &self.jac.terminal[v - leaf_start] * x)
            })
            .collect::<Result<Vec<_>, SolverError>>()?;
        Ok(self
            .factor
            .solve(tree, &AffineConstants { nodes, terminal }, &problem.x0)?)
    }
}

fn fd_step(v: f64) -> f64 {
    1e-6 * v.abs().max(1.0)
}

/// Jacobians of the level-`l` coefficients at `at`: exact for the linear
/// part, central differences for the user coefficients.
fn level_jacobians(problem: &FBSDEProblem, l: f64, at: &SolutionField) -> Result<AffineJacobians, SolverError> {
    let tree = &*problem.tree;
    let (n, m, d) = problem.dims();
    let dim = n + m + m * d;
    let sign = problem.mode.sign();
    let gm = problem.g.g();
    let gt = gm.transpose();
    let lin = 1.0 - l;
    let mut drift_lin = DMatrix::zeros(n, dim);
    drift_lin
        .view_mut((0, n), (n, m))
        .copy_from(&(&gt * (-lin * sign * problem.c2_prime)));
    let mut diff_lin = DMatrix::zeros(n * d, dim);
    for j in 0..d {
        diff_lin
            .view_mut((j * n, n + m + j * m), (n, m))
            .copy_from(&(&gt * (-lin * sign * problem.c2_prime)));
    }
    let mut driver_lin = DMatrix::zeros(m, dim);
    driver_lin
        .view_mut((0, 0), (m, n))
        .copy_from(&(gm * (lin * sign * problem.c2)));

    let nodes: Vec<Result<NodeJacobian, SolverError>> = tree
        .internal_nodes()
        .into_par_iter()
        .map(|v| {
            let mut nj = NodeJacobian {
                drift: drift_lin.clone(),
                diffusion: diff_lin.clone(),
                driver: driver_lin.clone(),
            };
            if l == 0.0 {
                return Ok(nj);
            }
            let (t, s) = problem.node_time_state(v);
            let u0 = stack(&at.x[v], &at.y[v], &at.z[v]);
            let eval = |u: &DVector<f64>| -> Result<DVector<f64>, CoeffError> {
                let x = u.rows(0, n).into_owned();
                let y = u.rows(n, m).into_owned();
                let z = DMatrix::from_column_slice(m, d, u.rows(n + m, m * d).as_slice());
                let b = problem.coeffs.eval_b(t, s, &x, &y, &z)?;
                let sg = problem.coeffs.eval_sigma(t, s, &x, &y, &z)?;
                let f = problem.coeffs.eval_f(t, s, &x, &y, &z)?;
                let mut out = DVector::zeros(n + n * d + m);
                out.rows_mut(0, n).copy_from(&b);
                out.rows_mut(n, n * d).copy_from_slice(sg.as_slice());
                out.rows_mut(n + n * d, m).copy_from(&f);
                Ok(out)
            };
            for j in 0..dim {
                let h = fd_step(u0[j]);
                let mut up = u0.clone();
                up[j] += h;
                let mut dn = u0.clone();
                dn[j] -= h;
                let col = (eval(&up)? - eval(&dn)?) / (2.0 * h) * l;
                for i in 0..n {
                    nj.drift[(i, j)] += col[i];
                }
                for i in 0..n * d {
                    nj.diffusion[(i, j)] += col[n + i];
                }
                for i in 0..m {
                    nj.driver[(i, j)] += col[n + n * d + i];
                }
            }
            Ok(nj)
        })
        .collect();
    let nodes = nodes.into_iter().collect::<Result<Vec<_>, _>>()?;
    let terminal = tree
        .leaves()
        .map(|v| {
            let mut t = gm * lin;
            if l != 0.0 {
                let x0 = &at.x[v];
                let s = tree.state_of(v);
                for j in 0..n {
                    let h = fd_step(x0[j]);
                    let mut up = x0.clone();
                    up[j] += h;
                    let mut dn = x0.clone();
                    dn[j] -= h;
                    let col = (problem.coeffs.eval_phi(s, &up)? - problem.coeffs.eval_phi(s, &dn)?)
                        / (2.0 * h)
                        * l;
                    for i in 0..m {
                        t[(i, j)] += col[i];
                    }
                }
            }
            Ok(t)
        })
        .collect::<Result<Vec<_>, SolverError>>()?;
    Ok(AffineJacobians { nodes, terminal })
}

/// Contraction norm of a field difference:
/// `Σ_k E|û_k|² (1 + w_k) Δt + E|x̂_N|²`, where `w` scalarizes `Q` at the
/// node's state and time and `E` is the exact tree expectation.
pub fn contraction_norm(diff: &SolutionField, tree: &DiscreteChainTree, weight: NormWeight) -> f64 {
    let dt = tree.dt();
    let mut total = 0.0;
    for v in tree.internal_nodes() {
        let k = tree.level_of(v);
        let q = tree.table().qv_density(k, tree.state_of(v));
        let w = match weight {
            NormWeight::Trace => q.trace(),
            NormWeight::MaxEigenvalue => SymmetricEigen::new(q).eigenvalues.max().max(0.0),
        };
        let u2 = diff.x[v].norm_squared() + diff.y[v].norm_squared() + diff.z[v].norm_squared();
        total += tree.probability(v) * u2 * (1.0 + w) * dt;
    }
    for v in tree.leaves() {
        total += tree.probability(v) * diff.x[v].norm_squared();
    }
    total
}

/// Iterates the configured sweep at level `l` from `warm_start` until
/// successive fields agree to `config.tol`.
///
/// For [`SweepKind::Anchored`] the given anchor is used; without one the
/// level is linearized at the warm start (as for [`SweepKind::Chord`]).
pub fn solve_level(
    problem: &FBSDEProblem,
    l: f64,
    warm_start: &SolutionField,
    anchor: Option<&Anchor>,
    config: &ContinuationConfig,
) -> Result<(SolutionField, LevelStats), SolverError> {
    let owned;
    let anchor = match (config.sweep, anchor) {
        (SweepKind::Decoupled, _) => None,
        (SweepKind::Anchored, Some(a)) => Some(a),
        _ => {
            owned = Anchor::new(problem, l, warm_start)?;
            Some(&owned)
        }
    };
    let mut stats = LevelStats {
        level: l,
        delta: 0.0,
        accepted: false,
        sweeps: 0,
        norms: Vec::new(),
        ratios: Vec::new(),
        failure: None,
    };
    let mut current = warm_start.clone();
    for sweep in 1..=config.max_sweeps {
        let next = match anchor {
            Some(a) => a.sweep(problem, l, &current)?,
            None => picard_sweep(problem, l, &current, config)?,
        };
        if !next.is_finite() {
            return Err(SolverError::NonFinite { level: l, sweep });
        }
        let diff = next.difference(&current);
        let norm = contraction_norm(&diff, &problem.tree, config.weight);
        let sup = diff.sup_norm();
        stats.sweeps = sweep;
        if let Some(&prev) = stats.norms.last() {
            let ratio = if prev > 0.0 { norm / prev } else { 0.0 };
            stats.ratios.push(ratio);
            if !(ratio <= config.max_ratio) && norm.sqrt().max(sup) > config.tol {
                return Err(SolverError::Diverged {
                    level: l,
                    sweep,
                    ratio,
                });
            }
        }
        stats.norms.push(norm);
        current = next;
        if norm.sqrt().max(sup) <= config.tol {
            stats.accepted = true;
            return Ok((current, stats));
        }
    }
    Err(SolverError::MaxSweeps {
        level: l,
        sweeps: config.max_sweeps,
        last: stats.norms.last().copied().unwrap_or(f64::NAN),
    })
}

/// Marches the coupling level from 0 to 1.
///
/// Level 0 comes from the linear solver, or, when `init` is given, from
/// sweeps started at `init`. Each level is warm-started from the previous
/// one; the step halves on failure and grows after fast convergence.
pub fn solve_continuation(
    problem: &FBSDEProblem,
    config: &ContinuationConfig,
    init: Option<&SolutionField>,
) -> Result<(SolutionField, ConvergenceReport), SolverError> {
    config.validate()?;
    let (n, m, d) = problem.dims();
    if let Some(f) = init {
        if f.node_count() != problem.tree.node_count() || f.dims() != (n, m, d) {
            return Err(SolverError::Invalid("initial field does not match the problem".into()));
        }
    }
    let mut levels = Vec::new();
    let mut field = match init {
        None => {
            let sol = solve_linear(&problem.level_zero()?)?;
            levels.push(LevelStats {
                level: 0.0,
                delta: 0.0,
                accepted: true,
                sweeps: 0,
                norms: Vec::new(),
                ratios: Vec::new(),
                failure: None,
            });
            sol.field
        }
        Some(start) => {
            let mut level_cfg = config.clone();
            if level_cfg.sweep == SweepKind::Anchored {
                level_cfg.sweep = SweepKind::Chord;
            }
            let (f, stats) = solve_level(problem, 0.0, start, None, &level_cfg)?;
            levels.push(stats);
            f
        }
    };
    let mut l0 = 0.0_f64;
    let mut delta = config.delta_init;
    let mut anchor = match config.sweep {
        SweepKind::Anchored => Some(Anchor::new(problem, 0.0, &field)?),
        _ => None,
    };
    while l0 < 1.0 {
        let l = (l0 + delta).min(1.0);
        match solve_level(problem, l, &field, anchor.as_ref(), config) {
            Ok((f, mut stats)) => {
                stats.delta = l - l0;
                let fast = stats.sweeps <= config.fast_sweeps;
                levels.push(stats);
                field = f;
                l0 = l;
                if fast {
                    delta = (delta * config.grow).min(1.0);
                }
                if l0 < 1.0 && config.sweep == SweepKind::Anchored {
                    anchor = Some(Anchor::new(problem, l0, &field)?);
                }
            }
            Err(e) if e.is_recoverable() => {
                levels.push(LevelStats {
                    level: l,
                    delta: l - l0,
                    accepted: false,
                    sweeps: 0,
                    norms: Vec::new(),
                    ratios: Vec::new(),
                    failure: Some(e.to_string()),
                });
                delta *= config.shrink;
                if delta < config.delta_min {
                    return Err(SolverError::DeltaMin {
                        level: l0,
                        delta,
                        cause: e.to_string(),
                    });
                }
            }
            Err(e) => return Err(e),
        }
    }
    let final_residual = solution_residual(&field, problem, 1.0)?;
    if !(final_residual.max <= config.residual_tol) {
        return Err(SolverError::Residual {
            value: final_residual.max,
            tol: config.residual_tol,
            node: final_residual.worst_node,
        });
    }
    let total_sweeps = levels.iter().map(|s| s.sweeps).sum();
    Ok((
        field,
        ConvergenceReport {
            converged: true,
            sweep: config.sweep,
            levels,
            total_sweeps,
            final_residual,
        },
    ))
}

/// Worst discrete defects of `field` against the level-`l` equations.
pub fn solution_residual(
    field: &SolutionField,
    problem: &FBSDEProblem,
    l: f64,
) -> Result<LinearResidual, SolverError> {
    let tree = &*problem.tree;
    let dt = tree.dt();
    let mut res = LinearResidual::default();
    res.record(DefectKind::Forward, (&field.x[0] - &problem.x0).amax(), 0);
    for v in tree.internal_nodes() {
        let (drift, diff, driver) = problem.level_coefficients(l, v, &field.x[v], &field.y[v], &field.z[v])?;
        let tr = tree.transition_at(v);
        let mut mean = DVector::zeros(field.y[v].len());
        for (i, c) in tree.children(v).enumerate() {
            let pred = &field.x[v] + &drift * dt + &diff * &tr.increments[i];
            res.record(DefectKind::Forward, (&field.x[c] - pred).amax(), v);
            mean.axpy(tr.probs[i], &field.y[c], 1.0);
        }
        res.record(DefectKind::Backward, (&field.y[v] - &mean - driver * dt).amax(), v);
        for (i, c) in tree.children(v).enumerate() {
            let defect = &field.y[c] - &mean - &field.z[v] * &tr.increments[i];
            res.record(DefectKind::Representation, defect.amax(), v);
        }
    }
    for v in tree.leaves() {
        let target = problem.level_terminal(l, v, &field.x[v])?;
        res.record(DefectKind::Terminal, (&field.y[v] - target).amax(), v);
    }
    Ok(res)
}
