//! Brute-force reference solver. All tree unknowns go into one flat vector
//! and the complete set of discrete equations is solved at once with a
//! damped chord iteration on a finite-difference Jacobian. Nothing here is
//! shared with the sweep-based solver's residual code.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::algebra::CoeffError;
use crate::field::SolutionField;
use crate::solver::FBSDEProblem;

/// Largest tree the oracle accepts.
pub const MAX_NODES: usize = 10_000;
/// Largest number of flat unknowns (dense LU).
pub const MAX_UNKNOWNS: usize = 6_000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OracleError {
    #[error("tree too large for the oracle: {nodes} nodes / {unknowns} unknowns (limits {MAX_NODES} / {MAX_UNKNOWNS})")]
    Budget { nodes: usize, unknowns: usize },
    #[error(transparent)]
    Coefficient(#[from] CoeffError),
    #[error("singular Jacobian")]
    Singular,
    #[error("no convergence after {iterations} iterations (defect {defect:e})")]
    NotConverged { iterations: usize, defect: f64 },
    #[error("invalid oracle option: {0}")]
    Options(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OracleOptions {
    pub damping: f64,
    pub tol: f64,
    pub max_iters: usize,
    /// Recompute the Jacobian every this many iterations.
    pub refresh: usize,
}

impl Default for OracleOptions {
    fn default() -> Self {
        Self {
            damping: 0.5,
            tol: 1e-12,
            max_iters: 200,
            refresh: 20,
        }
    }
}

/// Stacked defect norms (max abs per equation block).
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct GlobalResidual {
    pub root: f64,
    pub forward: f64,
    pub backward: f64,
    pub representation: f64,
    pub terminal: f64,
    pub max: f64,
    pub worst_node: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OracleReport {
    pub unknowns: usize,
    pub iterations: usize,
    pub jacobians: usize,
    pub defect: f64,
}

struct Layout {
    n: usize,
    m: usize,
    d: usize,
    nodes: usize,
    internal: usize,
}

impl Layout {
    fn new(problem: &FBSDEProblem) -> Self {
        let (n, m, d) = problem.dims();
        Self {
            n,
            m,
            d,
            nodes: problem.tree.node_count(),
            internal: problem.tree.internal_nodes().len(),
        }
    }

    fn size(&self) -> usize {
        (self.n + self.m) * self.nodes + self.m * self.d * self.internal
    }

    fn x(&self, v: usize) -> usize {
        v * self.n
    }

    fn y(&self, v: usize) -> usize {
        self.n * self.nodes + v * self.m
    }

    fn z(&self, v: usize) -> usize {
        (self.n + self.m) * self.nodes + v * self.m * self.d
    }

    fn pack(&self, field: &SolutionField) -> DVector<f64> {
        let mut u = DVector::zeros(self.size());
        for v in 0..self.nodes {
            u.rows_mut(self.x(v), self.n).copy_from(&field.x[v]);
            u.rows_mut(self.y(v), self.m).copy_from(&field.y[v]);
            if v < self.internal {
                u.rows_mut(self.z(v), self.m * self.d)
                    .copy_from_slice(field.z[v].as_slice());
            }
        }
        u
    }

    fn unpack(&self, u: &DVector<f64>) -> SolutionField {
        let (n, m, d) = (self.n, self.m, self.d);
        SolutionField {
            x: (0..self.nodes).map(|v| u.rows(self.x(v), n).into_owned()).collect(),
            y: (0..self.nodes).map(|v| u.rows(self.y(v), m).into_owned()).collect(),
            z: (0..self.nodes)
                .map(|v| {
                    if v < self.internal {
                        DMatrix::from_column_slice(m, d, u.rows(self.z(v), m * d).as_slice())
                    } else {
                        DMatrix::zeros(m, d)
                    }
                })
                .collect(),
        }
    }
}

/// Level-`l` coefficients, written out independently of the solver.
fn coefficients(
    problem: &FBSDEProblem,
    l: f64,
    v: usize,
    x: &DVector<f64>,
    y: &DVector<f64>,
    z: &DMatrix<f64>,
) -> Result<(DVector<f64>, DMatrix<f64>, DVector<f64>), CoeffError> {
    let tree = &problem.tree;
    let t = tree.time(tree.level_of(v));
    let s = tree.state_of(v);
    let g = problem.g.g();
    let k = problem.mode.sign();
    let b = problem.coeffs.eval_b(t, s, x, y, z)?;
    let sigma = problem.coeffs.eval_sigma(t, s, x, y, z)?;
    let f = problem.coeffs.eval_f(t, s, x, y, z)?;
    let drift = b * l + g.tr_mul(y) * (-(1.0 - l) * k * problem.c2_prime) + &problem.forcing.phi[v];
    let diffusion = sigma * l + g.tr_mul(z) * (-(1.0 - l) * k * problem.c2_prime) + &problem.forcing.psi[v];
    let driver = f * l + g * x * ((1.0 - l) * k * problem.c2) + &problem.forcing.gamma[v];
    Ok((drift, diffusion, driver))
}

fn terminal(problem: &FBSDEProblem, l: f64, v: usize, x: &DVector<f64>) -> Result<DVector<f64>, CoeffError> {
    let tree = &problem.tree;
    let phi = problem.coeffs.eval_phi(tree.state_of(v), x)?;
    Ok(phi * l + problem.g.g() * x * (1.0 - l) + &problem.forcing.xi[v - tree.leaves().start])
}

/// Flat residual vector in the same layout as the unknowns, plus per-block
/// maxima.
fn residual_vector(
    problem: &FBSDEProblem,
    l: f64,
    lay: &Layout,
    field: &SolutionField,
) -> Result<(DVector<f64>, GlobalResidual), CoeffError> {
    let tree = &problem.tree;
    let (n, m, d) = (lay.n, lay.m, lay.d);
    let dt = tree.dt();
    let mut r = DVector::zeros(lay.size());
    let mut g = GlobalResidual::default();
    let note = |slot: &mut f64, max: &mut f64, worst: &mut usize, val: f64, v: usize| {
        *slot = slot.max(val);
        if val > *max {
            *max = val;
            *worst = v;
        }
    };
    let root = &field.x[0] - &problem.x0;
    note(&mut g.root, &mut g.max, &mut g.worst_node, root.amax(), 0);
    r.rows_mut(lay.x(0), n).copy_from(&root);
    for v in 0..lay.internal {
        let (drift, diffusion, driver) = coefficients(problem, l, v, &field.x[v], &field.y[v], &field.z[v])?;
        let tr = tree.transition_at(v);
        let kids: Vec<usize> = tree.children(v).collect();
        for (i, &c) in kids.iter().enumerate() {
            let e = &field.x[c] - &field.x[v] - &drift * dt - &diffusion * &tr.increments[i];
            note(&mut g.forward, &mut g.max, &mut g.worst_node, e.amax(), c);
            r.rows_mut(lay.x(c), n).copy_from(&e);
        }
        let mut mean = DVector::zeros(m);
        for (i, &c) in kids.iter().enumerate() {
            mean += &field.y[c] * tr.probs[i];
        }
        let e = &field.y[v] - &mean - driver * dt;
        note(&mut g.backward, &mut g.max, &mut g.worst_node, e.amax(), v);
        r.rows_mut(lay.y(v), m).copy_from(&e);
        for (i, &c) in kids.iter().enumerate() {
            let e = field.z[v].column(i) - (&field.y[c] - &mean);
            note(&mut g.representation, &mut g.max, &mut g.worst_node, e.amax(), v);
            r.rows_mut(lay.z(v) + i * m, m).copy_from(&e);
        }
    }
    let _ = d;
    for v in tree.leaves() {
        let e = &field.y[v] - terminal(problem, l, v, &field.x[v])?;
        note(&mut g.terminal, &mut g.max, &mut g.worst_node, e.amax(), v);
        r.rows_mut(lay.y(v), m).copy_from(&e);
    }
    Ok((r, g))
}

/// Defects of `field` against the level-`l` discrete equations: root value,
/// forward steps, backward means, canonical integrands and terminal values.
pub fn global_residual(
    field: &SolutionField,
    problem: &FBSDEProblem,
    l: f64,
) -> Result<GlobalResidual, OracleError> {
    let lay = Layout::new(problem);
    Ok(residual_vector(problem, l, &lay, field)?.1)
}

fn jacobian(
    problem: &FBSDEProblem,
    l: f64,
    lay: &Layout,
    u: &DVector<f64>,
    base: &DVector<f64>,
) -> Result<DMatrix<f64>, CoeffError> {
    let size = lay.size();
    let mut jac = DMatrix::zeros(size, size);
    let mut probe = u.clone();
    for j in 0..size {
        let h = 1e-7 * u[j].abs().max(1.0);
        probe[j] = u[j] + h;
        let (r, _) = residual_vector(problem, l, lay, &lay.unpack(&probe))?;
        jac.set_column(j, &((r - base) / h));
        probe[j] = u[j];
    }
    Ok(jac)
}

/// Solves the level-`l` discrete system from `init` (zero field if absent).
pub fn brute_force_solve(
    problem: &FBSDEProblem,
    l: f64,
    init: Option<&SolutionField>,
    options: &OracleOptions,
) -> Result<(SolutionField, OracleReport), OracleError> {
    if !(options.damping > 0.0 && options.damping <= 1.0) || !(options.tol > 0.0) || options.refresh == 0 {
        return Err(OracleError::Options(format!("{options:?}")));
    }
    let lay = Layout::new(problem);
    if lay.nodes > MAX_NODES || lay.size() > MAX_UNKNOWNS {
        return Err(OracleError::Budget {
            nodes: lay.nodes,
            unknowns: lay.size(),
        });
    }
    let mut u = match init {
        Some(f) => lay.pack(f),
        None => DVector::zeros(lay.size()),
    };
    let mut jacobians = 0;
    let mut lu = None;
    let mut defect = f64::INFINITY;
    for it in 0..=options.max_iters {
        let (r, g) = residual_vector(problem, l, &lay, &lay.unpack(&u))?;
        defect = g.max;
        if defect <= options.tol {
            return Ok((
                lay.unpack(&u),
                OracleReport {
                    unknowns: lay.size(),
                    iterations: it,
                    jacobians,
                    defect,
                },
            ));
        }
        if it == options.max_iters {
            break;
        }
        if it % options.refresh == 0 {
            let jac = jacobian(problem, l, &lay, &u, &r)?;
            jacobians += 1;
            lu = Some(jac.lu());
        }
        let step = lu
            .as_ref()
            .expect("factorized on the first iteration")
            .solve(&r)
            .ok_or(OracleError::Singular)?;
        u -= step * options.damping;
    }
    Err(OracleError::NotConverged {
        iterations: options.max_iters,
        defect,
    })
}
