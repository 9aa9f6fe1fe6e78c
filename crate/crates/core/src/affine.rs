//! Exact solver for discrete FBSDEs whose coefficients are affine in
//! `u = (x, y, z)` node by node.
//!
//! Every internal node carries
//!
//! ```text
//! drift  = B u + b₀        (ℝⁿ)
//! vec σ  = S u + s₀        (ℝ^{nd}, column-major)
//! driver = F u + f₀        (ℝᵐ)
//! ```
//!
//! with `u = [x; y; vec z]`, and every leaf `Y = P x + p₀`. Working backward,
//! each node's `(Y, vec Z)` is an affine function of its `X`, found from one
//! linear system of size `m(1 + d)`. The factorization depends only on the
//! linear parts, so it is computed once and reused for any set of constants.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use thiserror::Error;

use crate::chain::DiscreteChainTree;
use crate::field::SolutionField;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AffineError {
    #[error("singular node system at node {node}")]
    Singular { node: usize },
    #[error("affine system does not match the tree: {0}")]
    Shape(String),
}

/// Linear parts of the node coefficients.
#[derive(Debug, Clone)]
pub struct NodeJacobian {
    pub drift: DMatrix<f64>,
    pub diffusion: DMatrix<f64>,
    pub driver: DMatrix<f64>,
}

/// Constant parts of the node coefficients.
#[derive(Debug, Clone)]
pub struct NodeConstants {
    pub drift: DVector<f64>,
    pub diffusion: DVector<f64>,
    pub driver: DVector<f64>,
}

/// Linear parts on the whole tree: one [`NodeJacobian`] per internal node and
/// one terminal matrix per leaf (leaf order).
#[derive(Debug, Clone)]
pub struct AffineJacobians {
    pub nodes: Vec<NodeJacobian>,
    pub terminal: Vec<DMatrix<f64>>,
}

/// Constant parts on the whole tree.
#[derive(Debug, Clone)]
pub struct AffineConstants {
    pub nodes: Vec<NodeConstants>,
    pub terminal: Vec<DVector<f64>>,
}

struct NodeFactor {
    /// Inverse of the node system matrix.
    inverse: DMatrix<f64>,
    /// `(Y, vec Z) = gain · X + offset`.
    gain: DMatrix<f64>,
    /// Forward maps `E_c` with `X_c = E_c u + e_c`.
    forward: Vec<DMatrix<f64>>,
}

/// Factorized linear parts, ready for repeated solves.
pub struct AffineFactorization {
    n: usize,
    m: usize,
    d: usize,
    nodes: Vec<NodeFactor>,
    terminal: Vec<DMatrix<f64>>,
}

/// `σ ΔM` written as a linear map of `vec σ`: `Σ_j ΔM_j · rows(j n .. j n + n)`.
fn apply_increment(mat: &DMatrix<f64>, dm: &DVector<f64>, n: usize) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(n, mat.ncols());
    for (j, &w) in dm.iter().enumerate() {
        if w != 0.0 {
            out += mat.rows(j * n, n) * w;
        }
    }
    out
}

fn apply_increment_vec(v: &DVector<f64>, dm: &DVector<f64>, n: usize) -> DVector<f64> {
    let mut out = DVector::zeros(n);
    for (j, &w) in dm.iter().enumerate() {
        if w != 0.0 {
            out += v.rows(j * n, n) * w;
        }
    }
    out
}

impl AffineFactorization {
    pub fn new(
        tree: &DiscreteChainTree,
        n: usize,
        m: usize,
        jac: &AffineJacobians,
    ) -> Result<Self, AffineError> {
        let d = tree.states();
        let dim = n + m + m * d;
        let w = m + m * d;
        let internal = tree.internal_nodes().len();
        if jac.nodes.len() != internal || jac.terminal.len() != tree.leaves().len() {
            return Err(AffineError::Shape(format!(
                "{} node and {} leaf entries for {} internal nodes and {} leaves",
                jac.nodes.len(),
                jac.terminal.len(),
                internal,
                tree.leaves().len()
            )));
        }
        for nj in &jac.nodes {
            if nj.drift.shape() != (n, dim)
                || nj.diffusion.shape() != (n * d, dim)
                || nj.driver.shape() != (m, dim)
            {
                return Err(AffineError::Shape("node Jacobian has the wrong shape".into()));
            }
        }
        if jac.terminal.iter().any(|t| t.shape() != (m, n)) {
            return Err(AffineError::Shape("terminal matrix has the wrong shape".into()));
        }
        let dt = tree.dt();
        let leaf_start = tree.leaves().start;
        let mut factors: Vec<Option<NodeFactor>> = (0..internal).map(|_| None).collect();
        // Y-gain of a node: first m rows of its gain, or the terminal matrix
        let y_gain = |factors: &[Option<NodeFactor>], c: usize| -> DMatrix<f64> {
            if c >= leaf_start {
                jac.terminal[c - leaf_start].clone()
            } else {
                factors[c].as_ref().expect("child factor").gain.rows(0, m).into_owned()
            }
        };
        for k in (0..tree.steps()).rev() {
            let range = tree.level_nodes(k);
            let start = range.start;
            let level: Vec<Result<NodeFactor, AffineError>> = range
                .into_par_iter()
                .map(|v| {
                    let nj = &jac.nodes[v];
                    let tr = tree.transition_at(v);
                    let mut base = &nj.drift * dt;
                    for i in 0..n {
                        base[(i, i)] += 1.0;
                    }
                    let mut forward = Vec::with_capacity(d);
                    let mut maps = Vec::with_capacity(d);
                    let mut mean = DMatrix::zeros(m, dim);
                    for (i, c) in tree.children(v).enumerate() {
                        let e = &base + apply_increment(&nj.diffusion, &tr.increments[i], n);
                        let a = y_gain(&factors, c) * &e;
                        mean += &a * tr.probs[i];
                        forward.push(e);
                        maps.push(a);
                    }
                    let mut sys = DMatrix::zeros(w, w);
                    let mut rhs = DMatrix::zeros(w, n);
                    // y − mean − Δt F u = ...
                    let lhs_y = -(&mean + &nj.driver * dt);
                    sys.view_mut((0, 0), (m, w)).copy_from(&lhs_y.columns(n, w));
                    for i in 0..m {
                        sys[(i, i)] += 1.0;
                    }
                    rhs.view_mut((0, 0), (m, n)).copy_from(&(-lhs_y.columns(0, n)));
                    // z_c − (A_c − mean) u = ...
                    for (i, a) in maps.iter().enumerate() {
                        let row = m + i * m;
                        let centered = a - &mean;
                        sys.view_mut((row, 0), (m, w))
                            .copy_from(&(-centered.columns(n, w)));
                        for r in 0..m {
                            sys[(row + r, row + r)] += 1.0;
                        }
                        rhs.view_mut((row, 0), (m, n)).copy_from(&centered.columns(0, n));
                    }
                    let inverse = sys.try_inverse().ok_or(AffineError::Singular { node: v })?;
                    let gain = &inverse * rhs;
                    Ok(NodeFactor {
                        inverse,
                        gain,
                        forward,
                    })
                })
                .collect();
            for (i, f) in level.into_iter().enumerate() {
                factors[start + i] = Some(f?);
            }
        }
        Ok(Self {
            n,
            m,
            d,
            nodes: factors.into_iter().map(|f| f.expect("all levels factored")).collect(),
            terminal: jac.terminal.clone(),
        })
    }

    /// Solves for the given constants and initial value.
    pub fn solve(
        &self,
        tree: &DiscreteChainTree,
        constants: &AffineConstants,
        x0: &DVector<f64>,
    ) -> Result<SolutionField, AffineError> {
        let (n, m, d) = (self.n, self.m, self.d);
        if constants.nodes.len() != self.nodes.len() || constants.terminal.len() != self.terminal.len() {
            return Err(AffineError::Shape("constants do not match the factorization".into()));
        }
        let dt = tree.dt();
        let count = tree.node_count();
        let leaf_start = tree.leaves().start;
        let mut offset: Vec<DVector<f64>> = vec![DVector::zeros(0); count];
        for v in tree.leaves() {
            offset[v] = constants.terminal[v - leaf_start].clone();
        }
        let y_offset = |offset: &[DVector<f64>], c: usize| -> DVector<f64> {
            if c >= leaf_start {
                offset[c].clone()
            } else {
                offset[c].rows(0, m).into_owned()
            }
        };
        let y_gain = |c: usize| -> DMatrix<f64> {
            if c >= leaf_start {
                self.terminal[c - leaf_start].clone()
            } else {
                self.nodes[c].gain.rows(0, m).into_owned()
            }
        };
        let mut shifts: Vec<Vec<DVector<f64>>> = vec![Vec::new(); self.nodes.len()];
        for k in (0..tree.steps()).rev() {
            let range = tree.level_nodes(k);
            let start = range.start;
            let level: Vec<(DVector<f64>, Vec<DVector<f64>>)> = range
                .into_par_iter()
                .map(|v| {
                    let nc = &constants.nodes[v];
                    let tr = tree.transition_at(v);
                    let mut mean = DVector::zeros(m);
                    let mut vals = Vec::with_capacity(d);
                    let mut es = Vec::with_capacity(d);
                    for (i, c) in tree.children(v).enumerate() {
                        let e = &nc.drift * dt + apply_increment_vec(&nc.diffusion, &tr.increments[i], n);
                        let a = y_gain(c) * &e + y_offset(&offset, c);
                        mean.axpy(tr.probs[i], &a, 1.0);
                        vals.push(a);
                        es.push(e);
                    }
                    let mut rhs = DVector::zeros(m + m * d);
                    rhs.rows_mut(0, m).copy_from(&(&mean + &nc.driver * dt));
                    for (i, a) in vals.iter().enumerate() {
                        rhs.rows_mut(m + i * m, m).copy_from(&(a - &mean));
                    }
                    (&self.nodes[v].inverse * rhs, es)
                })
                .collect();
            for (i, (o, es)) in level.into_iter().enumerate() {
                offset[start + i] = o;
                shifts[start + i] = es;
            }
        }
        let mut field = SolutionField::zeros(tree, n, m);
        field.x[0] = x0.clone();
        let dim = n + m + m * d;
        for v in 0..count {
            if v >= leaf_start {
                field.y[v] = &self.terminal[v - leaf_start] * &field.x[v] + &offset[v];
                continue;
            }
            let f = &self.nodes[v];
            let wv = &f.gain * &field.x[v] + &offset[v];
            field.y[v] = wv.rows(0, m).into_owned();
            field.z[v] = DMatrix::from_column_slice(m, d, wv.rows(m, m * d).as_slice());
            let mut u = DVector::zeros(dim);
            u.rows_mut(0, n).copy_from(&field.x[v]);
            u.rows_mut(n, m + m * d).copy_from(&wv);
            for (i, c) in tree.children(v).enumerate() {
                field.x[c] = &f.forward[i] * &u + &shifts[v][i];
            }
        }
        Ok(field)
    }
}

/// Stacks `u = [x; y; vec z]`.
pub fn stack(x: &DVector<f64>, y: &DVector<f64>, z: &DMatrix<f64>) -> DVector<f64> {
    let (n, m) = (x.len(), y.len());
    let mut u = DVector::zeros(n + m + z.len());
    u.rows_mut(0, n).copy_from(x);
    u.rows_mut(n, m).copy_from(y);
    u.rows_mut(n + m, z.len()).copy_from_slice(z.as_slice());
    u
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::algebra::GStructure;
    use crate::chain::ChainModel;
    use crate::field::Forcing;
    use crate::linear_fbsde::{solve_linear, LinearFBSDEProblem};
    use crate::Mode;
    use std::sync::Arc;

    /// The linear family written in stacked form must reproduce the
    /// Riccati pipeline.
    #[test]
    fn matches_riccati_pipeline() {
        let a = DMatrix::from_row_slice(2, 2, &[-1.0, 2.0, 1.0, -2.0]);
        let model = ChainModel::constant(a).unwrap();
        let tree = Arc::new(DiscreteChainTree::build(&model, 1.0, 6, 0).unwrap());
        let (n, m, d) = (1, 2, 2);
        let g = GStructure::new(DMatrix::from_column_slice(2, 1, &[1.0, 0.5])).unwrap();
        let (c2, cp) = (1.0, 0.7);
        let dim = n + m + m * d;
        let gt = g.g().transpose();
        let mut drift = DMatrix::zeros(n, dim);
        drift.view_mut((0, n), (n, m)).copy_from(&(-&gt * cp));
        let mut diffusion = DMatrix::zeros(n * d, dim);
        for j in 0..d {
            diffusion
                .view_mut((j * n, n + m + j * m), (n, m))
                .copy_from(&(-&gt * cp));
        }
        let mut driver = DMatrix::zeros(m, dim);
        driver.view_mut((0, 0), (m, n)).copy_from(&(g.g() * c2));
        let internal = tree.internal_nodes().len();
        let leaves = tree.leaves().len();
        let jac = AffineJacobians {
            nodes: vec![NodeJacobian { drift, diffusion, driver }; internal],
            terminal: vec![g.g().clone(); leaves],
        };
        let gamma = |s: usize| DVector::from_vec(vec![1.0 + s as f64, -0.5]);
        let consts = AffineConstants {
            nodes: tree
                .internal_nodes()
                .map(|v| NodeConstants {
                    drift: DVector::from_element(1, 0.3),
                    diffusion: DVector::zeros(n * d),
                    driver: gamma(tree.state_of(v)),
                })
                .collect(),
            terminal: vec![DVector::from_vec(vec![0.2, 0.1]); leaves],
        };
        let x0 = DVector::from_element(1, 0.8);
        let fac = AffineFactorization::new(&tree, n, m, &jac).unwrap();
        let field = fac.solve(&tree, &consts, &x0).unwrap();

        let forcing = Forcing::zero()
            .with_phi(|_, _| DVector::from_element(1, 0.3))
            .with_gamma(move |_, s| gamma(s))
            .with_xi(|_| DVector::from_vec(vec![0.2, 0.1]));
        let lp = LinearFBSDEProblem::new(Mode::Thm2, c2, cp, 1.0, g, x0, &forcing, tree.clone()).unwrap();
        let sol = solve_linear(&lp).unwrap();
        assert!(field.sup_distance(&sol.field) < 1e-12, "{}", field.sup_distance(&sol.field));
    }
}
