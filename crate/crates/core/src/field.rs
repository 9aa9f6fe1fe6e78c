//! Tree-indexed solution fields and exterior forcing.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

use crate::algebra::TripleVector;
use crate::chain::DiscreteChainTree;

/// `(X, Y, Z)` at every tree node. `Z` is the canonical centered integrand
/// and is zero at leaves.
#[derive(Debug, Clone, PartialEq)]
pub struct SolutionField {
    pub x: Vec<DVector<f64>>,
    pub y: Vec<DVector<f64>>,
    pub z: Vec<DMatrix<f64>>,
}

impl SolutionField {
    pub fn zeros(tree: &DiscreteChainTree, n: usize, m: usize) -> Self {
        let count = tree.node_count();
        let d = tree.states();
        Self {
            x: vec![DVector::zeros(n); count],
            y: vec![DVector::zeros(m); count],
            z: vec![DMatrix::zeros(m, d); count],
        }
    }

    /// Field with entries uniform in `[-scale, scale]`, leaves keep `Z = 0`.
    pub fn random(tree: &DiscreteChainTree, n: usize, m: usize, scale: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut field = Self::zeros(tree, n, m);
        let draw = |rng: &mut ChaCha8Rng| rng.random_range(-scale..=scale);
        for v in 0..tree.node_count() {
            field.x[v].iter_mut().for_each(|e| *e = draw(&mut rng));
            field.y[v].iter_mut().for_each(|e| *e = draw(&mut rng));
            if !tree.is_leaf(v) {
                field.z[v].iter_mut().for_each(|e| *e = draw(&mut rng));
            }
        }
        field
    }

    pub fn node_count(&self) -> usize {
        self.x.len()
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.x[0].len(), self.y[0].len(), self.z[0].ncols())
    }

    pub fn triple(&self, node: usize) -> TripleVector {
        TripleVector {
            x: self.x[node].clone(),
            y: self.y[node].clone(),
            z: self.z[node].clone(),
        }
    }

    pub fn difference(&self, other: &Self) -> Self {
        Self {
            x: self.x.iter().zip(&other.x).map(|(a, b)| a - b).collect(),
            y: self.y.iter().zip(&other.y).map(|(a, b)| a - b).collect(),
            z: self.z.iter().zip(&other.z).map(|(a, b)| a - b).collect(),
        }
    }

    /// Largest absolute entry of `self − other` over all nodes and components.
    pub fn sup_distance(&self, other: &Self) -> f64 {
        let vec_max = |a: &[DVector<f64>], b: &[DVector<f64>]| {
            a.iter()
                .zip(b)
                .map(|(u, v)| (u - v).amax())
                .fold(0.0, f64::max)
        };
        let z = self
            .z
            .iter()
            .zip(&other.z)
            .map(|(u, v)| (u - v).amax())
            .fold(0.0, f64::max);
        vec_max(&self.x, &other.x).max(vec_max(&self.y, &other.y)).max(z)
    }

    /// Largest absolute entry.
    pub fn sup_norm(&self) -> f64 {
        let a = self.x.iter().map(|v| v.amax()).fold(0.0, f64::max);
        let b = self.y.iter().map(|v| v.amax()).fold(0.0, f64::max);
        let c = self.z.iter().map(|v| v.amax()).fold(0.0, f64::max);
        a.max(b).max(c)
    }

    pub fn is_finite(&self) -> bool {
        self.x.iter().all(|v| v.iter().all(|e| e.is_finite()))
            && self.y.iter().all(|v| v.iter().all(|e| e.is_finite()))
            && self.z.iter().all(|v| v.iter().all(|e| e.is_finite()))
    }

    /// Tree expectation of `Y` at each level.
    pub fn level_means_y(&self, tree: &DiscreteChainTree) -> Vec<DVector<f64>> {
        level_means(tree, &self.y)
    }

    /// Tree expectation of `X` at each level.
    pub fn level_means_x(&self, tree: &DiscreteChainTree) -> Vec<DVector<f64>> {
        level_means(tree, &self.x)
    }
}

fn level_means(tree: &DiscreteChainTree, values: &[DVector<f64>]) -> Vec<DVector<f64>> {
    (0..=tree.steps())
        .map(|k| {
            let mut acc = DVector::zeros(values[0].len());
            for v in tree.level_nodes(k) {
                acc.axpy(tree.probability(v), &values[v], 1.0);
            }
            acc
        })
        .collect()
}

type VecForcing = Arc<dyn Fn(f64, usize) -> DVector<f64> + Send + Sync>;
type MatForcing = Arc<dyn Fn(f64, usize) -> DMatrix<f64> + Send + Sync>;
type TermForcing = Arc<dyn Fn(usize) -> DVector<f64> + Send + Sync>;

/// Exterior forcing `(φ, ψ, γ, ξ)` as functions of (time, state); `ξ` may
/// also be given per leaf. Missing components are zero.
#[derive(Clone, Default)]
pub struct Forcing {
    phi: Option<VecForcing>,
    psi: Option<MatForcing>,
    gamma: Option<VecForcing>,
    xi: Option<TermForcing>,
    xi_leaves: Option<Arc<Vec<DVector<f64>>>>,
}

impl fmt::Debug for Forcing {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Forcing")
            .field("phi", &self.phi.is_some())
            .field("psi", &self.psi.is_some())
            .field("gamma", &self.gamma.is_some())
            .field("xi", &(self.xi.is_some() || self.xi_leaves.is_some()))
            .finish()
    }
}

impl Forcing {
    pub fn zero() -> Self {
        Self::default()
    }

    pub fn is_zero(&self) -> bool {
        self.phi.is_none()
            && self.psi.is_none()
            && self.gamma.is_none()
            && self.xi.is_none()
            && self.xi_leaves.is_none()
    }

    pub fn with_phi(mut self, f: impl Fn(f64, usize) -> DVector<f64> + Send + Sync + 'static) -> Self {
        self.phi = Some(Arc::new(f));
        self
    }

    pub fn with_psi(mut self, f: impl Fn(f64, usize) -> DMatrix<f64> + Send + Sync + 'static) -> Self {
        self.psi = Some(Arc::new(f));
        self
    }

    pub fn with_gamma(mut self, f: impl Fn(f64, usize) -> DVector<f64> + Send + Sync + 'static) -> Self {
        self.gamma = Some(Arc::new(f));
        self
    }

    pub fn with_xi(mut self, f: impl Fn(usize) -> DVector<f64> + Send + Sync + 'static) -> Self {
        self.xi = Some(Arc::new(f));
        self.xi_leaves = None;
        self
    }

    /// Terminal forcing given leaf by leaf (in leaf order).
    pub fn with_xi_leaves(mut self, values: Vec<DVector<f64>>) -> Self {
        self.xi_leaves = Some(Arc::new(values));
        self.xi = None;
        self
    }

    /// Evaluates the forcing on every node of `tree`.
    pub fn materialize(&self, tree: &DiscreteChainTree, n: usize, m: usize) -> NodeForcing {
        let d = tree.states();
        let internal = tree.internal_nodes();
        let at = |v: usize| (tree.time(tree.level_of(v)), tree.state_of(v));
        let phi = internal
            .clone()
            .map(|v| {
                let (t, s) = at(v);
                self.phi.as_ref().map_or_else(|| DVector::zeros(n), |f| f(t, s))
            })
            .collect();
        let psi = internal
            .clone()
            .map(|v| {
                let (t, s) = at(v);
                self.psi.as_ref().map_or_else(|| DMatrix::zeros(n, d), |f| f(t, s))
            })
            .collect();
        let gamma = internal
            .map(|v| {
                let (t, s) = at(v);
                self.gamma.as_ref().map_or_else(|| DVector::zeros(m), |f| f(t, s))
            })
            .collect();
        let xi = tree
            .leaves()
            .map(|v| {
                if let Some(table) = &self.xi_leaves {
                    table[tree.leaf_index(v)].clone()
                } else if let Some(f) = &self.xi {
                    f(tree.state_of(v))
                } else {
                    DVector::zeros(m)
                }
            })
            .collect();
        NodeForcing { phi, psi, gamma, xi }
    }
}

/// Forcing evaluated on a tree: `phi`, `psi`, `gamma` per internal node,
/// `xi` per leaf (leaf order).
#[derive(Debug, Clone, PartialEq)]
pub struct NodeForcing {
    pub phi: Vec<DVector<f64>>,
    pub psi: Vec<DMatrix<f64>>,
    pub gamma: Vec<DVector<f64>>,
    pub xi: Vec<DVector<f64>>,
}

impl NodeForcing {
    pub fn zero(tree: &DiscreteChainTree, n: usize, m: usize) -> Self {
        Forcing::zero().materialize(tree, n, m)
    }

    pub(crate) fn check(&self, tree: &DiscreteChainTree, n: usize, m: usize) -> Result<(), String> {
        let internal = tree.internal_nodes().len();
        let d = tree.states();
        if self.phi.len() != internal
            || self.psi.len() != internal
            || self.gamma.len() != internal
            || self.xi.len() != tree.leaves().len()
        {
            return Err("forcing table sizes do not match the tree".into());
        }
        let shapes = self.phi.iter().all(|v| v.len() == n)
            && self.psi.iter().all(|v| v.shape() == (n, d))
            && self.gamma.iter().all(|v| v.len() == m)
            && self.xi.iter().all(|v| v.len() == m);
        if !shapes {
            return Err("forcing component has the wrong dimension".into());
        }
        let finite = self.phi.iter().all(|v| v.iter().all(|e| e.is_finite()))
            && self.psi.iter().all(|v| v.iter().all(|e| e.is_finite()))
            && self.gamma.iter().all(|v| v.iter().all(|e| e.is_finite()))
            && self.xi.iter().all(|v| v.iter().all(|e| e.is_finite()));
        if !finite {
            return Err("forcing has non-finite entries".into());
        }
        Ok(())
    }
}
