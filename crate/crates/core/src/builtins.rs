//! Named problems used by the CLI and the test suites.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use std::sync::Arc;

use crate::algebra::{AlgebraError, CoefficientSet, GStructure};
use crate::chain::DiscreteChainTree;
use crate::field::Forcing;
use crate::solver::{FBSDEProblem, SolverError};
use crate::Mode;

pub const BUILTIN_NAMES: [&str; 5] = [
    "zero",
    "linear-affine",
    "scalar-monotone",
    "two-dim-G",
    "thm3-mirror",
];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BuiltinError {
    #[error("unknown builtin `{0}` (available: zero, linear-affine, scalar-monotone, two-dim-G, thm3-mirror)")]
    Unknown(String),
    #[error("invalid builtin parameter: {0}")]
    Param(String),
    #[error(transparent)]
    Algebra(#[from] AlgebraError),
}

/// Optional overrides for a builtin.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BuiltinParams {
    /// Seed of the random perturbation of `linear-affine`.
    pub seed: u64,
    /// Size of the random perturbation of `linear-affine`.
    pub epsilon: f64,
    pub x0: Option<Vec<f64>>,
    pub c2: Option<f64>,
    pub c2_prime: Option<f64>,
}

impl Default for BuiltinParams {
    fn default() -> Self {
        Self {
            seed: 7,
            epsilon: 0.1,
            x0: None,
            c2: None,
            c2_prime: None,
        }
    }
}

/// Everything needed to pose a builtin on a tree.
#[derive(Debug, Clone)]
pub struct BuiltinProblem {
    pub name: String,
    pub coeffs: CoefficientSet,
    pub g: GStructure,
    pub x0: DVector<f64>,
    pub mode: Mode,
    pub c2: f64,
    pub c2_prime: f64,
}

impl BuiltinProblem {
    /// Poses the problem on `tree` with the given forcing.
    pub fn pose(&self, tree: Arc<DiscreteChainTree>, forcing: &Forcing) -> Result<FBSDEProblem, SolverError> {
        FBSDEProblem::new(
            self.coeffs.clone(),
            self.g.clone(),
            self.x0.clone(),
            self.mode,
            self.c2,
            self.c2_prime,
            tree,
            forcing,
        )
    }
}

/// Builds the named problem for a chain with `d` states.
pub fn builtin(name: &str, d: usize, params: &BuiltinParams) -> Result<BuiltinProblem, BuiltinError> {
    if d < 2 {
        return Err(BuiltinError::Param(format!("need d >= 2, got {d}")));
    }
    let mut p = match name {
        "zero" => BuiltinProblem {
            name: name.into(),
            coeffs: CoefficientSet::zero(1, 1, d),
            g: GStructure::identity(1),
            x0: DVector::zeros(1),
            mode: Mode::Thm2,
            c2: 1.0,
            c2_prime: 1.0,
        },
        "scalar-monotone" => BuiltinProblem {
            name: name.into(),
            coeffs: CoefficientSet::zero(1, 1, d)
                .with_b(|_, _, _, y, _| -y)
                .with_sigma(|_, _, _, _, z| -z)
                .with_f(|_, _, x, _, _| x.clone())
                .with_phi(|_, x| x.clone()),
            g: GStructure::identity(1),
            x0: DVector::from_element(1, 1.0),
            mode: Mode::Thm2,
            c2: 0.5,
            c2_prime: 0.5,
        },
        "thm3-mirror" => BuiltinProblem {
            name: name.into(),
            coeffs: CoefficientSet::zero(1, 1, d)
                .with_b(|_, _, _, y, _| y.clone())
                .with_sigma(|_, _, _, _, z| z.clone())
                .with_f(|_, _, x, _, _| -x)
                .with_phi(|_, x| -x),
            g: GStructure::identity(1),
            x0: DVector::from_element(1, 1.0),
            mode: Mode::Thm3,
            c2: 1.0,
            c2_prime: 0.5,
        },
        "two-dim-G" => {
            let g = GStructure::new(DMatrix::from_column_slice(2, 1, &[1.0, 1.0]))?;
            let gm = g.g().clone();
            let (g1, g2, g3) = (gm.clone(), gm.clone(), gm.clone());
            let shift = DVector::from_vec(vec![0.5, -0.25]);
            let shift2 = shift.clone();
            BuiltinProblem {
                name: name.into(),
                coeffs: CoefficientSet::zero(1, 2, d)
                    .with_b(move |_, _, _, y, _| -(g1.transpose() * y))
                    .with_sigma(move |_, _, _, _, z| -(g2.transpose() * z))
                    .with_f(move |_, _, x, _, _| &g3 * x + &shift)
                    .with_phi(move |_, x| &gm * x + &shift2),
                g,
                x0: DVector::from_element(1, 1.0),
                mode: Mode::Thm2,
                c2: 0.5,
                c2_prime: 0.5,
            }
        }
        "linear-affine" => linear_affine(d, params)?,
        other => return Err(BuiltinError::Unknown(other.into())),
    };
    if let Some(x0) = &params.x0 {
        if x0.len() != p.x0.len() {
            return Err(BuiltinError::Param(format!(
                "x0 has length {}, `{name}` needs {}",
                x0.len(),
                p.x0.len()
            )));
        }
        p.x0 = DVector::from_vec(x0.clone());
    }
    if let Some(c) = params.c2 {
        p.c2 = c;
    }
    if let Some(c) = params.c2_prime {
        p.c2_prime = c;
    }
    Ok(p)
}

/// `n = m = 2`, `G = I`: `b = −y + ε(B₁x + B₂y) + b₀(s)`,
/// `σ = −(I − εS)z + σ₀(s)`, `f = x + ε(F₁x + F₂y) + f₀(s)`,
/// `Φ = (I + εP)x + φ₀(s)` with seeded random matrices.
fn linear_affine(d: usize, params: &BuiltinParams) -> Result<BuiltinProblem, BuiltinError> {
    let eps = params.epsilon;
    if !(eps.abs() <= 0.25) {
        return Err(BuiltinError::Param(format!(
            "epsilon = {eps} must satisfy |epsilon| <= 0.25 to keep the signs monotone"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let mut mat = |r: usize, c: usize, scale: f64| {
        DMatrix::from_fn(r, c, |_, _| rng.random_range(-1.0..=1.0) * scale)
    };
    let b1 = mat(2, 2, eps);
    let b2 = mat(2, 2, eps);
    let s1 = mat(2, 2, eps);
    let f1 = mat(2, 2, eps);
    let f2 = mat(2, 2, eps);
    let p1 = mat(2, 2, eps);
    let b0 = mat(2, d, 0.5);
    let sigma0: Vec<DMatrix<f64>> = (0..d).map(|_| mat(2, d, 0.2)).collect();
    let f0 = mat(2, d, 0.5);
    let phi0 = mat(2, d, 0.5);
    let eye = DMatrix::<f64>::identity(2, 2);
    let sig = &eye - &s1;
    let term = &eye + &p1;
    let b2m = &b2 - &eye;
    let f1m = &f1 + &eye;
    Ok(BuiltinProblem {
        name: "linear-affine".into(),
        coeffs: CoefficientSet::zero(2, 2, d)
            .with_b(move |_, s, x, y, _| &b1 * x + &b2m * y + b0.column(s))
            .with_sigma(move |_, s, _, _, z| -(&sig * z) + &sigma0[s])
            .with_f(move |_, s, x, y, _| &f1m * x + &f2 * y + f0.column(s))
            .with_phi(move |s, x| &term * x + phi0.column(s)),
        g: GStructure::identity(2),
        x0: DVector::from_vec(vec![1.0, -0.5]),
        mode: Mode::Thm2,
        c2: 0.5,
        c2_prime: 0.5,
    })
}

/// Generator used when a builtin runs without an explicit chain.
pub fn default_generator() -> DMatrix<f64> {
    DMatrix::from_row_slice(2, 2, &[-1.0, 2.0, 1.0, -2.0])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_builtins_construct() {
        for name in BUILTIN_NAMES {
            let p = builtin(name, 2, &BuiltinParams::default()).unwrap();
            assert_eq!(p.coeffs.dims().2, 2);
            assert_eq!(p.g.n(), p.coeffs.dims().0);
        }
        assert!(matches!(
            builtin("nope", 2, &BuiltinParams::default()),
            Err(BuiltinError::Unknown(_))
        ));
    }

    #[test]
    fn linear_affine_is_seeded() {
        let a = builtin("linear-affine", 3, &BuiltinParams::default()).unwrap();
        let b = builtin("linear-affine", 3, &BuiltinParams::default()).unwrap();
        let x = DVector::from_vec(vec![0.3, -0.2]);
        let z = DMatrix::from_element(2, 3, 0.1);
        assert_eq!(
            a.coeffs.eval_f(0.0, 1, &x, &x, &z).unwrap(),
            b.coeffs.eval_f(0.0, 1, &x, &x, &z).unwrap()
        );
    }
}
