//! Backward integration of the matrix Riccati equation behind the affine
//! relation `Y′ = K X′ + p` of the linear problems.
//!
//! With `s = +1` for [`Mode::Thm2`] and `s = −1` for [`Mode::Thm3`] the
//! equation reads `K̇ = s (c₂′ K B K − c₂ C)`, `K(T) = λ C`, where
//! `(B, C) = (I_n, G*G)` for `n ≤ m` and `(GG*, I_m)` for `n > m`.

use nalgebra::{DMatrix, SymmetricEigen};
use serde::Serialize;
use thiserror::Error;

use crate::algebra::{GCase, GStructure};
use crate::Mode;

/// Norm beyond which the integration is declared to blow up.
pub const BLOW_UP: f64 = 1e12;

/// Tolerance for symmetry and positive semidefiniteness.
pub const PSD_TOL: f64 = 1e-10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RiccatiError {
    #[error("invalid Riccati data: {0}")]
    Invalid(String),
    #[error("K lost positive semidefiniteness at t = {time} (min eigenvalue {min_eigenvalue:e})")]
    NotPsd { time: f64, min_eigenvalue: f64 },
    #[error("K blew up at t = {time} (|K|_F = {norm:e})")]
    BlowUp { time: f64, norm: f64 },
}

#[derive(Debug, Clone)]
pub struct RiccatiProblem {
    pub mode: Mode,
    pub c2: f64,
    pub c2_prime: f64,
    pub lambda: f64,
    pub g: GStructure,
    pub horizon: f64,
    pub steps: usize,
}

impl RiccatiProblem {
    pub fn case(&self) -> GCase {
        self.g.case()
    }

    /// `(B, C)` for the problem's case.
    pub fn coupling(&self) -> (DMatrix<f64>, DMatrix<f64>) {
        coupling_matrices(&self.g)
    }

    pub fn dt(&self) -> f64 {
        self.horizon / self.steps as f64
    }

    /// Right-hand side `s (c₂′ K B K − c₂ C)`.
    pub fn rhs(&self, k: &DMatrix<f64>) -> DMatrix<f64> {
        let (b, c) = self.coupling();
        rhs_with(self.mode.sign(), self.c2, self.c2_prime, &b, &c, k)
    }

    fn validate(&self) -> Result<(), RiccatiError> {
        let finite_pos = |v: f64| v.is_finite() && v > 0.0;
        if !finite_pos(self.c2) || !finite_pos(self.c2_prime) {
            return Err(RiccatiError::Invalid(format!(
                "c2 = {}, c2' = {} must be positive",
                self.c2, self.c2_prime
            )));
        }
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(RiccatiError::Invalid(format!("lambda = {} must be >= 0", self.lambda)));
        }
        if !finite_pos(self.horizon) || self.steps == 0 {
            return Err(RiccatiError::Invalid(format!(
                "horizon {} and steps {} must be positive",
                self.horizon, self.steps
            )));
        }
        Ok(())
    }
}

pub(crate) fn coupling_matrices(g: &GStructure) -> (DMatrix<f64>, DMatrix<f64>) {
    let gm = g.g();
    match g.case() {
        GCase::NLeM => (DMatrix::identity(g.n(), g.n()), gm.transpose() * gm),
        GCase::NGtM => (gm * gm.transpose(), DMatrix::identity(g.m(), g.m())),
    }
}

fn rhs_with(
    s: f64,
    c2: f64,
    c2p: f64,
    b: &DMatrix<f64>,
    c: &DMatrix<f64>,
    k: &DMatrix<f64>,
) -> DMatrix<f64> {
    (k * b * k * c2p - c * c2) * s
}

/// `K` on the grid `t_k = k T / N`, `k = 0..=N`.
#[derive(Debug, Clone, Serialize)]
pub struct RiccatiSolution {
    pub dt: f64,
    pub values: Vec<DMatrix<f64>>,
    /// Smallest eigenvalue of `K` over the grid.
    pub min_eigenvalue: f64,
}

impl RiccatiSolution {
    /// Wraps externally produced grid values (e.g. for residual checks).
    pub fn from_values(dt: f64, values: Vec<DMatrix<f64>>) -> Self {
        let min_eigenvalue = values
            .iter()
            .map(min_eig)
            .fold(f64::INFINITY, f64::min);
        Self {
            dt,
            values,
            min_eigenvalue,
        }
    }

    pub fn at(&self, k: usize) -> &DMatrix<f64> {
        &self.values[k]
    }

    pub fn steps(&self) -> usize {
        self.values.len() - 1
    }
}

fn min_eig(k: &DMatrix<f64>) -> f64 {
    let sym = (k + k.transpose()) * 0.5;
    SymmetricEigen::new(sym).eigenvalues.min()
}

/// Classical RK4 backward from `T` with symmetrization after every step.
///
/// Positive semidefiniteness is enforced for [`Mode::Thm2`]; in the
/// sign-flipped mode `K` may legitimately become indefinite and only blow-up
/// is an error.
pub fn solve_riccati(problem: &RiccatiProblem) -> Result<RiccatiSolution, RiccatiError> {
    problem.validate()?;
    let (b, c) = problem.coupling();
    let s = problem.mode.sign();
    let (c2, c2p) = (problem.c2, problem.c2_prime);
    let f = |k: &DMatrix<f64>| rhs_with(s, c2, c2p, &b, &c, k);
    let n = problem.steps;
    let dt = problem.dt();
    let h = -dt;
    let mut values = vec![DMatrix::zeros(c.nrows(), c.ncols()); n + 1];
    values[n] = &c * problem.lambda;
    let mut min_eigenvalue = min_eig(&values[n]);
    for k in (0..n).rev() {
        let y = &values[k + 1];
        let k1 = f(y);
        let k2 = f(&(y + &k1 * (h / 2.0)));
        let k3 = f(&(y + &k2 * (h / 2.0)));
        let k4 = f(&(y + &k3 * h));
        let next = y + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
        let next = (&next + next.transpose()) * 0.5;
        let time = k as f64 * dt;
        let norm = next.norm();
        if !norm.is_finite() || norm > BLOW_UP {
            return Err(RiccatiError::BlowUp { time, norm });
        }
        let lo = min_eig(&next);
        if problem.mode == Mode::Thm2 && lo < -PSD_TOL {
            return Err(RiccatiError::NotPsd {
                time,
                min_eigenvalue: lo,
            });
        }
        min_eigenvalue = min_eigenvalue.min(lo);
        values[k] = next;
    }
    Ok(RiccatiSolution {
        dt,
        values,
        min_eigenvalue,
    })
}

/// Max over interior grid points of `‖(K_{k+1} − K_{k−1}) / 2Δt − rhs(K_k)‖_F`.
pub fn riccati_residual(solution: &RiccatiSolution, problem: &RiccatiProblem) -> f64 {
    let v = &solution.values;
    let dt = solution.dt;
    (1..v.len().saturating_sub(1))
        .map(|k| ((&v[k + 1] - &v[k - 1]) / (2.0 * dt) - problem.rhs(&v[k])).norm())
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(mode: Mode, c2: f64, c2p: f64, lambda: f64, g: f64, t: f64, n: usize) -> RiccatiProblem {
        RiccatiProblem {
            mode,
            c2,
            c2_prime: c2p,
            lambda,
            g: GStructure::new(DMatrix::from_element(1, 1, g)).unwrap(),
            horizon: t,
            steps: n,
        }
    }

    #[test]
    fn tanh_solution() {
        let p = scalar(Mode::Thm2, 1.0, 1.0, 0.0, 1.0, 1.0, 1000);
        let sol = solve_riccati(&p).unwrap();
        assert!((sol.at(0)[(0, 0)] - 1f64.tanh()).abs() < 1e-10);
        assert!((sol.at(0)[(0, 0)] - 0.761594).abs() < 1e-6);
    }

    #[test]
    fn small_c2_stays_small() {
        let p = scalar(Mode::Thm2, 1e-8, 1.0, 0.0, 1.0, 1.0, 100);
        let sol = solve_riccati(&p).unwrap();
        assert!(sol.at(0)[(0, 0)] <= 1e-7);
        assert!(sol.at(0)[(0, 0)] >= 0.0);
    }

    #[test]
    fn terminal_value() {
        let p = RiccatiProblem {
            mode: Mode::Thm2,
            c2: 1.0,
            c2_prime: 1.0,
            lambda: 2.0,
            g: GStructure::new(DMatrix::from_column_slice(2, 1, &[1.0, 1.0])).unwrap(),
            horizon: 1.0,
            steps: 10,
        };
        let sol = solve_riccati(&p).unwrap();
        assert_eq!(sol.at(10), &DMatrix::from_element(1, 1, 4.0));
    }

    #[test]
    fn residual_of_non_solution() {
        let p = RiccatiProblem {
            mode: Mode::Thm2,
            c2: 1.0,
            c2_prime: 1.0,
            lambda: 0.0,
            g: GStructure::new(DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 2.0])).unwrap(),
            horizon: 1.0,
            steps: 10,
        };
        let zero = RiccatiSolution::from_values(0.1, vec![DMatrix::zeros(2, 2); 11]);
        let gtg = p.g.g().transpose() * p.g.g();
        assert!((riccati_residual(&zero, &p) - gtg.norm()).abs() < 1e-12);
    }

    #[test]
    fn invalid_constants_rejected() {
        let p = scalar(Mode::Thm2, 0.0, 1.0, 0.0, 1.0, 1.0, 10);
        assert!(matches!(solve_riccati(&p), Err(RiccatiError::Invalid(_))));
        let p = scalar(Mode::Thm2, 1.0, 1.0, -1.0, 1.0, 1.0, 10);
        assert!(matches!(solve_riccati(&p), Err(RiccatiError::Invalid(_))));
    }

    #[test]
    fn blow_up_detected() {
        // dK/dτ = c′K² − c₂ from K(T) = 100 explodes before τ = 1
        let p = scalar(Mode::Thm3, 1.0, 1.0, 100.0, 1.0, 1.0, 1000);
        assert!(matches!(solve_riccati(&p), Err(RiccatiError::BlowUp { .. })));
    }
}
