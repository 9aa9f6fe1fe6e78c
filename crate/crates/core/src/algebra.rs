//! Coupling algebra around the full-rank matrix `G`: brackets, projectors,
//! the functionals `F` and `H`, the `Q`-weighted bracket and the conversion
//! of coefficients to the form driven by the raw chain increments.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use thiserror::Error;

use crate::chain::ChainModel;

/// Largest accepted condition number of `G`.
pub const MAX_CONDITION: f64 = 1e8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AlgebraError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("G is rank deficient (singular values {smallest:e} / {largest:e})")]
    RankDeficient { smallest: f64, largest: f64 },
    #[error("G is ill conditioned (condition number {0:e} > 1e8)")]
    IllConditioned(f64),
    #[error("matrix is not positive semidefinite (min eigenvalue {0:e})")]
    NotPsd(f64),
    #[error(transparent)]
    Coefficient(#[from] CoeffError),
}

/// Failure while evaluating a user coefficient.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum CoeffError {
    #[error("{component} at t = {t}, state {state}: {message}")]
    Eval {
        component: Component,
        t: f64,
        state: usize,
        message: String,
    },
    #[error("{component} at t = {t}, state {state}: expected {expected}, got {got}")]
    Shape {
        component: Component,
        t: f64,
        state: usize,
        expected: String,
        got: String,
    },
    #[error("{component} at t = {t}, state {state}: non-finite output")]
    NonFinite {
        component: Component,
        t: f64,
        state: usize,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Component {
    B,
    Sigma,
    F,
    Phi,
}

impl fmt::Display for Component {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Component::B => "b",
            Component::Sigma => "sigma",
            Component::F => "f",
            Component::Phi => "Phi",
        })
    }
}

/// Which reduction the linear construction uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum GCase {
    /// `n ≤ m`: `G*G` is invertible.
    NLeM,
    /// `n > m`: `GG*` is invertible.
    NGtM,
}

/// `G` with its cached inverse Gram factor and projector.
#[derive(Debug, Clone)]
pub struct GStructure {
    g: DMatrix<f64>,
    case: GCase,
    gram_inv: DMatrix<f64>,
    projector: DMatrix<f64>,
    condition: f64,
}

impl GStructure {
    pub fn new(g: DMatrix<f64>) -> Result<Self, AlgebraError> {
        let (m, n) = g.shape();
        if m == 0 || n == 0 {
            return Err(AlgebraError::Dimension(format!("G is {m}x{n}")));
        }
        if g.iter().any(|v| !v.is_finite()) {
            return Err(AlgebraError::Dimension("G has non-finite entries".into()));
        }
        let sv = g.clone().svd(false, false).singular_values;
        let largest = sv.max();
        let smallest = sv.min();
        if !(smallest > 1e-10 * largest) {
            return Err(AlgebraError::RankDeficient { smallest, largest });
        }
        let condition = largest / smallest;
        if condition > MAX_CONDITION {
            return Err(AlgebraError::IllConditioned(condition));
        }
        Ok(Self::assemble(g, if n <= m { GCase::NLeM } else { GCase::NGtM }, condition))
    }

    /// Square `G` admits both reductions; this picks one explicitly.
    pub fn with_case(g: DMatrix<f64>, case: GCase) -> Result<Self, AlgebraError> {
        let s = Self::new(g)?;
        if s.case == case {
            return Ok(s);
        }
        if s.m() != s.n() {
            return Err(AlgebraError::Dimension(format!(
                "{case:?} needs {} for a {}x{} G",
                if case == GCase::NLeM { "n <= m" } else { "n > m" },
                s.m(),
                s.n()
            )));
        }
        Ok(Self::assemble(s.g, case, s.condition))
    }

    fn assemble(g: DMatrix<f64>, case: GCase, condition: f64) -> Self {
        let gt = g.transpose();
        let gram = match case {
            GCase::NLeM => &gt * &g,
            GCase::NGtM => &g * &gt,
        };
        let gram_inv = spd_inverse(&gram);
        let projector = match case {
            GCase::NLeM => &g * &gram_inv * &gt,
            GCase::NGtM => &gt * &gram_inv * &g,
        };
        Self {
            g,
            case,
            gram_inv,
            projector,
            condition,
        }
    }

    pub fn identity(n: usize) -> Self {
        Self::new(DMatrix::identity(n, n)).expect("identity is well conditioned")
    }

    pub fn g(&self) -> &DMatrix<f64> {
        &self.g
    }

    /// Rows of `G` (the backward dimension).
    pub fn m(&self) -> usize {
        self.g.nrows()
    }

    /// Columns of `G` (the forward dimension).
    pub fn n(&self) -> usize {
        self.g.ncols()
    }

    pub fn case(&self) -> GCase {
        self.case
    }

    pub fn condition(&self) -> f64 {
        self.condition
    }

    /// `(G*G)⁻¹` for `n ≤ m`, `(GG*)⁻¹` otherwise.
    pub fn gram_inverse(&self) -> &DMatrix<f64> {
        &self.gram_inv
    }

    /// `G(G*G)⁻¹G*` (m×m) for `n ≤ m`, `G*(GG*)⁻¹G` (n×n) otherwise.
    pub fn projector(&self) -> &DMatrix<f64> {
        &self.projector
    }

    /// `I − projector`.
    pub fn complement(&self) -> DMatrix<f64> {
        let k = self.projector.nrows();
        DMatrix::identity(k, k) - &self.projector
    }
}

/// Inverse of a symmetric positive definite matrix (Cholesky, with an LU
/// fallback for round-off).
pub(crate) fn spd_inverse(a: &DMatrix<f64>) -> DMatrix<f64> {
    match a.clone().cholesky() {
        Some(c) => c.inverse(),
        None => a
            .clone()
            .try_inverse()
            .expect("Gram matrix of a full-rank G is invertible"),
    }
}

/// Element `u = (x, y, z)` of `ℝⁿ × ℝᵐ × ℝ^{m×d}`.
#[derive(Debug, Clone, PartialEq)]
pub struct TripleVector {
    pub x: DVector<f64>,
    pub y: DVector<f64>,
    pub z: DMatrix<f64>,
}

impl TripleVector {
    pub fn new(x: DVector<f64>, y: DVector<f64>, z: DMatrix<f64>) -> Self {
        Self { x, y, z }
    }

    pub fn zeros(n: usize, m: usize, d: usize) -> Self {
        Self {
            x: DVector::zeros(n),
            y: DVector::zeros(m),
            z: DMatrix::zeros(m, d),
        }
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.x.len(), self.y.len(), self.z.ncols())
    }

    pub fn norm_squared(&self) -> f64 {
        self.x.norm_squared() + self.y.norm_squared() + self.z.norm_squared()
    }

    pub fn sub(&self, other: &Self) -> Self {
        Self {
            x: &self.x - &other.x,
            y: &self.y - &other.y,
            z: &self.z - &other.z,
        }
    }
}

/// `[u¹, u²] = (x¹, x²) + (y¹, y²) + tr(z¹ z²*)`.
pub fn bracket(u1: &TripleVector, u2: &TripleVector) -> Result<f64, AlgebraError> {
    if u1.x.len() != u2.x.len() || u1.y.len() != u2.y.len() || u1.z.shape() != u2.z.shape() {
        return Err(AlgebraError::Dimension(format!(
            "bracket of {:?} and {:?}",
            u1.dims(),
            u2.dims()
        )));
    }
    Ok(u1.x.dot(&u2.x) + u1.y.dot(&u2.y) + u1.z.dot(&u2.z))
}

/// `tr(C Q D*)` for a symmetric positive semidefinite `Q`.
pub fn weighted_bracket(
    c: &DMatrix<f64>,
    d: &DMatrix<f64>,
    q: &DMatrix<f64>,
) -> Result<f64, AlgebraError> {
    let k = q.nrows();
    if q.ncols() != k || c.ncols() != k || d.ncols() != k || c.nrows() != d.nrows() {
        return Err(AlgebraError::Dimension(format!(
            "weighted bracket of {:?}, {:?} with Q {:?}",
            c.shape(),
            d.shape(),
            q.shape()
        )));
    }
    let sym = (q + q.transpose()) * 0.5;
    let min_eig = SymmetricEigen::new(sym.clone()).eigenvalues.min();
    if min_eig < -1e-10 {
        return Err(AlgebraError::NotPsd(min_eig));
    }
    Ok((c * sym).dot(d))
}

/// Same as [`weighted_bracket`] without the eigenvalue check, for hot loops
/// where `Q` comes from a validated generator.
pub(crate) fn weighted_bracket_unchecked(
    c: &DMatrix<f64>,
    d: &DMatrix<f64>,
    q: &DMatrix<f64>,
) -> f64 {
    (c * q).dot(d)
}

type VecFn = dyn Fn(f64, usize, &DVector<f64>, &DVector<f64>, &DMatrix<f64>) -> Result<DVector<f64>, String>
    + Send
    + Sync;
type MatFn = dyn Fn(f64, usize, &DVector<f64>, &DVector<f64>, &DMatrix<f64>) -> Result<DMatrix<f64>, String>
    + Send
    + Sync;
type TermFn = dyn Fn(usize, &DVector<f64>) -> Result<DVector<f64>, String> + Send + Sync;

/// The coefficient maps `b, σ, f, Φ` of an FBSDE with dimensions `(n, m, d)`.
///
/// States passed to the closures are 0-based. Every evaluation checks output
/// shapes and finiteness.
#[derive(Clone)]
pub struct CoefficientSet {
    n: usize,
    m: usize,
    d: usize,
    b: Arc<VecFn>,
    sigma: Arc<MatFn>,
    f: Arc<VecFn>,
    phi: Arc<TermFn>,
}

impl fmt::Debug for CoefficientSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("CoefficientSet")
            .field("n", &self.n)
            .field("m", &self.m)
            .field("d", &self.d)
            .finish_non_exhaustive()
    }
}

impl CoefficientSet {
    /// All four maps identically zero.
    pub fn zero(n: usize, m: usize, d: usize) -> Self {
        Self {
            n,
            m,
            d,
            b: Arc::new(move |_, _, _, _, _| Ok(DVector::zeros(n))),
            sigma: Arc::new(move |_, _, _, _, _| Ok(DMatrix::zeros(n, d))),
            f: Arc::new(move |_, _, _, _, _| Ok(DVector::zeros(m))),
            phi: Arc::new(move |_, _| Ok(DVector::zeros(m))),
        }
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.n, self.m, self.d)
    }

    pub fn with_b<F>(mut self, b: F) -> Self
    where
        F: Fn(f64, usize, &DVector<f64>, &DVector<f64>, &DMatrix<f64>) -> DVector<f64>
            + Send
            + Sync
            + 'static,
    {
        self.b = Arc::new(move |t, s, x, y, z| Ok(b(t, s, x, y, z)));
        self
    }

    pub fn with_sigma<F>(mut self, sigma: F) -> Self
    where
        F: Fn(f64, usize, &DVector<f64>, &DVector<f64>, &DMatrix<f64>) -> DMatrix<f64>
            + Send
            + Sync
            + 'static,
    {
        self.sigma = Arc::new(move |t, s, x, y, z| Ok(sigma(t, s, x, y, z)));
        self
    }

    pub fn with_f<F>(mut self, f: F) -> Self
    where
        F: Fn(f64, usize, &DVector<f64>, &DVector<f64>, &DMatrix<f64>) -> DVector<f64>
            + Send
            + Sync
            + 'static,
    {
        self.f = Arc::new(move |t, s, x, y, z| Ok(f(t, s, x, y, z)));
        self
    }

    pub fn with_phi<F>(mut self, phi: F) -> Self
    where
        F: Fn(usize, &DVector<f64>) -> DVector<f64> + Send + Sync + 'static,
    {
        self.phi = Arc::new(move |s, x| Ok(phi(s, x)));
        self
    }

    /// Fallible variants, used by configuration-defined coefficients.
    pub fn with_b_fallible<F>(mut self, b: F) -> Self
    where
        F: Fn(f64, usize, &DVector<f64>, &DVector<f64>, &DMatrix<f64>) -> Result<DVector<f64>, String>
            + Send
            + Sync
            + 'static,
    {
        self.b = Arc::new(b);
        self
    }

    pub fn with_sigma_fallible<F>(mut self, sigma: F) -> Self
    where
        F: Fn(f64, usize, &DVector<f64>, &DVector<f64>, &DMatrix<f64>) -> Result<DMatrix<f64>, String>
            + Send
            + Sync
            + 'static,
    {
        self.sigma = Arc::new(sigma);
        self
    }

    pub fn with_f_fallible<F>(mut self, f: F) -> Self
    where
        F: Fn(f64, usize, &DVector<f64>, &DVector<f64>, &DMatrix<f64>) -> Result<DVector<f64>, String>
            + Send
            + Sync
            + 'static,
    {
        self.f = Arc::new(f);
        self
    }

    pub fn with_phi_fallible<F>(mut self, phi: F) -> Self
    where
        F: Fn(usize, &DVector<f64>) -> Result<DVector<f64>, String> + Send + Sync + 'static,
    {
        self.phi = Arc::new(phi);
        self
    }

    fn check_vec(
        &self,
        component: Component,
        t: f64,
        state: usize,
        out: Result<DVector<f64>, String>,
        len: usize,
    ) -> Result<DVector<f64>, CoeffError> {
        let v = out.map_err(|message| CoeffError::Eval {
            component,
            t,
            state,
            message,
        })?;
        if v.len() != len {
            return Err(CoeffError::Shape {
                component,
                t,
                state,
                expected: format!("length {len}"),
                got: format!("length {}", v.len()),
            });
        }
        if v.iter().any(|e| !e.is_finite()) {
            return Err(CoeffError::NonFinite {
                component,
                t,
                state,
            });
        }
        Ok(v)
    }

    pub fn eval_b(
        &self,
        t: f64,
        state: usize,
        x: &DVector<f64>,
        y: &DVector<f64>,
        z: &DMatrix<f64>,
    ) -> Result<DVector<f64>, CoeffError> {
        self.check_vec(Component::B, t, state, (self.b)(t, state, x, y, z), self.n)
    }

    pub fn eval_f(
        &self,
        t: f64,
        state: usize,
        x: &DVector<f64>,
        y: &DVector<f64>,
        z: &DMatrix<f64>,
    ) -> Result<DVector<f64>, CoeffError> {
        self.check_vec(Component::F, t, state, (self.f)(t, state, x, y, z), self.m)
    }

    pub fn eval_phi(&self, state: usize, x: &DVector<f64>) -> Result<DVector<f64>, CoeffError> {
        self.check_vec(Component::Phi, f64::NAN, state, (self.phi)(state, x), self.m)
    }

    pub fn eval_sigma(
        &self,
        t: f64,
        state: usize,
        x: &DVector<f64>,
        y: &DVector<f64>,
        z: &DMatrix<f64>,
    ) -> Result<DMatrix<f64>, CoeffError> {
        let component = Component::Sigma;
        let s = (self.sigma)(t, state, x, y, z).map_err(|message| CoeffError::Eval {
            component,
            t,
            state,
            message,
        })?;
        if s.shape() != (self.n, self.d) {
            return Err(CoeffError::Shape {
                component,
                t,
                state,
                expected: format!("{}x{}", self.n, self.d),
                got: format!("{}x{}", s.nrows(), s.ncols()),
            });
        }
        if s.iter().any(|e| !e.is_finite()) {
            return Err(CoeffError::NonFinite {
                component,
                t,
                state,
            });
        }
        Ok(s)
    }

    /// Evaluates `b` and `σ` at `u`.
    pub fn eval_forward(
        &self,
        t: f64,
        state: usize,
        u: &TripleVector,
    ) -> Result<(DVector<f64>, DMatrix<f64>), CoeffError> {
        Ok((
            self.eval_b(t, state, &u.x, &u.y, &u.z)?,
            self.eval_sigma(t, state, &u.x, &u.y, &u.z)?,
        ))
    }
}

fn check_dims(coeffs: &CoefficientSet, g: &GStructure, u: &TripleVector) -> Result<(), AlgebraError> {
    let (n, m, d) = coeffs.dims();
    if g.n() != n || g.m() != m {
        return Err(AlgebraError::Dimension(format!(
            "G is {}x{}, coefficients have n = {n}, m = {m}",
            g.m(),
            g.n()
        )));
    }
    if u.dims() != (n, m, d) || u.z.nrows() != m {
        return Err(AlgebraError::Dimension(format!(
            "argument has dims {:?}, expected {:?}",
            u.dims(),
            (n, m, d)
        )));
    }
    Ok(())
}

/// `F(t, u) = (−G*f, Gb, 0)`.
pub fn eval_f_functional(
    coeffs: &CoefficientSet,
    g: &GStructure,
    t: f64,
    state: usize,
    u: &TripleVector,
) -> Result<TripleVector, AlgebraError> {
    check_dims(coeffs, g, u)?;
    let b = coeffs.eval_b(t, state, &u.x, &u.y, &u.z)?;
    let f = coeffs.eval_f(t, state, &u.x, &u.y, &u.z)?;
    let (_, m, d) = coeffs.dims();
    Ok(TripleVector {
        x: -(g.g().transpose() * f),
        y: g.g() * b,
        z: DMatrix::zeros(m, d),
    })
}

/// `H(t, u) = (0, 0, Gσ)`, with `G` applied to each column of `σ`.
pub fn eval_h_functional(
    coeffs: &CoefficientSet,
    g: &GStructure,
    t: f64,
    state: usize,
    u: &TripleVector,
) -> Result<TripleVector, AlgebraError> {
    check_dims(coeffs, g, u)?;
    let sigma = coeffs.eval_sigma(t, state, &u.x, &u.y, &u.z)?;
    let (n, m, _) = coeffs.dims();
    Ok(TripleVector {
        x: DVector::zeros(n),
        y: DVector::zeros(m),
        z: g.g() * sigma,
    })
}

/// Rewrites coefficients for the equations driven by the raw chain
/// increments `dm` instead of `dM = dm − A m dt`:
/// `b** = b − σ A e_s` and `f** = f + z A e_s`.
pub fn to_chain_driven(coeffs: &CoefficientSet, model: &ChainModel) -> Result<CoefficientSet, AlgebraError> {
    let (n, m, d) = coeffs.dims();
    if model.states() != d {
        return Err(AlgebraError::Dimension(format!(
            "coefficients use d = {d}, chain has {} states",
            model.states()
        )));
    }
    let mut out = coeffs.clone();
    let (inner_b, inner_sigma, inner_f) = (coeffs.b.clone(), coeffs.sigma.clone(), coeffs.f.clone());
    let rates = model.clone();
    out.b = Arc::new(move |t, s, x, y, z| {
        let b = inner_b(t, s, x, y, z)?;
        let sigma = inner_sigma(t, s, x, y, z)?;
        let a = rates.rate_matrix(t).map_err(|e| e.to_string())?;
        if b.len() != n || sigma.shape() != (n, d) {
            return Ok(b);
        }
        Ok(b - sigma * a.column(s))
    });
    let rates = model.clone();
    out.f = Arc::new(move |t, s, x, y, z| {
        let f = inner_f(t, s, x, y, z)?;
        let a = rates.rate_matrix(t).map_err(|e| e.to_string())?;
        if f.len() != m {
            return Ok(f);
        }
        Ok(f + z * a.column(s))
    });
    Ok(out)
}
