//! Hypothesis checkers and identity validators. Checkers sample; a PASS is
//! evidence, never a proof, while a FAIL comes with a witness that
//! reproduces its margin.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::algebra::{
    bracket, eval_f_functional, eval_h_functional, to_chain_driven, weighted_bracket_unchecked, AlgebraError,
    CoeffError, CoefficientSet, GStructure, TripleVector,
};
use crate::chain::{optional_qv_of, path_rng, sample_path, ChainError, ChainModel, TransitionTable};
use crate::field::SolutionField;
use crate::solver::{decoupled_sweep, ContinuationConfig, FBSDEProblem, Noise, SolverError};
use crate::Mode;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum VerifyError {
    #[error(transparent)]
    Coefficient(#[from] CoeffError),
    #[error(transparent)]
    Algebra(#[from] AlgebraError),
    #[error(transparent)]
    Chain(#[from] ChainError),
    #[error(transparent)]
    Solver(#[from] SolverError),
    #[error("empty sampling box: {0}")]
    EmptyBox(String),
    #[error("mismatched inputs: {0}")]
    Mismatch(String),
    #[error("invalid argument: {0}")]
    Argument(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Flavor {
    /// The printed per-functional inequalities for `F`, `H` and `Φ`.
    Literal,
    /// What the uniqueness argument consumes: the `F` inequality without
    /// the `z` term and the `H` inequality weighted by `Q` at each state.
    ProofSufficient,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Verdict {
    Pass,
    /// Holds only with zero constants.
    Degenerate,
    Fail,
}

/// Region sampled by the checkers: entries of `x`, `y`, `z` uniform in
/// `[-radius, radius]`, times uniform in `[t_min, t_max]`, states uniform.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SampleBox {
    pub radius: f64,
    pub t_min: f64,
    pub t_max: f64,
}

impl Default for SampleBox {
    fn default() -> Self {
        Self {
            radius: 2.0,
            t_min: 0.0,
            t_max: 1.0,
        }
    }
}

impl SampleBox {
    fn validate(&self) -> Result<(), VerifyError> {
        if !(self.radius > 0.0 && self.radius.is_finite()) {
            return Err(VerifyError::EmptyBox(format!("radius {}", self.radius)));
        }
        if !(self.t_min.is_finite() && self.t_max.is_finite() && self.t_min <= self.t_max && self.t_min >= 0.0) {
            return Err(VerifyError::EmptyBox(format!("times [{}, {}]", self.t_min, self.t_max)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Inequality {
    F,
    H,
    Terminal,
}

/// Sampled pair that attains the worst margin.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Witness {
    pub sample: usize,
    pub t: f64,
    pub state: usize,
    pub x1: Vec<f64>,
    pub y1: Vec<f64>,
    /// Column-major `m × d`.
    pub z1: Vec<f64>,
    pub x2: Vec<f64>,
    pub y2: Vec<f64>,
    pub z2: Vec<f64>,
    pub inequality: Inequality,
    /// Oriented left side: must be `≥ c·weight` for the inequality to hold.
    pub margin: f64,
    /// Coefficient of `c₂` (or `c₃`) on the right side.
    pub weight_x: f64,
    /// Coefficient of `c₂′` on the right side.
    pub weight_yz: f64,
}

impl Witness {
    /// Largest common constant this sample allows, `None` if its weight is 0.
    pub fn ratio(&self) -> Option<f64> {
        let w = self.weight_x + self.weight_yz;
        (w > 0.0).then(|| self.margin / w)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MonotonicityReport {
    pub mode: Mode,
    pub flavor: Flavor,
    pub samples: usize,
    pub seed: u64,
    /// Largest common value of `c₂ = c₂′` consistent with every sample.
    pub common: f64,
    /// Largest `c₂` with `c₂′` held at `common`.
    pub c2: f64,
    /// Largest `c₂′` with `c₂` held at `common`.
    pub c2_prime: f64,
    pub c3: f64,
    /// Samples that fail even with zero constants.
    pub violations: usize,
    pub verdict: Verdict,
    pub witness: Option<Witness>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LipschitzReport {
    pub samples: usize,
    pub seed: u64,
    pub b: f64,
    pub sigma: f64,
    pub f: f64,
    pub phi: f64,
    pub f_functional: f64,
    pub h_functional: f64,
    /// `H` measured in the `Q`-weighted norm `tr(Gσ̂ Q σ̂*G*)^{1/2}`.
    pub h_weighted: f64,
}

struct Sample {
    t: f64,
    state: usize,
    u1: TripleVector,
    u2: TripleVector,
}

#[derive(Clone, Copy)]
enum Faces {
    Monotonicity,
    Lipschitz,
}

fn uniform(rng: &mut ChaCha8Rng, r: f64) -> f64 {
    rng.random_range(-r..=r)
}

/// Sample `index` from its own stream. Every fourth sample shares some
/// blocks between `u¹` and `u²`, so differences confined to a face of the
/// product space are always exercised.
fn draw(index: usize, seed: u64, dims: (usize, usize, usize), bx: &SampleBox, faces: Faces) -> Sample {
    let (n, m, d) = dims;
    let mut rng = path_rng(seed, index as u64);
    let t = if bx.t_max > bx.t_min {
        rng.random_range(bx.t_min..=bx.t_max)
    } else {
        bx.t_min
    };
    let state = rng.random_range(0..d);
    let r = bx.radius;
    let triple = |rng: &mut ChaCha8Rng| {
        TripleVector::new(
            DVector::from_fn(n, |_, _| uniform(rng, r)),
            DVector::from_fn(m, |_, _| uniform(rng, r)),
            DMatrix::from_fn(m, d, |_, _| uniform(rng, r)),
        )
    };
    let u1 = triple(&mut rng);
    let mut u2 = triple(&mut rng);
    // (share x, share y, share z)
    let share = match (faces, index % 4) {
        (_, 0) => (false, false, false),
        (Faces::Monotonicity, 1) => (false, false, true),
        (Faces::Monotonicity, 2) => (true, false, false),
        (Faces::Monotonicity, _) => (false, true, true),
        (Faces::Lipschitz, 1) => (false, true, true),
        (Faces::Lipschitz, 2) => (true, false, true),
        (Faces::Lipschitz, _) => (true, true, false),
    };
    if share.0 {
        u2.x = u1.x.clone();
    }
    if share.1 {
        u2.y = u1.y.clone();
    }
    if share.2 {
        u2.z = u1.z.clone();
    }
    Sample { t, state, u1, u2 }
}

struct Term {
    inequality: Inequality,
    margin: f64,
    weight_x: f64,
    weight_yz: f64,
}

fn monotonicity_terms(
    coeffs: &CoefficientSet,
    g: &GStructure,
    model: &ChainModel,
    mode: Mode,
    flavor: Flavor,
    s: &Sample,
) -> Result<Vec<Term>, VerifyError> {
    let sign = mode.sign();
    let gm = g.g();
    let du = s.u1.sub(&s.u2);
    let gx = gm * &du.x;
    let gty = gm.tr_mul(&du.y);
    let gtz = gm.tr_mul(&du.z);
    let df = eval_f_functional(coeffs, g, s.t, s.state, &s.u1)?.sub(&eval_f_functional(coeffs, g, s.t, s.state, &s.u2)?);
    let dh = eval_h_functional(coeffs, g, s.t, s.state, &s.u1)?.sub(&eval_h_functional(coeffs, g, s.t, s.state, &s.u2)?);
    let dphi = coeffs.eval_phi(s.state, &s.u1.x)? - coeffs.eval_phi(s.state, &s.u2.x)?;
    let mut terms = Vec::with_capacity(3);
    match flavor {
        Flavor::Literal => {
            let yz = gty.norm_squared() + gtz.norm_squared();
            terms.push(Term {
                inequality: Inequality::F,
                margin: -sign * bracket(&df, &du)?,
                weight_x: gx.norm_squared(),
                weight_yz: yz,
            });
            terms.push(Term {
                inequality: Inequality::H,
                margin: -sign * bracket(&dh, &du)?,
                weight_x: gx.norm_squared(),
                weight_yz: yz,
            });
        }
        Flavor::ProofSufficient => {
            let q = model.qv_density(s.state, s.t)?;
            terms.push(Term {
                inequality: Inequality::F,
                margin: -sign * bracket(&df, &du)?,
                weight_x: gx.norm_squared(),
                weight_yz: gty.norm_squared(),
            });
            terms.push(Term {
                inequality: Inequality::H,
                margin: -sign * weighted_bracket_unchecked(&dh.z, &du.z, &q),
                weight_x: 0.0,
                weight_yz: weighted_bracket_unchecked(&gtz, &gtz, &q),
            });
        }
    }
    terms.push(Term {
        inequality: Inequality::Terminal,
        margin: sign * dphi.dot(&gx),
        weight_x: gx.norm_squared(),
        weight_yz: 0.0,
    });
    Ok(terms)
}

fn slack(t: &Term) -> f64 {
    1e-12 * (1.0 + t.margin.abs() + t.weight_x + t.weight_yz)
}

fn check_inputs(coeffs: &CoefficientSet, g: &GStructure, model: &ChainModel, samples: usize) -> Result<(), VerifyError> {
    let (n, m, d) = coeffs.dims();
    if samples == 0 {
        return Err(VerifyError::Argument("need at least one sample".into()));
    }
    if g.n() != n || g.m() != m || model.states() != d {
        return Err(VerifyError::Mismatch(format!(
            "coefficients (n, m, d) = ({n}, {m}, {d}), G is {}x{}, chain has {} states",
            g.m(),
            g.n(),
            model.states()
        )));
    }
    Ok(())
}

/// Samples the monotonicity hypotheses (the `≤` family for
/// [`Mode::Thm2`], the reversed one for [`Mode::Thm3`]) and estimates the
/// constants. Sample `i` depends only on `(seed, i)`, so adding samples can
/// only tighten the estimates.
#[allow(clippy::too_many_arguments)]
pub fn check_monotonicity(
    coeffs: &CoefficientSet,
    g: &GStructure,
    model: &ChainModel,
    mode: Mode,
    flavor: Flavor,
    samples: usize,
    seed: u64,
    bx: &SampleBox,
) -> Result<MonotonicityReport, VerifyError> {
    check_inputs(coeffs, g, model, samples)?;
    bx.validate()?;
    let dims = coeffs.dims();
    let all = (0..samples)
        .into_par_iter()
        .map(|i| {
            let s = draw(i, seed, dims, bx, Faces::Monotonicity);
            monotonicity_terms(coeffs, g, model, mode, flavor, &s).map(|t| (i, s, t))
        })
        .collect::<Result<Vec<_>, _>>()?;

    let mut violations = 0;
    let mut common = f64::INFINITY;
    let mut c3 = f64::INFINITY;
    // ((class, value), sample, term): smaller is worse; violations come first.
    let mut worst: Option<((u8, f64), usize, usize)> = None;
    for (slot, (_, _, terms)) in all.iter().enumerate() {
        for (k, t) in terms.iter().enumerate() {
            let w = t.weight_x + t.weight_yz;
            let key = if t.margin < -slack(t) {
                violations += 1;
                (0, t.margin)
            } else if w > slack(t) {
                let r = t.margin / w;
                match t.inequality {
                    Inequality::Terminal => c3 = c3.min(r),
                    _ => common = common.min(r),
                }
                (1, r)
            } else {
                continue;
            };
            if worst.is_none_or(|(best, _, _)| key < best) {
                worst = Some((key, slot, k));
            }
        }
    }
    let held = common.max(0.0);
    let mut c2 = f64::INFINITY;
    let mut c2_prime = f64::INFINITY;
    for (_, _, terms) in &all {
        for t in terms.iter().filter(|t| t.inequality != Inequality::Terminal) {
            if t.weight_x > slack(t) {
                c2 = c2.min((t.margin - held * t.weight_yz) / t.weight_x);
            }
            if t.weight_yz > slack(t) {
                c2_prime = c2_prime.min((t.margin - held * t.weight_x) / t.weight_yz);
            }
        }
    }
    let finite = |v: f64| if v.is_finite() { v + 0.0 } else { 0.0 };
    let (common, c2, c2_prime, c3) = (finite(common), finite(c2), finite(c2_prime), finite(c3));
    let tight = common <= 1e-12 || c3 <= 1e-12;
    let verdict = match (violations > 0, tight, flavor) {
        (true, _, _) => Verdict::Fail,
        (false, true, Flavor::Literal) => Verdict::Fail,
        (false, true, Flavor::ProofSufficient) => Verdict::Degenerate,
        (false, false, _) => Verdict::Pass,
    };
    let witness = worst.map(|(_, slot, k)| {
        let (i, s, terms) = &all[slot];
        make_witness(*i, s, &terms[k])
    });
    Ok(MonotonicityReport {
        mode,
        flavor,
        samples,
        seed,
        common,
        c2,
        c2_prime,
        c3,
        violations,
        verdict,
        witness,
    })
}

fn make_witness(i: usize, s: &Sample, t: &Term) -> Witness {
    Witness {
        sample: i,
        t: s.t,
        state: s.state,
        x1: s.u1.x.as_slice().to_vec(),
        y1: s.u1.y.as_slice().to_vec(),
        z1: s.u1.z.as_slice().to_vec(),
        x2: s.u2.x.as_slice().to_vec(),
        y2: s.u2.y.as_slice().to_vec(),
        z2: s.u2.z.as_slice().to_vec(),
        inequality: t.inequality,
        margin: t.margin,
        weight_x: t.weight_x,
        weight_yz: t.weight_yz,
    }
}

/// Re-evaluates a witness's inequality at its stored point.
pub fn reevaluate_witness(
    coeffs: &CoefficientSet,
    g: &GStructure,
    model: &ChainModel,
    mode: Mode,
    flavor: Flavor,
    w: &Witness,
) -> Result<Witness, VerifyError> {
    let (n, m, d) = coeffs.dims();
    if w.x1.len() != n || w.y1.len() != m || w.z1.len() != m * d || w.state >= d {
        return Err(VerifyError::Mismatch("witness does not match the coefficients".into()));
    }
    let s = Sample {
        t: w.t,
        state: w.state,
        u1: TripleVector::new(
            DVector::from_column_slice(&w.x1),
            DVector::from_column_slice(&w.y1),
            DMatrix::from_column_slice(m, d, &w.z1),
        ),
        u2: TripleVector::new(
            DVector::from_column_slice(&w.x2),
            DVector::from_column_slice(&w.y2),
            DMatrix::from_column_slice(m, d, &w.z2),
        ),
    };
    let terms = monotonicity_terms(coeffs, g, model, mode, flavor, &s)?;
    let t = terms
        .iter()
        .find(|t| t.inequality == w.inequality)
        .ok_or_else(|| VerifyError::Mismatch("inequality not checked in this flavor".into()))?;
    Ok(make_witness(w.sample, &s, t))
}

/// Sampled difference quotients `|ĉ| / |û|` (and `|ΔΦ| / |x̂|`).
pub fn check_lipschitz(
    coeffs: &CoefficientSet,
    g: &GStructure,
    model: &ChainModel,
    samples: usize,
    seed: u64,
    bx: &SampleBox,
) -> Result<LipschitzReport, VerifyError> {
    check_inputs(coeffs, g, model, samples)?;
    bx.validate()?;
    let dims = coeffs.dims();
    let rows = (0..samples)
        .into_par_iter()
        .map(|i| -> Result<[f64; 7], VerifyError> {
            let s = draw(i, seed, dims, bx, Faces::Lipschitz);
            let (t, st) = (s.t, s.state);
            let du = s.u1.sub(&s.u2);
            let r = du.norm_squared().sqrt();
            let mut out = [0.0; 7];
            if r > 0.0 {
                let (a, b) = (&s.u1, &s.u2);
                let db = coeffs.eval_b(t, st, &a.x, &a.y, &a.z)? - coeffs.eval_b(t, st, &b.x, &b.y, &b.z)?;
                let ds = coeffs.eval_sigma(t, st, &a.x, &a.y, &a.z)? - coeffs.eval_sigma(t, st, &b.x, &b.y, &b.z)?;
                let df = coeffs.eval_f(t, st, &a.x, &a.y, &a.z)? - coeffs.eval_f(t, st, &b.x, &b.y, &b.z)?;
                let dff = eval_f_functional(coeffs, g, t, st, a)?.sub(&eval_f_functional(coeffs, g, t, st, b)?);
                let dhh = eval_h_functional(coeffs, g, t, st, a)?.sub(&eval_h_functional(coeffs, g, t, st, b)?);
                let q = model.qv_density(st, t)?;
                out[0] = db.norm() / r;
                out[1] = ds.norm() / r;
                out[2] = df.norm() / r;
                out[4] = dff.norm_squared().sqrt() / r;
                out[5] = dhh.norm_squared().sqrt() / r;
                out[6] = weighted_bracket_unchecked(&dhh.z, &dhh.z, &q).max(0.0).sqrt() / r;
            }
            let rx = du.x.norm();
            if rx > 0.0 {
                out[3] = (coeffs.eval_phi(st, &s.u1.x)? - coeffs.eval_phi(st, &s.u2.x)?).norm() / rx;
            }
            Ok(out)
        })
        .collect::<Result<Vec<_>, _>>()?;
    let mut sup = [0.0_f64; 7];
    for row in &rows {
        for (acc, v) in sup.iter_mut().zip(row) {
            *acc = acc.max(*v);
        }
    }
    Ok(LipschitzReport {
        samples,
        seed,
        b: sup[0],
        sigma: sup[1],
        f: sup[2],
        phi: sup[3],
        f_functional: sup[4],
        h_functional: sup[5],
        h_weighted: sup[6],
    })
}

/// Terms of the discrete product rule for `(GX̂, Ŷ)` between two fields.
///
/// Per step, `(GX̂_c, Ŷ_c) − (GX̂_v, Ŷ_v)` splits exactly into the drift
/// pairing `[F̂, Û]Δt`, the jump pairing `(Gσ̂ΔM, ẐΔM)`, a second-order
/// term `−(Gb̂, f̂)Δt²` and martingale increments with zero tree mean.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DualityReport {
    /// `E(GX̂_N, Ŷ_N) − (GX̂_0, Ŷ_0)`.
    pub lhs: f64,
    /// `E Σ [F̂, Û] Δt`.
    pub drift_term: f64,
    /// `E Σ tr(Gσ̂ ΔMΔM* Ẑ*)` summed over realized increments.
    pub jump_optional: f64,
    /// `E Σ tr(Gσ̂ (diag p − pp*) Ẑ*)` with the discrete compensator.
    pub jump_predictable: f64,
    /// `E Σ tr(Gσ̂ Q Ẑ*) Δt` with the generator's density.
    pub jump_continuous: f64,
    /// `−E Σ (Gb̂, f̂) Δt²`.
    pub second_order: f64,
    pub optional_gap: f64,
    pub predictable_gap: f64,
    /// Gap when the continuous density replaces the compensator; `O(Δt)`.
    pub continuous_gap: f64,
}

/// Evaluates both sides of the discrete duality identity for two fields on
/// the same tree, each paired with the level-`l` dynamics of its problem.
pub fn check_duality(
    first: (&FBSDEProblem, &SolutionField),
    second: (&FBSDEProblem, &SolutionField),
    l: f64,
) -> Result<DualityReport, VerifyError> {
    let (p1, f1) = first;
    let (p2, f2) = second;
    let (t1, t2) = (&*p1.tree, &*p2.tree);
    let same_tree = std::sync::Arc::ptr_eq(&p1.tree, &p2.tree)
        || (t1.node_count() == t2.node_count() && t1.dt() == t2.dt() && t1.root_state() == t2.root_state());
    if !same_tree || f1.node_count() != t1.node_count() || f2.node_count() != t1.node_count() {
        return Err(VerifyError::Mismatch("fields and problems must share one tree".into()));
    }
    if p1.dims() != p2.dims() || f1.dims() != p1.dims() || f2.dims() != p1.dims() || p1.g.g() != p2.g.g() {
        return Err(VerifyError::Mismatch("problems differ in dimensions or G".into()));
    }
    let tree = t1;
    let gm = p1.g.g();
    let dt = tree.dt();
    let pair = |v: usize| (gm * (&f1.x[v] - &f2.x[v])).dot(&(&f1.y[v] - &f2.y[v]));
    let mut lhs = -pair(0);
    for v in tree.leaves() {
        lhs += tree.probability(v) * pair(v);
    }
    let (mut drift, mut opt, mut pred, mut cont, mut second_order) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for v in tree.internal_nodes() {
        let (b1, s1, d1) = p1.level_coefficients(l, v, &f1.x[v], &f1.y[v], &f1.z[v])?;
        let (b2, s2, d2) = p2.level_coefficients(l, v, &f2.x[v], &f2.y[v], &f2.z[v])?;
        let (bh, sh, fh) = (b1 - b2, s1 - s2, d1 - d2);
        let xh = &f1.x[v] - &f2.x[v];
        let yh = &f1.y[v] - &f2.y[v];
        let zh = &f1.z[v] - &f2.z[v];
        let pv = tree.probability(v);
        let gs = gm * &sh;
        drift += pv * ((gm * &bh).dot(&yh) - (gm.tr_mul(&fh)).dot(&xh)) * dt;
        second_order -= pv * (gm * &bh).dot(&fh) * dt * dt;
        let tr = tree.transition_at(v);
        for (i, dm) in tr.increments.iter().enumerate() {
            opt += pv * tr.probs[i] * (&gs * dm).dot(&(&zh * dm));
        }
        pred += pv * weighted_bracket_unchecked(&gs, &zh, &tr.increment_covariance());
        cont += pv * weighted_bracket_unchecked(&gs, &zh, &tree.table().qv_density(tree.level_of(v), tree.state_of(v))) * dt;
    }
    Ok(DualityReport {
        lhs,
        drift_term: drift,
        jump_optional: opt,
        jump_predictable: pred,
        jump_continuous: cont,
        second_order,
        optional_gap: (lhs - drift - opt - second_order).abs(),
        predictable_gap: (lhs - drift - pred - second_order).abs(),
        continuous_gap: (lhs - drift - cont - second_order).abs(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QvReport {
    pub paths: usize,
    pub seed: u64,
    /// Monte Carlo mean of `[M, M]_T`, row-major.
    pub monte_carlo: Vec<Vec<f64>>,
    /// Exact `E⟨M, M⟩_T` from the forward equation for the state law.
    pub exact: Vec<Vec<f64>>,
    /// Frobenius distance relative to `‖exact‖_F` (absolute when that is 0).
    pub relative_error: f64,
    /// Four standard errors of the Monte Carlo mean, on the same scale.
    pub tolerance: f64,
    pub within_tolerance: bool,
}

fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

const QV_CHUNK: usize = 4096;

/// Compares the sample mean of `[M, M]_T` with its exact expectation.
pub fn check_qv_consistency(
    model: &ChainModel,
    horizon: f64,
    steps: usize,
    root: usize,
    paths: usize,
    seed: u64,
) -> Result<QvReport, VerifyError> {
    if paths == 0 {
        return Err(VerifyError::Argument("path count must be positive".into()));
    }
    if root >= model.states() {
        return Err(VerifyError::Argument(format!("root state {root} out of range")));
    }
    let table = TransitionTable::build(model, horizon, steps, Some(root))?;
    let d = model.states();

    let mut law = DVector::zeros(d);
    law[root] = 1.0;
    let mut exact = DMatrix::zeros(d, d);
    for k in 0..steps {
        let mut next = DVector::zeros(d);
        for s in (0..d).filter(|&s| law[s] > 0.0) {
            let tr = table.transition(k, s);
            exact += tr.increment_covariance() * law[s];
            next.axpy(law[s], &tr.probs, 1.0);
        }
        law = next;
    }

    let chunks = paths.div_ceil(QV_CHUNK);
    let partial: Vec<(DMatrix<f64>, DMatrix<f64>)> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut sum = DMatrix::zeros(d, d);
            let mut sq = DMatrix::zeros(d, d);
            let mut buf = vec![0u32; steps + 1];
            for i in c * QV_CHUNK..((c + 1) * QV_CHUNK).min(paths) {
                let mut rng = path_rng(seed, i as u64);
                sample_path(&table, root, &mut rng, &mut buf);
                let qv = optional_qv_of(&table, &buf);
                sq += qv.component_mul(&qv);
                sum += qv;
            }
            (sum, sq)
        })
        .collect();
    let (mut sum, mut sq) = (DMatrix::zeros(d, d), DMatrix::zeros(d, d));
    for (a, b) in partial {
        sum += a;
        sq += b;
    }
    let count = paths as f64;
    let mean = sum / count;
    let var = (sq / count - mean.component_mul(&mean)).map(|v| v.max(0.0));
    let scale = if exact.norm() > 0.0 { exact.norm() } else { 1.0 };
    let relative_error = (&mean - &exact).norm() / scale;
    let tolerance = 4.0 * (var.sum() / count).sqrt() / scale;
    Ok(QvReport {
        paths,
        seed,
        monte_carlo: rows(&mean),
        exact: rows(&exact),
        relative_error,
        tolerance,
        within_tolerance: relative_error <= tolerance.max(1e-14),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FormReport {
    pub max_discrepancy: f64,
    pub worst_node: usize,
}

/// Runs one decoupling sweep with the martingale-driven coefficients and one
/// with the equivalent chain-driven coefficients from the same field.
pub fn check_form_equivalence(
    problem: &FBSDEProblem,
    field: &SolutionField,
    l: f64,
    config: &ContinuationConfig,
) -> Result<FormReport, VerifyError> {
    let mut raw = problem.clone();
    raw.coeffs = to_chain_driven(&problem.coeffs, problem.tree.model())?;
    let a = decoupled_sweep(problem, l, field, config, Noise::Compensated)?;
    let b = decoupled_sweep(&raw, l, field, config, Noise::Raw)?;
    let mut report = FormReport {
        max_discrepancy: 0.0,
        worst_node: 0,
    };
    for v in 0..a.node_count() {
        let e = (&a.x[v] - &b.x[v])
            .amax()
            .max((&a.y[v] - &b.y[v]).amax())
            .max((&a.z[v] - &b.z[v]).amax());
        if e > report.max_discrepancy {
            report = FormReport {
                max_discrepancy: e,
                worst_node: v,
            };
        }
    }
    Ok(report)
}
