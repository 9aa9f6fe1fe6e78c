//! Finite-state Markov chain: generator validation, the discrete tree of path
//! prefixes, Monte Carlo paths, quadratic variations and the exact one-step
//! martingale representation.
//!
//! Conventions: states are `0..d` internally; the generator `A(t)` acts on the
//! unit-vector state `e_s`, so column `s` holds the jump rates out of state `s`
//! and every column sums to zero. One step of length `dt` from state `s` moves
//! to state `i` with probability `p_i = δ_{is} + A_{is}(t) dt` and records the
//! compensated increment `ΔM = e_i − e_s − A(t) e_s dt`.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

/// Tolerance on column sums and off-diagonal signs accepted by
/// [`validate_generator`].
pub const GENERATOR_TOL: f64 = 1e-12;

/// Default cap on the number of nodes of a [`DiscreteChainTree`].
pub const DEFAULT_NODE_BUDGET: usize = 1 << 20;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ChainError {
    #[error("generator dimension mismatch: {0}")]
    Dimension(String),
    #[error("non-finite generator entry at matrix {matrix}, ({row}, {col})")]
    NonFinite { matrix: usize, row: usize, col: usize },
    #[error("invalid generator: {0}")]
    Invalid(GeneratorViolation),
    #[error(
        "step constraint violated: dt * max|A_jj| = {product:.6} > 1 at t = {time}; use at least {min_steps} steps"
    )]
    StepConstraint {
        product: f64,
        time: f64,
        min_steps: usize,
    },
    #[error("tree with {nodes} nodes exceeds the node budget of {budget}")]
    NodeBudget { nodes: usize, budget: usize },
    #[error("state index {state} out of range for {d} states")]
    State { state: usize, d: usize },
    #[error("invalid argument: {0}")]
    Argument(String),
}

/// First offending entry found by [`validate_generator`].
#[derive(Debug, Clone, PartialEq)]
pub enum GeneratorViolation {
    ColumnSum { matrix: usize, col: usize, sum: f64 },
    NegativeRate { matrix: usize, row: usize, col: usize, value: f64 },
}

impl fmt::Display for GeneratorViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GeneratorViolation::ColumnSum { matrix, col, sum } => {
                write!(f, "matrix {matrix}: column {} sums to {sum}", col + 1)
            }
            GeneratorViolation::NegativeRate {
                matrix,
                row,
                col,
                value,
            } => write!(
                f,
                "matrix {matrix}: off-diagonal entry ({}, {}) = {value} is negative",
                row + 1,
                col + 1
            ),
        }
    }
}

/// Verdict of [`validate_generator`].
#[derive(Debug, Clone, PartialEq)]
pub enum GeneratorVerdict {
    Valid,
    Invalid(GeneratorViolation),
}

impl GeneratorVerdict {
    pub fn is_valid(&self) -> bool {
        matches!(self, GeneratorVerdict::Valid)
    }
}

/// Checks a sequence of generator samples (e.g. `A(t_k)` on a grid).
///
/// Structural problems (non-square, mixed sizes, `d < 2`, NaN/Inf) are
/// errors; a well-formed matrix that breaks the rate-matrix rules yields
/// [`GeneratorVerdict::Invalid`] with the first offending entry.
pub fn validate_generator(mats: &[DMatrix<f64>]) -> Result<GeneratorVerdict, ChainError> {
    let first = mats
        .first()
        .ok_or_else(|| ChainError::Dimension("no matrices given".into()))?;
    let d = first.nrows();
    if d < 2 {
        return Err(ChainError::Dimension(format!("need d >= 2, got {d}")));
    }
    for (k, a) in mats.iter().enumerate() {
        if a.nrows() != d || a.ncols() != d {
            return Err(ChainError::Dimension(format!(
                "matrix {k} is {}x{}, expected {d}x{d}",
                a.nrows(),
                a.ncols()
            )));
        }
        for col in 0..d {
            for row in 0..d {
                if !a[(row, col)].is_finite() {
                    return Err(ChainError::NonFinite { matrix: k, row, col });
                }
            }
        }
    }
    for (k, a) in mats.iter().enumerate() {
        for col in 0..d {
            for row in 0..d {
                if row != col && a[(row, col)] < -GENERATOR_TOL {
                    return Ok(GeneratorVerdict::Invalid(GeneratorViolation::NegativeRate {
                        matrix: k,
                        row,
                        col,
                        value: a[(row, col)],
                    }));
                }
            }
            let sum: f64 = a.column(col).sum();
            if sum.abs() > GENERATOR_TOL {
                return Ok(GeneratorVerdict::Invalid(GeneratorViolation::ColumnSum {
                    matrix: k,
                    col,
                    sum,
                }));
            }
        }
    }
    Ok(GeneratorVerdict::Valid)
}

/// Clamps tiny negative rates to zero and resets the diagonal so that each
/// column sums to exactly zero.
fn normalize_generator(a: &DMatrix<f64>) -> DMatrix<f64> {
    let d = a.nrows();
    let mut out = a.clone();
    for col in 0..d {
        let mut off = 0.0;
        for row in 0..d {
            if row != col {
                if out[(row, col)] < 0.0 {
                    out[(row, col)] = 0.0;
                }
                off += out[(row, col)];
            }
        }
        out[(col, col)] = -off;
    }
    out
}

type RateFn = Arc<dyn Fn(f64) -> DMatrix<f64> + Send + Sync>;

#[derive(Clone)]
enum Rates {
    Constant(DMatrix<f64>),
    TimeVarying(RateFn),
}

/// A continuous-time chain on `d` states described by its generator.
#[derive(Clone)]
pub struct ChainModel {
    d: usize,
    rates: Rates,
}

impl fmt::Debug for ChainModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.rates {
            Rates::Constant(a) => f
                .debug_struct("ChainModel")
                .field("d", &self.d)
                .field("generator", a)
                .finish(),
            Rates::TimeVarying(_) => f
                .debug_struct("ChainModel")
                .field("d", &self.d)
                .field("generator", &"<time-varying>")
                .finish(),
        }
    }
}

impl ChainModel {
    /// Time-homogeneous chain. The generator is validated and normalized.
    pub fn constant(a: DMatrix<f64>) -> Result<Self, ChainError> {
        match validate_generator(std::slice::from_ref(&a))? {
            GeneratorVerdict::Valid => Ok(Self {
                d: a.nrows(),
                rates: Rates::Constant(normalize_generator(&a)),
            }),
            GeneratorVerdict::Invalid(v) => Err(ChainError::Invalid(v)),
        }
    }

    /// Time-dependent chain. Samples are validated when a tree or path
    /// simulation evaluates them.
    pub fn time_varying<F>(d: usize, rates: F) -> Result<Self, ChainError>
    where
        F: Fn(f64) -> DMatrix<f64> + Send + Sync + 'static,
    {
        if d < 2 {
            return Err(ChainError::Dimension(format!("need d >= 2, got {d}")));
        }
        Ok(Self {
            d,
            rates: Rates::TimeVarying(Arc::new(rates)),
        })
    }

    /// Chain that never moves.
    pub fn frozen(d: usize) -> Result<Self, ChainError> {
        Self::constant(DMatrix::zeros(d, d))
    }

    pub fn states(&self) -> usize {
        self.d
    }

    pub fn is_time_homogeneous(&self) -> bool {
        matches!(self.rates, Rates::Constant(_))
    }

    /// `A(t)`, validated and normalized.
    pub fn rate_matrix(&self, t: f64) -> Result<DMatrix<f64>, ChainError> {
        match &self.rates {
            Rates::Constant(a) => Ok(a.clone()),
            Rates::TimeVarying(f) => {
                let a = f(t);
                match validate_generator(std::slice::from_ref(&a))? {
                    GeneratorVerdict::Valid if a.nrows() == self.d => Ok(normalize_generator(&a)),
                    GeneratorVerdict::Valid => Err(ChainError::Dimension(format!(
                        "generator at t = {t} has size {}, expected {}",
                        a.nrows(),
                        self.d
                    ))),
                    GeneratorVerdict::Invalid(v) => Err(ChainError::Invalid(v)),
                }
            }
        }
    }

    /// Predictable quadratic-variation density
    /// `Q(e_j, t) = diag(A e_j) − diag(e_j) A* − A diag(e_j)`.
    pub fn qv_density(&self, state: usize, t: f64) -> Result<DMatrix<f64>, ChainError> {
        self.check_state(state)?;
        Ok(qv_density_of(&self.rate_matrix(t)?, state))
    }

    fn check_state(&self, state: usize) -> Result<(), ChainError> {
        if state >= self.d {
            Err(ChainError::State { state, d: self.d })
        } else {
            Ok(())
        }
    }
}

/// `Q(e_j)` for a given generator sample.
pub fn qv_density_of(a: &DMatrix<f64>, state: usize) -> DMatrix<f64> {
    let d = a.nrows();
    let col = a.column(state);
    let mut q = DMatrix::<f64>::from_diagonal(&col.clone_owned());
    for k in 0..d {
        // diag(e_j) A* has row j equal to column j of A
        q[(state, k)] -= a[(k, state)];
        // A diag(e_j) has column j equal to column j of A
        q[(k, state)] -= a[(k, state)];
    }
    q
}

/// One-step transition law out of a given state at a given grid time.
#[derive(Debug, Clone)]
pub struct Transition {
    /// `p_i` for each next state `i`.
    pub probs: DVector<f64>,
    /// `ΔM` for each next state `i`.
    pub increments: Vec<DVector<f64>>,
    /// Column `A(t) e_s` of the generator.
    pub rates: DVector<f64>,
}

impl Transition {
    pub fn new(a: &DMatrix<f64>, state: usize, dt: f64) -> Self {
        let d = a.nrows();
        let rates: DVector<f64> = a.column(state).clone_owned();
        let mut probs = &rates * dt;
        probs[state] += 1.0;
        let increments = (0..d)
            .map(|i| {
                let mut dm = -&rates * dt;
                dm[i] += 1.0;
                dm[state] -= 1.0;
                dm
            })
            .collect();
        Self {
            probs,
            increments,
            rates,
        }
    }

    pub fn states(&self) -> usize {
        self.probs.len()
    }

    /// Exact conditional covariance `E[ΔM ΔM*] = diag(p) − p p*`.
    pub fn increment_covariance(&self) -> DMatrix<f64> {
        DMatrix::from_diagonal(&self.probs) - &self.probs * self.probs.transpose()
    }

    /// Matrix whose columns are the increments, `I − p 1*`. Right-multiplying
    /// by it maps any `m×d` matrix onto its centered representative.
    pub fn increment_matrix(&self) -> DMatrix<f64> {
        let d = self.states();
        DMatrix::from_fn(d, d, |i, c| self.increments[c][i])
    }
}

/// Per-step, per-state transition laws on a uniform grid.
#[derive(Debug, Clone)]
pub struct TransitionTable {
    pub d: usize,
    pub horizon: f64,
    pub steps: usize,
    pub dt: f64,
    levels: Vec<Vec<Transition>>,
    generators: Vec<DMatrix<f64>>,
}

impl TransitionTable {
    /// Builds the table; with `root` given, step 0 only needs to respect the
    /// step constraint in the root state, since no other state occurs there.
    pub fn build(
        model: &ChainModel,
        horizon: f64,
        steps: usize,
        root: Option<usize>,
    ) -> Result<Self, ChainError> {
        if !(horizon > 0.0) || !horizon.is_finite() {
            return Err(ChainError::Argument(format!("horizon must be positive, got {horizon}")));
        }
        if steps == 0 {
            return Err(ChainError::Argument("steps must be at least 1".into()));
        }
        let dt = horizon / steps as f64;
        let d = model.states();
        let mut levels = Vec::with_capacity(steps);
        let mut generators = Vec::with_capacity(steps);
        let mut worst = (0.0_f64, 0.0_f64);
        for k in 0..steps {
            let t = k as f64 * dt;
            let a = model.rate_matrix(t)?;
            let max_exit = match (k, root) {
                (0, Some(r)) => a[(r, r)].abs(),
                _ => (0..d).map(|j| a[(j, j)].abs()).fold(0.0, f64::max),
            };
            if max_exit > worst.0 {
                worst = (max_exit, t);
            }
            levels.push((0..d).map(|s| Transition::new(&a, s, dt)).collect());
            generators.push(a);
        }
        // 1e-12 slack keeps boundary cases such as dt * |A_jj| = 1 admissible
        if worst.0 * dt > 1.0 + 1e-12 {
            return Err(ChainError::StepConstraint {
                product: worst.0 * dt,
                time: worst.1,
                min_steps: (horizon * worst.0).ceil() as usize,
            });
        }
        Ok(Self {
            d,
            horizon,
            steps,
            dt,
            levels,
            generators,
        })
    }

    pub fn transition(&self, step: usize, state: usize) -> &Transition {
        &self.levels[step][state]
    }

    pub fn generator(&self, step: usize) -> &DMatrix<f64> {
        &self.generators[step]
    }

    pub fn time(&self, step: usize) -> f64 {
        step as f64 * self.dt
    }

    /// `Q(e_s, t_k)` from the cached generator sample.
    pub fn qv_density(&self, step: usize, state: usize) -> DMatrix<f64> {
        qv_density_of(&self.generators[step], state)
    }

    /// Transitions whose probability hits exactly 0 (boundary of the step
    /// constraint).
    fn boundary_warnings(&self, root: Option<usize>) -> Vec<String> {
        let mut out = Vec::new();
        for (k, level) in self.levels.iter().enumerate() {
            for (s, tr) in level.iter().enumerate() {
                if tr.probs[s].abs() <= 1e-12 && tr.rates[s] != 0.0 && (k > 0 || Some(s) == root) {
                    out.push(format!(
                        "step {k}: staying in state {} has probability 0 (dt * |A_jj| = 1)",
                        s + 1
                    ));
                }
            }
        }
        out
    }
}

/// Exhaustive tree of chain path prefixes on a uniform grid.
///
/// Nodes are stored level by level; the node at level `k` with local index
/// `j` encodes the path in base `d` (last digit = current state), so parents
/// and children are pure index arithmetic.
#[derive(Debug, Clone)]
pub struct DiscreteChainTree {
    model: ChainModel,
    table: TransitionTable,
    root_state: usize,
    offsets: Vec<usize>,
    node_prob: Vec<f64>,
    warnings: Vec<String>,
}

impl DiscreteChainTree {
    pub fn build(
        model: &ChainModel,
        horizon: f64,
        steps: usize,
        root_state: usize,
    ) -> Result<Self, ChainError> {
        Self::build_with_budget(model, horizon, steps, root_state, DEFAULT_NODE_BUDGET)
    }

    pub fn build_with_budget(
        model: &ChainModel,
        horizon: f64,
        steps: usize,
        root_state: usize,
        budget: usize,
    ) -> Result<Self, ChainError> {
        let d = model.states();
        model.check_state(root_state)?;
        let nodes = tree_node_count(d, steps).ok_or(ChainError::NodeBudget {
            nodes: usize::MAX,
            budget,
        })?;
        if nodes > budget {
            return Err(ChainError::NodeBudget { nodes, budget });
        }
        let table = TransitionTable::build(model, horizon, steps, Some(root_state))?;
        let mut offsets = Vec::with_capacity(steps + 2);
        let mut acc = 0;
        let mut width = 1;
        for _ in 0..=steps {
            offsets.push(acc);
            acc += width;
            width *= d;
        }
        offsets.push(acc);
        let mut node_prob = vec![0.0; nodes];
        node_prob[0] = 1.0;
        let warnings = table.boundary_warnings(Some(root_state));
        let mut tree = Self {
            model: model.clone(),
            table,
            root_state,
            offsets,
            node_prob: Vec::new(),
            warnings,
        };
        for k in 0..steps {
            for v in tree.level_nodes(k) {
                let tr = tree.transition_at(v);
                let base = node_prob[v];
                for (i, c) in tree.children(v).enumerate() {
                    node_prob[c] = base * tr.probs[i];
                }
            }
        }
        tree.node_prob = node_prob;
        Ok(tree)
    }

    pub fn model(&self) -> &ChainModel {
        &self.model
    }

    pub fn table(&self) -> &TransitionTable {
        &self.table
    }

    pub fn states(&self) -> usize {
        self.table.d
    }

    pub fn steps(&self) -> usize {
        self.table.steps
    }

    pub fn horizon(&self) -> f64 {
        self.table.horizon
    }

    pub fn dt(&self) -> f64 {
        self.table.dt
    }

    pub fn root_state(&self) -> usize {
        self.root_state
    }

    pub fn warnings(&self) -> &[String] {
        &self.warnings
    }

    pub fn node_count(&self) -> usize {
        self.node_prob.len()
    }

    pub fn time(&self, level: usize) -> f64 {
        self.table.time(level)
    }

    pub fn level_nodes(&self, level: usize) -> std::ops::Range<usize> {
        self.offsets[level]..self.offsets[level + 1]
    }

    pub fn internal_nodes(&self) -> std::ops::Range<usize> {
        0..self.offsets[self.steps()]
    }

    pub fn leaves(&self) -> std::ops::Range<usize> {
        self.level_nodes(self.steps())
    }

    pub fn is_leaf(&self, node: usize) -> bool {
        node >= self.offsets[self.steps()]
    }

    pub fn level_of(&self, node: usize) -> usize {
        // offsets are increasing; levels are few
        self.offsets.partition_point(|&o| o <= node) - 1
    }

    pub fn state_of(&self, node: usize) -> usize {
        if node == 0 {
            self.root_state
        } else {
            let k = self.level_of(node);
            (node - self.offsets[k]) % self.states()
        }
    }

    pub fn parent(&self, node: usize) -> Option<usize> {
        if node == 0 {
            return None;
        }
        let k = self.level_of(node);
        Some(self.offsets[k - 1] + (node - self.offsets[k]) / self.states())
    }

    /// Children in next-state order; empty for leaves.
    pub fn children(&self, node: usize) -> std::ops::Range<usize> {
        let k = self.level_of(node);
        if k == self.steps() {
            return 0..0;
        }
        let local = node - self.offsets[k];
        let start = self.offsets[k + 1] + local * self.states();
        start..start + self.states()
    }

    /// Transition law used on the edges out of `node`.
    pub fn transition_at(&self, node: usize) -> &Transition {
        self.table
            .transition(self.level_of(node), self.state_of(node))
    }

    /// Probability of reaching `node` from the root.
    pub fn probability(&self, node: usize) -> f64 {
        self.node_prob[node]
    }

    pub fn probabilities(&self) -> &[f64] {
        &self.node_prob
    }

    /// States along the path from the root to `node`.
    pub fn path_states(&self, node: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.level_of(node) + 1);
        let mut cur = Some(node);
        while let Some(v) = cur {
            out.push(self.state_of(v));
            cur = self.parent(v);
        }
        out.reverse();
        out
    }

    /// Position of `node` among the leaves (only meaningful for leaves).
    pub fn leaf_index(&self, node: usize) -> usize {
        node - self.offsets[self.steps()]
    }
}

/// Number of nodes of a full `d`-ary tree with `steps` levels below the root.
pub fn tree_node_count(d: usize, steps: usize) -> Option<usize> {
    let mut total: usize = 0;
    let mut width: usize = 1;
    for _ in 0..=steps {
        total = total.checked_add(width)?;
        width = width.checked_mul(d)?;
    }
    Some(total)
}

/// Canonical one-step representation of a random variable over the children
/// of a node.
#[derive(Debug, Clone, PartialEq)]
pub struct Representation {
    pub mean: DVector<f64>,
    pub z: DMatrix<f64>,
}

/// Exact martingale representation of next-step values `V_i` (one per next
/// state): `mean = Σ p_i V_i` and `Z` with column `i` equal to `V_i − mean`,
/// so that `V_i − mean = Z ΔM(→i)` for every child.
pub fn represent_martingale(values: &[DVector<f64>], transition: &Transition) -> Representation {
    let d = transition.states();
    assert_eq!(values.len(), d, "one value per next state");
    let m = values[0].len();
    let mut mean = DVector::zeros(m);
    for (i, v) in values.iter().enumerate() {
        mean.axpy(transition.probs[i], v, 1.0);
    }
    let mut z = DMatrix::zeros(m, d);
    for (i, v) in values.iter().enumerate() {
        z.set_column(i, &(v - &mean));
    }
    Representation { mean, z }
}

/// Same as [`represent_martingale`], building the transition from the raw
/// generator column data.
pub fn represent_martingale_at(
    values: &[DVector<f64>],
    state: usize,
    a: &DMatrix<f64>,
    dt: f64,
) -> Result<Representation, ChainError> {
    let d = a.nrows();
    if state >= d {
        return Err(ChainError::State { state, d });
    }
    if values.len() != d {
        return Err(ChainError::Dimension(format!(
            "{} values for {d} next states",
            values.len()
        )));
    }
    let exit = a[(state, state)].abs();
    if exit * dt > 1.0 + 1e-12 {
        return Err(ChainError::StepConstraint {
            product: exit * dt,
            time: 0.0,
            min_steps: 0,
        });
    }
    Ok(represent_martingale(values, &Transition::new(a, state, dt)))
}

/// Simulated chain paths on a uniform grid.
#[derive(Debug, Clone)]
pub struct PathBundle {
    table: Arc<TransitionTable>,
    root_state: usize,
    count: usize,
    seed: u64,
    states: Vec<u32>,
}

impl PathBundle {
    pub fn count(&self) -> usize {
        self.count
    }

    pub fn steps(&self) -> usize {
        self.table.steps
    }

    pub fn dt(&self) -> f64 {
        self.table.dt
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn root_state(&self) -> usize {
        self.root_state
    }

    pub fn table(&self) -> &TransitionTable {
        &self.table
    }

    /// Seed lineage of a path: `(bundle seed, stream index)`.
    pub fn lineage(&self, path: usize) -> (u64, u64) {
        (self.seed, path as u64)
    }

    /// States at grid times `t_0..t_N`.
    pub fn path(&self, path: usize) -> &[u32] {
        let w = self.steps() + 1;
        &self.states[path * w..(path + 1) * w]
    }

    /// `ΔM` over step `k` (from `t_k` to `t_{k+1}`) of a path.
    pub fn increment(&self, path: usize, step: usize) -> &DVector<f64> {
        let p = self.path(path);
        let tr = self.table.transition(step, p[step] as usize);
        &tr.increments[p[step + 1] as usize]
    }

    /// Optional quadratic variation `Σ_k ΔM_k ΔM_k*` at the horizon.
    pub fn optional_qv(&self, path: usize) -> DMatrix<f64> {
        optional_qv_of(&self.table, self.path(path))
    }

    /// Predictable quadratic variation `Σ_k Q(state_k, t_k) dt`.
    pub fn predictable_qv(&self, path: usize) -> DMatrix<f64> {
        predictable_qv_of(&self.table, self.path(path))
    }
}

pub(crate) fn optional_qv_of(table: &TransitionTable, path: &[u32]) -> DMatrix<f64> {
    let mut acc = DMatrix::zeros(table.d, table.d);
    for k in 0..table.steps {
        let dm = &table.transition(k, path[k] as usize).increments[path[k + 1] as usize];
        acc.ger(1.0, dm, dm, 1.0);
    }
    acc
}

pub(crate) fn predictable_qv_of(table: &TransitionTable, path: &[u32]) -> DMatrix<f64> {
    let mut acc = DMatrix::zeros(table.d, table.d);
    for k in 0..table.steps {
        acc += table.qv_density(k, path[k] as usize) * table.dt;
    }
    acc
}

/// Deterministic RNG stream for one path.
pub(crate) fn path_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

pub(crate) fn sample_path(table: &TransitionTable, root: usize, rng: &mut impl Rng, out: &mut [u32]) {
    let mut s = root;
    out[0] = s as u32;
    for k in 0..table.steps {
        let probs = &table.transition(k, s).probs;
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut next = s;
        for (i, &p) in probs.iter().enumerate() {
            if p <= 0.0 {
                continue;
            }
            acc += p;
            next = i;
            if u < acc {
                break;
            }
        }
        s = next;
        out[k + 1] = s as u32;
    }
}

/// Simulates `count` i.i.d. paths under the discrete transition law. Path `i`
/// draws from its own stream derived from `(seed, i)`, so the result does not
/// depend on thread scheduling.
pub fn simulate_paths(
    model: &ChainModel,
    horizon: f64,
    steps: usize,
    root_state: usize,
    count: usize,
    seed: u64,
) -> Result<PathBundle, ChainError> {
    if count == 0 {
        return Err(ChainError::Argument("path count must be positive".into()));
    }
    model.check_state(root_state)?;
    let table = Arc::new(TransitionTable::build(model, horizon, steps, Some(root_state))?);
    let w = steps + 1;
    let mut states = vec![0u32; count * w];
    states
        .par_chunks_mut(w)
        .enumerate()
        .for_each(|(i, chunk)| {
            let mut rng = path_rng(seed, i as u64);
            sample_path(&table, root_state, &mut rng, chunk);
        });
    Ok(PathBundle {
        table,
        root_state,
        count,
        seed,
        states,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn a2() -> DMatrix<f64> {
        DMatrix::from_row_slice(2, 2, &[-1.0, 2.0, 1.0, -2.0])
    }

    #[test]
    fn validate_examples() {
        assert!(validate_generator(&[a2()]).unwrap().is_valid());
        let bad = DMatrix::from_row_slice(2, 2, &[-1.0, 2.0, 0.9, -2.0]);
        match validate_generator(&[bad]).unwrap() {
            GeneratorVerdict::Invalid(GeneratorViolation::ColumnSum { col, sum, .. }) => {
                assert_eq!(col, 0);
                assert!((sum + 0.1).abs() < 1e-12);
            }
            other => panic!("unexpected {other:?}"),
        }
        assert!(validate_generator(&[DMatrix::zeros(3, 3)]).unwrap().is_valid());
    }

    #[test]
    fn validate_structural_errors() {
        assert!(matches!(
            validate_generator(&[DMatrix::zeros(2, 2), DMatrix::zeros(3, 3)]),
            Err(ChainError::Dimension(_))
        ));
        assert!(matches!(
            validate_generator(&[DMatrix::zeros(1, 1)]),
            Err(ChainError::Dimension(_))
        ));
        let mut a = a2();
        a[(0, 1)] = f64::NAN;
        assert!(matches!(
            validate_generator(&[a]),
            Err(ChainError::NonFinite { row: 0, col: 1, .. })
        ));
        let neg = DMatrix::from_row_slice(2, 2, &[0.5, 0.0, -0.5, 0.0]);
        assert!(matches!(
            validate_generator(&[neg]).unwrap(),
            GeneratorVerdict::Invalid(GeneratorViolation::NegativeRate { row: 1, col: 0, .. })
        ));
    }

    #[test]
    fn tiny_negative_rate_is_clamped() {
        let mut c = DMatrix::zeros(2, 2);
        c[(1, 0)] = -1e-13;
        c[(0, 0)] = 1e-13;
        let model = ChainModel::constant(c).unwrap();
        let r = model.rate_matrix(0.0).unwrap();
        assert_eq!(r[(1, 0)], 0.0);
        assert_eq!(r[(0, 0)], 0.0);
    }

    #[test]
    fn boundary_step_is_accepted_with_warning() {
        let a = DMatrix::from_row_slice(2, 2, &[-1.0, 1.0, 1.0, -1.0]);
        let model = ChainModel::constant(a).unwrap();
        let tree = DiscreteChainTree::build(&model, 1.0, 1, 0).unwrap();
        let tr = tree.transition_at(0);
        assert_eq!(tr.probs.as_slice(), &[0.0, 1.0]);
        assert!(!tree.warnings().is_empty());
    }

    #[test]
    fn transition_probabilities_and_increments() {
        let model = ChainModel::constant(a2()).unwrap();
        let tree = DiscreteChainTree::build(&model, 1.0, 10, 0).unwrap();
        let tr = tree.transition_at(0);
        assert!((tr.probs[0] - 0.9).abs() < 1e-15);
        assert!((tr.probs[1] - 0.1).abs() < 1e-15);
        assert!((tr.increments[0][0] - 0.1).abs() < 1e-15);
        assert!((tr.increments[0][1] + 0.1).abs() < 1e-15);
        assert!((tr.increments[1][0] + 0.9).abs() < 1e-15);
        assert!((tr.increments[1][1] - 0.9).abs() < 1e-15);
    }

    #[test]
    fn step_constraint_suggests_minimal_steps() {
        let a = DMatrix::from_row_slice(2, 2, &[-3.0, 1.0, 3.0, -1.0]);
        let model = ChainModel::constant(a).unwrap();
        match DiscreteChainTree::build(&model, 1.0, 2, 0) {
            Err(ChainError::StepConstraint { min_steps, .. }) => assert_eq!(min_steps, 3),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn node_budget_is_enforced() {
        let model = ChainModel::constant(DMatrix::zeros(3, 3)).unwrap();
        let err = DiscreteChainTree::build(&model, 1.0, 20, 0).unwrap_err();
        assert!(matches!(err, ChainError::NodeBudget { .. }));
    }

    #[test]
    fn tree_indexing_round_trips() {
        let model = ChainModel::constant(a2()).unwrap();
        let tree = DiscreteChainTree::build(&model, 1.0, 4, 1).unwrap();
        assert_eq!(tree.node_count(), 31);
        for v in tree.internal_nodes() {
            for (i, c) in tree.children(v).enumerate() {
                assert_eq!(tree.parent(c), Some(v));
                assert_eq!(tree.state_of(c), i);
                assert_eq!(tree.level_of(c), tree.level_of(v) + 1);
            }
        }
        let leaf_mass: f64 = tree.leaves().map(|v| tree.probability(v)).sum();
        assert!((leaf_mass - 1.0).abs() < 1e-14);
        assert_eq!(tree.path_states(0), vec![1]);
    }

    #[test]
    fn frozen_chain_has_no_noise() {
        let model = ChainModel::frozen(2).unwrap();
        let tree = DiscreteChainTree::build(&model, 1.0, 3, 0).unwrap();
        for v in tree.internal_nodes() {
            let tr = tree.transition_at(v);
            for dm in &tr.increments {
                let s = tree.state_of(v);
                // only the stay edge carries mass; its increment is zero
                if dm[s] == 0.0 {
                    assert_eq!(dm.norm(), 0.0);
                }
            }
            assert_eq!(tr.increments[tree.state_of(v)].norm(), 0.0);
        }
        let bundle = simulate_paths(&model, 1.0, 5, 1, 10, 1).unwrap();
        for i in 0..10 {
            assert!(bundle.path(i).iter().all(|&s| s == 1));
            assert_eq!(bundle.optional_qv(i).norm(), 0.0);
            assert_eq!(bundle.predictable_qv(i).norm(), 0.0);
        }
    }

    #[test]
    fn qv_density_examples() {
        let model = ChainModel::constant(a2()).unwrap();
        let q1 = model.qv_density(0, 0.0).unwrap();
        assert_eq!(q1, DMatrix::from_row_slice(2, 2, &[1.0, -1.0, -1.0, 1.0]));
        let q2 = model.qv_density(1, 0.0).unwrap();
        assert_eq!(q2, DMatrix::from_row_slice(2, 2, &[2.0, -2.0, -2.0, 2.0]));
        let zero = ChainModel::frozen(4).unwrap();
        assert_eq!(zero.qv_density(2, 0.3).unwrap().norm(), 0.0);
    }

    #[test]
    fn optional_qv_of_single_jump() {
        let model = ChainModel::constant(a2()).unwrap();
        let table = TransitionTable::build(&model, 0.1, 1, None).unwrap();
        let qv = optional_qv_of(&table, &[0, 1]);
        let expect = DMatrix::from_row_slice(2, 2, &[0.81, -0.81, -0.81, 0.81]);
        assert!((qv - expect).norm() < 1e-14);
    }

    #[test]
    fn representation_example() {
        let v = [DVector::from_element(1, 2.0), DVector::from_element(1, 5.0)];
        let r = represent_martingale_at(&v, 0, &a2(), 0.1).unwrap();
        assert!((r.mean[0] - 2.3).abs() < 1e-14);
        assert!((r.z[(0, 0)] + 0.3).abs() < 1e-14);
        assert!((r.z[(0, 1)] - 2.7).abs() < 1e-14);
        let tr = Transition::new(&a2(), 0, 0.1);
        for (i, vi) in v.iter().enumerate() {
            let lhs = vi - &r.mean;
            let rhs = &r.z * &tr.increments[i];
            assert!((lhs - rhs).norm() < 1e-14);
        }
    }

    #[test]
    fn constant_values_have_zero_integrand() {
        let v = vec![DVector::from_vec(vec![1.5, -2.0]); 3];
        let a = DMatrix::from_row_slice(3, 3, &[-1.0, 0.5, 0.2, 0.4, -0.5, 0.3, 0.6, 0.0, -0.5]);
        let r = represent_martingale_at(&v, 2, &a, 0.1).unwrap();
        assert!((r.mean - &v[0]).norm() < 1e-15);
        assert!(r.z.norm() < 1e-15);
    }

    #[test]
    fn simulation_is_deterministic() {
        let model = ChainModel::constant(a2()).unwrap();
        let a = simulate_paths(&model, 1.0, 20, 0, 200, 42).unwrap();
        let b = simulate_paths(&model, 1.0, 20, 0, 200, 42).unwrap();
        assert_eq!(a.states, b.states);
        assert!(simulate_paths(&model, 1.0, 20, 0, 0, 42).is_err());
    }
}
