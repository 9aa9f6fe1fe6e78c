//! Fully coupled forward-backward SDEs driven by the compensated martingale
//! of a finite-state Markov chain, solved exactly on the tree of chain paths.

pub mod algebra;
pub mod chain;

pub use algebra::{
    bracket, eval_f_functional, eval_h_functional, to_chain_driven, weighted_bracket, AlgebraError,
    CoeffError, CoefficientSet, GCase, GStructure, TripleVector,
};
pub use chain::{
    qv_density_of, represent_martingale, represent_martingale_at, simulate_paths, tree_node_count,
    validate_generator, ChainError, ChainModel, DiscreteChainTree, GeneratorVerdict, PathBundle,
    Representation, Transition, TransitionTable,
};

pub mod field;
pub mod riccati;

pub use field::{Forcing, NodeForcing, SolutionField};
pub use riccati::{riccati_residual, solve_riccati, RiccatiError, RiccatiProblem, RiccatiSolution};

use serde::{Deserialize, Serialize};

/// Sign convention of the coupling: the monotone family (`Thm2`) or its
/// sign-flipped mirror (`Thm3`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Mode {
    Thm2,
    Thm3,
}

impl Mode {
    /// `+1` for `Thm2`, `−1` for `Thm3`.
    pub fn sign(self) -> f64 {
        match self {
            Mode::Thm2 => 1.0,
            Mode::Thm3 => -1.0,
        }
    }
}

pub mod affine;
pub mod linear_fbsde;

pub use linear_fbsde::{
    linear_residual, solve_linear, AffineSolution, DecoupledPart, LinearError, LinearFBSDEProblem,
    LinearResidual,
};

pub mod solver;

pub use solver::{
    contraction_norm, decoupled_sweep, picard_sweep, solution_residual, solve_continuation, solve_level, Anchor,
    ContinuationConfig, ConvergenceReport, FBSDEProblem, LevelStats, Noise, NormWeight, SolverError,
    SweepKind,
};

pub mod oracle;

pub use oracle::{brute_force_solve, global_residual, GlobalResidual, OracleError, OracleOptions, OracleReport};

pub mod verify;

pub use verify::{
    check_duality, check_form_equivalence, check_lipschitz, check_monotonicity, check_qv_consistency,
    reevaluate_witness, DualityReport, Flavor, FormReport, Inequality, LipschitzReport, MonotonicityReport, QvReport,
    SampleBox, Verdict, VerifyError, Witness,
};

pub mod exprdsl;

pub use exprdsl::{parse, EvalContext, EvalError, ExprCoefficients, Expression, ParseError, Scope};

pub mod builtins;

pub use builtins::{builtin, BuiltinError, BuiltinParams, BuiltinProblem, BUILTIN_NAMES};
