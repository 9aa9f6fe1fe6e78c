use std::path::Path;
use std::sync::Arc;

use mcfbsde::chain::DEFAULT_NODE_BUDGET;
use mcfbsde::exprdsl::{ExprCoefficients, Scope};
use mcfbsde::{
    builtin, parse, validate_generator, BuiltinParams, ChainModel, ContinuationConfig, DiscreteChainTree, EvalContext,
    FBSDEProblem, Forcing, GStructure, Mode, OracleOptions, SampleBox,
};
use nalgebra::{DMatrix, DVector};
use serde::Deserialize;

use crate::error::CliError;

pub const SCHEMA_VERSION: u32 = 1;
pub const BUDGET_ENV: &str = "MCFBSDE_NODE_BUDGET";

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "schema_version")]
    pub version: u32,
    #[serde(default)]
    pub seed: u64,
    pub chain: ChainConfig,
    pub problem: ProblemConfig,
    #[serde(default)]
    pub solver: ContinuationConfig,
    #[serde(default)]
    pub oracle: OracleOptions,
    #[serde(default)]
    pub check: CheckConfig,
    #[serde(default)]
    pub simulate: SimulateConfig,
}

fn schema_version() -> u32 {
    SCHEMA_VERSION
}

/// `generator[i][j]` is the jump rate from state `j` into state `i`; columns
/// sum to zero.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChainConfig {
    pub d: usize,
    pub generator: Vec<Vec<f64>>,
    pub horizon: f64,
    pub steps: usize,
    #[serde(default)]
    pub root_state: usize,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemConfig {
    pub builtin: Option<String>,
    pub params: Option<BuiltinParams>,
    pub n: Option<usize>,
    pub m: Option<usize>,
    /// `m × n`, row-major.
    pub g: Option<Vec<Vec<f64>>>,
    pub x0: Option<Vec<f64>>,
    pub mode: Option<Mode>,
    pub c2: Option<f64>,
    pub c2_prime: Option<f64>,
    pub coefficients: Option<ExprCoefficients>,
    #[serde(default)]
    pub forcing: ForcingConfig,
    /// Terminal weight of the linear problem run by `solve-linear`.
    #[serde(default = "one")]
    pub lambda: f64,
}

fn one() -> f64 {
    1.0
}

/// Forcing terms as expressions in `t` and `s` only. Empty lists mean zero.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ForcingConfig {
    pub phi: Vec<String>,
    pub psi: Vec<Vec<String>>,
    pub gamma: Vec<String>,
    pub xi: Vec<String>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CheckConfig {
    pub samples: usize,
    #[serde(rename = "box")]
    pub sample_box: SampleBox,
}

impl Default for CheckConfig {
    fn default() -> Self {
        Self {
            samples: 10_000,
            sample_box: SampleBox::default(),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateConfig {
    pub paths: usize,
}

impl Default for SimulateConfig {
    fn default() -> Self {
        Self { paths: 1_000 }
    }
}

pub fn load(path: &Path) -> Result<RunConfig, CliError> {
    let bytes = std::fs::read(path).map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
    let de = &mut serde_json::Deserializer::from_slice(&bytes);
    let cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
        let at = e.path().to_string();
        CliError::Config(format!("{}: {}", if at == "." { "<root>".into() } else { at }, e.inner()))
    })?;
    if cfg.version != SCHEMA_VERSION {
        return Err(CliError::Config(format!(
            "version: unsupported schema version {} (expected {SCHEMA_VERSION})",
            cfg.version
        )));
    }
    Ok(cfg)
}

fn matrix(field: &str, rows: &[Vec<f64>], r: usize, c: usize) -> Result<DMatrix<f64>, CliError> {
    if rows.len() != r || rows.iter().any(|row| row.len() != c) {
        return Err(CliError::Config(format!("{field}: expected a {r}x{c} row-major matrix")));
    }
    Ok(DMatrix::from_fn(r, c, |i, j| rows[i][j]))
}

impl ChainConfig {
    pub fn model(&self) -> Result<ChainModel, CliError> {
        let a = matrix("chain.generator", &self.generator, self.d, self.d)?;
        validate_generator(std::slice::from_ref(&a)).map_err(|e| CliError::Config(format!("chain.generator: {e}")))?;
        let model = ChainModel::constant(a).map_err(|e| CliError::Config(format!("chain.generator: {e}")))?;
        if self.root_state >= self.d {
            return Err(CliError::Config(format!(
                "chain.root_state: {} out of range for d = {}",
                self.root_state, self.d
            )));
        }
        if !(self.horizon > 0.0 && self.horizon.is_finite()) {
            return Err(CliError::Config(format!("chain.horizon: must be positive, got {}", self.horizon)));
        }
        if self.steps == 0 {
            return Err(CliError::Config("chain.steps: must be positive".into()));
        }
        Ok(model)
    }
}

pub fn node_budget() -> Result<usize, CliError> {
    match std::env::var(BUDGET_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map_err(|_| CliError::Config(format!("{BUDGET_ENV}: not a node count: `{v}`"))),
        Err(_) => Ok(DEFAULT_NODE_BUDGET),
    }
}

/// Everything a command needs, built and validated from the config.
pub struct Setup {
    pub model: ChainModel,
    pub tree: Arc<DiscreteChainTree>,
    pub problem: FBSDEProblem,
    pub lambda: f64,
}

pub fn setup(cfg: &RunConfig) -> Result<Setup, CliError> {
    let model = cfg.chain.model()?;
    let c = &cfg.chain;
    let tree = DiscreteChainTree::build_with_budget(&model, c.horizon, c.steps, c.root_state, node_budget()?)
        .map_err(|e| CliError::Config(format!("chain: {e}")))?;
    let tree = Arc::new(tree);
    let p = &cfg.problem;
    let d = c.d;
    let (coeffs, g, x0, mode, c2, c2_prime) = match &p.builtin {
        Some(name) => {
            let fixed = [
                ("n", p.n.is_some()),
                ("m", p.m.is_some()),
                ("g", p.g.is_some()),
                ("x0", p.x0.is_some()),
                ("mode", p.mode.is_some()),
                ("c2", p.c2.is_some()),
                ("c2_prime", p.c2_prime.is_some()),
                ("coefficients", p.coefficients.is_some()),
            ];
            if let Some((field, _)) = fixed.iter().find(|(_, set)| *set) {
                return Err(CliError::Config(format!(
                    "problem.{field}: not allowed with a builtin (use problem.params)"
                )));
            }
            let b = builtin(name, d, &p.params.clone().unwrap_or_default())
                .map_err(|e| CliError::Config(format!("problem.builtin: {e}")))?;
            (b.coeffs, b.g, b.x0, b.mode, b.c2, b.c2_prime)
        }
        None => {
            let need = |field: &str| CliError::Config(format!("problem.{field}: required without a builtin"));
            let n = p.n.ok_or_else(|| need("n"))?;
            let m = p.m.ok_or_else(|| need("m"))?;
            let g = matrix("problem.g", p.g.as_ref().ok_or_else(|| need("g"))?, m, n)?;
            let g = GStructure::new(g).map_err(|e| CliError::Config(format!("problem.g: {e}")))?;
            let x0 = p.x0.clone().ok_or_else(|| need("x0"))?;
            if x0.len() != n {
                return Err(CliError::Config(format!("problem.x0: expected {n} entries, got {}", x0.len())));
            }
            let coeffs = p
                .coefficients
                .as_ref()
                .ok_or_else(|| need("coefficients"))?
                .compile(n, m, d)
                .map_err(|e| CliError::Config(format!("problem.coefficients.{e}")))?;
            (
                coeffs,
                g,
                DVector::from_vec(x0),
                p.mode.ok_or_else(|| need("mode"))?,
                p.c2.ok_or_else(|| need("c2"))?,
                p.c2_prime.ok_or_else(|| need("c2_prime"))?,
            )
        }
    };
    let forcing = forcing(&p.forcing, g.n(), g.m(), d)?;
    let problem = FBSDEProblem::new(coeffs, g, x0, mode, c2, c2_prime, tree.clone(), &forcing)
        .map_err(|e| CliError::Config(format!("problem: {e}")))?;
    Ok(Setup {
        model,
        tree,
        problem,
        lambda: p.lambda,
    })
}

fn exprs(field: &str, list: &[String], len: usize, scope: Scope) -> Result<Option<Vec<mcfbsde::Expression>>, CliError> {
    if list.is_empty() {
        return Ok(None);
    }
    if list.len() != len {
        return Err(CliError::Config(format!("{field}: expected {len} entries, got {}", list.len())));
    }
    list.iter()
        .enumerate()
        .map(|(i, src)| parse(src, scope).map_err(|e| CliError::Config(format!("{field}[{}]: {e}", i + 1))))
        .collect::<Result<Vec<_>, _>>()
        .map(Some)
}

/// Forcing expressions are evaluated eagerly on the tree, so evaluation
/// errors surface at load time.
fn forcing(fc: &ForcingConfig, n: usize, m: usize, d: usize) -> Result<Forcing, CliError> {
    let scope = Scope { n: 0, m: 0, d, time: true };
    let mut out = Forcing::zero();
    let eval = move |list: &[mcfbsde::Expression], t: f64, s: usize| -> DVector<f64> {
        let (empty, empty_z) = (DVector::zeros(0), DMatrix::zeros(0, d));
        let ctx = EvalContext { t, state: s, x: &empty, y: &empty, z: &empty_z };
        DVector::from_iterator(list.len(), list.iter().map(|e| e.evaluate(&ctx).unwrap_or(f64::NAN)))
    };
    if let Some(list) = exprs("problem.forcing.phi", &fc.phi, n, scope)? {
        out = out.with_phi(move |t, s| eval(&list, t, s));
    }
    if let Some(list) = exprs("problem.forcing.gamma", &fc.gamma, m, scope)? {
        out = out.with_gamma(move |t, s| eval(&list, t, s));
    }
    if let Some(list) = exprs("problem.forcing.xi", &fc.xi, m, Scope { time: false, ..scope })? {
        out = out.with_xi(move |s| eval(&list, 0.0, s));
    }
    if !fc.psi.is_empty() {
        if fc.psi.len() != n {
            return Err(CliError::Config(format!(
                "problem.forcing.psi: expected {n} rows, got {}",
                fc.psi.len()
            )));
        }
        let mut rows = Vec::with_capacity(n);
        for (r, row) in fc.psi.iter().enumerate() {
            let field = format!("problem.forcing.psi[{}]", r + 1);
            rows.push(exprs(&field, row, d, scope)?.unwrap_or_default());
            if row.len() != d {
                return Err(CliError::Config(format!("{field}: expected {d} entries, got {}", row.len())));
            }
        }
        out = out.with_psi(move |t, s| {
            DMatrix::from_fn(n, d, |i, j| {
                let v = eval(&rows[i][j..=j], t, s);
                v[0]
            })
        });
    }
    Ok(out)
}
