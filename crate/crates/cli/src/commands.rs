use std::path::Path;

use mcfbsde::{
    brute_force_solve, check_lipschitz, check_monotonicity, check_qv_consistency, contraction_norm, global_residual,
    simulate_paths, solve_continuation, solve_linear, ConvergenceReport, Flavor, GlobalResidual, LinearFBSDEProblem,
    LinearResidual, LipschitzReport, MonotonicityReport, NormWeight, OracleReport, QvReport,
};
use serde::Serialize;

use crate::config::{setup, RunConfig, SCHEMA_VERSION};
use crate::error::CliError;
use crate::output::{num, solution_csv, write_atomic, write_json};

#[derive(Serialize)]
struct SimulateReport {
    schema_version: u32,
    command: &'static str,
    paths: usize,
    seed: u64,
    steps: usize,
    dt: f64,
    /// Mean of `Σ Q(state_k) dt` over the paths, row-major.
    mean_predictable_qv: Vec<Vec<f64>>,
    qv: QvReport,
}

pub fn simulate(cfg: &RunConfig, paths: usize, seed: u64, out: &Path) -> Result<(), CliError> {
    let model = cfg.chain.model()?;
    let c = &cfg.chain;
    let bundle = simulate_paths(&model, c.horizon, c.steps, c.root_state, paths, seed)
        .map_err(|e| CliError::Config(format!("chain: {e}")))?;
    let d = c.d;
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header: Vec<String> = ["path_id", "step", "time", "state"].map(String::from).to_vec();
    header.extend((1..=d).map(|i| format!("dM_{i}")));
    w.write_record(&header)?;
    let mut predictable = nalgebra::DMatrix::zeros(d, d);
    for p in 0..bundle.count() {
        let states = bundle.path(p);
        for (k, &s) in states.iter().enumerate() {
            let mut row = vec![
                p.to_string(),
                k.to_string(),
                num(bundle.table().time(k)),
                s.to_string(),
            ];
            if k == 0 {
                row.extend((0..d).map(|_| num(0.0)));
            } else {
                row.extend(bundle.increment(p, k - 1).iter().map(|&v| num(v)));
            }
            w.write_record(&row)?;
        }
        predictable += bundle.predictable_qv(p);
    }
    predictable /= bundle.count() as f64;
    let bytes = w.into_inner().map_err(|e| CliError::Internal(e.to_string()))?;
    let qv = check_qv_consistency(&model, c.horizon, c.steps, c.root_state, paths, seed)?;
    write_atomic(out, "paths.csv", &bytes)?;
    write_json(
        out,
        "qv.json",
        &SimulateReport {
            schema_version: SCHEMA_VERSION,
            command: "simulate",
            paths,
            seed,
            steps: c.steps,
            dt: bundle.dt(),
            mean_predictable_qv: predictable.row_iter().map(|r| r.iter().copied().collect()).collect(),
            qv,
        },
    )
}

#[derive(Serialize)]
struct SolveReport<'a> {
    schema_version: u32,
    command: &'static str,
    converged: bool,
    error: Option<String>,
    x0: Vec<f64>,
    y0: Option<Vec<f64>>,
    report: Option<&'a ConvergenceReport>,
    /// Defects recomputed by the oracle's independent residual code.
    global_residual: Option<GlobalResidual>,
}

pub fn solve(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    let s = setup(cfg)?;
    match solve_continuation(&s.problem, &cfg.solver, None) {
        Ok((field, report)) => {
            let global = global_residual(&field, &s.problem, 1.0)?;
            write_atomic(out, "solution.csv", &solution_csv(&s.tree, &field)?)?;
            write_json(
                out,
                "report.json",
                &SolveReport {
                    schema_version: SCHEMA_VERSION,
                    command: "solve",
                    converged: report.converged,
                    error: None,
                    x0: s.problem.x0.as_slice().to_vec(),
                    y0: Some(field.y[0].as_slice().to_vec()),
                    report: Some(&report),
                    global_residual: Some(global),
                },
            )
        }
        Err(e) => {
            let err: CliError = e.clone().into();
            if let CliError::Solver(msg) = &err {
                write_json(
                    out,
                    "report.json",
                    &SolveReport {
                        schema_version: SCHEMA_VERSION,
                        command: "solve",
                        converged: false,
                        error: Some(msg.clone()),
                        x0: s.problem.x0.as_slice().to_vec(),
                        y0: None,
                        report: None,
                        global_residual: None,
                    },
                )?;
            }
            Err(err)
        }
    }
}

#[derive(Serialize)]
struct LinearReport {
    schema_version: u32,
    command: &'static str,
    case: mcfbsde::GCase,
    lambda: f64,
    y0: Vec<f64>,
    /// Riccati solution at `t = 0`, row-major.
    riccati_k0: Vec<Vec<f64>>,
    riccati_min_eigenvalue: f64,
    residual: LinearResidual,
}

pub fn solve_linear_cmd(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    let s = setup(cfg)?;
    let p = &s.problem;
    let lin = LinearFBSDEProblem::with_node_forcing(
        p.mode,
        p.c2,
        p.c2_prime,
        s.lambda,
        p.g.clone(),
        p.x0.clone(),
        p.forcing.clone(),
        s.tree.clone(),
    )?;
    let sol = solve_linear(&lin)?;
    write_atomic(out, "solution.csv", &solution_csv(&s.tree, &sol.field)?)?;
    let k0 = &sol.riccati.values[0];
    write_json(
        out,
        "report.json",
        &LinearReport {
            schema_version: SCHEMA_VERSION,
            command: "solve-linear",
            case: sol.case,
            lambda: s.lambda,
            y0: sol.field.y[0].as_slice().to_vec(),
            riccati_k0: k0.row_iter().map(|r| r.iter().copied().collect()).collect(),
            riccati_min_eigenvalue: sol.riccati.min_eigenvalue,
            residual: sol.residual,
        },
    )
}

#[derive(Serialize)]
struct CheckReport {
    schema_version: u32,
    command: &'static str,
    monotonicity: MonotonicityReport,
    lipschitz: LipschitzReport,
}

pub fn check(cfg: &RunConfig, samples: usize, flavor: Flavor, seed: u64, out: &Path) -> Result<(), CliError> {
    let s = setup(cfg)?;
    let p = &s.problem;
    let bx = &cfg.check.sample_box;
    let monotonicity = check_monotonicity(&p.coeffs, &p.g, &s.model, p.mode, flavor, samples, seed, bx)?;
    let lipschitz = check_lipschitz(&p.coeffs, &p.g, &s.model, samples, seed, bx)?;
    write_json(
        out,
        "check.json",
        &CheckReport {
            schema_version: SCHEMA_VERSION,
            command: "check",
            monotonicity,
            lipschitz,
        },
    )
}

pub const AGREEMENT_TOL: f64 = 1e-8;

#[derive(Serialize)]
struct OracleAgreement {
    schema_version: u32,
    command: &'static str,
    /// Largest entrywise difference over all nodes.
    sup_difference: f64,
    /// Square root of the contraction norm of the difference.
    norm_difference: f64,
    tolerance: f64,
    agree: bool,
    solver_residual: LinearResidual,
    oracle_residual: GlobalResidual,
    oracle: OracleReport,
}

pub fn oracle(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    let s = setup(cfg)?;
    let (field, report) = solve_continuation(&s.problem, &cfg.solver, None)?;
    let (reference, oracle) = brute_force_solve(&s.problem, 1.0, None, &cfg.oracle)?;
    let diff = field.difference(&reference);
    let sup = diff.sup_norm();
    write_json(
        out,
        "oracle.json",
        &OracleAgreement {
            schema_version: SCHEMA_VERSION,
            command: "oracle",
            sup_difference: sup,
            norm_difference: contraction_norm(&diff, &s.tree, NormWeight::Trace).sqrt(),
            tolerance: AGREEMENT_TOL,
            agree: sup <= AGREEMENT_TOL,
            solver_residual: report.final_residual,
            oracle_residual: global_residual(&reference, &s.problem, 1.0)?,
            oracle,
        },
    )
}
