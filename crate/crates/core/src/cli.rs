//! Run orchestration for the `dphase` binary: `solve`, `verify` and `norms`
//! commands, deterministic output artifacts, and the exit-code contract
//! (0 success, 1 usage/config error, 2 unconverged solve, 3 failed verify).

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use crate::config::{ConfigError, Pipeline, RunConfig};
use crate::mesh_fem::{Field, Mesh};
use crate::modular;
use crate::report::{fmt_f64, Report};
use crate::solvers::{self, InitialGuess, SolveResult};
use crate::verify;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Solve,
    Verify,
    Norms,
}

#[derive(Debug, Clone, Default)]
pub struct CliOptions {
    pub seed: Option<u64>,
    pub strict: bool,
    pub quiet: bool,
    pub out_dir: Option<PathBuf>,
}

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_UNCONVERGED: i32 = 2;
pub const EXIT_VERIFY_FAILED: i32 = 3;

/// Load the configuration and dispatch; all failures are mapped onto the
/// exit-code contract. Messages go to stderr, results to stdout.
pub fn run(command: Command, config_path: &Path, opts: &CliOptions) -> i32 {
    let mut config = match RunConfig::load(config_path) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("config error: {e}");
            return EXIT_USAGE;
        }
    };
    if let Some(seed) = opts.seed {
        config.seed = seed;
    }
    for w in &config.warnings {
        if !opts.quiet {
            eprintln!("warning: {w}");
        }
    }
    if opts.strict && !config.warnings.is_empty() {
        eprintln!("error: hypothesis warnings promoted to errors by --strict");
        return EXIT_USAGE;
    }
    let outcome = match command {
        Command::Solve => run_solve(&config, opts),
        Command::Verify => run_verify(&config, opts),
        Command::Norms => run_norms(&config, opts),
    };
    match outcome {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_USAGE
        }
    }
}

fn out_path(opts: &CliOptions, configured: &Option<PathBuf>, default: &str) -> PathBuf {
    let rel = configured.clone().unwrap_or_else(|| PathBuf::from(default));
    match &opts.out_dir {
        Some(dir) => dir.join(rel),
        None => rel,
    }
}

fn run_solve(config: &RunConfig, opts: &CliOptions) -> Result<i32, String> {
    let spec = config.to_problem_spec();
    let mut solve_cfg = config.solve.clone();
    if let Some(path) = &config.initial_file {
        let field = read_solution(&config.mesh, path).map_err(|e| e.to_string())?;
        solve_cfg.initial_guess = InitialGuess::Field(field);
    }

    let (result, second) = match config.pipeline {
        Pipeline::Variational => (
            solvers::solve_variational(&spec, config.sign, &solve_cfg).map_err(|e| e.to_string())?,
            None,
        ),
        Pipeline::Newton => (
            solvers::solve_pseudomonotone(&spec, &solve_cfg).map_err(|e| e.to_string())?,
            None,
        ),
        Pipeline::Coupled => (
            solvers::solve_solution_coupled(&spec, &solve_cfg).map_err(|e| e.to_string())?,
            None,
        ),
        Pipeline::Multiplicity => {
            let (plus, minus) =
                solvers::solve_multiplicity(&spec, &solve_cfg).map_err(|e| e.to_string())?;
            (plus, Some(minus))
        }
    };

    let final_residual = solvers::certify_residual(&result, &spec).map_err(|e| e.to_string())?;

    let sol_path = out_path(opts, &config.out_solution, "solution.csv");
    write_solution(&sol_path, &config.mesh, &result.solution).map_err(|e| e.to_string())?;
    if let Some(minus) = &second {
        let minus_path = sol_path.with_extension("minus.csv");
        write_solution(&minus_path, &config.mesh, &minus.solution).map_err(|e| e.to_string())?;
    }

    let report_path = out_path(opts, &config.out_report, "run_report.jsonl");
    let mut lines = solve_report_lines(&result, final_residual, config.solve.residual_tol);
    if let Some(minus) = &second {
        lines.push(String::from("{\"run\": \"minus\"}"));
        let minus_res =
            solvers::certify_residual(minus, &spec).map_err(|e| e.to_string())?;
        lines.extend(solve_report_lines(minus, minus_res, config.solve.residual_tol));
    }
    write_lines(&report_path, &lines).map_err(|e| e.to_string())?;

    if !opts.quiet {
        println!(
            "solve: converged = {}, final residual = {}, solution -> {}, report -> {}",
            result.converged,
            fmt_f64(final_residual),
            sol_path.display(),
            report_path.display()
        );
    }
    let all_converged = result.converged && second.as_ref().map_or(true, |m| m.converged);
    Ok(if all_converged { EXIT_OK } else { EXIT_UNCONVERGED })
}

fn run_verify(config: &RunConfig, opts: &CliOptions) -> Result<i32, String> {
    let mut reports = Vec::new();
    for &suite in &config.suites {
        let batch = verify::run_suite(
            &config.model,
            config.mode,
            &config.mesh,
            suite,
            config.seed,
            config.n_samples,
        )
        .map_err(|e| e.to_string())?;
        if !opts.quiet {
            for r in &batch {
                println!("{}", r.to_line());
            }
        }
        reports.extend(batch);
    }
    let report_path = out_path(opts, &config.out_report, "verify_report.jsonl");
    crate::report::write_reports(&report_path, &reports).map_err(|e| e.to_string())?;
    let all_passed = reports.iter().all(|r| r.passed);
    if !opts.quiet {
        println!(
            "verify: {}/{} checks passed, report -> {}",
            reports.iter().filter(|r| r.passed).count(),
            reports.len(),
            report_path.display()
        );
    }
    Ok(if all_passed { EXIT_OK } else { EXIT_VERIFY_FAILED })
}

fn run_norms(config: &RunConfig, opts: &CliOptions) -> Result<i32, String> {
    let Some(expr) = &config.field_expr else {
        return Err("norms needs 'field = \"...\"' in the [source] section".into());
    };
    let field = Field::interpolate(&config.mesh, expr).map_err(|e| e.to_string())?;
    let tol = 1e-10;
    let values = config.mesh.values_at_qp(&field);
    let grads = config.mesh.gradient_magnitude_at_qp(&field);
    let norm = modular::luxemburg_norm(&values, &config.model, config.mode, &config.mesh, tol)
        .map_err(|e| e.to_string())?;
    let rho = modular::modular(&values, &config.model, config.mode, &config.mesh, config.quad_tol)
        .map_err(|e| e.to_string())?;
    let grad_norm =
        modular::luxemburg_norm(&grads, &config.model, config.mode, &config.mesh, tol)
            .map_err(|e| e.to_string())?;
    let grad_rho =
        modular::modular(&grads, &config.model, config.mode, &config.mesh, config.quad_tol)
            .map_err(|e| e.to_string())?;

    let lines = vec![format!(
        "{{\"norm\": {}, \"modular\": {}, \"gradient_norm\": {}, \"gradient_modular\": {}}}",
        fmt_f64(norm.value),
        fmt_f64(rho.value),
        fmt_f64(grad_norm.value),
        fmt_f64(grad_rho.value)
    )];
    let report_path = out_path(opts, &config.out_report, "norms.jsonl");
    write_lines(&report_path, &lines).map_err(|e| e.to_string())?;
    if !opts.quiet {
        println!("norm = {}", fmt_f64(norm.value));
        println!("modular = {}", fmt_f64(rho.value));
        println!("gradient_norm = {}", fmt_f64(grad_norm.value));
        println!("gradient_modular = {}", fmt_f64(grad_rho.value));
    }
    Ok(EXIT_OK)
}

// ---------------------------------------------------------------------------
// artifacts
// ---------------------------------------------------------------------------

fn fmt_array(values: &[f64]) -> String {
    let mut s = String::from("[");
    for (i, v) in values.iter().enumerate() {
        if i > 0 {
            s.push_str(", ");
        }
        s.push_str(&fmt_f64(*v));
    }
    s.push(']');
    s
}

/// Report lines for one solve: a summary in the verify Report shape followed
/// by the solver histories as arrays.
fn solve_report_lines(result: &SolveResult, final_residual: f64, tol: f64) -> Vec<String> {
    let mut summary = Report::new("solve", tol, false);
    summary.record(tol - final_residual, || {
        format!("final residual {final_residual}")
    });
    summary.passed = result.converged;
    summary.passes = u64::from(result.converged);
    let mut lines = vec![summary.to_line()];
    lines.push(format!(
        "{{\"residual_history\": {}}}",
        fmt_array(&result.residual_history)
    ));
    if !result.energy_history.is_empty() {
        lines.push(format!(
            "{{\"energy_history\": {}}}",
            fmt_array(&result.energy_history)
        ));
    }
    if !result.outer_trace.is_empty() {
        let mut s = String::from("{\"epsilon_trace\": [");
        for (i, t) in result.outer_trace.iter().enumerate() {
            if i > 0 {
                s.push_str(", ");
            }
            write!(
                s,
                "{{\"epsilon\": {}, \"inner_iterations\": {}, \"inner_converged\": {}, \"op_modular\": {}, \"eps_p_modular\": {}, \"eps_q_modular\": {}, \"source_pairing\": {}}}",
                fmt_f64(t.epsilon),
                t.inner_iterations,
                t.inner_converged,
                fmt_f64(t.op_modular),
                fmt_f64(t.eps_p_modular),
                fmt_f64(t.eps_q_modular),
                fmt_f64(t.source_pairing)
            )
            .unwrap();
        }
        s.push_str("]}");
        lines.push(s);
    }
    if let Some(bc) = &result.bound_check {
        lines.push(format!(
            "{{\"bound_check\": {{\"min\": {}, \"max\": {}, \"lo\": {}, \"hi\": {}, \"violated\": {}}}}}",
            fmt_f64(bc.min),
            fmt_f64(bc.max),
            fmt_f64(bc.lo),
            fmt_f64(bc.hi),
            bc.violated
        ));
    }
    if !result.warnings.is_empty() {
        let quoted: Vec<String> = result
            .warnings
            .iter()
            .map(|w| format!("\"{}\"", w.replace('"', "'")))
            .collect();
        lines.push(format!("{{\"warnings\": [{}]}}", quoted.join(", ")));
    }
    lines
}

fn write_lines(path: &Path, lines: &[String]) -> std::io::Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for line in lines {
        out.write_all(line.as_bytes())?;
        out.write_all(b"\n")?;
    }
    out.flush()
}

/// 1D: CSV `x,u` with nodes ascending. 2D: `POINTS n` / `x y u` triples /
/// `TRIANGLES m` / index triples, ordered by node index. Shortest round-trip
/// decimals, LF endings.
pub fn write_solution(path: &Path, mesh: &Mesh, field: &Field) -> std::io::Result<()> {
    let mut lines = Vec::new();
    if mesh.dim() == 1 {
        lines.push("x,u".to_string());
        for (p, v) in mesh.nodes().iter().zip(&field.values) {
            lines.push(format!("{},{}", fmt_f64(p.x), fmt_f64(*v)));
        }
    } else {
        lines.push(format!("POINTS {}", mesh.n_nodes()));
        for (p, v) in mesh.nodes().iter().zip(&field.values) {
            lines.push(format!("{} {} {}", fmt_f64(p.x), fmt_f64(p.y), fmt_f64(*v)));
        }
        lines.push(format!("TRIANGLES {}", mesh.n_elements()));
        for tri in mesh.triangles() {
            lines.push(format!("{} {} {}", tri[0], tri[1], tri[2]));
        }
    }
    write_lines(path, &lines)
}

/// Re-ingest a solution file as a nodal field, validating the node layout.
pub fn read_solution(mesh: &Mesh, path: &Path) -> Result<Field, ConfigError> {
    let text = std::fs::read_to_string(path)?;
    let mut values = Vec::with_capacity(mesh.n_nodes());
    if mesh.dim() == 1 {
        let mut lines = text.lines();
        let header = lines.next().unwrap_or_default();
        if header.trim() != "x,u" {
            return Err(ConfigError::Invalid(format!(
                "expected 'x,u' header in {}",
                path.display()
            )));
        }
        for (i, line) in lines.enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let Some((xs, us)) = line.split_once(',') else {
                return Err(ConfigError::Invalid(format!("bad row '{line}'")));
            };
            let x: f64 = xs.trim().parse().map_err(|_| {
                ConfigError::Invalid(format!("bad x value '{xs}'"))
            })?;
            let u: f64 = us.trim().parse().map_err(|_| {
                ConfigError::Invalid(format!("bad u value '{us}'"))
            })?;
            if i >= mesh.n_nodes() || (mesh.nodes()[i].x - x).abs() > 1e-12 {
                return Err(ConfigError::Invalid(format!(
                    "node {i} mismatch: file has x = {x}"
                )));
            }
            values.push(u);
        }
    } else {
        let mut lines = text.lines();
        let header = lines.next().unwrap_or_default();
        let n: usize = header
            .strip_prefix("POINTS ")
            .and_then(|s| s.trim().parse().ok())
            .ok_or_else(|| ConfigError::Invalid("expected 'POINTS n' header".into()))?;
        if n != mesh.n_nodes() {
            return Err(ConfigError::Invalid(format!(
                "point count {n} does not match mesh ({})",
                mesh.n_nodes()
            )));
        }
        for i in 0..n {
            let line = lines
                .next()
                .ok_or_else(|| ConfigError::Invalid("truncated POINTS block".into()))?;
            let mut parts = line.split_whitespace();
            let x: f64 = parts
                .next()
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| ConfigError::Invalid(format!("bad row '{line}'")))?;
            let y: f64 = parts
                .next()
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| ConfigError::Invalid(format!("bad row '{line}'")))?;
            let u: f64 = parts
                .next()
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| ConfigError::Invalid(format!("bad row '{line}'")))?;
            let node = mesh.nodes()[i];
            if (node.x - x).abs() > 1e-12 || (node.y - y).abs() > 1e-12 {
                return Err(ConfigError::Invalid(format!("node {i} mismatch")));
            }
            values.push(u);
        }
    }
    if values.len() != mesh.n_nodes() {
        return Err(ConfigError::Invalid(format!(
            "file has {} values, mesh has {} nodes",
            values.len(),
            mesh.n_nodes()
        )));
    }
    Ok(Field { values })
}
