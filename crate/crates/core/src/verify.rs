//! Randomized property harness: every quantitative inequality of the theory
//! as a seeded, machine-checkable suite.
//!
//! Sampling follows the structure of the hypotheses: spatial points uniform
//! on the domain, magnitudes log-uniform on `[1e-6, 1e3]` so both the `t < 1`
//! and `t ≥ 1` regimes are exercised, fields as random nodal coefficients in
//! `[-1, 1]` projected to zero boundary values. Margins are absolute for
//! bounded quantities (the ratio) and relative — scaled by
//! `1 + max(|lhs|,|rhs|)` — for unbounded ones. Identical `(seed, config)`
//! yield bitwise-identical reports: one RNG stream per check, sequential
//! reduction.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::mesh_fem::{Field, Mesh};
use crate::modular::{self, ModularError};
use crate::nfunction::{Coupling, ExponentModel, NFunctionMode, NfError, Point};
use crate::operator::{
    self, OperatorError, ProblemSpec, SourceFn,
};
use crate::report::Report;
use crate::solvers::{
    self, SolveConfig, SolverError, TruncationSign,
};
use crate::expr::ExprAst;

#[derive(Debug, Clone, Error)]
pub enum VerifyError {
    #[error(transparent)]
    NFunction(#[from] NfError),
    #[error(transparent)]
    Modular(#[from] ModularError),
    #[error(transparent)]
    Operator(#[from] OperatorError),
    #[error(transparent)]
    Solver(#[from] SolverError),
    #[error("{0}")]
    InvalidArg(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Suite {
    Pointwise,
    Modular,
    Operator,
    SolverConsistency,
}

impl Suite {
    pub fn parse(name: &str) -> Option<Suite> {
        match name {
            "pointwise" => Some(Suite::Pointwise),
            "modular" => Some(Suite::Modular),
            "operator" => Some(Suite::Operator),
            "solver_consistency" => Some(Suite::SolverConsistency),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Suite::Pointwise => "pointwise",
            Suite::Modular => "modular",
            Suite::Operator => "operator",
            Suite::SolverConsistency => "solver_consistency",
        }
    }
}

const CONJ_TOL: f64 = 1e-10;
const QUAD_TOL: f64 = 1e-12;

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn sample_x(rng: &mut ChaCha8Rng, mesh: &Mesh) -> Point {
    let nodes = mesh.nodes();
    let (mut lo_x, mut hi_x) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut lo_y, mut hi_y) = (f64::INFINITY, f64::NEG_INFINITY);
    for p in nodes {
        lo_x = lo_x.min(p.x);
        hi_x = hi_x.max(p.x);
        lo_y = lo_y.min(p.y);
        hi_y = hi_y.max(p.y);
    }
    Point::new(
        rng.random_range(lo_x..hi_x),
        if mesh.dim() == 2 {
            rng.random_range(lo_y..hi_y)
        } else {
            0.0
        },
    )
}

fn sample_magnitude(rng: &mut ChaCha8Rng) -> f64 {
    10f64.powf(rng.random_range(-6.0..3.0))
}

fn random_field(rng: &mut ChaCha8Rng, mesh: &Mesh) -> Field {
    let mut f = Field::zeros(mesh);
    for v in f.values.iter_mut() {
        *v = rng.random_range(-1.0..1.0);
    }
    f.project_dirichlet(mesh);
    f
}

// ---------------------------------------------------------------------------
// pointwise margins (shared by the suite and standalone re-evaluation)
// ---------------------------------------------------------------------------

/// Names of the pointwise checks, in execution order.
pub const POINTWISE_CHECKS: [&str; 7] = [
    "ratio_bounds",
    "young",
    "conjugate_identity",
    "lm1_bound",
    "simon",
    "scaling",
    "h_monotonicity",
];

/// Margin of one pointwise sample; `inputs` layout depends on the check (see
/// the sampler below). Used both while running the suite and to re-evaluate a
/// report's recorded worst sample.
pub fn pointwise_margin(
    check: &str,
    model: &ExponentModel,
    mode: NFunctionMode,
    inputs: &[f64],
) -> Result<f64, VerifyError> {
    let x = Point::new(inputs[0], inputs[1]);
    let bounds = model.bounds();
    let m = match check {
        "ratio_bounds" => {
            let t = inputs[2];
            let r = model.ratio(mode, x, t)?;
            (r - bounds.p_minus).min(bounds.q_plus - r)
        }
        "young" => {
            let (tau, sigma) = (inputs[2], inputs[3]);
            let rhs =
                model.eval_big_h(mode, x, tau, QUAD_TOL)? + model.conjugate(mode, x, sigma, CONJ_TOL)?;
            (rhs - tau * sigma) / (1.0 + rhs.abs())
        }
        "conjugate_identity" => {
            let s = inputs[2];
            let h = model.density(mode, x, s)?;
            let big_h = model.eval_big_h(mode, x, s, QUAD_TOL)?;
            let lhs = model.conjugate(mode, x, h, CONJ_TOL)?;
            let rhs = h * s - big_h;
            1e-8 - (lhs - rhs).abs() / (1.0 + big_h.abs())
        }
        "lm1_bound" => {
            let s = inputs[2];
            let h = model.density(mode, x, s)?;
            let lhs = model.conjugate(mode, x, h, CONJ_TOL)?;
            let rhs = (bounds.q_plus - 1.0) * model.eval_big_h(mode, x, s, QUAD_TOL)?;
            (rhs - lhs) / (1.0 + rhs.abs())
        }
        "simon" => {
            let (tau, sigma) = (inputs[2], inputs[3]);
            // densities extended to odd functions of the signed argument
            let h_odd = |t: f64| -> Result<f64, NfError> {
                Ok(model.density(mode, x, t.abs())? * t.signum())
            };
            let lhs = (h_odd(tau)? - h_odd(sigma)?) * (tau - sigma);
            let rhs = 4.0 * model.eval_big_h(mode, x, 0.5 * (tau - sigma).abs(), QUAD_TOL)?;
            (lhs - rhs) / (1.0 + lhs.abs() + rhs.abs())
        }
        "scaling" => {
            let (lambda, t) = (inputs[2], inputs[3]);
            let base = model.eval_big_h(mode, x, t, QUAD_TOL)?;
            let scaled = model.eval_big_h(mode, x, lambda * t, QUAD_TOL)?;
            let lo = lambda.powf(bounds.p_minus).min(lambda.powf(bounds.q_plus)) * base;
            let hi = lambda.powf(bounds.p_minus).max(lambda.powf(bounds.q_plus)) * base;
            let lower = (scaled - lo) / (1.0 + scaled.abs() + lo.abs());
            let upper = (hi - scaled) / (1.0 + scaled.abs() + hi.abs());
            lower.min(upper)
        }
        "h_monotonicity" => {
            let (t1, t2) = (inputs[2], inputs[3]);
            let h1 = model.density(mode, x, t1)?;
            let h2 = model.density(mode, x, t2)?;
            (h2 - h1) / (1.0 + h1.abs() + h2.abs())
        }
        other => {
            return Err(VerifyError::InvalidArg(format!(
                "unknown pointwise check '{other}'"
            )))
        }
    };
    Ok(m)
}

fn pointwise_suite(
    model: &ExponentModel,
    mode: NFunctionMode,
    mesh: &Mesh,
    seed: u64,
    n_samples: u64,
) -> Result<Vec<Report>, VerifyError> {
    let mut out = Vec::new();
    for (stream, &check) in POINTWISE_CHECKS.iter().enumerate() {
        let mut rng = stream_rng(seed, stream as u64);
        let tolerance = match check {
            "ratio_bounds" | "young" | "lm1_bound" | "simon" | "scaling" => 1e-9,
            "conjugate_identity" => 0.0, // margin already folds the 1e-8 allowance
            _ => 1e-9,
        };
        let relative = check != "ratio_bounds";
        let mut report = Report::new(check, tolerance, relative);
        for _ in 0..n_samples {
            let x = sample_x(&mut rng, mesh);
            let inputs: Vec<f64> = match check {
                "ratio_bounds" | "conjugate_identity" | "lm1_bound" => {
                    vec![x.x, x.y, sample_magnitude(&mut rng)]
                }
                "young" => vec![
                    x.x,
                    x.y,
                    sample_magnitude(&mut rng),
                    sample_magnitude(&mut rng),
                ],
                "simon" => {
                    let sign = |r: &mut ChaCha8Rng| if r.random::<bool>() { 1.0 } else { -1.0 };
                    let s1 = sign(&mut rng);
                    let s2 = sign(&mut rng);
                    vec![
                        x.x,
                        x.y,
                        s1 * sample_magnitude(&mut rng),
                        s2 * sample_magnitude(&mut rng),
                    ]
                }
                "scaling" => vec![
                    x.x,
                    x.y,
                    10f64.powf(rng.random_range(-3.0..3.0)),
                    sample_magnitude(&mut rng),
                ],
                "h_monotonicity" => {
                    let a = sample_magnitude(&mut rng);
                    let b = sample_magnitude(&mut rng);
                    vec![x.x, x.y, a.min(b), a.max(b)]
                }
                _ => unreachable!(),
            };
            let margin = pointwise_margin(check, model, mode, &inputs)?;
            report.record_inputs(margin, &inputs, || format!("{inputs:?}"));
        }
        out.push(report);
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// modular suite
// ---------------------------------------------------------------------------

fn modular_suite(
    model: &ExponentModel,
    mode: NFunctionMode,
    mesh: &Mesh,
    seed: u64,
    n_fields: u64,
) -> Result<Vec<Report>, VerifyError> {
    let bounds = model.bounds();
    let lux_tol = 1e-10;

    let mut unit_ball = Report::new("unit_ball", 0.0, false);
    let mut sandwich = Report::new("modular_norm_sandwich", 1e-7, true);
    let mut homogeneity = Report::new("norm_homogeneity", 0.0, true);
    let mut holder = Report::new("holder", 1e-9, true);
    let mut convergence = Report::new("norm_modular_convergence", 1e-12, true);

    let mut rng = stream_rng(seed, 100);
    for field_idx in 0..n_fields {
        let u = random_field(&mut rng, mesh);
        let samples = mesh.values_at_qp(&u);
        if samples.iter().all(|&s| s == 0.0) {
            continue;
        }
        let norm = modular::luxemburg_norm(&samples, model, mode, mesh, lux_tol)?;

        // ρ(u/‖u‖) = 1
        let unit: Vec<f64> = samples.iter().map(|s| s / norm.value).collect();
        let rho_unit = modular::modular(&unit, model, mode, mesh, QUAD_TOL)?;
        unit_ball.record(1e-7 - (rho_unit.value - 1.0).abs(), || {
            format!("field {field_idx}: rho(u/norm) = {}", rho_unit.value)
        });

        // sandwich on both sides of the unit sphere
        for target in [0.5, 2.0] {
            let scaled: Vec<f64> = samples
                .iter()
                .map(|s| s * target / norm.value)
                .collect();
            let n = modular::luxemburg_norm(&scaled, model, mode, mesh, lux_tol)?;
            let rho = modular::modular(&scaled, model, mode, mesh, QUAD_TOL)?.value;
            let (lo, hi) = if n.value < 1.0 {
                (n.value.powf(bounds.q_plus), n.value.powf(bounds.p_minus))
            } else {
                (n.value.powf(bounds.p_minus), n.value.powf(bounds.q_plus))
            };
            let margin = ((rho - lo) / (1.0 + rho + lo)).min((hi - rho) / (1.0 + rho + hi));
            sandwich.record(margin, || {
                format!("field {field_idx}: norm={}, rho={rho}, window=[{lo},{hi}]", n.value)
            });
        }

        // ‖cu‖ = |c|·‖u‖ up to twice the bisection tolerance
        let c: f64 = rng.random_range(-3.0..3.0);
        if c.abs() > 1e-3 {
            let scaled: Vec<f64> = samples.iter().map(|s| c * s).collect();
            let n = modular::luxemburg_norm(&scaled, model, mode, mesh, lux_tol)?;
            let expect = c.abs() * norm.value;
            let allowed = 2.0 * lux_tol * (1.0 + expect) + 1e-13 * (1.0 + expect);
            homogeneity.record((allowed - (n.value - expect).abs()) / (1.0 + expect), || {
                format!("field {field_idx}: c={c}, norm={}, expect={expect}", n.value)
            });
        }

        // Hölder pairing against an independently drawn partner
        let v = random_field(&mut rng, mesh);
        let rep = modular::holder_pairing(&samples, &mesh.values_at_qp(&v), model, mode, mesh)?;
        holder.record(rep.worst_margin, || rep.worst_sample.clone());

        // ρ(u/2^k) and ‖u/2^k‖ decrease monotonically to zero
        if field_idx < 20 {
            let mut prev_rho = f64::INFINITY;
            let mut prev_norm = f64::INFINITY;
            let mut worst = f64::INFINITY;
            let mut last_rho = f64::INFINITY;
            for k in 0..=20 {
                let scaledown = 0.5f64.powi(k);
                let scaled: Vec<f64> = samples.iter().map(|s| s * scaledown).collect();
                let rho = modular::modular(&scaled, model, mode, mesh, QUAD_TOL)?.value;
                let n = modular::luxemburg_norm(&scaled, model, mode, mesh, lux_tol)?.value;
                if k > 0 {
                    worst = worst
                        .min((prev_rho - rho) / (1.0 + prev_rho))
                        .min((prev_norm - n) / (1.0 + prev_norm));
                }
                prev_rho = rho;
                prev_norm = n;
                last_rho = rho;
            }
            worst = worst.min(1e-4 - last_rho);
            convergence.record(worst, || format!("field {field_idx}: final rho {last_rho}"));
        }
    }
    Ok(vec![unit_ball, sandwich, homogeneity, holder, convergence])
}

// ---------------------------------------------------------------------------
// operator suite
// ---------------------------------------------------------------------------

fn operator_suite(
    model: &ExponentModel,
    mode: NFunctionMode,
    mesh: &Mesh,
    seed: u64,
    n_samples: u64,
) -> Result<Vec<Report>, VerifyError> {
    let mut spec = ProblemSpec::new(mesh.clone(), model.clone(), mode);
    spec.quad_tol = QUAD_TOL;
    spec.source = Some(SourceFn::Expr(
        ExprAst::parse("sin(3*x) - t/2").expect("fixed source parses"),
    ));

    let mut rng = stream_rng(seed, 200);
    let n_pairs = n_samples.min(20) as usize;
    let mut derivative = Report::new("derivative", 0.0, true);
    for _ in 0..n_pairs {
        let u = random_field(&mut rng, mesh);
        let v = random_field(&mut rng, mesh);
        let rep = operator::derivative_check(&u, &v, &spec, 1e-5)?;
        derivative.record(rep.worst_margin, || rep.worst_sample.clone());
    }

    let mut rng = stream_rng(seed, 201);
    let n_mono = n_samples.min(100) as usize;
    let mut monotonicity = Report::new("monotonicity", 1e-10, true);
    for _ in 0..n_mono {
        let u = random_field(&mut rng, mesh);
        let v = random_field(&mut rng, mesh);
        let rep = operator::monotonicity_check(&u, &v, &spec)?;
        monotonicity.record(rep.worst_margin, || rep.worst_sample.clone());
    }

    // coercivity growth along a scaling ray
    let mut rng = stream_rng(seed, 202);
    let base = random_field(&mut rng, mesh);
    let mut coercivity = Report::new("coercivity_ray", 0.0, true);
    let ratio_of = |scale: f64| -> Result<f64, VerifyError> {
        let scaled = Field {
            values: base.values.iter().map(|v| v * scale).collect(),
        };
        let rep = operator::coercivity_check(&scaled, &spec)?;
        let ratio: f64 = rep
            .worst_sample
            .split("pairing_over_norm=")
            .nth(1)
            .and_then(|s| s.split(',').next())
            .and_then(|s| s.parse().ok())
            .unwrap_or(f64::NAN);
        if !rep.passed {
            return Ok(f64::NAN);
        }
        Ok(ratio)
    };
    let base_ratio = ratio_of(1.0)?;
    for c in [2.0, 4.0, 8.0] {
        let r = ratio_of(c)?;
        let required = c.powf(model.bounds().p_minus - 1.0) / 2.0;
        coercivity.record((r / base_ratio - required) / (1.0 + required), || {
            format!("c={c}: growth {} vs required {required}", r / base_ratio)
        });
    }

    // freezing is the identity when the exponents ignore t
    let mut frozen = Report::new("frozen_consistency", 0.0, false);
    if model.t_independent() {
        let mut rng = stream_rng(seed, 203);
        let u = random_field(&mut rng, mesh);
        let w = random_field(&mut rng, mesh);
        let plain = operator::assemble_residual(&u, &spec, None)?;
        let froz = operator::assemble_residual(&u, &spec, Some(&w))?;
        let max_diff = plain
            .values
            .iter()
            .zip(&froz.values)
            .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        frozen.record(-max_diff, || format!("max |difference| = {max_diff}"));
    } else {
        frozen.record(0.0, || "t-coupled exponents; freezing genuinely differs".into());
    }

    // ε-terms are additive: residual(ε) − residual(0) equals the ε part
    let mut rng = stream_rng(seed, 204);
    let u = random_field(&mut rng, mesh);
    let mut eps_limit = Report::new("epsilon_limit", 1e-14, true);
    for eps in [0.5, 1e-2, 1e-6] {
        let mut spec_eps = spec.clone();
        spec_eps.epsilon = eps;
        let with_eps = operator::assemble_residual(&u, &spec_eps, None)?;
        let without = operator::assemble_residual(&u, &spec, None)?;
        let split = operator::assemble_split(&u, &spec_eps, None)?;
        let mut worst = 0.0f64;
        let mut scale = 0.0f64;
        for i in 0..with_eps.values.len() {
            let diff = with_eps.values[i] - without.values[i];
            worst = worst.max((diff - split.eps[i]).abs());
            // the subtraction rounds at the magnitude of the base residual
            scale = scale.max(without.values[i].abs()).max(split.eps[i].abs());
        }
        eps_limit.record(-worst / (1.0 + scale), || {
            format!("eps={eps}: max deviation {worst}")
        });
    }

    Ok(vec![derivative, monotonicity, coercivity, frozen, eps_limit])
}

// ---------------------------------------------------------------------------
// solver consistency suite
// ---------------------------------------------------------------------------

fn solver_suite(
    model: &ExponentModel,
    mode: NFunctionMode,
    mesh: &Mesh,
    _seed: u64,
) -> Result<Vec<Report>, VerifyError> {
    let mut reports = Vec::new();
    let mut spec = ProblemSpec::new(mesh.clone(), model.clone(), mode);
    spec.source = Some(SourceFn::Expr(ExprAst::parse("1 - t").expect("fixed source")));
    spec.eta_plus = Some(2.0);
    spec.eta_minus = Some(-1.0);

    let config = SolveConfig {
        residual_tol: 1e-10,
        epsilon_schedule: (0..=34).map(|k| 0.5f64.powi(k)).collect(),
        max_outer: 40,
        ..Default::default()
    };

    // pairwise agreement of the three pipelines for t-independent exponents
    let mut agreement = Report::new("degenerate_coupling_agreement", 0.0, false);
    if model.t_independent() && model.coupling() != Coupling::Solution {
        let variational = solvers::solve_variational(&spec, None, &config)?;
        let newton = solvers::solve_pseudomonotone(&spec, &config)?;
        let coupled_spec = {
            let mut s = spec.clone();
            s.model = model.with_coupling(Coupling::Solution);
            s
        };
        let coupled = solvers::solve_solution_coupled(&coupled_spec, &config)?;
        let linf = |a: &Field, b: &Field| {
            a.values
                .iter()
                .zip(&b.values)
                .fold(0.0f64, |m, (x, y)| m.max((x - y).abs()))
        };
        let worst = linf(&variational.solution, &newton.solution)
            .max(linf(&variational.solution, &coupled.solution))
            .max(linf(&newton.solution, &coupled.solution));
        agreement.record(1e-8 - worst, || {
            format!(
                "max pairwise L_inf {worst}; converged = {}/{}/{}",
                variational.converged, newton.converged, coupled.converged
            )
        });
    } else {
        agreement.record(0.0, || "t-coupled or solution-coupled model; skipped".into());
    }
    reports.push(agreement);

    // truncation keeps the Plus solution inside [0, η₊]
    let mut trunc = Report::new("truncation_bound", 0.0, false);
    if model.coupling() != Coupling::Solution {
        let plus = solvers::solve_variational(&spec, Some(TruncationSign::Plus), &config)?;
        let bc = plus.bound_check.expect("truncated run records bounds");
        let overshoot = (bc.lo - bc.min).max(bc.max - bc.hi).max(0.0);
        trunc.record(1e-8 - overshoot, || format!("{bc:?}"));

        // energy descent is monotone
        let mut energy_mono = Report::new("energy_monotonicity", 0.0, true);
        let mut worst = f64::INFINITY;
        for w in plus.energy_history.windows(2) {
            worst = worst.min((w[0] - w[1]) / (1.0 + w[0].abs()) + 1e-14);
        }
        energy_mono.record(worst, || format!("{} energy steps", plus.energy_history.len()));
        reports.push(energy_mono);

        // converged residuals certify from scratch
        let mut certify = Report::new("residual_certification", 0.0, false);
        let trunc_spec = {
            let mut s = spec.clone();
            s.source = Some(solvers::truncate_source(
                &ExprAst::parse("1 - t").unwrap(),
                2.0,
                -1.0,
                TruncationSign::Plus,
            )?);
            s
        };
        let re = solvers::certify_residual(&plus, &trunc_spec)?;
        certify.record(config.residual_tol - re, || format!("reassembled {re}"));
        reports.push(certify);
    }
    reports.push(trunc);

    // perturbation-scheme trace diagnostics on the solution-coupled problem
    let coupled_spec = {
        let mut s = spec.clone();
        s.model = model.with_coupling(Coupling::Solution);
        s.source = Some(SourceFn::Expr(ExprAst::parse("1").expect("fixed source")));
        s
    };
    let coupled = solvers::solve_solution_coupled(&coupled_spec, &config)?;
    reports.push(solvers::lsc_diagnostic(&coupled));
    let mut apriori = Report::new("apriori_bound", 1e-9, true);
    let c2 = 2.0
        * coupled
            .outer_trace
            .iter()
            .map(|t| t.source_pairing.abs())
            .fold(0.0f64, f64::max);
    for t in &coupled.outer_trace {
        apriori.record(
            (c2 - t.op_modular - t.eps_p_modular) / (1.0 + c2),
            || format!("eps={}: modular {}", t.epsilon, t.op_modular),
        );
    }
    reports.push(apriori);

    Ok(reports)
}

/// Run one suite. Reports come back in a fixed order; identical
/// `(seed, model, mode, mesh, n_samples)` give bitwise-identical reports.
pub fn run_suite(
    model: &ExponentModel,
    mode: NFunctionMode,
    mesh: &Mesh,
    suite: Suite,
    seed: u64,
    n_samples: u64,
) -> Result<Vec<Report>, VerifyError> {
    match suite {
        Suite::Pointwise => pointwise_suite(model, mode, mesh, seed, n_samples),
        Suite::Modular => modular_suite(model, mode, mesh, seed, n_samples),
        Suite::Operator => operator_suite(model, mode, mesh, seed, n_samples),
        Suite::SolverConsistency => solver_suite(model, mode, mesh, seed),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh_fem::build_interval_mesh;
    use crate::nfunction::ExponentBounds;

    fn model(p: &str, q: &str, mu: &str) -> ExponentModel {
        ExponentModel::new(
            ExprAst::parse(p).unwrap(),
            ExprAst::parse(q).unwrap(),
            ExprAst::parse(mu).unwrap(),
            Coupling::Gradient,
            1,
            None,
        )
        .unwrap()
    }

    #[test]
    fn pointwise_linear_model_passes_with_exact_simon_margin() {
        let m = ExponentModel::new(
            ExprAst::parse("2").unwrap(),
            ExprAst::parse("2").unwrap(),
            ExprAst::parse("0").unwrap(),
            Coupling::Gradient,
            1,
            Some(ExponentBounds {
                p_minus: 2.0,
                p_plus: 2.0,
                q_minus: 2.0,
                q_plus: 2.0,
            }),
        )
        .unwrap();
        let mesh = build_interval_mesh(0.0, 1.0, 8).unwrap();
        let reports =
            run_suite(&m, NFunctionMode::IntegralForm, &mesh, Suite::Pointwise, 7, 2000).unwrap();
        for r in &reports {
            assert!(r.passed, "{r:?}");
        }
        // Simon margin for h(t)=t: (lhs − rhs) = (τ−σ)²/2 at the worst pair
        let simon = reports.iter().find(|r| r.check == "simon").unwrap();
        let i = &simon.worst_inputs;
        let expect = ((i[2] - i[3]).powi(2) - (i[2] - i[3]).powi(2) / 2.0)
            / (1.0 + (i[2] - i[3]).powi(2) + (i[2] - i[3]).powi(2) / 2.0);
        assert!((simon.worst_margin - expect).abs() < 1e-12);
    }

    #[test]
    fn pointwise_t_dependent_model_passes() {
        let m = model(
            "2 + min(1, max(0, t-1))/10",
            "2.6 + min(1, max(0, t-1))/10",
            "0.5",
        );
        let mesh = build_interval_mesh(0.0, 1.0, 8).unwrap();
        let reports =
            run_suite(&m, NFunctionMode::IntegralForm, &mesh, Suite::Pointwise, 1, 500).unwrap();
        for r in &reports {
            assert!(r.passed, "{r:?}");
        }
    }

    #[test]
    fn reports_are_deterministic_and_reevaluable() {
        let m = model("2", "3", "x");
        let mesh = build_interval_mesh(0.0, 1.0, 8).unwrap();
        let a = run_suite(&m, NFunctionMode::IntegralForm, &mesh, Suite::Pointwise, 42, 300)
            .unwrap();
        let b = run_suite(&m, NFunctionMode::IntegralForm, &mesh, Suite::Pointwise, 42, 300)
            .unwrap();
        for (ra, rb) in a.iter().zip(&b) {
            assert_eq!(ra.to_line(), rb.to_line());
            // worst sample re-runs to the same margin
            let again =
                pointwise_margin(&ra.check, &m, NFunctionMode::IntegralForm, &ra.worst_inputs)
                    .unwrap();
            assert!(
                (again - ra.worst_margin).abs() <= 1e-14 * (1.0 + ra.worst_margin.abs()),
                "{}: {} vs {}",
                ra.check,
                again,
                ra.worst_margin
            );
        }
    }

    #[test]
    fn modular_suite_small_run() {
        let m = model("2", "3", "1 + x");
        let mesh = build_interval_mesh(0.0, 1.0, 24).unwrap();
        let reports =
            run_suite(&m, NFunctionMode::DirectForm, &mesh, Suite::Modular, 5, 15).unwrap();
        for r in &reports {
            assert!(r.passed, "{r:?}");
        }
    }

    #[test]
    fn operator_suite_small_run() {
        let m = model("2", "3", "x");
        let mesh = build_interval_mesh(0.0, 1.0, 24).unwrap();
        let reports =
            run_suite(&m, NFunctionMode::IntegralForm, &mesh, Suite::Operator, 9, 8).unwrap();
        for r in &reports {
            assert!(r.passed, "{r:?}");
        }
    }

    #[test]
    fn solver_suite_small_run() {
        let m = ExponentModel::new(
            ExprAst::parse("2").unwrap(),
            ExprAst::parse("2").unwrap(),
            ExprAst::parse("0").unwrap(),
            Coupling::Gradient,
            1,
            Some(ExponentBounds {
                p_minus: 2.0,
                p_plus: 2.0,
                q_minus: 2.0,
                q_plus: 2.0,
            }),
        )
        .unwrap();
        let mesh = build_interval_mesh(0.0, 1.0, 24).unwrap();
        let reports = run_suite(
            &m,
            NFunctionMode::IntegralForm,
            &mesh,
            Suite::SolverConsistency,
            3,
            1,
        )
        .unwrap();
        for r in &reports {
            assert!(r.passed, "{r:?}");
        }
    }
}
