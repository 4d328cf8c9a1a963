//! The three constructive solution pipelines: truncated energy minimization,
//! damped Newton for the pseudomonotone (nonvariational) problem, and the
//! ε-perturbation scheme with frozen exponents for solution-coupled models,
//! plus the truncation-based multiplicity driver.
//!
//! All pipelines share the residual assembly of [`crate::operator`]; the
//! Newton Jacobian is built from directional finite differences (batched by a
//! distance-2 coloring of the node adjacency), never analytically, so the
//! operator definition stays single-sourced.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::expr::{Binding, ExprAst};
use crate::mesh_fem::{Field, Mesh, MeshError};
use crate::modular::{self, ModularError};
use crate::nfunction::{Coupling, NfError};
use crate::operator::{
    assemble_residual, energy, OperatorError, ProblemSpec, Residual, SourceFn,
};
use crate::report::Report;

#[derive(Debug, Clone, Error)]
pub enum SolverError {
    #[error(transparent)]
    Operator(#[from] OperatorError),
    #[error(transparent)]
    Mesh(#[from] MeshError),
    #[error(transparent)]
    Modular(#[from] ModularError),
    #[error(transparent)]
    NFunction(#[from] NfError),
    #[error("{0}")]
    InvalidArg(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TruncationSign {
    Plus,
    Minus,
}

#[derive(Debug, Clone)]
pub enum InitialGuess {
    Zero,
    Interpolant(ExprAst),
    Field(Field),
}

#[derive(Debug, Clone)]
pub struct SolveConfig {
    /// cap on ε stages of the perturbation scheme
    pub max_outer: usize,
    /// cap on frozen-exponent fixed-point iterations per ε stage
    pub max_inner: usize,
    /// cap on Newton iterations per nonlinear solve
    pub max_newton: usize,
    /// cap on descent iterations of the variational pipeline
    pub max_descent: usize,
    pub residual_tol: f64,
    pub step_tol: f64,
    pub armijo_c: f64,
    pub backtrack_factor: f64,
    /// strictly decreasing positive perturbation strengths
    pub epsilon_schedule: Vec<f64>,
    pub initial_guess: InitialGuess,
}

impl Default for SolveConfig {
    fn default() -> Self {
        SolveConfig {
            max_outer: 16,
            max_inner: 40,
            max_newton: 60,
            max_descent: 50_000,
            residual_tol: 1e-8,
            step_tol: 1e-10,
            armijo_c: 1e-4,
            backtrack_factor: 0.5,
            epsilon_schedule: default_epsilon_schedule(),
            initial_guess: InitialGuess::Zero,
        }
    }
}

/// Geometric decay 1, 1/2, ..., 1/2¹⁰ reaches small ε in few stages; a
/// harmonic schedule spends its stages near ε ≈ 1.
pub fn default_epsilon_schedule() -> Vec<f64> {
    (0..=10).map(|k| 0.5f64.powi(k)).collect()
}

#[derive(Debug, Clone, Copy)]
pub struct BoundCheck {
    pub min: f64,
    pub max: f64,
    pub lo: f64,
    pub hi: f64,
    pub violated: bool,
}

/// Per-ε record of the perturbation scheme.
#[derive(Debug, Clone)]
pub struct EpsilonRecord {
    pub epsilon: f64,
    pub inner_iterations: usize,
    pub inner_converged: bool,
    pub step_norms: Vec<f64>,
    /// `∫ |∇u|^{p(x,u)} + μ |∇u|^{q(x,u)} dx`, exponents at the solution
    pub op_modular: f64,
    /// `ε ∫ |∇u|^{p⁺} dx`
    pub eps_p_modular: f64,
    /// `ε ∫ μ |∇u|^{q⁺} dx`
    pub eps_q_modular: f64,
    /// `∫ f(x,u) u dx`
    pub source_pairing: f64,
    pub solution: Field,
}

#[derive(Debug, Clone)]
pub struct SolveResult {
    pub solution: Field,
    pub residual_history: Vec<f64>,
    pub energy_history: Vec<f64>,
    pub outer_trace: Vec<EpsilonRecord>,
    pub bound_check: Option<BoundCheck>,
    pub converged: bool,
    pub iterations: usize,
    pub warnings: Vec<String>,
}

impl SolveResult {
    fn new(solution: Field) -> Self {
        SolveResult {
            solution,
            residual_history: Vec::new(),
            energy_history: Vec::new(),
            outer_trace: Vec::new(),
            bound_check: None,
            converged: false,
            iterations: 0,
            warnings: Vec::new(),
        }
    }
}

/// Clamp-style truncation of the reaction: `Plus` evaluates
/// `f(x, clamp(t, 0, η₊))`, `Minus` evaluates `f(x, clamp(t, η₋, 0))`.
pub fn truncate_source(
    f: &ExprAst,
    eta_plus: f64,
    eta_minus: f64,
    sign: TruncationSign,
) -> Result<SourceFn, SolverError> {
    match sign {
        TruncationSign::Plus => {
            if !(eta_plus > 0.0) {
                return Err(SolverError::InvalidArg(format!(
                    "Plus truncation needs eta_plus > 0, got {eta_plus}"
                )));
            }
            Ok(SourceFn::Truncated {
                expr: f.clone(),
                lo: 0.0,
                hi: eta_plus,
            })
        }
        TruncationSign::Minus => {
            if !(eta_minus < 0.0) {
                return Err(SolverError::InvalidArg(format!(
                    "Minus truncation needs eta_minus < 0, got {eta_minus}"
                )));
            }
            Ok(SourceFn::Truncated {
                expr: f.clone(),
                lo: eta_minus,
                hi: 0.0,
            })
        }
    }
}

fn resolve_initial(mesh: &Mesh, guess: &InitialGuess) -> Result<Field, SolverError> {
    let mut f = match guess {
        InitialGuess::Zero => Field::zeros(mesh),
        InitialGuess::Interpolant(expr) => Field::interpolate(mesh, expr)?,
        InitialGuess::Field(f) => {
            f.check_size(mesh)?;
            f.clone()
        }
    };
    f.project_dirichlet(mesh);
    Ok(f)
}

fn bound_check(solution: &Field, lo: f64, hi: f64) -> BoundCheck {
    let min = solution.values.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = solution
        .values
        .iter()
        .cloned()
        .fold(f64::NEG_INFINITY, f64::max);
    BoundCheck {
        min,
        max,
        lo,
        hi,
        violated: min < lo - 1e-8 || max > hi + 1e-8,
    }
}

/// Sample a sign condition `f(x, level) cmp 0` at the quadrature points;
/// returns a warning string if violated somewhere.
fn sample_sign_condition(
    spec: &ProblemSpec,
    f: &ExprAst,
    level: f64,
    want_negative: bool,
) -> Option<String> {
    for &x in spec.mesh.qp_points() {
        match f.eval(&Binding::new().x(x.x).y(x.y).t(level)) {
            Ok(v) => {
                if (want_negative && v >= 0.0) || (!want_negative && v <= 0.0) {
                    return Some(format!(
                        "sign condition violated: f(x,{level}) = {v} at x = {}, y = {}",
                        x.x, x.y
                    ));
                }
            }
            Err(e) => return Some(format!("sign condition unevaluable at {level}: {e}")),
        }
    }
    None
}

// ---------------------------------------------------------------------------
// Variational pipeline: descent on the truncated energy
// ---------------------------------------------------------------------------

/// Energy descent with the negative residual as direction and Armijo
/// backtracking; the step length is warm-started by a Barzilai–Borwein
/// estimate. `sign` selects the truncated functional (`None` minimizes the
/// plain energy).
pub fn solve_variational(
    spec: &ProblemSpec,
    sign: Option<TruncationSign>,
    config: &SolveConfig,
) -> Result<SolveResult, SolverError> {
    if spec.model.coupling() == Coupling::Solution {
        return Err(SolverError::InvalidArg(
            "the variational pipeline needs gradient coupling".into(),
        ));
    }
    let mut wspec = spec.clone();
    let mut warnings = Vec::new();
    let mut bounds_interval = None;
    if let Some(sign) = sign {
        let Some(SourceFn::Expr(f)) = &spec.source else {
            return Err(SolverError::InvalidArg(
                "truncation needs a plain (untruncated) reaction term".into(),
            ));
        };
        let (eta_plus, eta_minus) = (spec.eta_plus.unwrap_or(0.0), spec.eta_minus.unwrap_or(0.0));
        wspec.source = Some(truncate_source(f, eta_plus, eta_minus, sign)?);
        match sign {
            TruncationSign::Plus => {
                if let Some(w) = sample_sign_condition(spec, f, eta_plus, true) {
                    warnings.push(w);
                }
                bounds_interval = Some((0.0, eta_plus));
            }
            TruncationSign::Minus => {
                if let Some(w) = sample_sign_condition(spec, f, eta_minus, false) {
                    warnings.push(w);
                }
                bounds_interval = Some((eta_minus, 0.0));
            }
        }
    }

    let mut u = resolve_initial(&wspec.mesh, &config.initial_guess)?;
    let mut result = SolveResult::new(u.clone());
    result.warnings = warnings;

    let mut residual = assemble_residual(&u, &wspec, None)?;
    let mut j_val = energy(&u, &wspec)?;
    result.energy_history.push(j_val);
    result.residual_history.push(residual.norm_inf());

    let mut alpha = 1.0 / (1.0 + residual.norm_l2());
    let mut prev_step: Option<(Vec<f64>, Vec<f64>)> = None; // (s, old residual)

    for iter in 0..config.max_descent {
        result.iterations = iter;
        if residual.norm_inf() <= config.residual_tol {
            result.converged = true;
            break;
        }
        let rr: f64 = residual.values.iter().map(|v| v * v).sum();

        // Barzilai–Borwein step length from the previous accepted step
        if let Some((s, r_old)) = &prev_step {
            let mut sy = 0.0;
            let mut ss = 0.0;
            for ((sv, r_new), r_prev) in s.iter().zip(&residual.values).zip(r_old) {
                sy += sv * (r_new - r_prev);
                ss += sv * sv;
            }
            if sy > 0.0 && ss > 0.0 {
                alpha = (ss / sy).clamp(1e-14, 1e14);
            }
        }

        let mut accepted = false;
        let mut step = alpha;
        let mut u_try = u.clone();
        for _ in 0..60 {
            for (k, &i) in residual.interior.iter().enumerate() {
                u_try.values[i] = u.values[i] - step * residual.values[k];
            }
            let j_try = energy(&u_try, &wspec)?;
            let sufficient = config.armijo_c * step * rr;
            let floor = 1e-15 * (1.0 + j_val.abs());
            if j_try <= j_val - sufficient || (sufficient < floor && j_try <= j_val + floor) {
                let s: Vec<f64> = residual
                    .interior
                    .iter()
                    .enumerate()
                    .map(|(k, _)| -step * residual.values[k])
                    .collect();
                prev_step = Some((s, residual.values.clone()));
                u = u_try.clone();
                j_val = j_try;
                accepted = true;
                break;
            }
            step *= config.backtrack_factor;
        }
        if !accepted {
            result
                .warnings
                .push(format!("line search failed at iteration {iter}"));
            break;
        }
        alpha = step;
        residual = assemble_residual(&u, &wspec, None)?;
        result.energy_history.push(j_val);
        result.residual_history.push(residual.norm_inf());
        if step * residual.norm_inf() <= config.step_tol * 1e-3 {
            // steps have collapsed; converged only if the residual is small
            result.converged = residual.norm_inf() <= config.residual_tol;
            break;
        }
    }
    if !result.converged {
        result.converged = residual.norm_inf() <= config.residual_tol;
    }
    result.solution = u;
    if let Some((lo, hi)) = bounds_interval {
        result.bound_check = Some(bound_check(&result.solution, lo, hi));
    }
    Ok(result)
}

// ---------------------------------------------------------------------------
// Damped Newton with finite-difference Jacobian and Picard fallback
// ---------------------------------------------------------------------------

struct FdWorkspace {
    interior: Vec<usize>,
    /// interior-index neighbor lists (including self)
    neighbors: Vec<Vec<usize>>,
    /// distance-2 coloring: color -> interior indices
    colors: Vec<Vec<usize>>,
}

impl FdWorkspace {
    fn build(mesh: &Mesh) -> Self {
        let interior = mesh.interior_nodes();
        let mut pos = vec![usize::MAX; mesh.n_nodes()];
        for (k, &i) in interior.iter().enumerate() {
            pos[i] = k;
        }
        let n = interior.len();
        let mut neighbors: Vec<Vec<usize>> = vec![Vec::new(); n];
        for e in 0..mesh.n_elements() {
            let en = mesh.element_nodes(e);
            for &a in en {
                let ia = pos[a];
                if ia == usize::MAX {
                    continue;
                }
                for &b in en {
                    let ib = pos[b];
                    if ib != usize::MAX && !neighbors[ia].contains(&ib) {
                        neighbors[ia].push(ib);
                    }
                }
            }
        }
        for list in neighbors.iter_mut() {
            list.sort_unstable();
        }
        // greedy distance-2 coloring
        let mut color_of = vec![usize::MAX; n];
        let mut n_colors = 0;
        for j in 0..n {
            let mut used = Vec::new();
            for &mid in &neighbors[j] {
                for &k in &neighbors[mid] {
                    if color_of[k] != usize::MAX {
                        used.push(color_of[k]);
                    }
                }
            }
            let mut c = 0;
            while used.contains(&c) {
                c += 1;
            }
            color_of[j] = c;
            n_colors = n_colors.max(c + 1);
        }
        let mut colors = vec![Vec::new(); n_colors];
        for (j, &c) in color_of.iter().enumerate() {
            colors[c].push(j);
        }
        FdWorkspace {
            interior,
            neighbors,
            colors,
        }
    }

    /// Finite-difference Jacobian of the residual, one assembly per color.
    fn jacobian(
        &self,
        u: &Field,
        base: &Residual,
        spec: &ProblemSpec,
        frozen_at: Option<&Field>,
    ) -> Result<DMatrix<f64>, SolverError> {
        let n = self.interior.len();
        let mut jac = DMatrix::zeros(n, n);
        let sqrt_eps = f64::EPSILON.sqrt();
        for color in &self.colors {
            let mut pert = u.clone();
            let mut deltas = vec![0.0; n];
            for &j in color {
                let node = self.interior[j];
                let d = sqrt_eps * (1.0 + u.values[node].abs());
                deltas[j] = d;
                pert.values[node] += d;
            }
            let r_pert = assemble_residual(&pert, spec, frozen_at)?;
            for &j in color {
                for &i in &self.neighbors[j] {
                    jac[(i, j)] = (r_pert.values[i] - base.values[i]) / deltas[j];
                }
            }
        }
        Ok(jac)
    }
}

/// Frozen-coefficient (Picard) system: P1 matrix with the nonlinear
/// coefficient evaluated at `w`, sources on the right-hand side at `w`.
fn picard_step(
    w: &Field,
    spec: &ProblemSpec,
    frozen_at: Option<&Field>,
    ws: &FdWorkspace,
) -> Result<Option<Field>, SolverError> {
    let mesh = &spec.mesh;
    let model = &spec.model;
    let n = ws.interior.len();
    let mut pos = vec![usize::MAX; mesh.n_nodes()];
    for (k, &i) in ws.interior.iter().enumerate() {
        pos[i] = k;
    }
    let mut mat = DMatrix::<f64>::zeros(n, n);
    let mut rhs = DVector::<f64>::zeros(n);

    let grads = mesh.gradient(w);
    let w_qp = mesh.values_at_qp(w);
    let frozen_grads = frozen_at.map(|f| mesh.gradient(f));
    let frozen_qp = frozen_at.map(|f| mesh.values_at_qp(f));
    let bounds = model.bounds();
    let qpe = mesh.qp_per_element();
    let shapes = mesh.shape_at_qp();

    for e in 0..mesh.n_elements() {
        let en = mesh.element_nodes(e);
        let gs = mesh.grad_shapes(e);
        let g = grads[e];
        let gmag = (g[0] * g[0] + g[1] * g[1]).sqrt();
        for l in 0..qpe {
            let k = e * qpe + l;
            let x = mesh.qp_points()[k];
            let wq = mesh.qp_weights()[k];
            let t_arg = match model.coupling() {
                Coupling::Solution => frozen_qp.as_ref().map_or(w_qp[k], |fq| fq[k]),
                _ => frozen_grads.as_ref().map_or(gmag, |fg| {
                    let f = fg[e];
                    (f[0] * f[0] + f[1] * f[1]).sqrt()
                }),
            };
            let p_val = model.eval_p(x, t_arg).map_err(OperatorError::from)?;
            let q_val = model.eval_q(x, t_arg).map_err(OperatorError::from)?;
            let mu = model.eval_mu(x).map_err(OperatorError::from)?;
            let mut coef = gmag.powf(p_val - 2.0) + mu * gmag.powf(q_val - 2.0);
            if spec.epsilon > 0.0 {
                coef += spec.epsilon
                    * (gmag.powf(bounds.p_plus - 2.0) + gmag.powf(bounds.q_plus - 2.0));
            }
            if !coef.is_finite() {
                return Ok(None);
            }
            for (la, &na) in en.iter().enumerate() {
                let ia = pos[na];
                if ia == usize::MAX {
                    continue;
                }
                for (lb, &nb) in en.iter().enumerate() {
                    let ib = pos[nb];
                    if ib == usize::MAX {
                        continue;
                    }
                    mat[(ia, ib)] +=
                        wq * coef * (gs[la][0] * gs[lb][0] + gs[la][1] * gs[lb][1]);
                }
            }
            // frozen sources
            let mut f_val = 0.0;
            if let Some(src) = &spec.source {
                f_val += src.eval(x, w_qp[k]).map_err(OperatorError::from)?;
            }
            if let Some(r_expr) = &spec.r_expr {
                let uv = w_qp[k];
                if uv != 0.0 {
                    let r_val = r_expr
                        .eval(&Binding::new().x(x.x).y(x.y).t(t_arg))
                        .map_err(OperatorError::from)?;
                    f_val += uv.abs().powf(r_val - 2.0) * uv;
                }
            }
            if let Some(f0) = &spec.f0 {
                f_val += f0
                    .eval(&Binding::new().x(x.x).y(x.y))
                    .map_err(OperatorError::from)?;
            }
            if f_val != 0.0 {
                let shape = &shapes[l];
                for (la, &na) in en.iter().enumerate() {
                    let ia = pos[na];
                    if ia != usize::MAX {
                        rhs[ia] += wq * f_val * shape[la];
                    }
                }
            }
        }
    }
    let Some(sol) = mat.lu().solve(&rhs) else {
        return Ok(None);
    };
    let mut out = Field::zeros(mesh);
    for (k, &i) in ws.interior.iter().enumerate() {
        out.values[i] = sol[k];
    }
    Ok(Some(out))
}

struct NewtonOutcome {
    solution: Field,
    residual_history: Vec<f64>,
    converged: bool,
    iterations: usize,
    warnings: Vec<String>,
}

fn newton_solve(
    spec: &ProblemSpec,
    frozen_at: Option<&Field>,
    initial: Field,
    config: &SolveConfig,
    ws: &FdWorkspace,
) -> Result<NewtonOutcome, SolverError> {
    let mut u = initial;
    u.project_dirichlet(&spec.mesh);
    let mut history = Vec::new();
    let mut warnings = Vec::new();
    let mut rejections = 0u32;
    let mut converged = false;
    let mut iterations = 0;

    let mut residual = assemble_residual(&u, spec, frozen_at)?;
    history.push(residual.norm_inf());

    for iter in 0..config.max_newton {
        iterations = iter;
        if residual.norm_inf() <= config.residual_tol {
            converged = true;
            break;
        }
        // stagnation: no meaningful decrease over the last 10 iterations
        if history.len() > 10 {
            let prev = history[history.len() - 11];
            let now = *history.last().unwrap();
            if prev - now < 1e-14 {
                warnings.push(format!("stagnation at iteration {iter}"));
                break;
            }
        }

        let r_l2 = residual.norm_l2();
        let mut stepped = false;
        if rejections < 3 {
            let jac = ws.jacobian(&u, &residual, spec, frozen_at)?;
            let neg_r = DVector::from_iterator(
                residual.values.len(),
                residual.values.iter().map(|v| -v),
            );
            if let Some(direction) = jac.lu().solve(&neg_r) {
                let mut alpha = 1.0;
                for _ in 0..30 {
                    let mut u_try = u.clone();
                    for (k, &i) in ws.interior.iter().enumerate() {
                        u_try.values[i] += alpha * direction[k];
                    }
                    match assemble_residual(&u_try, spec, frozen_at) {
                        Ok(r_try) => {
                            if r_try.norm_l2() <= (1.0 - 1e-4 * alpha) * r_l2 {
                                u = u_try;
                                residual = r_try;
                                stepped = true;
                                break;
                            }
                        }
                        Err(_) => {} // step left the admissible set; shrink
                    }
                    alpha *= 0.5;
                }
            }
        }
        if stepped {
            rejections = 0;
        } else {
            rejections += 1;
            if rejections >= 3 {
                // frozen-coefficient fallback
                match picard_step(&u, spec, frozen_at, ws)? {
                    Some(candidate) => match assemble_residual(&candidate, spec, frozen_at) {
                        Ok(r_new) if r_new.norm_l2() < r_l2 => {
                            u = candidate;
                            residual = r_new;
                            rejections = 0;
                        }
                        _ => {
                            warnings.push(format!(
                                "Newton and Picard steps both rejected at iteration {iter}"
                            ));
                            break;
                        }
                    },
                    None => {
                        warnings.push(format!("singular Picard system at iteration {iter}"));
                        break;
                    }
                }
            }
        }
        history.push(residual.norm_inf());
    }
    if !converged {
        converged = residual.norm_inf() <= config.residual_tol;
    }
    Ok(NewtonOutcome {
        solution: u,
        residual_history: history,
        converged,
        iterations,
        warnings,
    })
}

/// Damped Newton on `A(u) − N_r(u) = 0` with residual-norm line search and a
/// frozen-coefficient Picard fallback after three rejected steps.
pub fn solve_pseudomonotone(
    spec: &ProblemSpec,
    config: &SolveConfig,
) -> Result<SolveResult, SolverError> {
    if spec.model.coupling() == Coupling::Solution {
        return Err(SolverError::InvalidArg(
            "solution-coupled problems go through the perturbation scheme".into(),
        ));
    }
    let mut warnings = Vec::new();
    if let Some(r_expr) = &spec.r_expr {
        // sampled check of r(x,·) ≤ p⁻ (recorded, not enforced)
        let p_minus = spec.model.bounds().p_minus;
        for &x in spec.mesh.qp_points() {
            for t in [0.0, 0.5, 1.0, 10.0] {
                if let Ok(r) = r_expr.eval(&Binding::new().x(x.x).y(x.y).t(t)) {
                    if r > p_minus + 1e-12 {
                        warnings.push(format!(
                            "sampled r(x,t) = {r} exceeds p_minus = {p_minus} at x = {}",
                            x.x
                        ));
                        break;
                    }
                }
            }
            if !warnings.is_empty() {
                break;
            }
        }
    }

    let ws = FdWorkspace::build(&spec.mesh);
    let initial = resolve_initial(&spec.mesh, &config.initial_guess)?;
    let outcome = newton_solve(spec, None, initial, config, &ws)?;
    let mut result = SolveResult::new(outcome.solution);
    result.residual_history = outcome.residual_history;
    result.converged = outcome.converged;
    result.iterations = outcome.iterations;
    result.warnings = warnings;
    result.warnings.extend(outcome.warnings);
    Ok(result)
}

// ---------------------------------------------------------------------------
// ε-perturbation with frozen exponents
// ---------------------------------------------------------------------------

fn grad_luxemburg_diff(
    a: &Field,
    b: &Field,
    spec: &ProblemSpec,
    tol: f64,
) -> Result<f64, SolverError> {
    let diff = Field {
        values: a
            .values
            .iter()
            .zip(&b.values)
            .map(|(x, y)| x - y)
            .collect(),
    };
    let samples = spec.mesh.gradient_magnitude_at_qp(&diff);
    Ok(modular::luxemburg_norm(&samples, &spec.model, spec.mode, &spec.mesh, tol)?.value)
}

/// The a-priori quantities of one ε stage, all exponents evaluated at the
/// solution itself (not at the frozen iterate).
fn stage_modulars(
    u: &Field,
    spec: &ProblemSpec,
    epsilon: f64,
) -> Result<(f64, f64, f64, f64), SolverError> {
    let mesh = &spec.mesh;
    let model = &spec.model;
    let grads = mesh.gradient(u);
    let u_qp = mesh.values_at_qp(u);
    let bounds = model.bounds();
    let qpe = mesh.qp_per_element();
    let mut op_mod = 0.0;
    let mut eps_p = 0.0;
    let mut eps_q = 0.0;
    let mut pairing = 0.0;
    for e in 0..mesh.n_elements() {
        let g = grads[e];
        let gmag = (g[0] * g[0] + g[1] * g[1]).sqrt();
        for l in 0..qpe {
            let k = e * qpe + l;
            let x = mesh.qp_points()[k];
            let w = mesh.qp_weights()[k];
            let t_arg = match model.coupling() {
                Coupling::Solution => u_qp[k],
                _ => gmag,
            };
            let p_val = model.eval_p(x, t_arg).map_err(OperatorError::from)?;
            let q_val = model.eval_q(x, t_arg).map_err(OperatorError::from)?;
            let mu = model.eval_mu(x).map_err(OperatorError::from)?;
            if gmag > 0.0 {
                op_mod += w * (gmag.powf(p_val) + mu * gmag.powf(q_val));
                eps_p += w * epsilon * gmag.powf(bounds.p_plus);
                eps_q += w * epsilon * mu * gmag.powf(bounds.q_plus);
            }
            if let Some(src) = &spec.source {
                pairing += w * src.eval(x, u_qp[k]).map_err(OperatorError::from)? * u_qp[k];
            }
        }
    }
    Ok((op_mod, eps_p, eps_q, pairing))
}

/// Outer loop over the ε schedule; each stage runs a frozen-exponent
/// fixed-point iteration whose inner solves reuse the damped-Newton
/// machinery, warm-started from the previous iterate. The stage ends as soon
/// as the unfrozen residual meets the tolerance (one inner iteration exactly
/// when the exponents ignore `t`) or the iterate stops moving in the gradient
/// Luxemburg norm.
pub fn solve_solution_coupled(
    spec: &ProblemSpec,
    config: &SolveConfig,
) -> Result<SolveResult, SolverError> {
    if config.epsilon_schedule.is_empty() {
        return Err(SolverError::InvalidArg("empty epsilon schedule".into()));
    }
    for w in config.epsilon_schedule.windows(2) {
        if !(w[1] < w[0]) {
            return Err(SolverError::InvalidArg(
                "epsilon schedule must be strictly decreasing".into(),
            ));
        }
    }
    if *config.epsilon_schedule.last().unwrap() <= 0.0 {
        return Err(SolverError::InvalidArg(
            "epsilon schedule must stay positive".into(),
        ));
    }

    let ws = FdWorkspace::build(&spec.mesh);
    let mut w_field = resolve_initial(&spec.mesh, &config.initial_guess)?;
    let mut result = SolveResult::new(w_field.clone());
    if spec.model.coupling() != Coupling::Solution {
        result.warnings.push(
            "perturbation scheme run with non-solution coupling (freezing acts on |∇u|)".into(),
        );
    }
    let norm_tol = (config.step_tol * 1e-2).clamp(1e-12, 1e-4);

    let stages = config.epsilon_schedule.len().min(config.max_outer);
    let mut any_stage_converged = false;
    for &epsilon in &config.epsilon_schedule[..stages] {
        let mut wspec = spec.clone();
        wspec.epsilon = epsilon;
        let mut step_norms = Vec::new();
        let mut inner_converged = false;
        let mut inner_iterations = 0;
        let mut last_residual = f64::INFINITY;
        for _ in 0..config.max_inner {
            inner_iterations += 1;
            let frozen = w_field.clone();
            let outcome = newton_solve(&wspec, Some(&frozen), w_field.clone(), config, &ws)?;
            result.iterations += outcome.iterations;
            let u_new = outcome.solution;
            // the true (unfrozen) residual decides stage convergence
            let unfrozen = assemble_residual(&u_new, &wspec, None)?;
            last_residual = unfrozen.norm_inf();
            let step = grad_luxemburg_diff(&u_new, &w_field, spec, norm_tol)?;
            step_norms.push(step);
            w_field = u_new;
            if last_residual <= config.residual_tol {
                inner_converged = true;
                break;
            }
            if step <= config.step_tol {
                inner_converged = true;
                break;
            }
        }
        if !inner_converged {
            result.warnings.push(format!(
                "inner fixed point did not converge at epsilon = {epsilon}"
            ));
        } else {
            any_stage_converged = true;
        }
        result.residual_history.push(last_residual);
        let (op_mod, eps_p, eps_q, pairing) = stage_modulars(&w_field, spec, epsilon)?;
        result.outer_trace.push(EpsilonRecord {
            epsilon,
            inner_iterations,
            inner_converged,
            step_norms,
            op_modular: op_mod,
            eps_p_modular: eps_p,
            eps_q_modular: eps_q,
            source_pairing: pairing,
            solution: w_field.clone(),
        });
    }

    result.solution = w_field;
    let n = result.outer_trace.len();
    result.converged = if n >= 2 {
        let diff = grad_luxemburg_diff(
            &result.outer_trace[n - 1].solution,
            &result.outer_trace[n - 2].solution,
            spec,
            norm_tol,
        )?;
        any_stage_converged && diff <= 10.0 * config.step_tol.max(1e-14)
    } else {
        result.outer_trace.last().map(|t| t.inner_converged).unwrap_or(false)
    };
    if !any_stage_converged {
        result.converged = false;
    }
    Ok(result)
}

/// Two runs of the perturbation scheme with the Plus and Minus truncations;
/// the sampled sign condition `f(x,η₊) < 0 < f(x,η₋)` is recorded as a
/// warning when violated, and each run's interval membership lands in its
/// `bound_check`.
pub fn solve_multiplicity(
    spec: &ProblemSpec,
    config: &SolveConfig,
) -> Result<(SolveResult, SolveResult), SolverError> {
    let Some(SourceFn::Expr(f)) = &spec.source else {
        return Err(SolverError::InvalidArg(
            "multiplicity needs a plain reaction term f(x,u)".into(),
        ));
    };
    let (Some(eta_plus), Some(eta_minus)) = (spec.eta_plus, spec.eta_minus) else {
        return Err(SolverError::InvalidArg(
            "multiplicity needs both truncation levels".into(),
        ));
    };
    if !(eta_minus < 0.0 && 0.0 < eta_plus) {
        return Err(SolverError::InvalidArg(format!(
            "need eta_minus < 0 < eta_plus, got {eta_minus}, {eta_plus}"
        )));
    }
    let mut warnings = Vec::new();
    if let Some(w) = sample_sign_condition(spec, f, eta_plus, true) {
        warnings.push(w);
    }
    if let Some(w) = sample_sign_condition(spec, f, eta_minus, false) {
        warnings.push(w);
    }

    let run = |sign: TruncationSign| -> Result<SolveResult, SolverError> {
        let mut wspec = spec.clone();
        wspec.source = Some(truncate_source(f, eta_plus, eta_minus, sign)?);
        let mut res = solve_solution_coupled(&wspec, config)?;
        let (lo, hi) = match sign {
            TruncationSign::Plus => (0.0, eta_plus),
            TruncationSign::Minus => (eta_minus, 0.0),
        };
        res.bound_check = Some(bound_check(&res.solution, lo, hi));
        res.warnings.extend(warnings.iter().cloned());
        Ok(res)
    };
    Ok((run(TruncationSign::Plus)?, run(TruncationSign::Minus)?))
}

/// Post-hoc lower-semicontinuity diagnostic on a perturbation-scheme trace:
/// the liminf of the per-stage operator modulars must not fall below the
/// final stage's modular. The liminf is proxied by the minimum over the last
/// four stages — earlier stages still carry an O(ε) drift and say nothing
/// about the limit. Presumes a converged trace; vacuous otherwise.
pub fn lsc_diagnostic(result: &SolveResult) -> Report {
    let mut report = Report::new("lower_semicontinuity", 1e-8, true);
    let n = result.outer_trace.len();
    if n == 0 || !result.converged {
        report.record(0.0, || "trace absent or not converged; diagnostic vacuous".into());
        return report;
    }
    let tail_start = n.saturating_sub(4);
    let liminf = result.outer_trace[tail_start..]
        .iter()
        .map(|t| t.op_modular)
        .fold(f64::INFINITY, f64::min);
    let last = result.outer_trace[n - 1].op_modular;
    report.record((liminf - last) / (1.0 + last.abs()), || {
        format!("liminf={liminf}, final={last}, stages={n}")
    });
    report
}

/// Re-assemble the residual of a finished run from scratch (certification).
pub fn certify_residual(result: &SolveResult, spec: &ProblemSpec) -> Result<f64, SolverError> {
    Ok(assemble_residual(&result.solution, spec, None)?.norm_inf())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expr::ExprAst;
    use crate::mesh_fem::build_interval_mesh;
    use crate::nfunction::{ExponentBounds, ExponentModel, NFunctionMode};

    fn model(p: &str, q: &str, mu: &str, coupling: Coupling) -> ExponentModel {
        ExponentModel::new(
            ExprAst::parse(p).unwrap(),
            ExprAst::parse(q).unwrap(),
            ExprAst::parse(mu).unwrap(),
            coupling,
            1,
            None,
        )
        .unwrap()
    }

    fn declared(p: f64, q: f64) -> Option<ExponentBounds> {
        Some(ExponentBounds {
            p_minus: p,
            p_plus: p,
            q_minus: q,
            q_plus: q,
        })
    }

    /// Schedule deep enough that consecutive ε solutions agree to 10·step_tol.
    fn deep_config() -> SolveConfig {
        SolveConfig {
            epsilon_schedule: (0..=34).map(|k| 0.5f64.powi(k)).collect(),
            max_outer: 40,
            residual_tol: 1e-10,
            ..Default::default()
        }
    }

    fn linear_model(coupling: Coupling) -> ExponentModel {
        ExponentModel::new(
            ExprAst::parse("2").unwrap(),
            ExprAst::parse("2").unwrap(),
            ExprAst::parse("0").unwrap(),
            coupling,
            1,
            declared(2.0, 2.0),
        )
        .unwrap()
    }

    /// 1D stiffness, midpoint mass and load on interior dofs.
    fn oracle_matrices(
        mesh: &Mesh,
        load: impl Fn(f64) -> f64,
    ) -> (DMatrix<f64>, DMatrix<f64>, DVector<f64>, Vec<usize>) {
        let interior = mesh.interior_nodes();
        let n = interior.len();
        let mut pos = vec![usize::MAX; mesh.n_nodes()];
        for (k, &i) in interior.iter().enumerate() {
            pos[i] = k;
        }
        let mut k_mat = DMatrix::zeros(n, n);
        let mut m_mat = DMatrix::zeros(n, n);
        let mut b = DVector::zeros(n);
        for e in 0..mesh.n_elements() {
            let en = mesh.element_nodes(e);
            let h = mesh.element_measures()[e];
            let mid = 0.5 * (mesh.nodes()[en[0]].x + mesh.nodes()[en[1]].x);
            let k_loc = [[1.0 / h, -1.0 / h], [-1.0 / h, 1.0 / h]];
            for a in 0..2 {
                let ia = pos[en[a]];
                if ia == usize::MAX {
                    continue;
                }
                b[ia] += h * load(mid) * 0.5;
                for bb in 0..2 {
                    let ib = pos[en[bb]];
                    if ib == usize::MAX {
                        continue;
                    }
                    k_mat[(ia, ib)] += k_loc[a][bb];
                    m_mat[(ia, ib)] += h * 0.25;
                }
            }
        }
        (k_mat, m_mat, b, interior)
    }

    #[test]
    fn truncation_examples() {
        let f = ExprAst::parse("1 - t").unwrap();
        let plus = truncate_source(&f, 2.0, -1.0, TruncationSign::Plus).unwrap();
        let x = crate::nfunction::Point::x1(0.3);
        assert_eq!(plus.eval(x, 3.0).unwrap(), -1.0); // clamp at eta_plus
        assert_eq!(plus.eval(x, -5.0).unwrap(), 1.0); // clamp at 0
        assert_eq!(plus.eval(x, 1.0).unwrap(), 0.0); // interior branch
        assert!(truncate_source(&f, -2.0, -1.0, TruncationSign::Plus).is_err());
        assert!(truncate_source(&f, 2.0, 1.0, TruncationSign::Minus).is_err());
    }

    #[test]
    fn variational_manufactured_linear() {
        let mesh = build_interval_mesh(0.0, 1.0, 128).unwrap();
        let mut spec = ProblemSpec::new(mesh, linear_model(Coupling::Gradient), NFunctionMode::IntegralForm);
        spec.source = Some(SourceFn::Expr(ExprAst::parse("pi^2*sin(pi*x)").unwrap()));
        let config = SolveConfig {
            residual_tol: 1e-9,
            ..Default::default()
        };
        let res = solve_variational(&spec, None, &config).unwrap();
        assert!(res.converged, "{:?}", res.warnings);
        let mut err = 0.0_f64;
        for (i, p) in spec.mesh.nodes().iter().enumerate() {
            err = err.max((res.solution.values[i] - (std::f64::consts::PI * p.x).sin()).abs());
        }
        assert!(err < 1e-3, "L_inf error {err}");
        // energy history decreases monotonically
        for w in res.energy_history.windows(2) {
            assert!(w[1] <= w[0] + 1e-14 * (1.0 + w[0].abs()));
        }
    }

    #[test]
    fn variational_truncated_plus_matches_linear_oracle() {
        let mesh = build_interval_mesh(0.0, 1.0, 64).unwrap();
        let mut spec = ProblemSpec::new(mesh, linear_model(Coupling::Gradient), NFunctionMode::IntegralForm);
        spec.source = Some(SourceFn::Expr(ExprAst::parse("1 - t").unwrap()));
        spec.eta_plus = Some(2.0);
        spec.eta_minus = Some(-1.0);
        let config = SolveConfig {
            residual_tol: 1e-10,
            ..Default::default()
        };
        let res = solve_variational(&spec, Some(TruncationSign::Plus), &config).unwrap();
        assert!(res.converged);
        let bc = res.bound_check.unwrap();
        assert!(!bc.violated, "{bc:?}");
        assert!(bc.min >= -1e-8 && bc.max <= 2.0 + 1e-8);

        // in the trapped range f_+(x,u) = 1 − u, so (K + M)u = b exactly
        let (k_mat, m_mat, b, interior) = oracle_matrices(&spec.mesh, |_| 1.0);
        let sys = &k_mat + &m_mat;
        let exact = sys.lu().solve(&b).unwrap();
        for (row, &node) in interior.iter().enumerate() {
            assert!(
                (res.solution.values[node] - exact[row]).abs() < 1e-6,
                "node {node}: {} vs {}",
                res.solution.values[node],
                exact[row]
            );
        }
    }

    #[test]
    fn variational_zero_source_truncated_is_zero() {
        let mesh = build_interval_mesh(0.0, 1.0, 16).unwrap();
        let mut spec = ProblemSpec::new(mesh, linear_model(Coupling::Gradient), NFunctionMode::IntegralForm);
        spec.source = Some(SourceFn::Expr(ExprAst::parse("0").unwrap()));
        spec.eta_plus = Some(2.0);
        let res =
            solve_variational(&spec, Some(TruncationSign::Plus), &SolveConfig::default()).unwrap();
        assert!(res.converged);
        assert!(res.solution.values.iter().all(|&v| v.abs() < 1e-12));
        assert!(res.energy_history.last().unwrap().abs() < 1e-15);
    }

    #[test]
    fn pseudomonotone_linear_matches_dense_oracle() {
        let mesh = build_interval_mesh(0.0, 1.0, 64).unwrap();
        let mut spec = ProblemSpec::new(mesh, linear_model(Coupling::Gradient), NFunctionMode::IntegralForm);
        spec.r_expr = Some(ExprAst::parse("2").unwrap());
        spec.f0 = Some(ExprAst::parse("sin(pi*x)").unwrap());
        let config = SolveConfig {
            residual_tol: 1e-12,
            ..Default::default()
        };
        let res = solve_pseudomonotone(&spec, &config).unwrap();
        assert!(res.converged);
        let (k_mat, m_mat, b, interior) =
            oracle_matrices(&spec.mesh, |x| (std::f64::consts::PI * x).sin());
        let sys = &k_mat - &m_mat;
        let exact = sys.lu().solve(&b).unwrap();
        for (row, &node) in interior.iter().enumerate() {
            assert!(
                (res.solution.values[node] - exact[row]).abs() < 1e-10,
                "node {node}"
            );
        }
    }

    #[test]
    fn pseudomonotone_zero_datum_stays_at_zero() {
        let mesh = build_interval_mesh(0.0, 1.0, 16).unwrap();
        let mut spec = ProblemSpec::new(mesh, linear_model(Coupling::Gradient), NFunctionMode::IntegralForm);
        spec.r_expr = Some(ExprAst::parse("2").unwrap());
        spec.f0 = Some(ExprAst::parse("0").unwrap());
        let res = solve_pseudomonotone(&spec, &SolveConfig::default()).unwrap();
        assert!(res.converged);
        assert!(res.solution.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn pseudomonotone_nonlinear_instance_converges() {
        let mesh = build_interval_mesh(0.0, 1.0, 48).unwrap();
        let m = model("2", "3", "x", Coupling::Gradient);
        let mut spec = ProblemSpec::new(mesh, m, NFunctionMode::IntegralForm);
        spec.r_expr = Some(ExprAst::parse("1.5").unwrap());
        spec.f0 = Some(ExprAst::parse("1").unwrap());
        let res = solve_pseudomonotone(&spec, &SolveConfig::default()).unwrap();
        assert!(res.converged, "{:?}", res.residual_history);
        assert!(certify_residual(&res, &spec).unwrap() <= 1e-8);
    }

    #[test]
    fn coupled_t_independent_takes_one_inner_iteration() {
        let mesh = build_interval_mesh(0.0, 1.0, 32).unwrap();
        let m = ExponentModel::new(
            ExprAst::parse("2.5").unwrap(),
            ExprAst::parse("3").unwrap(),
            ExprAst::parse("0.5").unwrap(),
            Coupling::Solution,
            1,
            declared(2.5, 3.0),
        )
        .unwrap();
        let mut spec = ProblemSpec::new(mesh, m, NFunctionMode::IntegralForm);
        spec.source = Some(SourceFn::Expr(ExprAst::parse("1").unwrap()));
        let res = solve_solution_coupled(&spec, &deep_config()).unwrap();
        assert!(res.converged, "{:?}", res.warnings);
        for t in &res.outer_trace {
            assert_eq!(t.inner_iterations, 1, "epsilon {}", t.epsilon);
        }
    }

    #[test]
    fn coupled_linear_scales_like_one_over_one_plus_two_eps() {
        let mesh = build_interval_mesh(0.0, 1.0, 32).unwrap();
        let mut spec = ProblemSpec::new(mesh, linear_model(Coupling::Solution), NFunctionMode::IntegralForm);
        spec.source = Some(SourceFn::Expr(ExprAst::parse("pi^2*sin(pi*x)").unwrap()));
        let config = SolveConfig {
            residual_tol: 1e-11,
            ..Default::default()
        };
        let res = solve_solution_coupled(&spec, &config).unwrap();
        let (k_mat, _, b, interior) =
            oracle_matrices(&spec.mesh, |x| std::f64::consts::PI.powi(2) * (std::f64::consts::PI * x).sin());
        let base = k_mat.lu().solve(&b).unwrap();
        for t in &res.outer_trace {
            let scale = 1.0 + 2.0 * t.epsilon;
            for (row, &node) in interior.iter().enumerate() {
                let expect = base[row] / scale;
                assert!(
                    (t.solution.values[node] - expect).abs() < 1e-6,
                    "eps {}: {} vs {expect}",
                    t.epsilon,
                    t.solution.values[node]
                );
            }
        }
    }

    #[test]
    fn coupled_t_dependent_trace_is_bounded() {
        let mesh = build_interval_mesh(0.0, 1.0, 32).unwrap();
        let m = model("2 + 1/(1+t^2)", "2 + 1/(1+t^2)", "0", Coupling::Solution);
        let mut spec = ProblemSpec::new(mesh, m, NFunctionMode::IntegralForm);
        spec.source = Some(SourceFn::Expr(ExprAst::parse("1").unwrap()));
        let res = solve_solution_coupled(&spec, &deep_config()).unwrap();
        assert!(res.converged, "{:?}", res.warnings);
        let mods: Vec<f64> = res.outer_trace.iter().map(|t| t.op_modular).collect();
        let max = mods.iter().cloned().fold(f64::MIN, f64::max);
        let min = mods.iter().cloned().fold(f64::MAX, f64::min);
        assert!(max / min <= 10.0, "{mods:?}");
        // a-priori bound: modular + ε p⁺-modular stays below twice the
        // largest observed source pairing
        let c2 = 2.0 * res
            .outer_trace
            .iter()
            .map(|t| t.source_pairing.abs())
            .fold(f64::MIN, f64::max);
        for t in &res.outer_trace {
            assert!(t.op_modular + t.eps_p_modular <= c2 + 1e-9, "{t:?}");
        }
        let lsc = lsc_diagnostic(&res);
        assert!(lsc.passed, "{lsc:?}");
    }

    #[test]
    fn coupling_enum_is_irrelevant_for_t_independent_exponents() {
        // bitwise identical runs when p, q ignore t
        let mesh = build_interval_mesh(0.0, 1.0, 24).unwrap();
        let mk = |coupling| {
            ExponentModel::new(
                ExprAst::parse("2.5").unwrap(),
                ExprAst::parse("3").unwrap(),
                ExprAst::parse("x").unwrap(),
                coupling,
                1,
                declared(2.5, 3.0),
            )
            .unwrap()
        };
        let mut spec_s = ProblemSpec::new(mesh.clone(), mk(Coupling::Solution), NFunctionMode::IntegralForm);
        spec_s.source = Some(SourceFn::Expr(ExprAst::parse("1 - t").unwrap()));
        spec_s.eta_plus = Some(2.0);
        spec_s.eta_minus = Some(-1.0);
        let mut spec_g = spec_s.clone();
        spec_g.model = mk(Coupling::Gradient);

        let (plus_s, _) = solve_multiplicity(&spec_s, &SolveConfig::default()).unwrap();
        let (plus_g, _) = solve_multiplicity(&spec_g, &SolveConfig::default()).unwrap();
        assert_eq!(plus_s.solution.values, plus_g.solution.values);
    }

    #[test]
    fn multiplicity_bounds_reflect_source_sign_structure() {
        let mesh = build_interval_mesh(0.0, 1.0, 32).unwrap();
        let mut spec = ProblemSpec::new(mesh, linear_model(Coupling::Solution), NFunctionMode::IntegralForm);
        spec.source = Some(SourceFn::Expr(ExprAst::parse("1 - t").unwrap()));
        spec.eta_plus = Some(2.0);
        spec.eta_minus = Some(-1.0);
        let (plus, minus) = solve_multiplicity(&spec, &deep_config()).unwrap();
        assert!(plus.converged && minus.converged);
        let pb = plus.bound_check.unwrap();
        assert!(!pb.violated, "{pb:?}");
        // f(·,0) = 1 > 0 pushes the Minus-truncated solution positive: no
        // nonpositive solution exists and the bound check records that.
        let mb = minus.bound_check.unwrap();
        assert!(mb.violated, "{mb:?}");
        assert!(mb.max > 0.05);
    }

    #[test]
    fn residual_certification() {
        let mesh = build_interval_mesh(0.0, 1.0, 32).unwrap();
        let mut spec = ProblemSpec::new(mesh, linear_model(Coupling::Gradient), NFunctionMode::IntegralForm);
        spec.source = Some(SourceFn::Expr(ExprAst::parse("pi^2*sin(pi*x)").unwrap()));
        let config = SolveConfig {
            residual_tol: 1e-9,
            ..Default::default()
        };
        let res = solve_variational(&spec, None, &config).unwrap();
        assert!(res.converged);
        assert!(certify_residual(&res, &spec).unwrap() <= 1e-9);
    }
}
