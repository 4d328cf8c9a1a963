//! Weak-form assembly for the double phase operator
//! `⟨A(u), v⟩ = ∫ (|∇u|^{p(x,·)-2} + μ(x)|∇u|^{q(x,·)-2}) ∇u·∇v dx`,
//! its energy functional, the source pairing, and the derivative,
//! monotonicity and coercivity diagnostics.
//!
//! The exponent argument is the per-element `|∇u|` under gradient coupling
//! and the quadrature-point value of `u` under solution coupling; passing a
//! `frozen_at` field evaluates the exponents at that field's coupling value
//! instead (the frozen iterate of the perturbation scheme). Elements with
//! `|∇u| = 0` contribute nothing to the operator term — that is the density
//! convention `h(x,0) = 0`, not a regularization.

use thiserror::Error;

use crate::expr::{Binding, EvalError, ExprAst, Var};
use crate::mesh_fem::{Field, Mesh, MeshError};
use crate::modular::{self, ModularError, QpEvaluator};
use crate::nfunction::{Coupling, ExponentModel, NFunctionMode, NfError, Point};
use crate::quad;
use crate::report::Report;

#[derive(Debug, Clone, Error)]
pub enum OperatorError {
    #[error(transparent)]
    Mesh(#[from] MeshError),
    #[error(transparent)]
    NFunction(#[from] NfError),
    #[error(transparent)]
    Modular(#[from] ModularError),
    #[error("expression evaluation failed: {0}")]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Quad(#[from] quad::QuadError),
    #[error("{0}")]
    InvalidArg(String),
}

/// Reaction source `f(x, u)`, optionally clamped to a truncation interval in
/// its second argument.
#[derive(Debug, Clone)]
pub enum SourceFn {
    Expr(ExprAst),
    Truncated { expr: ExprAst, lo: f64, hi: f64 },
}

impl SourceFn {
    pub fn eval(&self, x: Point, u: f64) -> Result<f64, EvalError> {
        let (expr, arg) = match self {
            SourceFn::Expr(e) => (e, u),
            SourceFn::Truncated { expr, lo, hi } => (expr, u.clamp(*lo, *hi)),
        };
        expr.eval(&Binding::new().x(x.x).y(x.y).t(arg))
    }

    /// `F(x,u) = ∫₀ᵘ f(x,s) ds` by a single 15-point Gauss–Legendre panel.
    pub fn antiderivative(&self, x: Point, u: f64) -> Result<f64, OperatorError> {
        if u == 0.0 {
            return Ok(0.0);
        }
        Ok(quad::panel(&mut |s| self.eval(x, s), 0.0, u)?)
    }
}

/// Everything that defines one discrete problem instance.
#[derive(Debug, Clone)]
pub struct ProblemSpec {
    pub mesh: Mesh,
    pub model: ExponentModel,
    pub mode: NFunctionMode,
    /// reaction `f(x,u)`
    pub source: Option<SourceFn>,
    /// power-source exponent `r(x,·)` of the nonvariational problem
    pub r_expr: Option<ExprAst>,
    /// fixed datum `f(x)`
    pub f0: Option<ExprAst>,
    pub eta_plus: Option<f64>,
    pub eta_minus: Option<f64>,
    /// perturbation strength; zero disables the `p⁺`/`q⁺` terms
    pub epsilon: f64,
    pub quad_tol: f64,
}

impl ProblemSpec {
    pub fn new(mesh: Mesh, model: ExponentModel, mode: NFunctionMode) -> Self {
        ProblemSpec {
            mesh,
            model,
            mode,
            source: None,
            r_expr: None,
            f0: None,
            eta_plus: None,
            eta_minus: None,
            epsilon: 0.0,
            quad_tol: 1e-10,
        }
    }

    /// A copy with all source terms removed: the pure operator pairing.
    pub(crate) fn operator_only(&self) -> ProblemSpec {
        let mut s = self.clone();
        s.source = None;
        s.r_expr = None;
        s.f0 = None;
        s.epsilon = 0.0;
        s
    }
}

/// Residual entries, one per interior node (ascending node index).
#[derive(Debug, Clone)]
pub struct Residual {
    pub values: Vec<f64>,
    pub interior: Vec<usize>,
}

impl Residual {
    pub fn norm_inf(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn norm_l2(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// `Σ_i r_i v_i` over interior nodes.
    pub fn pair(&self, field: &Field) -> f64 {
        self.values
            .iter()
            .zip(&self.interior)
            .map(|(r, &i)| r * field.values[i])
            .sum()
    }
}

fn require_dirichlet(mesh: &Mesh, field: &Field, what: &str) -> Result<(), OperatorError> {
    field.check_size(mesh)?;
    for &i in mesh.boundary_nodes() {
        if field.values[i] != 0.0 {
            return Err(OperatorError::InvalidArg(format!(
                "{what} must vanish on the Dirichlet boundary (node {i} = {})",
                field.values[i]
            )));
        }
    }
    Ok(())
}

/// Per-call cache of exponent and weight values at quadrature points.
struct Coeffs {
    mu: Vec<f64>,
    pq: Option<(Vec<f64>, Vec<f64>)>,
}

impl Coeffs {
    fn build(model: &ExponentModel, mesh: &Mesh) -> Result<Self, OperatorError> {
        let pts = mesh.qp_points();
        let mut mu = Vec::with_capacity(pts.len());
        for &p in pts {
            mu.push(model.eval_mu(p)?);
        }
        let pq = if model.t_independent() {
            let mut ps = Vec::with_capacity(pts.len());
            let mut qs = Vec::with_capacity(pts.len());
            for &p in pts {
                ps.push(model.eval_p(p, 0.0)?);
                qs.push(model.eval_q(p, 0.0)?);
            }
            Some((ps, qs))
        } else {
            None
        };
        Ok(Coeffs { mu, pq })
    }

    fn p_q(&self, model: &ExponentModel, x: Point, k: usize, t: f64) -> Result<(f64, f64), OperatorError> {
        if let Some((ps, qs)) = &self.pq {
            Ok((ps[k], qs[k]))
        } else {
            Ok((model.eval_p(x, t)?, model.eval_q(x, t)?))
        }
    }
}

pub(crate) struct SplitResidual {
    pub base: Vec<f64>,
    pub eps: Vec<f64>,
    pub interior: Vec<usize>,
}

pub(crate) fn assemble_split(
    u: &Field,
    spec: &ProblemSpec,
    frozen_at: Option<&Field>,
) -> Result<SplitResidual, OperatorError> {
    let mesh = &spec.mesh;
    let model = &spec.model;
    require_dirichlet(mesh, u, "u")?;
    if let Some(w) = frozen_at {
        w.check_size(mesh)?;
    }

    let interior = mesh.interior_nodes();
    let mut pos = vec![usize::MAX; mesh.n_nodes()];
    for (k, &i) in interior.iter().enumerate() {
        pos[i] = k;
    }
    let mut base = vec![0.0; interior.len()];
    let mut eps = vec![0.0; interior.len()];

    let coeffs = Coeffs::build(model, mesh)?;
    let grads = mesh.gradient(u);
    let u_qp = mesh.values_at_qp(u);
    let frozen_grads = frozen_at.map(|w| mesh.gradient(w));
    let frozen_qp = frozen_at.map(|w| mesh.values_at_qp(w));
    let bounds = model.bounds();
    let shapes = mesh.shape_at_qp();
    let qpe = mesh.qp_per_element();
    let weights = mesh.qp_weights();
    let points = mesh.qp_points();

    for e in 0..mesh.n_elements() {
        let en = mesh.element_nodes(e);
        let gs = mesh.grad_shapes(e);
        let g = grads[e];
        let gmag = (g[0] * g[0] + g[1] * g[1]).sqrt();
        for l in 0..qpe {
            let k = e * qpe + l;
            let x = points[k];
            let w = weights[k];
            let shape = &shapes[l];

            // exponent argument under the active coupling, frozen if requested
            let t_arg = match model.coupling() {
                Coupling::Solution => match &frozen_qp {
                    Some(fq) => fq[k],
                    None => u_qp[k],
                },
                _ => match &frozen_grads {
                    Some(fg) => {
                        let fgv = fg[e];
                        (fgv[0] * fgv[0] + fgv[1] * fgv[1]).sqrt()
                    }
                    None => gmag,
                },
            };

            // operator flux a(x, ·) ∇u
            if gmag > 0.0 {
                let (p_val, q_val) = coeffs.p_q(model, x, k, t_arg)?;
                let a = gmag.powf(p_val - 2.0) + coeffs.mu[k] * gmag.powf(q_val - 2.0);
                for (loc, &node) in en.iter().enumerate() {
                    let row = pos[node];
                    if row != usize::MAX {
                        base[row] += w * a * (g[0] * gs[loc][0] + g[1] * gs[loc][1]);
                    }
                }
                if spec.epsilon > 0.0 {
                    let a_eps = gmag.powf(bounds.p_plus - 2.0) + gmag.powf(bounds.q_plus - 2.0);
                    for (loc, &node) in en.iter().enumerate() {
                        let row = pos[node];
                        if row != usize::MAX {
                            eps[row] += w
                                * spec.epsilon
                                * a_eps
                                * (g[0] * gs[loc][0] + g[1] * gs[loc][1]);
                        }
                    }
                }
            }

            // source pairing − ∫ (f(x,u) + |u|^{r-2}u + f0) φ_i
            let mut rhs = 0.0;
            if let Some(src) = &spec.source {
                rhs += src.eval(x, u_qp[k])?;
            }
            if let Some(r_expr) = &spec.r_expr {
                let uv = u_qp[k];
                if uv != 0.0 {
                    let r_val = r_expr.eval(&Binding::new().x(x.x).y(x.y).t(t_arg))?;
                    rhs += uv.abs().powf(r_val - 2.0) * uv;
                }
            }
            if let Some(f0) = &spec.f0 {
                rhs += f0.eval(&Binding::new().x(x.x).y(x.y))?;
            }
            if rhs != 0.0 {
                for (loc, &node) in en.iter().enumerate() {
                    let row = pos[node];
                    if row != usize::MAX {
                        base[row] -= w * rhs * shape[loc];
                    }
                }
            }
        }
    }
    Ok(SplitResidual {
        base,
        eps,
        interior,
    })
}

/// Weak-form residual `⟨A(u), φ_i⟩ (+ ε-terms) − ∫ rhs·φ_i`, one entry per
/// interior node. The ε contribution is accumulated separately and added at
/// the end, so `residual(ε) − residual(0)` recovers it to the last ulp.
pub fn assemble_residual(
    u: &Field,
    spec: &ProblemSpec,
    frozen_at: Option<&Field>,
) -> Result<Residual, OperatorError> {
    let split = assemble_split(u, spec, frozen_at)?;
    let values = split
        .base
        .iter()
        .zip(&split.eps)
        .map(|(b, e)| b + e)
        .collect();
    Ok(Residual {
        values,
        interior: split.interior,
    })
}

/// Energy `J(u) = ∫ H(x,|∇u|) dx (+ ε part) − ∫ F(x,u) dx − ∫ f₀ u dx`.
///
/// The gradient term always integrates the density `h` (the integral-form
/// N-function): that is the antiderivative of the assembled operator, so the
/// residual is exactly the discrete gradient of this functional.
pub fn energy(u: &Field, spec: &ProblemSpec) -> Result<f64, OperatorError> {
    if spec.model.coupling() == Coupling::Solution {
        return Err(OperatorError::InvalidArg(
            "energy is defined for the variational (gradient-coupled) case".into(),
        ));
    }
    if spec.r_expr.is_some() {
        return Err(OperatorError::InvalidArg(
            "the |u|^{r-2}u reaction has no variational structure".into(),
        ));
    }
    let mesh = &spec.mesh;
    require_dirichlet(mesh, u, "u")?;
    let ev = QpEvaluator::new(&spec.model, NFunctionMode::IntegralForm, mesh, spec.quad_tol)?;
    let grad_qp = mesh.gradient_magnitude_at_qp(u);
    let u_qp = mesh.values_at_qp(u);
    let bounds = spec.model.bounds();
    let mut acc = 0.0;
    for (k, (&w, &gm)) in mesh.qp_weights().iter().zip(&grad_qp).enumerate() {
        let mut v = ev.big_h(k, gm)?;
        if spec.epsilon > 0.0 {
            v += spec.epsilon
                * (gm.powf(bounds.p_plus) / bounds.p_plus
                    + gm.powf(bounds.q_plus) / bounds.q_plus);
        }
        if let Some(src) = &spec.source {
            v -= src.antiderivative(mesh.qp_points()[k], u_qp[k])?;
        }
        if let Some(f0) = &spec.f0 {
            let x = mesh.qp_points()[k];
            v -= f0.eval(&Binding::new().x(x.x).y(x.y))? * u_qp[k];
        }
        acc += w * v;
    }
    Ok(acc)
}

/// Central-difference check that the residual is the gradient of the energy:
/// `(J(u+τv) − J(u−τv))/2τ` against `Σ residual_i v_i`.
pub fn derivative_check(
    u: &Field,
    v: &Field,
    spec: &ProblemSpec,
    step: f64,
) -> Result<Report, OperatorError> {
    if !(1e-7..=1e-3).contains(&step) {
        return Err(OperatorError::InvalidArg(format!(
            "step must lie in [1e-7, 1e-3], got {step}"
        )));
    }
    require_dirichlet(&spec.mesh, v, "v")?;
    let residual = assemble_residual(u, spec, None)?;
    let directional = residual.pair(v);

    let shifted = |sign: f64| -> Result<f64, OperatorError> {
        let mut w = u.clone();
        for (wv, vv) in w.values.iter_mut().zip(&v.values) {
            *wv += sign * step * vv;
        }
        energy(&w, spec)
    };
    let numeric = (shifted(1.0)? - shifted(-1.0)?) / (2.0 * step);

    let allowed = 1e-5 * (1.0 + numeric.abs());
    let diff = (directional - numeric).abs();
    let mut report = Report::new("derivative", 0.0, true);
    report.record((allowed - diff) / (1.0 + numeric.abs()), || {
        format!("directional={directional}, central_difference={numeric}")
    });
    Ok(report)
}

/// `⟨A(u)−A(v), u−v⟩ ≥ 4∫H(x,|∇(u−v)|/2)` for t-independent exponents; with
/// genuine t-coupling only nonnegativity is asserted and the 4H margin is
/// logged informationally.
pub fn monotonicity_check(
    u: &Field,
    v: &Field,
    spec: &ProblemSpec,
) -> Result<Report, OperatorError> {
    let pure = spec.operator_only();
    let ru = assemble_residual(u, &pure, None)?;
    let rv = assemble_residual(v, &pure, None)?;
    let mut diff = Field {
        values: u
            .values
            .iter()
            .zip(&v.values)
            .map(|(a, b)| a - b)
            .collect(),
    };
    diff.project_dirichlet(&spec.mesh);
    let lhs: f64 = ru
        .values
        .iter()
        .zip(&rv.values)
        .zip(&ru.interior)
        .map(|((a, b), &i)| (a - b) * diff.values[i])
        .sum();

    let ev = QpEvaluator::new(&spec.model, NFunctionMode::IntegralForm, &spec.mesh, spec.quad_tol)?;
    let gm = spec.mesh.gradient_magnitude_at_qp(&diff);
    let mut rhs = 0.0;
    for (k, (&w, &g)) in spec.mesh.qp_weights().iter().zip(&gm).enumerate() {
        rhs += 4.0 * w * ev.big_h(k, 0.5 * g)?;
    }

    let mut report = Report::new("monotonicity", 1e-10, true);
    if spec.model.t_independent() {
        report.record((lhs - rhs) / (1.0 + lhs.abs() + rhs.abs()), || {
            format!("lhs={lhs}, rhs_4H={rhs}")
        });
    } else {
        report.record(lhs / (1.0 + lhs.abs()), || {
            format!("lhs={lhs} (t-coupled; 4H bound logged: {rhs})")
        });
    }
    Ok(report)
}

/// `⟨A(u),u⟩ / ‖∇u‖ ≥ min(‖∇u‖^{p⁻−1}, ‖∇u‖^{q⁺−1})` with the norm taken in
/// the integral-form N-function (the one the operator derives from).
pub fn coercivity_check(u: &Field, spec: &ProblemSpec) -> Result<Report, OperatorError> {
    let pure = spec.operator_only();
    let r = assemble_residual(u, &pure, None)?;
    let pairing = r.pair(u);
    let norm = modular::luxemburg_norm(
        &spec.mesh.gradient_magnitude_at_qp(u),
        &spec.model,
        NFunctionMode::IntegralForm,
        &spec.mesh,
        1e-10,
    )?;
    if norm.value == 0.0 {
        return Err(OperatorError::InvalidArg(
            "coercivity check requires a nonzero field".into(),
        ));
    }
    let bounds = spec.model.bounds();
    let ratio = pairing / norm.value;
    let bound = norm
        .value
        .powf(bounds.p_minus - 1.0)
        .min(norm.value.powf(bounds.q_plus - 1.0));
    let mut report = Report::new("coercivity", 1e-10, true);
    report.record((ratio - bound) / (1.0 + bound.abs()), || {
        format!("pairing_over_norm={ratio}, bound={bound}, norm={}", norm.value)
    });
    Ok(report)
}

/// Check that `p`/`q` reference `t` in neither expression, so freezing the
/// exponents at any field is the identity.
pub fn exponents_t_independent(model: &ExponentModel) -> bool {
    !model.p_expr().uses_var(Var::T) && !model.q_expr().uses_var(Var::T)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expr::ExprAst;
    use crate::mesh_fem::build_interval_mesh;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

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

    fn linear_spec(n: usize) -> ProblemSpec {
        ProblemSpec::new(
            build_interval_mesh(0.0, 1.0, n).unwrap(),
            model("2", "2", "0", Coupling::Gradient),
            NFunctionMode::IntegralForm,
        )
    }

    fn random_dirichlet(mesh: &Mesh, rng: &mut ChaCha8Rng) -> Field {
        let mut f = Field::zeros(mesh);
        for v in f.values.iter_mut() {
            *v = rng.random_range(-1.0..1.0);
        }
        f.project_dirichlet(mesh);
        f
    }

    #[test]
    fn zero_field_zero_residual() {
        let spec = linear_spec(8);
        let u = Field::zeros(&spec.mesh);
        let r = assemble_residual(&u, &spec, None).unwrap();
        assert!(r.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_hat_stiffness_entry() {
        // n=2, h=1/2: interior entry of K·u for the unit hat is 1/h + 1/h = 4
        let spec = linear_spec(2);
        let mut u = Field::zeros(&spec.mesh);
        u.values[1] = 1.0;
        let r = assemble_residual(&u, &spec, None).unwrap();
        assert_eq!(r.interior, vec![1]);
        assert!((r.values[0] - 4.0).abs() < 1e-13, "{}", r.values[0]);
    }

    #[test]
    fn epsilon_duplicates_constant_exponent_operator() {
        // with μ ≡ 1 and p ≡ p⁺, q ≡ q⁺ the ε-terms equal ε·(operator part)
        let mesh = build_interval_mesh(0.0, 1.0, 8).unwrap();
        let m = ExponentModel::new(
            ExprAst::parse("2.5").unwrap(),
            ExprAst::parse("3").unwrap(),
            ExprAst::parse("1").unwrap(),
            Coupling::Gradient,
            1,
            Some(crate::nfunction::ExponentBounds {
                p_minus: 2.5,
                p_plus: 2.5,
                q_minus: 3.0,
                q_plus: 3.0,
            }),
        )
        .unwrap();
        let mut spec = ProblemSpec::new(mesh, m, NFunctionMode::IntegralForm);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let u = random_dirichlet(&spec.mesh, &mut rng);
        let r0 = assemble_residual(&u, &spec, None).unwrap();
        spec.epsilon = 1.0;
        let r1 = assemble_residual(&u, &spec, None).unwrap();
        for (a, b) in r1.values.iter().zip(&r0.values) {
            assert_eq!(*a, 2.0 * *b);
        }
    }

    #[test]
    fn epsilon_terms_are_additive() {
        let mesh = build_interval_mesh(0.0, 1.0, 12).unwrap();
        let m = model("2", "3", "x", Coupling::Gradient);
        let mut spec = ProblemSpec::new(mesh, m, NFunctionMode::IntegralForm);
        spec.epsilon = 0.25;
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let u = random_dirichlet(&spec.mesh, &mut rng);
        let split = assemble_split(&u, &spec, None).unwrap();
        let full = assemble_residual(&u, &spec, None).unwrap();
        let mut spec0 = spec.clone();
        spec0.epsilon = 0.0;
        let r0 = assemble_residual(&u, &spec0, None).unwrap();
        for i in 0..full.values.len() {
            assert_eq!(full.values[i], split.base[i] + split.eps[i]);
            assert_eq!(r0.values[i], split.base[i]);
        }
    }

    #[test]
    fn energy_examples() {
        let mut spec = linear_spec(128);
        let zero = Field::zeros(&spec.mesh);
        assert_eq!(energy(&zero, &spec).unwrap(), 0.0);

        let u = Field::interpolate(&spec.mesh, &ExprAst::parse("x").unwrap()).unwrap();
        // not Dirichlet-zero: energy of x on (0,1) needs boundary freedom,
        // so check the gradient modular directly through a shifted field.
        // ∫ H(|∇u|) = ∫ 1/2 = 0.5 regardless of boundary values; assemble via
        // a spec-free copy of the mesh by zeroing the source and using the
        // interior-independent integrand.
        let grad_qp = spec.mesh.gradient_magnitude_at_qp(&u);
        let ev =
            QpEvaluator::new(&spec.model, NFunctionMode::IntegralForm, &spec.mesh, 1e-12).unwrap();
        let mut acc = 0.0;
        for (k, (&w, &g)) in spec.mesh.qp_weights().iter().zip(&grad_qp).enumerate() {
            acc += w * ev.big_h(k, g).unwrap();
        }
        assert!((acc - 0.5).abs() < 1e-13);

        // J(x(1-x)) with f ≡ 1 vanishes in the continuum; discretely O(h²)
        spec.source = Some(SourceFn::Expr(ExprAst::parse("1").unwrap()));
        let bump = Field::interpolate(&spec.mesh, &ExprAst::parse("x*(1-x)").unwrap()).unwrap();
        let j = energy(&bump, &spec).unwrap();
        assert!(j.abs() < 2e-4, "{j}");
    }

    #[test]
    fn derivative_check_linear_is_exact() {
        let mut spec = linear_spec(24);
        spec.source = Some(SourceFn::Expr(ExprAst::parse("1 - t").unwrap()));
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let u = random_dirichlet(&spec.mesh, &mut rng);
        let v = random_dirichlet(&spec.mesh, &mut rng);
        let rep = derivative_check(&u, &v, &spec, 1e-5).unwrap();
        assert!(rep.passed, "{rep:?}");
        // quadratic energy: agreement at the roundoff level
        let detail = &rep.worst_sample;
        let vals: Vec<f64> = detail
            .split(|c| c == '=' || c == ',')
            .filter_map(|s| s.trim().parse().ok())
            .collect();
        assert!((vals[0] - vals[1]).abs() <= 1e-10 * (1.0 + vals[1].abs()), "{detail}");

        let zero = Field::zeros(&spec.mesh);
        let rep0 = derivative_check(&u, &zero, &spec, 1e-5).unwrap();
        assert!(rep0.passed);
    }

    #[test]
    fn derivative_check_nonlinear_model() {
        let mesh = build_interval_mesh(0.0, 1.0, 24).unwrap();
        let m = model("2", "3", "x", Coupling::Gradient);
        let mut spec = ProblemSpec::new(mesh, m, NFunctionMode::IntegralForm);
        spec.source = Some(SourceFn::Expr(ExprAst::parse("1 + t^2").unwrap()));
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let u = random_dirichlet(&spec.mesh, &mut rng);
        let v = random_dirichlet(&spec.mesh, &mut rng);
        let rep = derivative_check(&u, &v, &spec, 1e-5).unwrap();
        assert!(rep.passed, "{rep:?}");
    }

    #[test]
    fn monotonicity_examples() {
        let spec = linear_spec(16);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let u = random_dirichlet(&spec.mesh, &mut rng);
        let rep_same = monotonicity_check(&u, &u, &spec).unwrap();
        assert!(rep_same.passed);

        for _ in 0..10 {
            let a = random_dirichlet(&spec.mesh, &mut rng);
            let b = random_dirichlet(&spec.mesh, &mut rng);
            let rep = monotonicity_check(&a, &b, &spec).unwrap();
            assert!(rep.passed, "{rep:?}");
        }
    }

    #[test]
    fn monotonicity_linear_halving() {
        // p≡q≡2, μ≡0: LHS = ∫|∇(u−v)|², RHS = ∫|∇(u−v)|²/2
        let spec = linear_spec(16);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let u = random_dirichlet(&spec.mesh, &mut rng);
        let v = random_dirichlet(&spec.mesh, &mut rng);
        let pure = spec.operator_only();
        let ru = assemble_residual(&u, &pure, None).unwrap();
        let rv = assemble_residual(&v, &pure, None).unwrap();
        let mut d = Field {
            values: u.values.iter().zip(&v.values).map(|(a, b)| a - b).collect(),
        };
        d.project_dirichlet(&spec.mesh);
        let lhs: f64 = ru
            .values
            .iter()
            .zip(&rv.values)
            .zip(&ru.interior)
            .map(|((a, b), &i)| (a - b) * d.values[i])
            .sum();
        let g2: f64 = spec
            .mesh
            .gradient(&d)
            .iter()
            .zip(spec.mesh.element_measures())
            .map(|(g, m)| (g[0] * g[0] + g[1] * g[1]) * m)
            .sum();
        assert!((lhs - g2).abs() < 1e-12 * (1.0 + g2));
    }

    #[test]
    fn coercivity_on_unit_sphere() {
        let spec = linear_spec(32);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut u = random_dirichlet(&spec.mesh, &mut rng);
        let norm = modular::luxemburg_norm(
            &spec.mesh.gradient_magnitude_at_qp(&u),
            &spec.model,
            NFunctionMode::IntegralForm,
            &spec.mesh,
            1e-10,
        )
        .unwrap();
        for v in u.values.iter_mut() {
            *v /= norm.value;
        }
        let rep = coercivity_check(&u, &spec).unwrap();
        assert!(rep.passed, "{rep:?}");
        // for p≡q≡2, μ≡0 the pairing on the unit sphere is exactly 2ρ = 2
        assert!(rep.worst_sample.contains("bound=1") || rep.worst_margin > 0.4, "{rep:?}");
        let zero = Field::zeros(&spec.mesh);
        assert!(coercivity_check(&zero, &spec).is_err());
    }

    #[test]
    fn linear_residual_matrix_is_symmetric() {
        let spec = linear_spec(10);
        let interior = spec.mesh.interior_nodes();
        let n = interior.len();
        let mut cols = Vec::with_capacity(n);
        for &node in &interior {
            let mut e = Field::zeros(&spec.mesh);
            e.values[node] = 1.0;
            cols.push(assemble_residual(&e, &spec, None).unwrap().values);
        }
        for i in 0..n {
            for j in 0..n {
                assert!((cols[i][j] - cols[j][i]).abs() < 1e-13);
            }
        }
    }

    #[test]
    fn frozen_consistency_bitwise_for_t_independent() {
        let mesh = build_interval_mesh(0.0, 1.0, 16).unwrap();
        let m = model("2 + x/2", "3", "x", Coupling::Gradient);
        let mut spec = ProblemSpec::new(mesh, m, NFunctionMode::IntegralForm);
        spec.source = Some(SourceFn::Expr(ExprAst::parse("1").unwrap()));
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let u = random_dirichlet(&spec.mesh, &mut rng);
        let w = random_dirichlet(&spec.mesh, &mut rng);
        let plain = assemble_residual(&u, &spec, None).unwrap();
        let frozen = assemble_residual(&u, &spec, Some(&w)).unwrap();
        assert_eq!(plain.values, frozen.values);
    }

    #[test]
    fn solution_coupling_uses_value_argument() {
        let mesh = build_interval_mesh(0.0, 1.0, 8).unwrap();
        let m = model("2 + 1/(1+t^2)", "3", "0", Coupling::Solution);
        let spec = ProblemSpec::new(mesh, m, NFunctionMode::DirectForm);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let u = random_dirichlet(&spec.mesh, &mut rng);
        let w = random_dirichlet(&spec.mesh, &mut rng);
        let plain = assemble_residual(&u, &spec, None).unwrap();
        let frozen = assemble_residual(&u, &spec, Some(&w)).unwrap();
        assert_ne!(plain.values, frozen.values);
    }
}
