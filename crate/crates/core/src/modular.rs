//! Modulars `ρ_H(u) = ∫ H(x,u) dx`, Luxemburg norms, and the Hölder pairing,
//! over discrete magnitude fields sampled at the mesh quadrature points.
//!
//! Quadrature summation runs in ascending element order so results are
//! bitwise reproducible.

use thiserror::Error;

use crate::mesh_fem::Mesh;
use crate::nfunction::{ExponentModel, NFunctionMode, NfError, Point};
use crate::report::Report;

#[derive(Debug, Clone, Error)]
pub enum ModularError {
    #[error(transparent)]
    NFunction(#[from] NfError),
    #[error("samples ({found}) do not match quadrature points ({expected})")]
    SizeMismatch { found: usize, expected: usize },
    #[error("{0}")]
    InvalidArg(String),
}

/// `∫ H(x, |u|) dx` with a crude bound on the quadrature error committed in
/// evaluating `H` itself (the mesh rule error is the caller's business).
#[derive(Debug, Clone, Copy)]
pub struct ModularValue {
    pub value: f64,
    pub quadrature_error_estimate: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct LuxemburgNorm {
    pub value: f64,
    pub bisection_iterations: u32,
}

/// Per-quadrature-point evaluator. `μ` never depends on `t` and is always
/// cached; the exponents are cached too when they do not reference `t`, which
/// makes the integral-form antiderivative closed-form.
pub(crate) struct QpEvaluator<'a> {
    model: &'a ExponentModel,
    mode: NFunctionMode,
    points: &'a [Point],
    mu: Vec<f64>,
    pq: Option<(Vec<f64>, Vec<f64>)>,
    quad_tol: f64,
}

impl<'a> QpEvaluator<'a> {
    pub fn new(
        model: &'a ExponentModel,
        mode: NFunctionMode,
        mesh: &'a Mesh,
        quad_tol: f64,
    ) -> Result<Self, NfError> {
        let points = mesh.qp_points();
        let mut mu = Vec::with_capacity(points.len());
        for &p in points {
            mu.push(model.eval_mu(p)?);
        }
        let pq = if model.t_independent() {
            let mut ps = Vec::with_capacity(points.len());
            let mut qs = Vec::with_capacity(points.len());
            for &p in points {
                ps.push(model.eval_p(p, 0.0)?);
                qs.push(model.eval_q(p, 0.0)?);
            }
            Some((ps, qs))
        } else {
            None
        };
        Ok(QpEvaluator {
            model,
            mode,
            points,
            mu,
            pq,
            quad_tol,
        })
    }

    pub fn big_h(&self, k: usize, t: f64) -> Result<f64, NfError> {
        if t == 0.0 {
            return Ok(0.0);
        }
        if let Some((ps, qs)) = &self.pq {
            let (p, q, mu) = (ps[k], qs[k], self.mu[k]);
            return Ok(match self.mode {
                NFunctionMode::DirectForm => t.powf(p) + mu * t.powf(q),
                NFunctionMode::IntegralForm => t.powf(p) / p + mu * t.powf(q) / q,
            });
        }
        self.model.eval_big_h(self.mode, self.points[k], t, self.quad_tol)
    }

    fn density(&self, k: usize, t: f64) -> Result<f64, NfError> {
        if t == 0.0 {
            return Ok(0.0);
        }
        if let Some((ps, qs)) = &self.pq {
            let (p, q, mu) = (ps[k], qs[k], self.mu[k]);
            return Ok(match self.mode {
                NFunctionMode::DirectForm => {
                    p * t.powf(p - 1.0) + mu * q * t.powf(q - 1.0)
                }
                NFunctionMode::IntegralForm => t.powf(p - 1.0) + mu * t.powf(q - 1.0),
            });
        }
        self.model.density(self.mode, self.points[k], t)
    }

    /// Complementary function through the stationarity equation, same scheme
    /// as [`ExponentModel::conjugate`] but reusing cached exponents.
    pub fn conjugate(&self, k: usize, s: f64, tol: f64) -> Result<f64, NfError> {
        if s == 0.0 {
            return Ok(0.0);
        }
        let mut hi = 1.0_f64;
        while self.density(k, hi)? < s {
            hi *= 2.0;
            if hi > 1e150 {
                return Err(NfError::BracketOverflow { what: "conjugate" });
            }
        }
        let mut lo = 0.0_f64;
        for _ in 0..200 {
            if hi - lo <= tol * hi {
                break;
            }
            let mid = 0.5 * (lo + hi);
            if self.density(k, mid)? < s {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let tau = 0.5 * (lo + hi);
        Ok((s * tau - self.big_h(k, tau)?).max(0.0))
    }
}

fn check_sizes(samples: &[f64], mesh: &Mesh) -> Result<(), ModularError> {
    if samples.len() != mesh.n_qp() {
        return Err(ModularError::SizeMismatch {
            found: samples.len(),
            expected: mesh.n_qp(),
        });
    }
    Ok(())
}

/// `ρ_H` of a magnitude field sampled at the quadrature points. Pass nodal
/// values for `ρ_H(u)` or per-element gradient magnitudes for the gradient
/// modular; absolute values are applied here.
pub fn modular(
    samples: &[f64],
    model: &ExponentModel,
    mode: NFunctionMode,
    mesh: &Mesh,
    quad_tol: f64,
) -> Result<ModularValue, ModularError> {
    check_sizes(samples, mesh)?;
    let ev = QpEvaluator::new(model, mode, mesh, quad_tol)?;
    let mut value = 0.0;
    let mut err = 0.0;
    for (k, (&s, &w)) in samples.iter().zip(mesh.qp_weights()).enumerate() {
        let h = ev.big_h(k, s.abs())?;
        value += w * h;
        let point_err = if ev.pq.is_some() {
            f64::EPSILON * h
        } else {
            quad_tol * (1.0 + h)
        };
        err += w * point_err;
    }
    Ok(ModularValue {
        value,
        quadrature_error_estimate: err,
    })
}

fn rho(ev: &QpEvaluator, samples: &[f64], weights: &[f64], lambda: f64) -> Result<f64, NfError> {
    let mut acc = 0.0;
    for (k, (&s, &w)) in samples.iter().zip(weights).enumerate() {
        acc += w * ev.big_h(k, s.abs() / lambda)?;
    }
    Ok(acc)
}

fn rho_conjugate(
    ev: &QpEvaluator,
    samples: &[f64],
    weights: &[f64],
    lambda: f64,
    tol: f64,
) -> Result<f64, NfError> {
    let mut acc = 0.0;
    for (k, (&s, &w)) in samples.iter().zip(weights).enumerate() {
        acc += w * ev.conjugate(k, s.abs() / lambda, tol)?;
    }
    Ok(acc)
}

const MAX_BISECT: u32 = 200;

fn luxemburg_bisect(
    mut rho_at: impl FnMut(f64) -> Result<f64, NfError>,
    tol: f64,
) -> Result<LuxemburgNorm, ModularError> {
    let mut iterations = 0u32;
    let r1 = rho_at(1.0)?;
    if (r1 - 1.0).abs() <= tol {
        return Ok(LuxemburgNorm {
            value: 1.0,
            bisection_iterations: 0,
        });
    }
    // bracket [lo, hi] with ρ(u/lo) ≥ 1 ≥ ρ(u/hi)
    let (mut lo, mut hi);
    if r1 > 1.0 {
        lo = 1.0;
        hi = 2.0;
        while rho_at(hi)? > 1.0 {
            lo = hi;
            hi *= 2.0;
            iterations += 1;
            if hi > 1e200 {
                return Err(ModularError::InvalidArg(
                    "Luxemburg bracket exceeded overflow guard".into(),
                ));
            }
        }
    } else {
        hi = 1.0;
        lo = 0.5;
        while rho_at(lo)? < 1.0 {
            hi = lo;
            lo *= 0.5;
            iterations += 1;
            if lo < 1e-300 {
                return Err(ModularError::InvalidArg(
                    "Luxemburg bracket shrank to zero".into(),
                ));
            }
        }
    }
    let mut mid = 0.5 * (lo + hi);
    while iterations < MAX_BISECT {
        mid = 0.5 * (lo + hi);
        let r = rho_at(mid)?;
        iterations += 1;
        if (r - 1.0).abs() <= tol || (hi - lo) <= tol * mid {
            return Ok(LuxemburgNorm {
                value: mid,
                bisection_iterations: iterations,
            });
        }
        if r > 1.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(LuxemburgNorm {
        value: mid,
        bisection_iterations: iterations,
    })
}

/// Luxemburg norm `inf { λ : ρ_H(u/λ) ≤ 1 }` by bisection on the strictly
/// decreasing map `λ ↦ ρ(u/λ)`. A zero field short-circuits to zero.
pub fn luxemburg_norm(
    samples: &[f64],
    model: &ExponentModel,
    mode: NFunctionMode,
    mesh: &Mesh,
    tol: f64,
) -> Result<LuxemburgNorm, ModularError> {
    if !(tol > 0.0 && tol <= 1e-3) {
        return Err(ModularError::InvalidArg(format!(
            "tolerance must lie in (0, 1e-3], got {tol}"
        )));
    }
    check_sizes(samples, mesh)?;
    if samples.iter().all(|&s| s == 0.0) {
        return Ok(LuxemburgNorm {
            value: 0.0,
            bisection_iterations: 0,
        });
    }
    let ev = QpEvaluator::new(model, mode, mesh, (tol * 1e-3).min(1e-12))?;
    luxemburg_bisect(|l| rho(&ev, samples, mesh.qp_weights(), l), tol)
}

/// Luxemburg norm taken in the complementary function `H̃`.
pub fn luxemburg_norm_conjugate(
    samples: &[f64],
    model: &ExponentModel,
    mode: NFunctionMode,
    mesh: &Mesh,
    tol: f64,
) -> Result<LuxemburgNorm, ModularError> {
    if !(tol > 0.0 && tol <= 1e-3) {
        return Err(ModularError::InvalidArg(format!(
            "tolerance must lie in (0, 1e-3], got {tol}"
        )));
    }
    check_sizes(samples, mesh)?;
    if samples.iter().all(|&s| s == 0.0) {
        return Ok(LuxemburgNorm {
            value: 0.0,
            bisection_iterations: 0,
        });
    }
    let ev = QpEvaluator::new(model, mode, mesh, (tol * 1e-3).min(1e-12))?;
    let conj_tol = (tol * 1e-2).min(1e-9);
    luxemburg_bisect(
        |l| rho_conjugate(&ev, samples, mesh.qp_weights(), l, conj_tol),
        tol,
    )
}

/// Hölder-type pairing check: `|∫ uv| ≤ 2 ‖u‖_{L^H} ‖v‖_{L^H̃}`, slack
/// recorded relative to `1 + rhs`.
pub fn holder_pairing(
    u_samples: &[f64],
    v_samples: &[f64],
    model: &ExponentModel,
    mode: NFunctionMode,
    mesh: &Mesh,
) -> Result<Report, ModularError> {
    check_sizes(u_samples, mesh)?;
    check_sizes(v_samples, mesh)?;
    let tol = 1e-10;
    let lhs: f64 = u_samples
        .iter()
        .zip(v_samples)
        .zip(mesh.qp_weights())
        .map(|((u, v), w)| w * u * v)
        .sum::<f64>()
        .abs();
    let nu = luxemburg_norm(u_samples, model, mode, mesh, tol)?;
    let nv = luxemburg_norm_conjugate(v_samples, model, mode, mesh, tol)?;
    let rhs = 2.0 * nu.value * nv.value;
    let mut report = Report::new("holder", 1e-9, true);
    report.record((rhs - lhs) / (1.0 + rhs.abs()), || {
        format!("lhs={lhs}, norm_u={}, conj_norm_v={}", nu.value, nv.value)
    });
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expr::ExprAst;
    use crate::mesh_fem::{build_interval_mesh, Field};
    use crate::nfunction::Coupling;

    fn model(p: &str, q: &str, mu: &str) -> ExponentModel {
        ExponentModel::new(
            ExprAst::parse(p).unwrap(),
            ExprAst::parse(q).unwrap(),
            ExprAst::parse(mu).unwrap(),
            Coupling::None,
            1,
            None,
        )
        .unwrap()
    }

    #[test]
    fn modular_examples() {
        let mesh = build_interval_mesh(0.0, 1.0, 64).unwrap();
        let m = model("2", "2", "0");
        let u = Field::interpolate(&mesh, &ExprAst::parse("x").unwrap()).unwrap();
        let v = modular(
            &mesh.values_at_qp(&u),
            &m,
            NFunctionMode::DirectForm,
            &mesh,
            1e-12,
        )
        .unwrap();
        assert!((v.value - 1.0 / 3.0).abs() < 1e-4, "{}", v.value);

        let zero = vec![0.0; mesh.n_qp()];
        let v0 = modular(&zero, &m, NFunctionMode::DirectForm, &mesh, 1e-12).unwrap();
        assert_eq!(v0.value, 0.0);

        let m23 = model("2", "3", "1");
        let ones = vec![1.0; mesh.n_qp()];
        let v1 = modular(&ones, &m23, NFunctionMode::DirectForm, &mesh, 1e-12).unwrap();
        assert!((v1.value - 2.0).abs() < 1e-13);
    }

    #[test]
    fn luxemburg_examples() {
        let mesh = build_interval_mesh(0.0, 1.0, 32).unwrap();
        let m = model("2", "2", "0");
        let twos = vec![2.0; mesh.n_qp()];
        let direct = luxemburg_norm(&twos, &m, NFunctionMode::DirectForm, &mesh, 1e-10).unwrap();
        assert!((direct.value - 2.0).abs() < 1e-9, "{}", direct.value);
        let integral =
            luxemburg_norm(&twos, &m, NFunctionMode::IntegralForm, &mesh, 1e-10).unwrap();
        assert!((integral.value - 2f64.sqrt()).abs() < 1e-9);
        let zero = vec![0.0; mesh.n_qp()];
        let z = luxemburg_norm(&zero, &m, NFunctionMode::DirectForm, &mesh, 1e-10).unwrap();
        assert_eq!(z.value, 0.0);
        assert_eq!(z.bisection_iterations, 0);
    }

    #[test]
    fn tolerance_precondition() {
        let mesh = build_interval_mesh(0.0, 1.0, 4).unwrap();
        let m = model("2", "2", "0");
        let ones = vec![1.0; mesh.n_qp()];
        assert!(luxemburg_norm(&ones, &m, NFunctionMode::DirectForm, &mesh, 1e-2).is_err());
    }

    #[test]
    fn unit_ball_identity() {
        let mesh = build_interval_mesh(0.0, 1.0, 48).unwrap();
        let m = model("2", "3", "1 + x");
        let u = Field::interpolate(&mesh, &ExprAst::parse("sin(3*x) + 0.2").unwrap()).unwrap();
        let samples = mesh.values_at_qp(&u);
        for mode in [NFunctionMode::DirectForm, NFunctionMode::IntegralForm] {
            let n = luxemburg_norm(&samples, &m, mode, &mesh, 1e-10).unwrap();
            let scaled: Vec<f64> = samples.iter().map(|s| s / n.value).collect();
            let r = modular(&scaled, &m, mode, &mesh, 1e-12).unwrap();
            assert!((r.value - 1.0).abs() < 1e-7, "{}", r.value);
        }
    }

    #[test]
    fn holder_constant_fields() {
        let mesh = build_interval_mesh(0.0, 1.0, 16).unwrap();
        let m = model("2", "2", "0");
        let ones = vec![1.0; mesh.n_qp()];
        let rep = holder_pairing(&ones, &ones, &m, NFunctionMode::IntegralForm, &mesh).unwrap();
        // H = t²/2 is self-conjugate: ‖1‖ = ‖1‖_conj = 1/√2, equality up to tol
        assert!(rep.passed, "{rep:?}");
        assert!(rep.worst_margin.abs() < 1e-6, "{}", rep.worst_margin);

        let zero = vec![0.0; mesh.n_qp()];
        let rep0 = holder_pairing(&zero, &zero, &m, NFunctionMode::IntegralForm, &mesh).unwrap();
        assert!(rep0.passed);
    }

    #[test]
    fn conjugate_norm_against_closed_form() {
        // DirectForm p≡2, μ≡0: H = t², H̃(s) = s²/4, so ρ̃(v/λ) = (c/λ)²/4·|Ω|
        let mesh = build_interval_mesh(0.0, 1.0, 16).unwrap();
        let m = model("2", "2", "0");
        let threes = vec![3.0; mesh.n_qp()];
        let n =
            luxemburg_norm_conjugate(&threes, &m, NFunctionMode::DirectForm, &mesh, 1e-10)
                .unwrap();
        assert!((n.value - 1.5).abs() < 1e-8, "{}", n.value);
    }
}
