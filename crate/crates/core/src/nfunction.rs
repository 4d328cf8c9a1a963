//! The generalized N-function of the double phase operator and its calculus:
//! density, integral/direct values, complementary (convex conjugate) function,
//! the density-to-value ratio, the Sobolev conjugate, and sampling-based
//! hypothesis validation.
//!
//! Two constructions are exposed. In integral form the N-function is
//! `H(x,t) = ∫₀ᵗ h(x,s) ds` with density
//! `h(x,s) = s^{p(x,s)-1} + μ(x) s^{q(x,s)-1}` and `h(x,0) = 0`; in direct
//! form it is `H(x,t) = t^{p(x,t)} + μ(x) t^{q(x,t)}` with the exponents
//! evaluated at the given scalar. The two differ by bounded factors only, but
//! not numerically, so the mode is part of every problem configuration.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::expr::{Binding, EvalError, ExprAst, Var};
use crate::quad::{self, QuadError};
use crate::report::Report;

/// A point of the (at most two-dimensional) domain. In 1D `y` is zero.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub fn new(x: f64, y: f64) -> Self {
        Point { x, y }
    }

    pub fn x1(x: f64) -> Self {
        Point { x, y: 0.0 }
    }
}

/// What scalar the exponents are coupled to when the model is used inside an
/// operator: the gradient magnitude, the solution value, or nothing.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Coupling {
    Gradient,
    Solution,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NFunctionMode {
    IntegralForm,
    DirectForm,
}

/// Cached exponent bounds, either declared in the configuration or estimated
/// by sampled optimization with a 1% safety inflation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExponentBounds {
    pub p_minus: f64,
    pub p_plus: f64,
    pub q_minus: f64,
    pub q_plus: f64,
}

#[derive(Debug, Clone, Error)]
pub enum NfError {
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Quad(#[from] QuadError),
    #[error("{what}: bracket growth exceeded overflow guard")]
    BracketOverflow { what: &'static str },
    #[error("{0}")]
    InvalidArg(String),
}

/// Exponent functions `p(x,t)`, `q(x,t)`, weight `μ(x)` and the coupling mode.
#[derive(Debug, Clone)]
pub struct ExponentModel {
    p: ExprAst,
    q: ExprAst,
    mu: ExprAst,
    coupling: Coupling,
    dimension: usize,
    bounds: ExponentBounds,
    t_independent: bool,
}

/// Sampling ranges and counts for bound estimation and hypothesis validation.
#[derive(Debug, Clone)]
pub struct SamplerConfig {
    pub n_x: usize,
    pub n_t: usize,
    pub t_max: f64,
    pub seed: u64,
    pub x_range: (f64, f64),
    pub y_range: (f64, f64),
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            n_x: 200,
            n_t: 128,
            t_max: 1e3,
            seed: 0,
            x_range: (0.0, 1.0),
            y_range: (0.0, 1.0),
        }
    }
}

const HYP_TOL: f64 = 1e-9;

impl ExponentModel {
    /// Build a model; bounds are estimated over the unit box when not declared.
    pub fn new(
        p: ExprAst,
        q: ExprAst,
        mu: ExprAst,
        coupling: Coupling,
        dimension: usize,
        declared: Option<ExponentBounds>,
    ) -> Result<Self, NfError> {
        Self::with_domain(p, q, mu, coupling, dimension, declared, (0.0, 1.0), (0.0, 1.0))
    }

    #[allow(clippy::too_many_arguments)]
    pub fn with_domain(
        p: ExprAst,
        q: ExprAst,
        mu: ExprAst,
        coupling: Coupling,
        dimension: usize,
        declared: Option<ExponentBounds>,
        x_range: (f64, f64),
        y_range: (f64, f64),
    ) -> Result<Self, NfError> {
        if dimension < 1 {
            return Err(NfError::InvalidArg("dimension must be >= 1".into()));
        }
        let t_independent = !p.uses_var(Var::T) && !q.uses_var(Var::T);
        let mut model = ExponentModel {
            p,
            q,
            mu,
            coupling,
            dimension,
            bounds: ExponentBounds {
                p_minus: 0.0,
                p_plus: 0.0,
                q_minus: 0.0,
                q_plus: 0.0,
            },
            t_independent,
        };
        model.bounds = match declared {
            Some(b) => b,
            None => model.estimate_bounds(x_range, y_range)?,
        };
        Ok(model)
    }

    pub fn bounds(&self) -> ExponentBounds {
        self.bounds
    }

    pub fn coupling(&self) -> Coupling {
        self.coupling
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    /// True when neither exponent references `t`; freezing is then the identity.
    pub fn t_independent(&self) -> bool {
        self.t_independent
    }

    /// Same model under a different coupling (bounds carried over).
    pub fn with_coupling(&self, coupling: Coupling) -> ExponentModel {
        let mut m = self.clone();
        m.coupling = coupling;
        m
    }

    pub fn p_expr(&self) -> &ExprAst {
        &self.p
    }

    pub fn q_expr(&self) -> &ExprAst {
        &self.q
    }

    pub fn mu_expr(&self) -> &ExprAst {
        &self.mu
    }

    pub fn eval_p(&self, x: Point, t: f64) -> Result<f64, EvalError> {
        self.p.eval(&Binding::new().x(x.x).y(x.y).t(t))
    }

    pub fn eval_q(&self, x: Point, t: f64) -> Result<f64, EvalError> {
        self.q.eval(&Binding::new().x(x.x).y(x.y).t(t))
    }

    /// `μ` may only depend on the spatial variables; a `t` reference errors.
    pub fn eval_mu(&self, x: Point) -> Result<f64, EvalError> {
        self.mu.eval(&Binding::new().x(x.x).y(x.y))
    }

    /// Density of the integral-form N-function:
    /// `h(x,t) = t^{p(x,t)-1} + μ(x) t^{q(x,t)-1}`, with `h(x,0) = 0`.
    pub fn eval_h(&self, x: Point, t: f64) -> Result<f64, NfError> {
        if t < 0.0 {
            return Err(NfError::InvalidArg(format!("h requires t >= 0, got {t}")));
        }
        if t == 0.0 {
            return Ok(0.0);
        }
        let p = self.eval_p(x, t)?;
        let q = self.eval_q(x, t)?;
        let mu = self.eval_mu(x)?;
        Ok(t.powf(p - 1.0) + mu * t.powf(q - 1.0))
    }

    /// Mode-dependent density: integral form uses `h`; direct form uses the
    /// `t`-derivative of `t^p + μ t^q` with the exponents held fixed.
    pub fn density(&self, mode: NFunctionMode, x: Point, t: f64) -> Result<f64, NfError> {
        match mode {
            NFunctionMode::IntegralForm => self.eval_h(x, t),
            NFunctionMode::DirectForm => {
                if t < 0.0 {
                    return Err(NfError::InvalidArg(format!(
                        "density requires t >= 0, got {t}"
                    )));
                }
                if t == 0.0 {
                    return Ok(0.0);
                }
                let p = self.eval_p(x, t)?;
                let q = self.eval_q(x, t)?;
                let mu = self.eval_mu(x)?;
                Ok(p * t.powf(p - 1.0) + mu * q * t.powf(q - 1.0))
            }
        }
    }

    /// N-function value. Integral form integrates the density adaptively to
    /// absolute tolerance `quad_tol * (1 + result)`; when the exponents do not
    /// reference `t` the antiderivative `t^p/p + μ t^q/q` is exact and used
    /// directly.
    pub fn eval_big_h(
        &self,
        mode: NFunctionMode,
        x: Point,
        t: f64,
        quad_tol: f64,
    ) -> Result<f64, NfError> {
        if t < 0.0 {
            return Err(NfError::InvalidArg(format!("H requires t >= 0, got {t}")));
        }
        if t == 0.0 {
            return Ok(0.0);
        }
        match mode {
            NFunctionMode::DirectForm => {
                let p = self.eval_p(x, t)?;
                let q = self.eval_q(x, t)?;
                let mu = self.eval_mu(x)?;
                Ok(t.powf(p) + mu * t.powf(q))
            }
            NFunctionMode::IntegralForm => {
                if self.t_independent {
                    let p = self.eval_p(x, t)?;
                    let q = self.eval_q(x, t)?;
                    let mu = self.eval_mu(x)?;
                    return Ok(t.powf(p) / p + mu * t.powf(q) / q);
                }
                let v = quad::integrate(|s| self.eval_h(x, s), 0.0, t, quad_tol)?;
                Ok(v)
            }
        }
    }

    /// Complementary function `H̃(x,s) = sup_{τ≥0} (sτ − H(x,τ))`, computed by
    /// solving the stationarity equation `h(x,τ*) = s` with bisection (the
    /// density is nondecreasing) and returning `sτ* − H(x,τ*)`.
    pub fn conjugate(
        &self,
        mode: NFunctionMode,
        x: Point,
        s: f64,
        tol: f64,
    ) -> Result<f64, NfError> {
        if s < 0.0 {
            return Err(NfError::InvalidArg(format!(
                "conjugate requires s >= 0, got {s}"
            )));
        }
        if s == 0.0 {
            return Ok(0.0);
        }
        let tau = self.invert_density(mode, x, s, tol)?;
        let value = s * tau - self.eval_big_h(mode, x, tau, tol.min(1e-10))?;
        Ok(value.max(0.0))
    }

    fn invert_density(
        &self,
        mode: NFunctionMode,
        x: Point,
        s: f64,
        tol: f64,
    ) -> Result<f64, NfError> {
        let mut hi = 1.0_f64;
        while self.density(mode, x, hi)? < s {
            hi *= 2.0;
            if hi > 1e150 {
                return Err(NfError::BracketOverflow { what: "conjugate" });
            }
        }
        let mut lo = 0.0_f64;
        // tolerance relative to the stationary point itself (hi shrinks onto it)
        for _ in 0..200 {
            if hi - lo <= tol * hi {
                break;
            }
            let mid = 0.5 * (lo + hi);
            if self.density(mode, x, mid)? < s {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        Ok(0.5 * (lo + hi))
    }

    /// `t·h(x,t) / H(x,t)`; lies in `[p⁻, q⁺]` for valid models.
    pub fn ratio(&self, mode: NFunctionMode, x: Point, t: f64) -> Result<f64, NfError> {
        if t <= 0.0 {
            return Err(NfError::InvalidArg(format!(
                "ratio undefined at t = {t}"
            )));
        }
        let num = t * self.density(mode, x, t)?;
        let den = self.eval_big_h(mode, x, t, 1e-12)?;
        if den == 0.0 {
            return Err(NfError::InvalidArg(format!(
                "H(x,{t}) underflowed to zero"
            )));
        }
        Ok(num / den)
    }

    /// `H(x, H⁻¹(x,1)·t)` capped construction used by the Sobolev conjugate.
    fn h_hat(
        &self,
        mode: NFunctionMode,
        x: Point,
        h_inv_1: f64,
        t: f64,
        tol: f64,
    ) -> Result<f64, NfError> {
        if t < 1.0 {
            Ok(t)
        } else {
            let scaled = self.eval_big_h(mode, x, h_inv_1 * t, tol)?;
            Ok(2.0 * scaled.max(2.0 * t - 1.0) - 1.0)
        }
    }

    fn big_h_inverse_at_one(
        &self,
        mode: NFunctionMode,
        x: Point,
        tol: f64,
    ) -> Result<f64, NfError> {
        let mut hi = 1.0_f64;
        while self.eval_big_h(mode, x, hi, tol)? < 1.0 {
            hi *= 2.0;
            if hi > 1e150 {
                return Err(NfError::BracketOverflow { what: "H^{-1}(1)" });
            }
        }
        let mut lo = 0.0_f64;
        for _ in 0..200 {
            if hi - lo <= tol * hi.max(1e-30) {
                break;
            }
            let mid = 0.5 * (lo + hi);
            if self.eval_big_h(mode, x, mid, tol)? < 1.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        Ok(0.5 * (lo + hi))
    }

    /// `N(x,s) = (∫₀^s (τ/Ĥ(x,τ))^{1/(d-1)} dτ)^{1/d'}`. On `[0,1]` the
    /// integrand is identically one, so that part is exact.
    fn sobolev_n(
        &self,
        mode: NFunctionMode,
        x: Point,
        h_inv_1: f64,
        s: f64,
        tol: f64,
    ) -> Result<f64, NfError> {
        let d = self.dimension as f64;
        let inv_dm1 = 1.0 / (d - 1.0);
        let mut integral = s.min(1.0);
        if s > 1.0 {
            integral += quad::integrate(
                |tau| {
                    let hh = self.h_hat(mode, x, h_inv_1, tau, tol)?;
                    Ok::<_, NfError>((tau / hh).powf(inv_dm1))
                },
                1.0,
                s,
                tol,
            )?;
        }
        // exponent 1/d' with d' = d/(d-1)
        Ok(integral.powf((d - 1.0) / d))
    }

    /// Sobolev conjugate `H_*(x,t) = Ĥ(x, N⁻¹(x,t))`; requires `d ≥ 2`.
    pub fn sobolev_conjugate(
        &self,
        mode: NFunctionMode,
        x: Point,
        t: f64,
        tol: f64,
    ) -> Result<f64, NfError> {
        if self.dimension < 2 {
            return Err(NfError::InvalidArg(
                "sobolev_conjugate requires dimension >= 2".into(),
            ));
        }
        if t < 0.0 {
            return Err(NfError::InvalidArg(format!(
                "sobolev_conjugate requires t >= 0, got {t}"
            )));
        }
        if t == 0.0 {
            return Ok(0.0);
        }
        let h_inv_1 = self.big_h_inverse_at_one(mode, x, tol)?;
        // invert s ↦ N(x,s), nondecreasing
        let mut hi = 1.0_f64;
        while self.sobolev_n(mode, x, h_inv_1, hi, tol)? < t {
            hi *= 2.0;
            if hi > 1e150 {
                return Err(NfError::BracketOverflow { what: "N^{-1}" });
            }
        }
        let mut lo = 0.0_f64;
        for _ in 0..200 {
            if hi - lo <= tol * hi.max(1e-30) {
                break;
            }
            let mid = 0.5 * (lo + hi);
            if self.sobolev_n(mode, x, h_inv_1, mid, tol)? < t {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        self.h_hat(mode, x, h_inv_1, 0.5 * (lo + hi), tol)
    }

    // -- bounds estimation ---------------------------------------------------

    fn estimate_bounds(
        &self,
        x_range: (f64, f64),
        y_range: (f64, f64),
    ) -> Result<ExponentBounds, NfError> {
        let mut rng = ChaCha8Rng::seed_from_u64(0xB0);
        let mut p_min = f64::INFINITY;
        let mut p_max = f64::NEG_INFINITY;
        let mut q_min = f64::INFINITY;
        let mut q_max = f64::NEG_INFINITY;
        let mut visit = |this: &Self, x: Point, t: f64| -> Result<(), NfError> {
            let p = this.eval_p(x, t)?;
            let q = this.eval_q(x, t)?;
            p_min = p_min.min(p);
            p_max = p_max.max(p);
            q_min = q_min.min(q);
            q_max = q_max.max(q);
            Ok(())
        };
        let nx = 33;
        let nt = 65;
        for i in 0..=nx {
            let fx = i as f64 / nx as f64;
            let x = x_range.0 + fx * (x_range.1 - x_range.0);
            for j in 0..=(if self.dimension >= 2 { nx } else { 0 }) {
                let fy = j as f64 / nx as f64;
                let y = y_range.0 + fy * (y_range.1 - y_range.0);
                let pt = Point::new(x, y);
                for k in 0..=nt {
                    // log grid over [1e-6, 1e3] plus the endpoints 0 and 1
                    let t = match k {
                        0 => 0.0,
                        1 => 1.0,
                        _ => 10f64.powf(-6.0 + 9.0 * (k - 2) as f64 / (nt - 2) as f64),
                    };
                    visit(self, pt, t)?;
                }
            }
        }
        for _ in 0..4000 {
            let x = x_range.0 + rng.random::<f64>() * (x_range.1 - x_range.0);
            let y = if self.dimension >= 2 {
                y_range.0 + rng.random::<f64>() * (y_range.1 - y_range.0)
            } else {
                0.0
            };
            let t = 10f64.powf(rng.random_range(-6.0..3.0));
            visit(self, Point::new(x, y), t)?;
        }
        Ok(ExponentBounds {
            p_minus: p_min / 1.01,
            p_plus: p_max * 1.01,
            q_minus: q_min / 1.01,
            q_plus: q_max * 1.01,
        })
    }

    // -- hypothesis validation ------------------------------------------------

    /// Sampling-based verification of the structural hypotheses appropriate to
    /// the coupling mode. Failures are recorded in the reports, never thrown;
    /// estimated constants ride along in `worst_sample`. This is evidence, not
    /// proof.
    pub fn validate_hypotheses(&self, cfg: &SamplerConfig) -> Vec<Report> {
        match self.coupling {
            Coupling::Solution => self.validate_section4(cfg),
            _ => self.validate_section3(cfg),
        }
    }

    fn sample_points(&self, cfg: &SamplerConfig, rng: &mut ChaCha8Rng) -> Vec<Point> {
        (0..cfg.n_x)
            .map(|_| {
                let x = cfg.x_range.0 + rng.random::<f64>() * (cfg.x_range.1 - cfg.x_range.0);
                let y = if self.dimension >= 2 {
                    cfg.y_range.0 + rng.random::<f64>() * (cfg.y_range.1 - cfg.y_range.0)
                } else {
                    0.0
                };
                Point::new(x, y)
            })
            .collect()
    }

    fn validate_section3(&self, cfg: &SamplerConfig) -> Vec<Report> {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let points = self.sample_points(cfg, &mut rng);
        let d = self.dimension as f64;

        let mut h1 = Report::new("H1", HYP_TOL, false);
        let mut raw_p_min = f64::INFINITY;
        let mut raw_q_max = f64::NEG_INFINITY;
        for &pt in &points {
            for _ in 0..cfg.n_t {
                let t = sample_t(&mut rng, cfg.t_max);
                match (self.eval_p(pt, t), self.eval_q(pt, t)) {
                    (Ok(p), Ok(q)) => {
                        raw_p_min = raw_p_min.min(p);
                        raw_q_max = raw_q_max.max(q);
                        let margin = (p - 2.0).min(d - p).min(q - 2.0).min(q - p);
                        h1.record(margin, || format!("x={},y={},t={t}", pt.x, pt.y));
                    }
                    _ => h1.record(f64::NAN, || format!("x={},y={},t={t}", pt.x, pt.y)),
                }
            }
        }

        let (h2, h2p) = self.monotonicity_reports(cfg, &points);
        let h3 = self.lipschitz_report(cfg, &points, &mut rng);

        // strict inequality q⁺/p⁻ < 1 + 1/d, from raw sampled extrema
        let mut h4 = Report::new("H4", 0.0, false);
        let margin = 1.0 + 1.0 / d - raw_q_max / raw_p_min;
        h4.samples = 1;
        h4.passes = u64::from(margin > 0.0);
        h4.worst_margin = margin;
        h4.worst_sample = format!("q_plus={raw_q_max}, p_minus={raw_p_min}, d={d}");
        h4.passed = margin > 0.0;

        vec![h1, h2, h2p, h3, h4]
    }

    fn monotonicity_reports(&self, cfg: &SamplerConfig, points: &[Point]) -> (Report, Report) {
        let mut h2 = Report::new("H2", HYP_TOL, false);
        let mut h2p = Report::new("H2prime", HYP_TOL, false);
        let n = cfg.n_t.max(8);
        for &pt in points {
            let mut base_low: Option<(f64, f64)> = None; // p(x,0), q(x,0)
            let mut prev: Option<(f64, f64)> = None;
            for k in 0..n {
                let t = k as f64 / (n - 1) as f64;
                match (self.eval_p(pt, t), self.eval_q(pt, t)) {
                    (Ok(p), Ok(q)) => {
                        let (p0, q0) = *base_low.get_or_insert((p, q));
                        // nonincreasing on [0,1]
                        if let Some((pp, pq)) = prev {
                            h2.record((pp - p).min(pq - q), || {
                                format!("x={},y={},t={t} (low range)", pt.x, pt.y)
                            });
                        }
                        // constancy on [0,1]
                        h2p.record(-((p - p0).abs().max((q - q0).abs())), || {
                            format!("x={},y={},t={t} (low range)", pt.x, pt.y)
                        });
                        prev = Some((p, q));
                    }
                    _ => h2.record(f64::NAN, || format!("x={},y={},t={t}", pt.x, pt.y)),
                }
            }
            let mut prev_hi: Option<(f64, f64)> = None;
            for k in 0..n {
                let t = 10f64.powf(k as f64 / (n - 1) as f64 * cfg.t_max.log10());
                match (self.eval_p(pt, t), self.eval_q(pt, t)) {
                    (Ok(p), Ok(q)) => {
                        if let Some((pp, pq)) = prev_hi {
                            // nondecreasing on [1, t_max]
                            let m = (p - pp).min(q - pq);
                            h2.record(m, || format!("x={},y={},t={t} (high range)", pt.x, pt.y));
                            h2p.record(m, || format!("x={},y={},t={t} (high range)", pt.x, pt.y));
                        }
                        prev_hi = Some((p, q));
                    }
                    _ => h2.record(f64::NAN, || format!("x={},y={},t={t}", pt.x, pt.y)),
                }
            }
        }
        (h2, h2p)
    }

    fn lipschitz_report(
        &self,
        cfg: &SamplerConfig,
        points: &[Point],
        rng: &mut ChaCha8Rng,
    ) -> Report {
        let mut h3 = Report::new("H3", HYP_TOL, false);
        let mut c_p = 0.0_f64;
        let mut c_q = 0.0_f64;
        let mut c_mu = 0.0_f64;
        let span = (cfg.x_range.1 - cfg.x_range.0).abs().max(1e-12);
        for &a in points {
            // nonnegativity of the weight
            match self.eval_mu(a) {
                Ok(mu) => h3.record(mu, || format!("mu at x={},y={}", a.x, a.y)),
                Err(_) => h3.record(f64::NAN, || format!("mu at x={},y={}", a.x, a.y)),
            }
            let b = Point::new(
                cfg.x_range.0 + rng.random::<f64>() * (cfg.x_range.1 - cfg.x_range.0),
                if self.dimension >= 2 {
                    cfg.y_range.0 + rng.random::<f64>() * (cfg.y_range.1 - cfg.y_range.0)
                } else {
                    0.0
                },
            );
            let dist = ((a.x - b.x).powi(2) + (a.y - b.y).powi(2)).sqrt();
            if dist < 1e-3 * span {
                continue;
            }
            let t = sample_t(rng, cfg.t_max);
            if let (Ok(pa), Ok(pb), Ok(qa), Ok(qb), Ok(ma), Ok(mb)) = (
                self.eval_p(a, t),
                self.eval_p(b, t),
                self.eval_q(a, t),
                self.eval_q(b, t),
                self.eval_mu(a),
                self.eval_mu(b),
            ) {
                c_p = c_p.max((pa - pb).abs() / dist);
                c_q = c_q.max((qa - qb).abs() / dist);
                c_mu = c_mu.max((ma - mb).abs() / dist);
            }
        }
        h3.worst_sample = format!("c_p~{c_p:.6}, c_q~{c_q:.6}, c_mu~{c_mu:.6}; {}", h3.worst_sample);
        h3
    }

    fn validate_section4(&self, cfg: &SamplerConfig) -> Vec<Report> {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let points = self.sample_points(cfg, &mut rng);
        let d = self.dimension as f64;

        // (i): d < p ≤ q, q bounded; strict on the p − d side
        let mut h1 = Report::new("H1", HYP_TOL, false);
        let mut strict_min = f64::INFINITY;
        for &pt in &points {
            for _ in 0..cfg.n_t {
                let t = sample_t(&mut rng, cfg.t_max);
                match (self.eval_p(pt, t), self.eval_q(pt, t)) {
                    (Ok(p), Ok(q)) => {
                        strict_min = strict_min.min(p - d);
                        h1.record((p - d).min(q - p), || {
                            format!("x={},y={},t={t}", pt.x, pt.y)
                        });
                    }
                    _ => h1.record(f64::NAN, || format!("x={},y={},t={t}", pt.x, pt.y)),
                }
            }
        }
        if strict_min <= 0.0 {
            h1.passed = false;
        }

        // (ii): Lipschitz dependence on t
        let mut h1t = Report::new("H1_lipschitz_t", HYP_TOL, false);
        let mut c_p = 0.0_f64;
        let mut c_q = 0.0_f64;
        for &pt in &points {
            let t1 = sample_t(&mut rng, cfg.t_max);
            let t2 = sample_t(&mut rng, cfg.t_max);
            if (t1 - t2).abs() < 1e-9 {
                continue;
            }
            if let (Ok(p1), Ok(p2), Ok(q1), Ok(q2)) = (
                self.eval_p(pt, t1),
                self.eval_p(pt, t2),
                self.eval_q(pt, t1),
                self.eval_q(pt, t2),
            ) {
                c_p = c_p.max((p1 - p2).abs() / (t1 - t2).abs());
                c_q = c_q.max((q1 - q2).abs() / (t1 - t2).abs());
                h1t.record(if c_p.is_finite() && c_q.is_finite() { 1.0 } else { f64::NAN }, || {
                    format!("x={},t1={t1},t2={t2}", pt.x)
                });
            }
        }
        h1t.worst_sample = format!("c_p~{c_p:.6}, c_q~{c_q:.6}");

        let mut h3 = Report::new("H3", HYP_TOL, false);
        for &pt in &points {
            match self.eval_mu(pt) {
                Ok(mu) => h3.record(mu, || format!("mu at x={},y={}", pt.x, pt.y)),
                Err(_) => h3.record(f64::NAN, || format!("mu at x={},y={}", pt.x, pt.y)),
            }
        }

        vec![h1, h1t, h3]
    }
}

/// Log-uniform on `[1e-6, t_max]`, exercising both sides of t = 1.
fn sample_t(rng: &mut ChaCha8Rng, t_max: f64) -> f64 {
    10f64.powf(rng.random_range(-6.0..t_max.log10()))
}
