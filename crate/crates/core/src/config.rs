//! Line-oriented `key = value` run configuration with `[domain]`,
//! `[exponents]`, `[source]`, `[solver]` and `[output]` sections.
//! Expressions are quoted, `#` starts a comment, unknown keys are rejected
//! with their line number. Hypothesis pre-validation failures surface as
//! warnings; `--strict` promotes them to errors at the CLI layer.

use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::expr::{ExprAst, Var};
use crate::mesh_fem::{build_interval_mesh, build_rect_mesh, Mesh, MeshError};
use crate::nfunction::{
    Coupling, ExponentBounds, ExponentModel, NFunctionMode, NfError, SamplerConfig,
};
use crate::operator::{ProblemSpec, SourceFn};
use crate::solvers::{InitialGuess, SolveConfig, TruncationSign};
use crate::verify::Suite;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config: {0}")]
    Io(#[from] std::io::Error),
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("unknown key '{key}' at line {line}")]
    UnknownKey { key: String, line: usize },
    #[error("invalid value for '{key}' at line {line}: {message}")]
    Value {
        key: String,
        line: usize,
        message: String,
    },
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Mesh(#[from] MeshError),
    #[error(transparent)]
    Model(#[from] NfError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pipeline {
    Variational,
    Newton,
    Coupled,
    Multiplicity,
}

/// A fully resolved run configuration.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub mesh: Mesh,
    pub model: ExponentModel,
    pub mode: NFunctionMode,
    pub pipeline: Pipeline,
    pub sign: Option<TruncationSign>,
    pub source: Option<ExprAst>,
    pub r_expr: Option<ExprAst>,
    pub f0: Option<ExprAst>,
    pub eta_plus: Option<f64>,
    pub eta_minus: Option<f64>,
    pub field_expr: Option<ExprAst>,
    pub solve: SolveConfig,
    /// `initial_guess = file:PATH`, resolved against the mesh at run time
    pub initial_file: Option<PathBuf>,
    pub quad_tol: f64,
    pub seed: u64,
    pub suites: Vec<Suite>,
    pub n_samples: u64,
    pub out_solution: Option<PathBuf>,
    pub out_report: Option<PathBuf>,
    /// hypothesis pre-validation findings (warnings unless --strict)
    pub warnings: Vec<String>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig, ConfigError> {
        let text = std::fs::read_to_string(path)?;
        RunConfig::parse_str(&text)
    }

    pub fn parse_str(text: &str) -> Result<RunConfig, ConfigError> {
        let raw = RawConfig::parse(text)?;
        raw.resolve()
    }

    /// Assemble the problem instance this configuration describes.
    pub fn to_problem_spec(&self) -> ProblemSpec {
        let mut spec = ProblemSpec::new(self.mesh.clone(), self.model.clone(), self.mode);
        spec.source = self.source.clone().map(SourceFn::Expr);
        spec.r_expr = self.r_expr.clone();
        spec.f0 = self.f0.clone();
        spec.eta_plus = self.eta_plus;
        spec.eta_minus = self.eta_minus;
        spec.quad_tol = self.quad_tol;
        spec
    }
}

struct Entry {
    section: String,
    key: String,
    value: String,
    line: usize,
}

struct RawConfig {
    entries: Vec<Entry>,
}

/// Strip a trailing comment, respecting double quotes.
fn strip_comment(line: &str) -> &str {
    let mut in_quotes = false;
    for (i, c) in line.char_indices() {
        match c {
            '"' => in_quotes = !in_quotes,
            '#' if !in_quotes => return &line[..i],
            _ => {}
        }
    }
    line
}

impl RawConfig {
    fn parse(text: &str) -> Result<RawConfig, ConfigError> {
        let mut entries = Vec::new();
        let mut section = String::new();
        for (idx, raw_line) in text.lines().enumerate() {
            let line_no = idx + 1;
            let line = strip_comment(raw_line).trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[') {
                let Some(name) = name.strip_suffix(']') else {
                    return Err(ConfigError::Parse {
                        line: line_no,
                        message: "unterminated section header".into(),
                    });
                };
                let name = name.trim();
                if !matches!(name, "domain" | "exponents" | "source" | "solver" | "output") {
                    return Err(ConfigError::Parse {
                        line: line_no,
                        message: format!("unknown section '[{name}]'"),
                    });
                }
                section = name.to_string();
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(ConfigError::Parse {
                    line: line_no,
                    message: "expected 'key = value'".into(),
                });
            };
            if section.is_empty() {
                return Err(ConfigError::Parse {
                    line: line_no,
                    message: "key outside of any [section]".into(),
                });
            }
            entries.push(Entry {
                section: section.clone(),
                key: key.trim().to_string(),
                value: value.trim().to_string(),
                line: line_no,
            });
        }
        Ok(RawConfig { entries })
    }

    fn resolve(self) -> Result<RunConfig, ConfigError> {
        let mut b = Builder::default();
        for e in &self.entries {
            b.apply(e)?;
        }
        b.finish()
    }
}

fn unquote(v: &str) -> &str {
    let v = v.trim();
    if v.len() >= 2 && v.starts_with('"') && v.ends_with('"') {
        &v[1..v.len() - 1]
    } else {
        v
    }
}

fn parse_f64(e: &Entry) -> Result<f64, ConfigError> {
    unquote(&e.value).parse().map_err(|_| ConfigError::Value {
        key: e.key.clone(),
        line: e.line,
        message: format!("expected a number, got '{}'", e.value),
    })
}

fn parse_usize(e: &Entry) -> Result<usize, ConfigError> {
    unquote(&e.value).parse().map_err(|_| ConfigError::Value {
        key: e.key.clone(),
        line: e.line,
        message: format!("expected an integer, got '{}'", e.value),
    })
}

fn parse_expr(e: &Entry) -> Result<ExprAst, ConfigError> {
    ExprAst::parse(unquote(&e.value)).map_err(|err| ConfigError::Value {
        key: e.key.clone(),
        line: e.line,
        message: err.to_string(),
    })
}

#[derive(Default)]
struct Builder {
    kind: Option<String>,
    a: Option<f64>,
    b: Option<f64>,
    n: Option<usize>,
    lx: Option<f64>,
    ly: Option<f64>,
    nx: Option<usize>,
    ny: Option<usize>,
    p: Option<ExprAst>,
    q: Option<ExprAst>,
    mu: Option<ExprAst>,
    coupling: Option<Coupling>,
    mode: Option<NFunctionMode>,
    dimension: Option<usize>,
    p_minus: Option<f64>,
    p_plus: Option<f64>,
    q_minus: Option<f64>,
    q_plus: Option<f64>,
    f: Option<ExprAst>,
    r: Option<ExprAst>,
    f0: Option<ExprAst>,
    eta_plus: Option<f64>,
    eta_minus: Option<f64>,
    field: Option<ExprAst>,
    pipeline: Option<Pipeline>,
    sign: Option<TruncationSign>,
    solve: SolveConfig,
    initial_expr: Option<ExprAst>,
    initial_file: Option<PathBuf>,
    quad_tol: f64,
    seed: u64,
    suites: Option<Vec<Suite>>,
    n_samples: u64,
    out_solution: Option<PathBuf>,
    out_report: Option<PathBuf>,
}

impl Builder {
    fn apply(&mut self, e: &Entry) -> Result<(), ConfigError> {
        if self.quad_tol == 0.0 {
            self.quad_tol = 1e-10;
            self.n_samples = 10_000;
        }
        let unknown = || {
            Err(ConfigError::UnknownKey {
                key: e.key.clone(),
                line: e.line,
            })
        };
        match e.section.as_str() {
            "domain" => match e.key.as_str() {
                "kind" => self.kind = Some(unquote(&e.value).to_string()),
                "a" => self.a = Some(parse_f64(e)?),
                "b" => self.b = Some(parse_f64(e)?),
                "n" => self.n = Some(parse_usize(e)?),
                "lx" => self.lx = Some(parse_f64(e)?),
                "ly" => self.ly = Some(parse_f64(e)?),
                "nx" => self.nx = Some(parse_usize(e)?),
                "ny" => self.ny = Some(parse_usize(e)?),
                _ => return unknown(),
            },
            "exponents" => match e.key.as_str() {
                "p" => self.p = Some(parse_expr(e)?),
                "q" => self.q = Some(parse_expr(e)?),
                "mu" => self.mu = Some(parse_expr(e)?),
                "coupling" => {
                    self.coupling = Some(match unquote(&e.value) {
                        "gradient" => Coupling::Gradient,
                        "solution" => Coupling::Solution,
                        "none" => Coupling::None,
                        other => {
                            return Err(ConfigError::Value {
                                key: e.key.clone(),
                                line: e.line,
                                message: format!("unknown coupling '{other}'"),
                            })
                        }
                    })
                }
                "mode" => {
                    self.mode = Some(match unquote(&e.value) {
                        "integral" => NFunctionMode::IntegralForm,
                        "direct" => NFunctionMode::DirectForm,
                        other => {
                            return Err(ConfigError::Value {
                                key: e.key.clone(),
                                line: e.line,
                                message: format!("unknown mode '{other}'"),
                            })
                        }
                    })
                }
                "dimension" => self.dimension = Some(parse_usize(e)?),
                "p_minus" => self.p_minus = Some(parse_f64(e)?),
                "p_plus" => self.p_plus = Some(parse_f64(e)?),
                "q_minus" => self.q_minus = Some(parse_f64(e)?),
                "q_plus" => self.q_plus = Some(parse_f64(e)?),
                _ => return unknown(),
            },
            "source" => match e.key.as_str() {
                "f" => self.f = Some(parse_expr(e)?),
                "r" => self.r = Some(parse_expr(e)?),
                "f0" => self.f0 = Some(parse_expr(e)?),
                "eta_plus" => self.eta_plus = Some(parse_f64(e)?),
                "eta_minus" => self.eta_minus = Some(parse_f64(e)?),
                "field" => self.field = Some(parse_expr(e)?),
                _ => return unknown(),
            },
            "solver" => match e.key.as_str() {
                "pipeline" => {
                    self.pipeline = Some(match unquote(&e.value) {
                        "variational" => Pipeline::Variational,
                        "newton" => Pipeline::Newton,
                        "coupled" => Pipeline::Coupled,
                        "multiplicity" => Pipeline::Multiplicity,
                        other => {
                            return Err(ConfigError::Value {
                                key: e.key.clone(),
                                line: e.line,
                                message: format!("unknown pipeline '{other}'"),
                            })
                        }
                    })
                }
                "sign" => {
                    self.sign = Some(match unquote(&e.value) {
                        "plus" => TruncationSign::Plus,
                        "minus" => TruncationSign::Minus,
                        other => {
                            return Err(ConfigError::Value {
                                key: e.key.clone(),
                                line: e.line,
                                message: format!("unknown sign '{other}'"),
                            })
                        }
                    })
                }
                "max_outer" => self.solve.max_outer = parse_usize(e)?,
                "max_inner" => self.solve.max_inner = parse_usize(e)?,
                "max_newton" => self.solve.max_newton = parse_usize(e)?,
                "max_descent" => self.solve.max_descent = parse_usize(e)?,
                "residual_tol" => self.solve.residual_tol = parse_f64(e)?,
                "step_tol" => self.solve.step_tol = parse_f64(e)?,
                "armijo_c" => self.solve.armijo_c = parse_f64(e)?,
                "backtrack" => self.solve.backtrack_factor = parse_f64(e)?,
                "epsilon_stages" => {
                    let stages = parse_usize(e)?;
                    if stages == 0 {
                        return Err(ConfigError::Value {
                            key: e.key.clone(),
                            line: e.line,
                            message: "need at least one stage".into(),
                        });
                    }
                    self.solve.epsilon_schedule =
                        (0..stages).map(|k| 0.5f64.powi(k as i32)).collect();
                    self.solve.max_outer = self.solve.max_outer.max(stages);
                }
                "epsilon_schedule" => {
                    let mut schedule = Vec::new();
                    for part in unquote(&e.value).split(',') {
                        schedule.push(part.trim().parse::<f64>().map_err(|_| {
                            ConfigError::Value {
                                key: e.key.clone(),
                                line: e.line,
                                message: format!("bad schedule entry '{part}'"),
                            }
                        })?);
                    }
                    self.solve.max_outer = self.solve.max_outer.max(schedule.len());
                    self.solve.epsilon_schedule = schedule;
                }
                "initial_guess" => {
                    let v = unquote(&e.value);
                    if v == "zero" {
                        self.initial_expr = None;
                        self.initial_file = None;
                    } else if let Some(path) = v.strip_prefix("file:") {
                        self.initial_file = Some(PathBuf::from(path));
                    } else {
                        self.initial_expr = Some(parse_expr(e)?);
                    }
                }
                "quad_tol" => self.quad_tol = parse_f64(e)?,
                "seed" => self.seed = parse_usize(e)? as u64,
                "suites" => {
                    let mut suites = Vec::new();
                    for part in unquote(&e.value).split(',') {
                        let name = part.trim();
                        suites.push(Suite::parse(name).ok_or_else(|| ConfigError::Value {
                            key: e.key.clone(),
                            line: e.line,
                            message: format!("unknown suite '{name}'"),
                        })?);
                    }
                    self.suites = Some(suites);
                }
                "n_samples" => self.n_samples = parse_usize(e)? as u64,
                _ => return unknown(),
            },
            "output" => match e.key.as_str() {
                "solution" => self.out_solution = Some(PathBuf::from(unquote(&e.value))),
                "report" => self.out_report = Some(PathBuf::from(unquote(&e.value))),
                _ => return unknown(),
            },
            _ => unreachable!("sections validated during parse"),
        }
        Ok(())
    }

    fn finish(mut self) -> Result<RunConfig, ConfigError> {
        if self.quad_tol == 0.0 {
            self.quad_tol = 1e-10;
            self.n_samples = 10_000;
        }
        // mesh
        let kind = self.kind.clone().unwrap_or_else(|| "interval".into());
        let mesh = match kind.as_str() {
            "interval" => build_interval_mesh(
                self.a.unwrap_or(0.0),
                self.b.unwrap_or(1.0),
                self.n.unwrap_or(64),
            )?,
            "rect" => build_rect_mesh(
                self.lx.unwrap_or(1.0),
                self.ly.unwrap_or(1.0),
                self.nx.unwrap_or(16),
                self.ny.unwrap_or(16),
            )?,
            other => {
                return Err(ConfigError::Invalid(format!(
                    "unknown domain kind '{other}'"
                )))
            }
        };
        let dim = mesh.dim();
        let spatial: &[Var] = if dim == 1 {
            &[Var::X]
        } else {
            &[Var::X, Var::Y]
        };
        let with_t: Vec<Var> = spatial.iter().copied().chain([Var::T]).collect();

        let role = |name: &str, expr: &Option<ExprAst>, allowed: &[Var]| -> Result<(), ConfigError> {
            if let Some(expr) = expr {
                let bad = expr.disallowed_vars(allowed);
                if !bad.is_empty() {
                    return Err(ConfigError::Invalid(format!(
                        "'{name}' may not reference {}",
                        bad.iter().map(|v| v.name()).collect::<Vec<_>>().join(", ")
                    )));
                }
            }
            Ok(())
        };

        let p = self.p.clone().unwrap_or_else(|| ExprAst::constant(2.0));
        let q = self.q.clone().unwrap_or_else(|| ExprAst::constant(2.0));
        let mu = self.mu.clone().unwrap_or_else(|| ExprAst::constant(0.0));
        role("p", &Some(p.clone()), &with_t)?;
        role("q", &Some(q.clone()), &with_t)?;
        role("mu", &Some(mu.clone()), spatial)?;
        role("f", &self.f, &with_t)?;
        role("r", &self.r, &with_t)?;
        role("f0", &self.f0, spatial)?;
        role("field", &self.field, spatial)?;
        role("initial_guess", &self.initial_expr, spatial)?;

        let declared = match (self.p_minus, self.p_plus, self.q_minus, self.q_plus) {
            (Some(p_minus), Some(p_plus), Some(q_minus), Some(q_plus)) => Some(ExponentBounds {
                p_minus,
                p_plus,
                q_minus,
                q_plus,
            }),
            (None, None, None, None) => None,
            _ => {
                return Err(ConfigError::Invalid(
                    "declare all four exponent bounds or none".into(),
                ))
            }
        };

        let nodes = mesh.nodes();
        let x_range = (
            nodes.iter().map(|p| p.x).fold(f64::INFINITY, f64::min),
            nodes.iter().map(|p| p.x).fold(f64::NEG_INFINITY, f64::max),
        );
        let y_range = if dim == 2 {
            (
                nodes.iter().map(|p| p.y).fold(f64::INFINITY, f64::min),
                nodes.iter().map(|p| p.y).fold(f64::NEG_INFINITY, f64::max),
            )
        } else {
            (0.0, 1.0)
        };
        let model = ExponentModel::with_domain(
            p,
            q,
            mu,
            self.coupling.unwrap_or(Coupling::Gradient),
            self.dimension.unwrap_or(dim),
            declared,
            x_range,
            y_range,
        )?;

        // hypothesis pre-validation: failures become warnings
        let sampler = SamplerConfig {
            n_x: 60,
            n_t: 48,
            seed: self.seed,
            x_range,
            y_range,
            ..Default::default()
        };
        let mut warnings = Vec::new();
        for report in model.validate_hypotheses(&sampler) {
            if !report.passed {
                warnings.push(format!(
                    "({}) violated: worst sample {} (margin {})",
                    report.check, report.worst_sample, report.worst_margin
                ));
            }
        }

        let mut solve = self.solve;
        solve.initial_guess = match (&self.initial_expr, &self.initial_file) {
            (Some(expr), _) => InitialGuess::Interpolant(expr.clone()),
            _ => InitialGuess::Zero,
        };

        Ok(RunConfig {
            mesh,
            model,
            mode: self.mode.unwrap_or(NFunctionMode::IntegralForm),
            pipeline: self.pipeline.unwrap_or(Pipeline::Variational),
            sign: self.sign,
            source: self.f,
            r_expr: self.r,
            f0: self.f0,
            eta_plus: self.eta_plus,
            eta_minus: self.eta_minus,
            field_expr: self.field,
            solve,
            initial_file: self.initial_file,
            quad_tol: self.quad_tol,
            seed: self.seed,
            suites: self.suites.unwrap_or_else(|| {
                vec![Suite::Pointwise, Suite::Modular]
            }),
            n_samples: if self.n_samples == 0 { 10_000 } else { self.n_samples },
            out_solution: self.out_solution,
            out_report: self.out_report,
            warnings,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
[domain]
kind = interval
a = 0
b = 1
n = 64

[exponents]
p = "2"
q = "3"
mu = "0"
coupling = gradient

[source]
f = "1"
"#;

    #[test]
    fn minimal_config_fills_defaults() {
        let cfg = RunConfig::parse_str(MINIMAL).unwrap();
        assert_eq!(cfg.mesh.n_nodes(), 65);
        assert_eq!(cfg.mode, NFunctionMode::IntegralForm);
        assert_eq!(cfg.pipeline, Pipeline::Variational);
        assert_eq!(cfg.solve.residual_tol, 1e-8);
        assert_eq!(cfg.n_samples, 10_000);
        assert!(cfg.source.is_some());
    }

    #[test]
    fn unknown_key_reports_line() {
        let text = MINIMAL.replace("f = \"1\"", "epsilonn = 3");
        match RunConfig::parse_str(&text) {
            Err(ConfigError::UnknownKey { key, line }) => {
                assert_eq!(key, "epsilonn");
                assert!(line > 0);
                let msg = format!(
                    "{}",
                    ConfigError::UnknownKey {
                        key,
                        line
                    }
                );
                assert!(msg.contains("unknown key 'epsilonn' at line"));
            }
            other => panic!("expected unknown key, got {other:?}"),
        }
    }

    #[test]
    fn hypothesis_violation_becomes_warning() {
        let text = MINIMAL.replace("q = \"3\"", "q = \"1.5\"");
        let cfg = RunConfig::parse_str(&text).unwrap();
        assert!(
            cfg.warnings.iter().any(|w| w.starts_with("(H1)")),
            "{:?}",
            cfg.warnings
        );
    }

    #[test]
    fn expression_errors_carry_key_and_line() {
        let text = MINIMAL.replace("p = \"2\"", "p = \"2 +\"");
        match RunConfig::parse_str(&text) {
            Err(ConfigError::Value { key, .. }) => assert_eq!(key, "p"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn mu_may_not_use_t() {
        let text = MINIMAL.replace("mu = \"0\"", "mu = \"t\"");
        assert!(matches!(
            RunConfig::parse_str(&text),
            Err(ConfigError::Invalid(_))
        ));
    }

    #[test]
    fn comments_and_quotes() {
        let text = "[domain]\nkind = interval # inline comment\nn = 8\n[exponents]\np = \"2 # not a comment\"\n";
        // '#' inside quotes is literal; the expression then fails to parse
        assert!(matches!(
            RunConfig::parse_str(text),
            Err(ConfigError::Value { .. })
        ));
    }

    #[test]
    fn partial_bounds_rejected() {
        let text = MINIMAL.replace("coupling = gradient", "coupling = gradient\np_minus = 2");
        assert!(matches!(
            RunConfig::parse_str(&text),
            Err(ConfigError::Invalid(_))
        ));
    }

    #[test]
    fn epsilon_schedule_list() {
        let text = MINIMAL.replace(
            "[source]",
            "[solver]\nepsilon_schedule = \"1, 0.25, 0.05\"\n[source]",
        );
        let cfg = RunConfig::parse_str(&text).unwrap();
        assert_eq!(cfg.solve.epsilon_schedule, vec![1.0, 0.25, 0.05]);
    }
}
