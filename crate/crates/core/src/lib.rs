//! Double phase operators with exponents depending on the solution or its
//! gradient: Musielak–Orlicz modular calculus, P1 finite element solvers, and
//! a randomized harness that numerically verifies the quantitative
//! inequalities the theory rests on.
//!
//! The pieces, bottom up:
//!
//! - [`expr`] — the small analytic expression language of configuration files;
//! - [`nfunction`] — the generalized N-function `H(x,t)` in integral and
//!   direct form, its density, complementary function, Sobolev conjugate and
//!   hypothesis validation;
//! - [`mesh_fem`] — P1 elements on intervals and rectangles, quadrature, and
//!   a Poincaré-constant estimator;
//! - [`modular`] — modulars, Luxemburg norms and the Hölder pairing;
//! - [`operator`] — weak-form assembly of the double phase operator with
//!   gradient/solution coupling, frozen-exponent evaluation and ε-terms,
//!   plus derivative/monotonicity/coercivity checks;
//! - [`solvers`] — truncated energy minimization, damped Newton for the
//!   nonvariational problem, and the ε-perturbation scheme with frozen
//!   exponents, with the truncation-based multiplicity driver;
//! - [`verify`] — the seeded inequality suites;
//! - [`config`] / [`cli`] — run configuration and the `dphase` binary.

pub mod cli;
pub mod config;
pub mod expr;
pub mod mesh_fem;
pub mod modular;
pub mod nfunction;
pub mod operator;
pub mod quad;
pub mod report;
pub mod solvers;
pub mod verify;

pub use expr::{Binding, ExprAst, Var};
pub use mesh_fem::{build_interval_mesh, build_rect_mesh, poincare_estimate, Field, Mesh};
pub use modular::{holder_pairing, luxemburg_norm, modular, LuxemburgNorm, ModularValue};
pub use nfunction::{
    Coupling, ExponentBounds, ExponentModel, NFunctionMode, Point, SamplerConfig,
};
pub use operator::{
    assemble_residual, coercivity_check, derivative_check, energy, monotonicity_check,
    ProblemSpec, Residual, SourceFn,
};
pub use report::Report;
pub use solvers::{
    certify_residual, lsc_diagnostic, solve_multiplicity, solve_pseudomonotone,
    solve_solution_coupled, solve_variational, truncate_source, BoundCheck, EpsilonRecord,
    InitialGuess, SolveConfig, SolveResult, TruncationSign,
};
pub use verify::{run_suite, Suite};
