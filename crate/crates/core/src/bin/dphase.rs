use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use dphase_core::cli::{self, CliOptions, Command};

/// Double phase solver and inequality verification harness.
#[derive(Parser)]
#[command(name = "dphase", version, about, after_help = CONFIG_HELP)]
struct Args {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run the configured solve pipeline and write solution + run report.
    Solve {
        #[command(flatten)]
        common: Common,
    },
    /// Run the configured verification suites and write a report file.
    Verify {
        #[command(flatten)]
        common: Common,
    },
    /// Print Luxemburg norm and modular of the configured field.
    Norms {
        #[command(flatten)]
        common: Common,
    },
}

#[derive(clap::Args)]
struct Common {
    /// Path to the run configuration file.
    #[arg(long)]
    config: PathBuf,
    /// Override the RNG seed from the configuration.
    #[arg(long)]
    seed: Option<u64>,
    /// Promote hypothesis warnings to errors.
    #[arg(long)]
    strict: bool,
    /// Suppress informational output.
    #[arg(long)]
    quiet: bool,
    /// Directory for output artifacts (default: paths as configured).
    #[arg(long)]
    out: Option<PathBuf>,
}

const CONFIG_HELP: &str = "\
Config file: line-oriented `key = value` with '#' comments and quoted
expressions, in five sections.

  [domain]     kind = interval | rect; a, b, n (interval); lx, ly, nx, ny (rect)
  [exponents]  p, q, mu (expressions in x[,y][,t]); coupling = gradient |
               solution | none; mode = integral | direct; optional declared
               bounds p_minus/p_plus/q_minus/q_plus; dimension override
  [source]     f (reaction, t stands for u); r (reaction exponent);
               f0 (fixed datum); eta_plus/eta_minus (truncation levels);
               field (for `norms`)
  [solver]     pipeline = variational | newton | coupled | multiplicity;
               sign = plus | minus; residual_tol (1e-8), step_tol (1e-10),
               armijo_c (1e-4), backtrack (0.5), max_outer (16),
               max_inner (40), max_newton (60), max_descent (50000),
               epsilon_stages (11, geometric halving) or epsilon_schedule =
               \"1,0.5,...\"; initial_guess = zero | \"expr\" | file:PATH;
               quad_tol (1e-10); seed (0); suites = \"pointwise,modular\";
               n_samples (10000)
  [output]     solution = PATH; report = PATH

Exit codes: 0 success, 1 usage/config error, 2 unconverged solve,
3 failed verify suite.";

fn main() -> ExitCode {
    let args = Args::parse();
    let (command, common) = match args.command {
        Cmd::Solve { common } => (Command::Solve, common),
        Cmd::Verify { common } => (Command::Verify, common),
        Cmd::Norms { common } => (Command::Norms, common),
    };
    let opts = CliOptions {
        seed: common.seed,
        strict: common.strict,
        quiet: common.quiet,
        out_dir: common.out,
    };
    ExitCode::from(cli::run(command, &common.config, &opts) as u8)
}
