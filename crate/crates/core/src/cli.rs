//! The `lsos` command line. Results go to stdout as JSON, diagnostics to
//! stderr. Exit codes: 0 feasible / verified / bound found, 1 infeasible,
//! 2 input error or failed verification, 3 unknown.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use crate::certificate::{verify_certificate, Certificate};
use crate::compiler::BasisScope;
use crate::grounder::{ground, Universe};
use crate::model::KnowledgeBase;
use crate::parser::{parse_constraint, parse_kb};
use crate::query::{compare_universes, run_query, QueryError, QueryKind, QueryResult, QuerySpec, QueryStatus, Sides};
use crate::sdp::SolverConfig;

pub const EXIT_OK: i32 = 0;
pub const EXIT_INFEASIBLE: i32 = 1;
pub const EXIT_INPUT: i32 = 2;
pub const EXIT_UNKNOWN: i32 = 3;

#[derive(Parser, Debug)]
#[command(name = "lsos", version, about = "Lifted sum-of-squares reasoning over first-order probabilistic knowledge bases")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write the ground theory as JSON.
    Ground(Common),
    /// Decide whether the degree-d relaxation is feasible.
    Check {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        solve: SolveArgs,
    },
    /// Tightest degree-d bounds on a linear combination of moments.
    Bound {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        solve: SolveArgs,
        #[command(flatten)]
        sides: SideArgs,
        /// Objective, e.g. `e(War(Antony,g1))`.
        #[arg(long)]
        expr: String,
    },
    /// Search for a refutation of the knowledge base, optionally with one
    /// more constraint appended.
    Refute {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        solve: SolveArgs,
        /// Constraint to test against the knowledge base.
        #[arg(long)]
        expr: Option<String>,
    },
    /// Check a certificate symbolically against the ground theory.
    Verify {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        cert: PathBuf,
        /// Verification tolerance; defaults to the certificate's own.
        #[arg(long, env = "LSOS_TOL")]
        tol: Option<f64>,
    },
    /// Run the same query for several generic-name pools.
    CompareUniverses {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        solve: SolveArgs,
        #[command(flatten)]
        sides: SideArgs,
        /// Pool sizes, comma separated.
        #[arg(long, value_delimiter = ',', required = true)]
        ks: Vec<u32>,
        /// Objective; without it only feasibility is compared.
        #[arg(long)]
        expr: Option<String>,
        #[arg(long)]
        parallel: bool,
    },
}

#[derive(Args, Debug)]
pub struct Common {
    /// Knowledge base file.
    pub kb: PathBuf,
    /// Ground with N generic names.
    #[arg(long, group = "universe")]
    pub k: Option<u32>,
    /// Ground over the declared constants only.
    #[arg(long, group = "universe")]
    pub dc: bool,
    /// Ground with as many generic names as the rank (default).
    #[arg(long, group = "universe")]
    pub ou: bool,
    /// Relaxation degree (even).
    #[arg(long)]
    pub degree: Option<u32>,
    /// One moment matrix over all ground terms instead of one per constraint.
    #[arg(long)]
    pub dense: bool,
    /// Extra constraint appended before grounding; repeatable.
    #[arg(long = "add")]
    pub add: Vec<String>,
    /// Output file for the main artifact.
    #[arg(short, long)]
    pub out: Option<PathBuf>,
    /// Progress on stderr; -vv adds solver detail.
    #[arg(short, action = clap::ArgAction::Count)]
    pub verbose: u8,
}

impl Common {
    fn universe(&self) -> Universe {
        match (self.k, self.dc) {
            (Some(k), _) => Universe::Names(k),
            (None, true) => Universe::DomainClosure,
            _ => Universe::OpenUniverse,
        }
    }
}

#[derive(Args, Debug)]
pub struct SolveArgs {
    /// Solver tolerance.
    #[arg(long, env = "LSOS_TOL")]
    pub tol: Option<f64>,
    /// Seed for the solver's random start.
    #[arg(long, env = "LSOS_SEED")]
    pub seed: Option<u64>,
    /// Iteration limit per solve.
    #[arg(long, env = "LSOS_MAX_ITERS")]
    pub max_iters: Option<usize>,
}

impl SolveArgs {
    fn config(&self, verbose: u8) -> SolverConfig {
        let mut cfg = SolverConfig::default();
        if let Some(t) = self.tol {
            cfg.eps = t;
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(m) = self.max_iters {
            cfg.max_iters = m;
        }
        cfg.verbose = verbose > 0;
        cfg
    }
}

#[derive(Args, Debug)]
#[group(multiple = false)]
pub struct SideArgs {
    /// Lower end only.
    #[arg(long)]
    pub min: bool,
    /// Upper end only.
    #[arg(long)]
    pub max: bool,
    /// Both ends (default).
    #[arg(long)]
    pub both: bool,
}

impl SideArgs {
    fn sides(&self) -> Sides {
        match (self.min, self.max) {
            (true, _) => Sides::Min,
            (_, true) => Sides::Max,
            _ => Sides::Both,
        }
    }
}

/// A failure that maps to the input-error exit code.
struct InputError(String);

impl From<QueryError> for InputError {
    fn from(e: QueryError) -> Self {
        InputError(e.to_string())
    }
}

fn load_kb(path: &Path) -> Result<KnowledgeBase, InputError> {
    let text = std::fs::read_to_string(path).map_err(|e| InputError(format!("{}: {e}", path.display())))?;
    match parse_kb(&text) {
        Ok(parsed) => {
            for w in &parsed.warnings {
                log::warn!("{}: {w}", path.display());
            }
            Ok(parsed.kb)
        }
        Err(diags) => Err(InputError(diags.iter().map(|d| format!("{}: {d}", path.display())).collect::<Vec<_>>().join("\n"))),
    }
}

fn write_file(path: &Path, v: &Value) -> Result<(), InputError> {
    let text = serde_json::to_string_pretty(v).expect("json");
    std::fs::write(path, text + "\n").map_err(|e| InputError(format!("{}: {e}", path.display())))
}

fn status_code(s: QueryStatus) -> i32 {
    match s {
        QueryStatus::Feasible => EXIT_OK,
        QueryStatus::Infeasible => EXIT_INFEASIBLE,
        QueryStatus::Unknown => EXIT_UNKNOWN,
    }
}

/// Result JSON with the certificate written to `out` when given, inline otherwise.
fn result_json(r: &QueryResult, out: Option<&Path>) -> Result<Value, InputError> {
    let mut v = r.to_json();
    if let Some(cert) = &r.certificate {
        v["certificate"] = match out {
            Some(path) => {
                write_file(path, &cert.to_json())?;
                json!(path.display().to_string())
            }
            None => cert.to_json(),
        };
    }
    Ok(v)
}

fn spec(kind: QueryKind, common: &Common, solve: &SolveArgs) -> QuerySpec {
    let scope = if common.dense { BasisScope::Dense } else { BasisScope::Clique };
    let mut s = QuerySpec::new(kind).universe(common.universe()).scope(scope).solver(solve.config(common.verbose));
    s.degree = common.degree;
    s.extra = common.add.clone();
    s
}

fn execute(cmd: &Command, stdout: &mut dyn Write) -> Result<i32, InputError> {
    let emit = |v: &Value, stdout: &mut dyn Write| {
        let _ = writeln!(stdout, "{}", serde_json::to_string_pretty(v).expect("json"));
    };
    match cmd {
        Command::Ground(common) => {
            let kb = load_kb(&common.kb)?;
            let extra = common
                .add
                .iter()
                .map(|t| parse_constraint(t, &kb).map_err(|d| InputError(d.iter().map(|x| x.to_string()).collect::<Vec<_>>().join("\n"))))
                .collect::<Result<Vec<_>, _>>()?;
            let g = ground(&kb.with_constraints(extra), common.universe()).map_err(|e| InputError(e.to_string()))?;
            for w in &g.warnings {
                log::warn!("{w}");
            }
            let v = g.to_json();
            match &common.out {
                Some(path) => {
                    write_file(path, &v)?;
                    emit(&json!({"written": path.display().to_string(), "constraints": g.len()}), stdout);
                }
                None => emit(&v, stdout),
            }
            Ok(EXIT_OK)
        }
        Command::Check { common, solve } => {
            let kb = load_kb(&common.kb)?;
            let r = run_query(&kb, &spec(QueryKind::CheckSat, common, solve))?;
            emit(&result_json(&r, common.out.as_deref())?, stdout);
            Ok(status_code(r.status))
        }
        Command::Bound { common, solve, sides, expr } => {
            let kb = load_kb(&common.kb)?;
            let kind = QueryKind::Bound { objective: expr.clone(), sides: sides.sides() };
            let r = run_query(&kb, &spec(kind, common, solve))?;
            emit(&result_json(&r, common.out.as_deref())?, stdout);
            Ok(status_code(r.status))
        }
        Command::Refute { common, solve, expr } => {
            let kb = load_kb(&common.kb)?;
            let kind = match expr {
                Some(c) => QueryKind::Refute { constraint: c.clone() },
                None => QueryKind::CheckSat,
            };
            let r = run_query(&kb, &spec(kind, common, solve))?;
            emit(&result_json(&r, common.out.as_deref())?, stdout);
            Ok(status_code(r.status))
        }
        Command::Verify { common, cert, tol } => {
            let kb = load_kb(&common.kb)?;
            let text = std::fs::read_to_string(cert).map_err(|e| InputError(format!("{}: {e}", cert.display())))?;
            let v: Value = serde_json::from_str(&text).map_err(|e| InputError(format!("{}: {e}", cert.display())))?;
            let c = Certificate::from_json(&v).map_err(|e| InputError(e.to_string()))?;
            let mut extra = Vec::new();
            for t in c.appended.iter().chain(&common.add) {
                extra.push(parse_constraint(t, &kb).map_err(|d| InputError(d.iter().map(|x| x.to_string()).collect::<Vec<_>>().join("\n")))?);
            }
            let universe = match common.k {
                Some(k) => Universe::Names(k),
                None => Universe::Names(c.generics),
            };
            let g = ground(&kb.with_constraints(extra), universe).map_err(|e| InputError(e.to_string()))?;
            let report = verify_certificate(&g, &c, tol.unwrap_or(c.tolerance)).map_err(|e| InputError(e.to_string()))?;
            if report.max_degree > c.degree {
                log::warn!("certificate declares degree {} but has a product of degree {}", c.degree, report.max_degree);
            }
            let mut v = report.to_json();
            if report.pass {
                v["residuals"] = json!({});
            }
            emit(&v, stdout);
            if !report.pass {
                log::error!("certificate fails verification: max residual {:.3e} > {:.3e}", report.max_residual, report.tolerance);
            }
            Ok(if report.pass { EXIT_OK } else { EXIT_INPUT })
        }
        Command::CompareUniverses { common, solve, sides, ks, expr, parallel } => {
            let kb = load_kb(&common.kb)?;
            let kind = match expr {
                Some(e) => QueryKind::Bound { objective: e.clone(), sides: sides.sides() },
                None => QueryKind::CheckSat,
            };
            let rows = compare_universes(&kb, &spec(kind, common, solve), ks, *parallel);
            let mut table = Vec::new();
            let mut code = EXIT_OK;
            for (k, r) in rows {
                let r = r?;
                code = code.max(status_code(r.status));
                let mut v = r.to_json();
                v["k"] = json!(k);
                table.push(v);
            }
            let v = json!({ "rank": kb.rank(), "results": table });
            if let Some(path) = &common.out {
                write_file(path, &v)?;
            }
            emit(&v, stdout);
            Ok(code)
        }
    }
}

fn verbosity(cmd: &Command) -> u8 {
    match cmd {
        Command::Ground(c) | Command::Verify { common: c, .. } => c.verbose,
        Command::Check { common, .. }
        | Command::Bound { common, .. }
        | Command::Refute { common, .. }
        | Command::CompareUniverses { common, .. } => common.verbose,
    }
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_INPUT } else { EXIT_OK };
            if e.use_stderr() {
                let _ = write!(stderr, "{e}");
            } else {
                let _ = write!(stdout, "{e}");
            }
            return code;
        }
    };
    let level = match verbosity(&cli.command) {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    let _ = env_logger::Builder::new().filter_level(level).parse_env("LSOS_LOG").target(env_logger::Target::Stderr).try_init();
    match execute(&cli.command, stdout) {
        Ok(code) => code,
        Err(InputError(msg)) => {
            let _ = writeln!(stderr, "error: {msg}");
            EXIT_INPUT
        }
    }
}
