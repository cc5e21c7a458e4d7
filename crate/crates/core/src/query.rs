//! End-to-end queries: ground, compile, solve, and package the answer.

use std::time::Instant;

use serde::Serialize;
use serde_json::{json, Value};
use thiserror::Error;

use crate::certificate::{extract_refutation, verify_certificate, Certificate, CertificateError};
use crate::compiler::{compile, BasisScope, CompileError, CompileOptions, LiftedSdp, SdpSummary};
use crate::grounder::{ground, GroundError, GroundTheory, Universe};
use crate::model::{KnowledgeBase, Polynomial};
use crate::parser::{parse_constraint, parse_objective, ParseDiagnostic};
use crate::sdp::{optimize, solve_feasibility, Direction, DualWitness, OptimizeResult, SolveStatus, SolverConfig};

#[derive(Debug, Error)]
pub enum QueryError {
    #[error("{}", .0.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("\n"))]
    Parse(Vec<ParseDiagnostic>),
    #[error(transparent)]
    Ground(#[from] GroundError),
    #[error(transparent)]
    Compile(#[from] CompileError),
    #[error(transparent)]
    Certificate(#[from] CertificateError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Sides {
    Min,
    Max,
    Both,
}

#[derive(Clone, Debug, PartialEq)]
pub enum QueryKind {
    CheckSat,
    Bound { objective: String, sides: Sides },
    /// Consistency of the knowledge base with one more constraint.
    Refute { constraint: String },
}

#[derive(Clone, Debug)]
pub struct QuerySpec {
    pub kind: QueryKind,
    /// `None` picks the smallest even degree covering every constraint.
    pub degree: Option<u32>,
    pub universe: Universe,
    pub scope: BasisScope,
    pub solver: SolverConfig,
    /// Constraints appended to the knowledge base for this query only.
    pub extra: Vec<String>,
}

impl QuerySpec {
    pub fn new(kind: QueryKind) -> Self {
        QuerySpec { kind, degree: None, universe: Universe::OpenUniverse, scope: BasisScope::Clique, solver: SolverConfig::default(), extra: Vec::new() }
    }

    pub fn check() -> Self {
        Self::new(QueryKind::CheckSat)
    }

    pub fn bound(objective: &str, sides: Sides) -> Self {
        Self::new(QueryKind::Bound { objective: objective.to_string(), sides })
    }

    pub fn refute(constraint: &str) -> Self {
        Self::new(QueryKind::Refute { constraint: constraint.to_string() })
    }

    pub fn degree(mut self, d: u32) -> Self {
        self.degree = Some(d);
        self
    }

    pub fn universe(mut self, u: Universe) -> Self {
        self.universe = u;
        self
    }

    pub fn scope(mut self, s: BasisScope) -> Self {
        self.scope = s;
        self
    }

    pub fn solver(mut self, cfg: SolverConfig) -> Self {
        self.solver = cfg;
        self
    }

    pub fn with(mut self, constraint: &str) -> Self {
        self.extra.push(constraint.to_string());
        self
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum QueryStatus {
    Feasible,
    Infeasible,
    Unknown,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct Timings {
    pub ground: f64,
    pub compile: f64,
    pub solve: f64,
    pub certify: f64,
}

impl Timings {
    pub fn total(&self) -> f64 {
        self.ground + self.compile + self.solve + self.certify
    }
}

#[derive(Clone, Debug)]
pub struct QueryResult {
    pub status: QueryStatus,
    /// Lower end of the bound interval; `None` when not requested or unbounded.
    pub lo: Option<f64>,
    pub hi: Option<f64>,
    /// Present exactly when the status is infeasible.
    pub certificate: Option<Certificate>,
    /// Verification residual of the certificate.
    pub residual: Option<f64>,
    pub degree: u32,
    pub k: u32,
    pub size: SdpSummary,
    pub timings: Timings,
    /// Why the status is unknown, or which side was unbounded.
    pub notes: Vec<String>,
}

impl QueryResult {
    pub fn to_json(&self) -> Value {
        json!({
            "status": self.status,
            "lo": self.lo,
            "hi": self.hi,
            "degree": self.degree,
            "k": self.k,
            "residual": self.residual,
            "size": self.size,
            "timings": self.timings,
            "notes": self.notes,
            "max_coefficient": self.certificate.as_ref().map(Certificate::max_coefficient),
        })
    }
}

/// Smallest even degree that is at least `deg` and at least 2.
pub fn default_degree(deg: u32) -> u32 {
    deg.max(2).div_ceil(2) * 2
}

/// The knowledge base plus every constraint the spec appends.
fn augmented(kb: &KnowledgeBase, spec: &QuerySpec) -> Result<(KnowledgeBase, Vec<String>), QueryError> {
    let mut texts = spec.extra.clone();
    if let QueryKind::Refute { constraint } = &spec.kind {
        texts.push(constraint.clone());
    }
    let mut extra = Vec::new();
    for t in &texts {
        extra.push(parse_constraint(t, kb).map_err(QueryError::Parse)?);
    }
    Ok((kb.with_constraints(extra), texts))
}

struct Prepared {
    g: GroundTheory,
    sdp: LiftedSdp,
    objective: Option<Polynomial>,
    appended: Vec<String>,
    timings: Timings,
}

fn prepare(kb: &KnowledgeBase, spec: &QuerySpec) -> Result<Prepared, QueryError> {
    let (kb, appended) = augmented(kb, spec)?;
    let objective = match &spec.kind {
        QueryKind::Bound { objective, .. } => Some(parse_objective(objective, &kb).map_err(QueryError::Parse)?),
        _ => None,
    };
    let obj_generic = objective.iter().flat_map(|p| p.terms().flat_map(|(m, _)| m.generics())).max().unwrap_or(0);
    let mut universe = spec.universe;
    if obj_generic > 0 {
        let k = universe.generics(&kb)?;
        if universe == Universe::DomainClosure {
            return Err(GroundError::PlaceholderInDomainClosure(obj_generic).into());
        }
        universe = Universe::Names(k.max(obj_generic));
    }
    let mut timings = Timings::default();
    let t = Instant::now();
    let g = ground(&kb, universe)?;
    timings.ground = t.elapsed().as_secs_f64();
    for w in &g.warnings {
        log::warn!("{w}");
    }
    let obj_degree = objective.as_ref().map_or(0, Polynomial::degree);
    let d = spec.degree.unwrap_or_else(|| default_degree(kb.max_degree().max(obj_degree)));
    let mut opts = CompileOptions { scope: spec.scope, ..CompileOptions::new(d) };
    if let Some(p) = &objective {
        opts = opts.with_monomials(p.terms().map(|(m, _)| m.clone()));
    }
    let t = Instant::now();
    let sdp = compile(&g, &opts)?;
    timings.compile = t.elapsed().as_secs_f64();
    log::info!("degree {d}, k = {}: {:?}", g.k, sdp.summary());
    Ok(Prepared { g, sdp, objective, appended, timings })
}

fn certify(p: &Prepared, w: &DualWitness) -> Result<(Certificate, f64), QueryError> {
    let mut cert = extract_refutation(&p.sdp, &p.g, w)?;
    cert.appended = p.appended.clone();
    let report = verify_certificate(&p.g, &cert, cert.tolerance)?;
    if !report.pass {
        log::warn!("extracted certificate has residual {:.3e}", report.max_residual);
    }
    Ok((cert, report.max_residual))
}

/// Runs one query against `kb`.
pub fn run_query(kb: &KnowledgeBase, spec: &QuerySpec) -> Result<QueryResult, QueryError> {
    let p = prepare(kb, spec)?;
    let mut res = QueryResult {
        status: QueryStatus::Feasible,
        lo: None,
        hi: None,
        certificate: None,
        residual: None,
        degree: p.sdp.degree,
        k: p.g.k,
        size: p.sdp.summary(),
        timings: p.timings.clone(),
        notes: Vec::new(),
    };
    let mut witness = None;
    let t = Instant::now();
    match (&spec.kind, &p.objective) {
        (QueryKind::Bound { sides, .. }, Some(obj)) => {
            let form = p.sdp.form(obj)?;
            let dirs: &[Direction] = match sides {
                Sides::Min => &[Direction::Min],
                Sides::Max => &[Direction::Max],
                Sides::Both => &[Direction::Min, Direction::Max],
            };
            for &dir in dirs {
                match optimize(&p.sdp, &form, dir, &spec.solver) {
                    OptimizeResult::Optimal { value, .. } => match dir {
                        Direction::Min => res.lo = Some(value),
                        Direction::Max => res.hi = Some(value),
                    },
                    OptimizeResult::Unbounded => res.notes.push(format!("{dir:?} is unbounded").to_lowercase()),
                    OptimizeResult::Infeasible(w) => {
                        witness = Some(w);
                        break;
                    }
                    OptimizeResult::Unknown(why) => {
                        res.status = QueryStatus::Unknown;
                        res.notes.push(why);
                    }
                }
            }
        }
        _ => match solve_feasibility(&p.sdp, &spec.solver) {
            SolveStatus::Feasible(_) => {}
            SolveStatus::Infeasible(w) => witness = Some(w),
            SolveStatus::Unknown(why) => {
                res.status = QueryStatus::Unknown;
                res.notes.push(why);
            }
        },
    }
    res.timings.solve = t.elapsed().as_secs_f64();
    if let Some(w) = witness {
        let t = Instant::now();
        let (cert, residual) = certify(&p, &w)?;
        res.timings.certify = t.elapsed().as_secs_f64();
        res.status = QueryStatus::Infeasible;
        res.lo = None;
        res.hi = None;
        res.certificate = Some(cert);
        res.residual = Some(residual);
    }
    Ok(res)
}

/// The same query over several generic-name pools, optionally in parallel.
pub fn compare_universes(
    kb: &KnowledgeBase,
    spec: &QuerySpec,
    ks: &[u32],
    parallel: bool,
) -> Vec<(u32, Result<QueryResult, QueryError>)> {
    let job = |k: u32| run_query(kb, &spec.clone().universe(Universe::Names(k)));
    if !parallel {
        return ks.iter().map(|&k| (k, job(k))).collect();
    }
    std::thread::scope(|s| {
        let handles: Vec<_> = ks.iter().map(|&k| (k, s.spawn(move || job(k)))).collect();
        handles.into_iter().map(|(k, h)| (k, h.join().expect("query thread panicked"))).collect()
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::parser::parse_kb;

    const WAR: &str = include_str!("../fixtures/war.lsos");
    const HR: &str = include_str!("../fixtures/heart_rate.lsos");

    fn kb(text: &str) -> KnowledgeBase {
        parse_kb(text).unwrap().kb
    }

    #[test]
    fn default_degrees() {
        assert_eq!(default_degree(0), 2);
        assert_eq!(default_degree(1), 2);
        assert_eq!(default_degree(2), 2);
        assert_eq!(default_degree(3), 4);
        assert_eq!(default_degree(4), 4);
    }

    #[test]
    fn war_interval() {
        let r = run_query(&kb(WAR), &QuerySpec::bound("e(War(Antony,g1))", Sides::Both).degree(4)).unwrap();
        assert_eq!(r.status, QueryStatus::Feasible);
        assert!((r.lo.unwrap() - 0.75).abs() < 1e-5, "{r:?}");
        assert!((r.hi.unwrap() - 1.0).abs() < 1e-5, "{r:?}");
        assert!(r.certificate.is_none());
        assert_eq!(r.k, 3);
    }

    #[test]
    fn heart_rate_default_degree() {
        let r = run_query(&kb(HR), &QuerySpec::bound("e(HR(g1))", Sides::Min)).unwrap();
        assert_eq!(r.degree, 2);
        assert!((r.lo.unwrap() - 68.0).abs() < 1e-4, "{r:?}");
    }

    #[test]
    fn refute_ships_certificate() {
        let r = run_query(&kb(WAR), &QuerySpec::refute("e(War(Antony,g1)) <= 0.74").degree(4)).unwrap();
        assert_eq!(r.status, QueryStatus::Infeasible);
        let cert = r.certificate.unwrap();
        assert!(r.residual.unwrap() <= 1e-4);
        assert_eq!(cert.appended, vec!["e(War(Antony,g1)) <= 0.74".to_string()]);
        assert_eq!(cert.generics, 3);
    }

    #[test]
    fn infeasible_bound_has_no_interval() {
        let spec = QuerySpec::bound("e(War(Antony,g1))", Sides::Both).degree(4).with("e(War(Antony,g1)) <= 0.5");
        let r = run_query(&kb(WAR), &spec).unwrap();
        assert_eq!(r.status, QueryStatus::Infeasible);
        assert!(r.lo.is_none() && r.hi.is_none() && r.certificate.is_some());
    }

    #[test]
    fn ground_only_kb_ignores_k() {
        let k = kb("relation P/1 boolean; constant a; e(P(a)) >= 0.3;");
        let spec = QuerySpec::bound("e(P(a))", Sides::Min);
        let rows = compare_universes(&k, &spec, &[0, 1, 2], true);
        for (_, r) in &rows {
            assert!((r.as_ref().unwrap().lo.unwrap() - 0.3).abs() < 1e-5);
        }
    }

    #[test]
    fn bad_inputs_are_errors() {
        let k = kb(WAR);
        assert!(matches!(run_query(&k, &QuerySpec::bound("e(Peace(Antony))", Sides::Min)), Err(QueryError::Parse(_))));
        assert!(matches!(
            run_query(&k, &QuerySpec::bound("e(War(Antony,g1))", Sides::Min).universe(Universe::DomainClosure)),
            Err(QueryError::Ground(_))
        ));
        assert!(matches!(run_query(&k, &QuerySpec::check().degree(3)), Err(QueryError::Compile(_))));
    }
}
