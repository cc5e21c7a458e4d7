//! Sum-of-squares refutations: extraction from dual witnesses, symbolic
//! verification, and the symmetrization/extension maps on pseudomodels.

use std::collections::{BTreeMap, HashMap};

use nalgebra::SymmetricEigen;
use serde_json::{json, Value};
use thiserror::Error;

use crate::compiler::{BlockKind, LiftedSdp};
use crate::grounder::{canonicalize, GroundConstraint, GroundTheory, Renaming};
use crate::model::{BodyKind, Cmp, Monomial, Polynomial};
use crate::parser::{polynomial_from_json, polynomial_to_json};
use crate::sdp::{BlockDual, DualWitness, MomentAssignment};

/// Eigenvalues of a dual block in `[-EIG_CLIP, 0)` are treated as zero.
pub const EIG_CLIP: f64 = 1e-9;

/// Largest aggregate residual a witness may have before extraction.
pub const WITNESS_TOL: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CertificateError {
    #[error("certificate refers to `{0}`, which is not a constraint of the ground theory")]
    Dangling(String),
    #[error("`{id}` is used as {used} but is a {actual} constraint")]
    WrongKind { id: String, used: &'static str, actual: &'static str },
    #[error("multiplier for `{0}` is negative ({1})")]
    NegativeMultiplier(String, f64),
    #[error("scale must be positive, got {0}")]
    BadScale(f64),
    #[error("dual witness does not verify (residual {0:.3e})")]
    WitnessRejected(f64),
    #[error("dual block `{origin}` has eigenvalue {value:.3e} below the clip threshold")]
    NegativeEigenvalue { origin: String, value: f64 },
    #[error("renamed constraint {0} is missing from the ground theory")]
    NotClosed(String),
    #[error("no moment value for the class of e({0})")]
    MissingClass(String),
    #[error("malformed certificate: {0}")]
    Malformed(String),
}

/// `scale · (σ₀ + Σ σᵢ gᵢ + Σ qⱼ hⱼ + Σ r_k b_k) = -1`, with every σ given as
/// a list of polynomials whose squares it sums.
///
/// Keys of `r` are bound ids; `-b<k>` stands for the negated half of an
/// expectation equality.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Certificate {
    pub scale: f64,
    pub sigma0: Vec<Polynomial>,
    pub sigma: BTreeMap<String, Vec<Polynomial>>,
    pub q: BTreeMap<String, Polynomial>,
    pub r: BTreeMap<String, f64>,
    pub degree: u32,
    pub tolerance: f64,
    /// Number of generic names of the grounding the ids refer to.
    pub generics: u32,
    /// Constraints appended to the knowledge base before grounding.
    pub appended: Vec<String>,
}

impl Certificate {
    pub fn to_json(&self) -> Value {
        let polys = |ps: &[Polynomial]| -> Value { ps.iter().map(polynomial_to_json).collect() };
        json!({
            "scale": self.scale,
            "sigma0": polys(&self.sigma0),
            "sigma": self.sigma.iter().map(|(k, v)| (k.clone(), polys(v))).collect::<serde_json::Map<_, _>>(),
            "q": self.q.iter().map(|(k, v)| (k.clone(), polynomial_to_json(v))).collect::<serde_json::Map<_, _>>(),
            "r": self.r.iter().map(|(k, v)| (k.clone(), json!(v))).collect::<serde_json::Map<_, _>>(),
            "degree": self.degree,
            "tolerance": self.tolerance,
            "generics": self.generics,
            "appended": self.appended,
        })
    }

    pub fn from_json(v: &Value) -> Result<Certificate, CertificateError> {
        let bad = |what: &str| CertificateError::Malformed(what.to_string());
        let num = |key: &str| v.get(key).and_then(Value::as_f64).ok_or_else(|| bad(&format!("missing number `{key}`")));
        let poly = |p: &Value| polynomial_from_json(p).map_err(CertificateError::Malformed);
        let poly_list = |p: &Value| -> Result<Vec<Polynomial>, CertificateError> {
            p.as_array().ok_or_else(|| bad("expected a list of polynomials"))?.iter().map(poly).collect()
        };
        let object = |key: &str| -> Result<serde_json::Map<String, Value>, CertificateError> {
            match v.get(key) {
                None | Some(Value::Null) => Ok(Default::default()),
                Some(Value::Object(m)) => Ok(m.clone()),
                Some(_) => Err(bad(&format!("`{key}` must be an object"))),
            }
        };
        let mut sigma = BTreeMap::new();
        for (k, p) in object("sigma")? {
            sigma.insert(k, poly_list(&p)?);
        }
        let mut q = BTreeMap::new();
        for (k, p) in object("q")? {
            q.insert(k, poly(&p)?);
        }
        let mut r = BTreeMap::new();
        for (k, x) in object("r")? {
            r.insert(k.clone(), x.as_f64().ok_or_else(|| bad(&format!("r[{k}] is not a number")))?);
        }
        Ok(Certificate {
            scale: num("scale")?,
            sigma0: poly_list(v.get("sigma0").unwrap_or(&Value::Array(vec![])))?,
            sigma,
            q,
            r,
            degree: v.get("degree").and_then(Value::as_u64).ok_or_else(|| bad("missing `degree`"))? as u32,
            tolerance: v.get("tolerance").and_then(Value::as_f64).unwrap_or(1e-4),
            generics: v.get("generics").and_then(Value::as_u64).unwrap_or(0) as u32,
            appended: match v.get("appended") {
                None | Some(Value::Null) => Vec::new(),
                Some(a) => a
                    .as_array()
                    .and_then(|xs| xs.iter().map(|x| x.as_str().map(str::to_string)).collect::<Option<Vec<_>>>())
                    .ok_or_else(|| bad("`appended` must be a list of strings"))?,
            },
        })
    }

    /// Largest coefficient magnitude over all multipliers.
    pub fn max_coefficient(&self) -> f64 {
        let polys = self.sigma0.iter().chain(self.sigma.values().flatten()).chain(self.q.values());
        polys.map(Polynomial::max_abs_coeff).chain(self.r.values().map(|r| r.abs())).fold(self.scale.abs(), f64::max)
    }

    /// Summand count over σ₀ and all σᵢ.
    pub fn num_squares(&self) -> usize {
        self.sigma0.len() + self.sigma.values().map(Vec::len).sum::<usize>()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ResidualReport {
    pub max_residual: f64,
    /// Nonzero coefficients of `scale · (...) + 1`, keyed by monomial.
    pub residuals: BTreeMap<String, f64>,
    pub tolerance: f64,
    /// `Σ |residual(m)| · bound(|m|)`: how far the residual can move the
    /// identity in a model. Must stay below 1 for the refutation to hold.
    pub slack: f64,
    pub pass: bool,
    /// Largest total degree of any product in the certificate.
    pub max_degree: u32,
}

impl ResidualReport {
    pub fn to_json(&self) -> Value {
        json!({
            "pass": self.pass,
            "max_residual": self.max_residual,
            "tolerance": self.tolerance,
            "slack": self.slack,
            "max_degree": self.max_degree,
            "residuals": self.residuals,
        })
    }
}

/// The polynomial a multiplier key stands for, checked against its role.
fn resolve<'a>(g: &'a GroundTheory, id: &str, used: &'static str) -> Result<(Polynomial, &'a GroundConstraint), CertificateError> {
    let (negated, base) = match id.strip_prefix('-') {
        Some(rest) => (true, rest),
        None => (false, id),
    };
    let c = g.get(base).ok_or_else(|| CertificateError::Dangling(id.to_string()))?;
    let actual = role(c);
    let ok = match used {
        "a square multiplier" => actual == "inequality",
        "an equality multiplier" => actual == "equality",
        _ => actual == "bound" && (!negated || c.cmp == Cmp::Eq),
    };
    if !ok {
        return Err(CertificateError::WrongKind { id: id.to_string(), used, actual });
    }
    Ok((if negated { c.poly.scale(-1.0) } else { c.poly.clone() }, c))
}

fn role(c: &GroundConstraint) -> &'static str {
    match (c.kind, c.cmp) {
        (BodyKind::Logical, Cmp::Ge) => "inequality",
        (BodyKind::Logical, Cmp::Eq) => "equality",
        (BodyKind::Expectation, _) => "bound",
    }
}

/// Expands `scale · (σ₀ + Σσᵢgᵢ + Σqⱼhⱼ + Σr_k b_k) + 1` and compares every
/// coefficient against `tol`. The residual must also be too small to matter
/// in any model: weighted by the magnitude bounds of bounded relations it
/// has to stay below 1.
pub fn verify_certificate(g: &GroundTheory, cert: &Certificate, tol: f64) -> Result<ResidualReport, CertificateError> {
    if cert.scale.is_nan() || cert.scale <= 0.0 {
        return Err(CertificateError::BadScale(cert.scale));
    }
    let mut acc: HashMap<Monomial, f64> = HashMap::new();
    let mut max_degree = 0;
    let mut add = |p: &Polynomial, w: f64, acc: &mut HashMap<Monomial, f64>| {
        max_degree = max_degree.max(p.degree());
        for (m, c) in p.terms() {
            *acc.entry(m.clone()).or_insert(0.0) += w * c;
        }
    };
    for s in &cert.sigma0 {
        add(&s.square(), 1.0, &mut acc);
    }
    for (id, squares) in &cert.sigma {
        let (poly, _) = resolve(g, id, "a square multiplier")?;
        for s in squares {
            add(&s.square().mul(&poly), 1.0, &mut acc);
        }
    }
    for (id, q) in &cert.q {
        let (poly, _) = resolve(g, id, "an equality multiplier")?;
        add(&q.mul(&poly), 1.0, &mut acc);
    }
    for (id, &r) in &cert.r {
        if r < 0.0 {
            return Err(CertificateError::NegativeMultiplier(id.clone(), r));
        }
        let (poly, _) = resolve(g, id, "a bound multiplier")?;
        add(&poly, r, &mut acc);
    }
    let mut residuals = BTreeMap::new();
    let mut max_residual = 0.0f64;
    let mut slack = 0.0;
    let one = Monomial::one();
    let mut entries: Vec<(Monomial, f64)> = acc.into_iter().collect();
    if !entries.iter().any(|(m, _)| m.is_one()) {
        entries.push((one, 0.0));
    }
    for (m, c) in entries {
        let v = cert.scale * c + if m.is_one() { 1.0 } else { 0.0 };
        if v != 0.0 {
            max_residual = max_residual.max(v.abs());
            slack += v.abs() * g.magnitude(&m);
            residuals.insert(m.to_string(), v);
        }
    }
    Ok(ResidualReport { max_residual, residuals, tolerance: tol, slack, pass: max_residual <= tol && slack < 1.0, max_degree })
}

/// Index of ground constraints by role and polynomial.
struct ConstraintIndex<'a>(HashMap<(BodyKind, Cmp, &'a Polynomial), &'a str>);

impl<'a> ConstraintIndex<'a> {
    fn new(g: &'a GroundTheory) -> Self {
        ConstraintIndex(g.all().map(|c| ((c.kind, c.cmp, &c.poly), c.id.as_str())).collect())
    }

    fn image(&self, c: &GroundConstraint, r: &Renaming) -> Result<String, CertificateError> {
        let p = r.apply_poly(&c.poly);
        self.0.get(&(c.kind, c.cmp, &p)).map(|s| s.to_string()).ok_or_else(|| CertificateError::NotClosed(c.id.clone()))
    }
}

/// Factors `Y = Σ λ v vᵀ` and returns the polynomials `√λ · (v · rows)`.
fn factor(y: &nalgebra::DMatrix<f64>, rows: &[Monomial], origin: &str) -> Result<Vec<Polynomial>, CertificateError> {
    let eig = SymmetricEigen::new(y.clone());
    let mut out = Vec::new();
    for (l, &lam) in eig.eigenvalues.iter().enumerate() {
        if lam < -EIG_CLIP {
            return Err(CertificateError::NegativeEigenvalue { origin: origin.to_string(), value: lam });
        }
        if lam <= 0.0 {
            continue;
        }
        let v = eig.eigenvectors.column(l);
        let p = Polynomial::combine(rows.iter().zip(v.iter()).map(|(m, c)| (lam.sqrt() * c, m.clone())));
        if !p.is_zero() {
            out.push(p);
        }
    }
    Ok(out)
}

/// Turns a verifying dual witness into a refutation over `g`.
///
/// On a class-shared program the witness only cancels up to renaming, so the
/// multipliers are averaged over every permutation of the generic names; the
/// result is an identity in the ground polynomial ring.
pub fn extract_refutation(sdp: &LiftedSdp, g: &GroundTheory, w: &DualWitness) -> Result<Certificate, CertificateError> {
    let (res, neg) = w.residual(sdp);
    if res > WITNESS_TOL || neg > WITNESS_TOL {
        return Err(CertificateError::WitnessRejected(res.max(neg)));
    }
    let renamings: Vec<Renaming> = if sdp.shared { Renaming::all(g.k).collect() } else { vec![Renaming::default()] };
    let n = renamings.len() as f64;
    let index = ConstraintIndex::new(g);
    let mut cert = Certificate { scale: 1.0, degree: sdp.degree, tolerance: 1e-4, generics: g.k, ..Default::default() };
    for (b, dual) in sdp.blocks.iter().zip(&w.blocks) {
        match (b.kind, dual) {
            (BlockKind::Psd, BlockDual::Psd(y)) => {
                let squares = factor(y, &b.rows, &b.origin)?;
                if squares.is_empty() {
                    continue;
                }
                let c = if b.origin == "moment" { None } else { Some(g.get(&b.origin).ok_or_else(|| CertificateError::Dangling(b.origin.clone()))?) };
                for r in &renamings {
                    let renamed = squares.iter().map(|s| r.apply_poly(s).scale(1.0 / n.sqrt()));
                    match c {
                        None => cert.sigma0.extend(renamed),
                        Some(c) => cert.sigma.entry(index.image(c, r)?).or_default().extend(renamed),
                    }
                }
            }
            (BlockKind::Zero, BlockDual::Zero(y)) => {
                let q = Polynomial::combine(b.rows.iter().zip(y).map(|(m, c)| (*c, m.clone())));
                if q.is_zero() {
                    continue;
                }
                let c = g.get(&b.origin).ok_or_else(|| CertificateError::Dangling(b.origin.clone()))?;
                for r in &renamings {
                    let slot = cert.q.entry(index.image(c, r)?).or_insert_with(Polynomial::zero);
                    *slot = slot.add(&r.apply_poly(&q).scale(1.0 / n));
                }
            }
            _ => return Err(CertificateError::Malformed(format!("dual of block `{}` has the wrong shape", b.origin))),
        }
    }
    for (row, &y) in sdp.scalars.iter().zip(&w.scalars) {
        if y <= 0.0 {
            continue;
        }
        let c = g.get(&row.bound).ok_or_else(|| CertificateError::Dangling(row.bound.clone()))?;
        for r in &renamings {
            let id = index.image(c, r)?;
            let key = if row.sign < 0.0 { format!("-{id}") } else { id };
            *cert.r.entry(key).or_insert(0.0) += y / n;
        }
    }
    cert.q.retain(|_, q| !q.is_zero());
    // normalize so the expansion's constant is exactly -1
    let report = verify_certificate(g, &cert, f64::INFINITY)?;
    let constant = report.residuals.get("1").copied().unwrap_or(0.0) - 1.0;
    if constant < 0.0 {
        cert.scale = -1.0 / constant;
    }
    Ok(cert)
}

/// Replaces each moment by the mean of its images under all permutations
/// of `g1..gk`.
pub fn symmetrize(m: &MomentAssignment, k: u32) -> Result<MomentAssignment, CertificateError> {
    let renamings: Vec<Renaming> = Renaming::all(k).collect();
    let mut values = BTreeMap::new();
    for mono in m.values.keys() {
        let mut sum = 0.0;
        for r in &renamings {
            let image = r.apply(mono);
            sum += m.get(&image).ok_or_else(|| CertificateError::MissingClass(image.to_string()))?;
        }
        values.insert(mono.clone(), sum / renamings.len() as f64);
    }
    Ok(MomentAssignment { values })
}

/// Values every target monomial by the value of its renaming class in `m`,
/// which must be class-constant.
pub fn extend_pseudomodel(
    m: &MomentAssignment,
    targets: impl IntoIterator<Item = Monomial>,
) -> Result<MomentAssignment, CertificateError> {
    let by_class: HashMap<Monomial, f64> = m.values.iter().map(|(mono, v)| (canonicalize(mono).0, *v)).collect();
    let mut values = BTreeMap::new();
    for t in targets {
        if t.is_one() {
            continue;
        }
        let v = by_class.get(&canonicalize(&t).0).copied().ok_or_else(|| CertificateError::MissingClass(t.to_string()))?;
        values.insert(t, v);
    }
    Ok(MomentAssignment { values })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::compiler::{compile, CompileOptions};
    use crate::grounder::{ground, Universe};
    use crate::parser::{parse_constraint, parse_kb, parse_monomial};
    use crate::sdp::{solve_feasibility, SolveStatus, SolverConfig};

    fn poly(text: &str) -> Polynomial {
        // "c*M + c*M ..." with monomials in the serialized form
        Polynomial::combine(text.split(" + ").map(|t| {
            let (c, m) = t.split_once('*').unwrap();
            let m = if m == "1" { Monomial::one() } else { parse_monomial(m).unwrap() };
            (c.parse::<f64>().unwrap(), m)
        }))
    }

    fn id_of(g: &GroundTheory, p: &Polynomial) -> String {
        g.all().find(|c| &c.poly == p).unwrap_or_else(|| panic!("no constraint {p}")).id.clone()
    }

    const CONTRA: &str = "relation P/1 boolean; constant a; e(P(a)) >= 1; e(P(a)) <= 0;";

    #[test]
    fn contradictory_scalars_certificate() {
        let kb = parse_kb(CONTRA).unwrap().kb;
        let g = ground(&kb, Universe::OpenUniverse).unwrap();
        let sdp = compile(&g, &CompileOptions::new(2)).unwrap();
        let SolveStatus::Infeasible(w) = solve_feasibility(&sdp, &SolverConfig::default()) else { panic!() };
        let cert = extract_refutation(&sdp, &g, &w).unwrap();
        let rep = verify_certificate(&g, &cert, 1e-6).unwrap();
        assert!(rep.pass, "{rep:?}");
        assert!(rep.max_degree <= 2);

        let mut hand = Certificate { scale: 1.0, degree: 2, tolerance: 1e-12, ..Default::default() };
        hand.r.insert("b1".into(), 1.0);
        hand.r.insert("b2".into(), 1.0);
        let rep = verify_certificate(&g, &hand, 1e-12).unwrap();
        assert!(rep.pass && rep.max_residual == 0.0, "{rep:?}");
    }

    #[test]
    fn verifier_rejects_bad_references() {
        let kb = parse_kb(CONTRA).unwrap().kb;
        let g = ground(&kb, Universe::OpenUniverse).unwrap();
        let mut c = Certificate { scale: 1.0, degree: 2, ..Default::default() };
        c.r.insert("b9".into(), 1.0);
        assert_eq!(verify_certificate(&g, &c, 1e-6), Err(CertificateError::Dangling("b9".into())));
        c.r.clear();
        c.r.insert("b1".into(), -1.0);
        assert!(matches!(verify_certificate(&g, &c, 1e-6), Err(CertificateError::NegativeMultiplier(..))));
        c.r.clear();
        c.r.insert("-b1".into(), 1.0);
        assert!(matches!(verify_certificate(&g, &c, 1e-6), Err(CertificateError::WrongKind { .. })));
        c.r.clear();
        c.q.insert("b1".into(), Polynomial::constant(1.0));
        assert!(matches!(verify_certificate(&g, &c, 1e-6), Err(CertificateError::WrongKind { .. })));
    }

    #[test]
    fn perturbed_certificate_fails() {
        let kb = parse_kb(CONTRA).unwrap().kb;
        let g = ground(&kb, Universe::OpenUniverse).unwrap();
        let mut c = Certificate { scale: 1.0, degree: 2, ..Default::default() };
        c.r.insert("b1".into(), 1.0);
        c.r.insert("b2".into(), 1.01);
        let rep = verify_certificate(&g, &c, 1e-6).unwrap();
        assert!(!rep.pass);
        assert!((rep.max_residual - 1e-2).abs() < 1e-12, "{rep:?}");
    }

    #[test]
    fn json_round_trip() {
        let mut c = Certificate { scale: 2.5, degree: 4, tolerance: 1e-6, generics: 3, appended: vec!["e(P(g1)) <= 0.1".into()], ..Default::default() };
        c.sigma0.push(poly("1*1 + -2*P(a)"));
        c.sigma.insert("g1".into(), vec![poly("0.5*P(a)*Q(g1)")]);
        c.q.insert("h2".into(), poly("-1*P(a)^2"));
        c.r.insert("-b3".into(), 0.75);
        let text = serde_json::to_string(&c.to_json()).unwrap();
        let back = Certificate::from_json(&serde_json::from_str(&text).unwrap()).unwrap();
        assert_eq!(back, c);
        assert!(Certificate::from_json(&json!({"scale": 1.0})).is_err());
    }

    #[test]
    fn symmetrize_averages_renamings() {
        let q = |a: &str, b: &str| parse_monomial(&format!("Q({a},{b})")).unwrap();
        let m = MomentAssignment { values: [(q("g1", "g2"), 2.0), (q("g2", "g1"), 4.0)].into() };
        let s = symmetrize(&m, 2).unwrap();
        assert_eq!(s.get(&q("g1", "g2")), Some(3.0));
        assert_eq!(s.get(&q("g2", "g1")), Some(3.0));
        let even = MomentAssignment { values: [(q("g1", "g2"), 3.0), (q("g2", "g1"), 3.0)].into() };
        assert_eq!(symmetrize(&even, 2).unwrap(), even);
        let lone = MomentAssignment { values: [(q("g1", "g2"), 1.0)].into() };
        assert!(symmetrize(&lone, 2).is_err());
    }

    #[test]
    fn extension_looks_up_classes() {
        let p = |a: &str| parse_monomial(&format!("P({a})")).unwrap();
        let m = MomentAssignment { values: [(p("g1"), 0.4), (p("a"), 0.9)].into() };
        let ext = extend_pseudomodel(&m, [p("g7"), p("a"), p("g1")]).unwrap();
        assert_eq!(ext.get(&p("g7")), Some(0.4));
        assert_eq!(ext.get(&p("a")), Some(0.9));
        assert!(extend_pseudomodel(&m, [parse_monomial("P(b)").unwrap()]).is_err());
    }

    #[test]
    fn placeholder_query_certificate_verifies() {
        let text = "relation P/1 boolean; forall x : e(P(x)) - 0.5 >= 0;";
        let kb = parse_kb(text).unwrap().kb;
        let kb = kb.with_constraints([parse_constraint("e(P(g1)) <= 0.4", &kb).unwrap()]);
        let g = ground(&kb, Universe::Names(2)).unwrap();
        let sdp = compile(&g, &CompileOptions::new(2)).unwrap();
        let SolveStatus::Infeasible(w) = solve_feasibility(&sdp, &SolverConfig::default()) else { panic!() };
        let cert = extract_refutation(&sdp, &g, &w).unwrap();
        let rep = verify_certificate(&g, &cert, 1e-6).unwrap();
        assert!(rep.pass, "{rep:?}");
        let neg = id_of(&g, &poly("0.4*1 + -1*P(g2)"));
        assert!(cert.r.contains_key(&neg));
    }

    #[test]
    fn residual_weighed_by_magnitude() {
        // Y >= 1e8 is satisfiable, yet r = 1 leaves only a 1e-8 coefficient
        for (decl, pass) in [("relation Y/1 bounded 1e18;", false), ("relation Y/1;", true)] {
            let kb = parse_kb(&format!("{decl} constant a; 1e-8*e(Y(a)) - 1 >= 0;")).unwrap().kb;
            let g = ground(&kb, Universe::DomainClosure).unwrap();
            let mut c = Certificate { scale: 1.0, degree: 2, ..Default::default() };
            c.r.insert(g.bounds[0].id.clone(), 1.0);
            let rep = verify_certificate(&g, &c, 1e-6).unwrap();
            assert!(rep.max_residual <= 1e-6);
            assert_eq!(rep.pass, pass, "{decl} {rep:?}");
        }
    }
}
