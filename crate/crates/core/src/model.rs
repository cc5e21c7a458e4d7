//! Terms, monomials, polynomials and first-order constraints.
//!
//! Everything here is an immutable value type. Ground and non-ground objects
//! share the same representation: a [`Term`] is ground when every argument is
//! a [`Name`].

use std::cmp::{Ordering, Reverse};
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::hash::{Hash, Hasher};

use serde::{Deserialize, Serialize};

/// A domain element. Constants sort before generics; generics sort by index.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Name {
    Constant(String),
    /// Placeholder generic name `g<index>`, 1-based.
    Generic(u32),
}

impl Name {
    pub fn constant(label: impl Into<String>) -> Self {
        Name::Constant(label.into())
    }

    pub fn is_generic(&self) -> bool {
        matches!(self, Name::Generic(_))
    }

    /// Parses an identifier, recognising the reserved `g<digits>` spelling.
    pub fn from_label(label: &str) -> Self {
        match generic_index(label) {
            Some(i) => Name::Generic(i),
            None => Name::Constant(label.to_string()),
        }
    }
}

/// Returns the index when `label` is spelled `g1`, `g2`, ...
pub fn generic_index(label: &str) -> Option<u32> {
    let digits = label.strip_prefix('g')?;
    if digits.is_empty() || digits.starts_with('0') || !digits.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    digits.parse().ok()
}

impl fmt::Display for Name {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Name::Constant(label) => f.write_str(label),
            Name::Generic(i) => write!(f, "g{i}"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Var(pub String);

impl fmt::Display for Var {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// Argument position of a term or guard atom.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Arg {
    Name(Name),
    Var(Var),
}

impl Arg {
    pub fn var(label: &str) -> Self {
        Arg::Var(Var(label.to_string()))
    }

    pub fn name(label: &str) -> Self {
        Arg::Name(Name::from_label(label))
    }
}

impl fmt::Display for Arg {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Arg::Name(n) => n.fmt(f),
            Arg::Var(v) => v.fmt(f),
        }
    }
}

/// Variable bindings. Applying a substitution leaves unbound variables alone.
pub type Substitution = BTreeMap<Var, Name>;

/// A relation symbol applied to a tuple of arguments.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Term {
    pub relation: String,
    pub args: Vec<Arg>,
}

impl Term {
    pub fn new(relation: impl Into<String>, args: Vec<Arg>) -> Self {
        Term { relation: relation.into(), args }
    }

    /// Ground term from name labels (`g<i>` labels become generics).
    pub fn ground(relation: &str, names: &[&str]) -> Self {
        Term::new(relation, names.iter().map(|n| Arg::name(n)).collect())
    }

    pub fn is_ground(&self) -> bool {
        self.args.iter().all(|a| matches!(a, Arg::Name(_)))
    }

    pub fn vars(&self) -> impl Iterator<Item = &Var> {
        self.args.iter().filter_map(|a| match a {
            Arg::Var(v) => Some(v),
            Arg::Name(_) => None,
        })
    }

    pub fn names(&self) -> impl Iterator<Item = &Name> {
        self.args.iter().filter_map(|a| match a {
            Arg::Name(n) => Some(n),
            Arg::Var(_) => None,
        })
    }

    pub fn substitute(&self, theta: &Substitution) -> Term {
        Term {
            relation: self.relation.clone(),
            args: self
                .args
                .iter()
                .map(|a| match a {
                    Arg::Var(v) => theta.get(v).map_or_else(|| a.clone(), |n| Arg::Name(n.clone())),
                    Arg::Name(_) => a.clone(),
                })
                .collect(),
        }
    }

    pub fn map_names(&self, f: &impl Fn(&Name) -> Name) -> Term {
        Term {
            relation: self.relation.clone(),
            args: self
                .args
                .iter()
                .map(|a| match a {
                    Arg::Name(n) => Arg::Name(f(n)),
                    Arg::Var(_) => a.clone(),
                })
                .collect(),
        }
    }
}

impl fmt::Display for Term {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}(", self.relation)?;
        for (i, a) in self.args.iter().enumerate() {
            if i > 0 {
                f.write_str(",")?;
            }
            a.fmt(f)?;
        }
        f.write_str(")")
    }
}

/// A product of terms with positive exponents. The empty product is `1`.
///
/// Ordering is graded: lower total degree first, then lexicographic over the
/// sorted factor list (relation label, then arguments, constants before
/// generics), preferring higher exponents.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash)]
pub struct Monomial {
    factors: BTreeMap<Term, u32>,
}

impl Monomial {
    pub fn one() -> Self {
        Monomial::default()
    }

    pub fn from_term(term: Term) -> Self {
        Monomial::from_factors([(term, 1)])
    }

    /// Builds a monomial, merging repeated terms and dropping zero exponents.
    pub fn from_factors(factors: impl IntoIterator<Item = (Term, u32)>) -> Self {
        let mut map = BTreeMap::new();
        for (t, e) in factors {
            if e > 0 {
                *map.entry(t).or_insert(0) += e;
            }
        }
        Monomial { factors: map }
    }

    pub fn degree(&self) -> u32 {
        self.factors.values().sum()
    }

    pub fn is_one(&self) -> bool {
        self.factors.is_empty()
    }

    pub fn factors(&self) -> impl Iterator<Item = (&Term, u32)> {
        self.factors.iter().map(|(t, e)| (t, *e))
    }

    pub fn terms(&self) -> impl Iterator<Item = &Term> {
        self.factors.keys()
    }

    pub fn is_ground(&self) -> bool {
        self.factors.keys().all(Term::is_ground)
    }

    pub fn mul(&self, other: &Monomial) -> Monomial {
        let mut factors = self.factors.clone();
        for (t, e) in &other.factors {
            *factors.entry(t.clone()).or_insert(0) += e;
        }
        Monomial { factors }
    }

    pub fn pow(&self, n: u32) -> Monomial {
        if n == 0 {
            return Monomial::one();
        }
        Monomial { factors: self.factors.iter().map(|(t, e)| (t.clone(), e * n)).collect() }
    }

    pub fn substitute(&self, theta: &Substitution) -> Monomial {
        Monomial::from_factors(self.factors.iter().map(|(t, e)| (t.substitute(theta), *e)))
    }

    pub fn map_names(&self, f: &impl Fn(&Name) -> Name) -> Monomial {
        Monomial::from_factors(self.factors.iter().map(|(t, e)| (t.map_names(f), *e)))
    }

    /// Distinct generic names, in order.
    pub fn generics(&self) -> BTreeSet<u32> {
        self.factors
            .keys()
            .flat_map(Term::names)
            .filter_map(|n| match n {
                Name::Generic(i) => Some(*i),
                Name::Constant(_) => None,
            })
            .collect()
    }
}

impl Ord for Monomial {
    fn cmp(&self, other: &Self) -> Ordering {
        // within a degree, higher powers of earlier terms come first
        self.degree().cmp(&other.degree()).then_with(|| {
            self.factors
                .iter()
                .map(|(t, e)| (t, Reverse(*e)))
                .cmp(other.factors.iter().map(|(t, e)| (t, Reverse(*e))))
        })
    }
}

impl PartialOrd for Monomial {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl fmt::Display for Monomial {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_one() {
            return f.write_str("1");
        }
        for (i, (t, e)) in self.factors.iter().enumerate() {
            if i > 0 {
                f.write_str("*")?;
            }
            t.fmt(f)?;
            if *e > 1 {
                write!(f, "^{e}")?;
            }
        }
        Ok(())
    }
}

pub fn monomial_degree(m: &Monomial) -> u32 {
    m.degree()
}

pub fn monomial_multiply(a: &Monomial, b: &Monomial) -> Monomial {
    a.mul(b)
}

/// A finite real combination of monomials with no zero coefficients stored.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Polynomial {
    terms: BTreeMap<Monomial, f64>,
}

impl Eq for Polynomial {}

impl Hash for Polynomial {
    fn hash<H: Hasher>(&self, state: &mut H) {
        for (m, c) in &self.terms {
            m.hash(state);
            c.to_bits().hash(state);
        }
    }
}

impl Polynomial {
    pub fn zero() -> Self {
        Polynomial::default()
    }

    pub fn constant(c: f64) -> Self {
        Polynomial::combine([(c, Monomial::one())])
    }

    pub fn from_monomial(m: Monomial) -> Self {
        Polynomial::combine([(1.0, m)])
    }

    pub fn from_term(t: Term) -> Self {
        Polynomial::from_monomial(Monomial::from_term(t))
    }

    /// Merges like monomials and drops coefficients that cancel to zero.
    pub fn combine(raw: impl IntoIterator<Item = (f64, Monomial)>) -> Self {
        let mut terms: BTreeMap<Monomial, f64> = BTreeMap::new();
        for (c, m) in raw {
            *terms.entry(m).or_insert(0.0) += c;
        }
        // + 0.0 turns a negative zero into a positive one
        terms.retain(|_, c| *c != 0.0);
        for c in terms.values_mut() {
            *c += 0.0;
        }
        Polynomial { terms }
    }

    pub fn is_zero(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn degree(&self) -> u32 {
        self.terms.keys().map(Monomial::degree).max().unwrap_or(0)
    }

    pub fn len(&self) -> usize {
        self.terms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn terms(&self) -> impl Iterator<Item = (&Monomial, f64)> {
        self.terms.iter().map(|(m, c)| (m, *c))
    }

    pub fn coeff(&self, m: &Monomial) -> f64 {
        self.terms.get(m).copied().unwrap_or(0.0)
    }

    pub fn constant_term(&self) -> f64 {
        self.coeff(&Monomial::one())
    }

    pub fn max_abs_coeff(&self) -> f64 {
        self.terms.values().fold(0.0, |acc, c| acc.max(c.abs()))
    }

    pub fn add(&self, other: &Polynomial) -> Polynomial {
        Polynomial::combine(self.terms().chain(other.terms()).map(|(m, c)| (c, m.clone())))
    }

    pub fn sub(&self, other: &Polynomial) -> Polynomial {
        self.add(&other.scale(-1.0))
    }

    pub fn scale(&self, s: f64) -> Polynomial {
        Polynomial::combine(self.terms().map(|(m, c)| (s * c, m.clone())))
    }

    pub fn mul(&self, other: &Polynomial) -> Polynomial {
        let mut raw = Vec::with_capacity(self.len() * other.len());
        for (a, ca) in self.terms() {
            for (b, cb) in other.terms() {
                raw.push((ca * cb, a.mul(b)));
            }
        }
        Polynomial::combine(raw)
    }

    pub fn square(&self) -> Polynomial {
        self.mul(self)
    }

    pub fn pow(&self, n: u32) -> Polynomial {
        (0..n).fold(Polynomial::constant(1.0), |acc, _| acc.mul(self))
    }

    pub fn substitute(&self, theta: &Substitution) -> Polynomial {
        Polynomial::combine(self.terms().map(|(m, c)| (c, m.substitute(theta))))
    }

    pub fn map_monomials(&self, f: impl Fn(&Monomial) -> Monomial) -> Polynomial {
        Polynomial::combine(self.terms().map(|(m, c)| (c, f(m))))
    }

    pub fn is_ground(&self) -> bool {
        self.terms.keys().all(Monomial::is_ground)
    }

    /// Distinct terms across all monomials.
    pub fn term_set(&self) -> BTreeSet<Term> {
        self.terms.keys().flat_map(|m| m.terms().cloned()).collect()
    }

    pub fn vars(&self) -> BTreeSet<Var> {
        self.terms.keys().flat_map(|m| m.terms().flat_map(|t| t.vars().cloned()).collect::<Vec<_>>()).collect()
    }
}

impl fmt::Display for Polynomial {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write_polynomial(f, self, |f, m| write!(f, "{m}"))
    }
}

/// Writes `c1*m1 + c2*m2 - ...` with a caller-supplied monomial renderer.
pub(crate) fn write_polynomial(
    f: &mut impl fmt::Write,
    p: &Polynomial,
    mono: impl Fn(&mut dyn fmt::Write, &Monomial) -> fmt::Result,
) -> fmt::Result {
    if p.is_zero() {
        return f.write_str("0");
    }
    for (i, (m, c)) in p.terms().enumerate() {
        let (sign, mag) = if c < 0.0 { ("-", -c) } else { ("+", c) };
        if i == 0 {
            if sign == "-" {
                f.write_str("-")?;
            }
        } else {
            write!(f, " {sign} ")?;
        }
        if m.is_one() {
            write!(f, "{mag}")?;
        } else {
            if mag != 1.0 {
                write!(f, "{mag}*")?;
            }
            mono(f, m)?;
        }
    }
    Ok(())
}

/// Comparison of a polynomial against zero.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Cmp {
    #[serde(rename = ">=")]
    Ge,
    #[serde(rename = "=")]
    Eq,
}

impl fmt::Display for Cmp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Cmp::Ge => ">=",
            Cmp::Eq => "=",
        })
    }
}

/// `poly >= 0` or `poly = 0`.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct PolyConstraint {
    pub poly: Polynomial,
    pub cmp: Cmp,
}

impl PolyConstraint {
    pub fn new(poly: Polynomial, cmp: Cmp) -> Self {
        PolyConstraint { poly, cmp }
    }

    pub fn degree(&self) -> u32 {
        self.poly.degree()
    }
}

pub fn polynomial_combine(raw: impl IntoIterator<Item = (f64, Monomial)>, cmp: Cmp) -> PolyConstraint {
    PolyConstraint::new(Polynomial::combine(raw), cmp)
}

/// Boolean combination of equality atoms restricting a quantifier.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum Guard {
    True,
    Eq(Arg, Arg),
    Not(Box<Guard>),
    And(Box<Guard>, Box<Guard>),
    Or(Box<Guard>, Box<Guard>),
}

impl Guard {
    pub fn neq(a: Arg, b: Arg) -> Guard {
        Guard::Not(Box::new(Guard::Eq(a, b)))
    }

    pub fn and(a: Guard, b: Guard) -> Guard {
        match (a, b) {
            (Guard::True, g) | (g, Guard::True) => g,
            (a, b) => Guard::And(Box::new(a), Box::new(b)),
        }
    }

    pub fn or(a: Guard, b: Guard) -> Guard {
        Guard::Or(Box::new(a), Box::new(b))
    }

    pub fn is_trivial(&self) -> bool {
        matches!(self, Guard::True)
    }

    /// Every argument mentioned by an atom.
    pub fn args(&self) -> Vec<&Arg> {
        let mut out = Vec::new();
        self.collect_args(&mut out);
        out
    }

    fn collect_args<'a>(&'a self, out: &mut Vec<&'a Arg>) {
        match self {
            Guard::True => {}
            Guard::Eq(a, b) => {
                out.push(a);
                out.push(b);
            }
            Guard::Not(g) => g.collect_args(out),
            Guard::And(a, b) | Guard::Or(a, b) => {
                a.collect_args(out);
                b.collect_args(out);
            }
        }
    }

    pub fn vars(&self) -> BTreeSet<Var> {
        self.args()
            .into_iter()
            .filter_map(|a| match a {
                Arg::Var(v) => Some(v.clone()),
                Arg::Name(_) => None,
            })
            .collect()
    }

    fn precedence(&self) -> u8 {
        match self {
            Guard::Or(..) => 1,
            Guard::And(..) => 2,
            Guard::Not(..) => 3,
            Guard::True | Guard::Eq(..) => 4,
        }
    }

    fn fmt_prec(&self, f: &mut fmt::Formatter<'_>, min: u8) -> fmt::Result {
        let paren = self.precedence() < min;
        if paren {
            f.write_str("(")?;
        }
        match self {
            Guard::True => f.write_str("true")?,
            Guard::Eq(a, b) => write!(f, "{a} = {b}")?,
            Guard::Not(g) => match g.as_ref() {
                Guard::Eq(a, b) => write!(f, "{a} != {b}")?,
                g => {
                    f.write_str("!")?;
                    g.fmt_prec(f, 4)?;
                }
            },
            // the parser is left-associative; keep that shape on output
            Guard::And(a, b) => {
                a.fmt_prec(f, 2)?;
                f.write_str(" & ")?;
                b.fmt_prec(f, 3)?;
            }
            Guard::Or(a, b) => {
                a.fmt_prec(f, 1)?;
                f.write_str(" | ")?;
                b.fmt_prec(f, 2)?;
            }
        }
        if paren {
            f.write_str(")")?;
        }
        Ok(())
    }
}

impl fmt::Display for Guard {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.fmt_prec(f, 0)
    }
}

/// Logical constraints hold with probability one; expectation constraints are
/// linear in moment terms `e(μ)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BodyKind {
    Logical,
    Expectation,
}

/// `forall vars : guard => body`. For expectation bodies the polynomial's
/// monomials stand for the moments `e(μ)` and the constant monomial for `e(1)`.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Constraint {
    pub vars: Vec<Var>,
    pub guard: Guard,
    pub kind: BodyKind,
    pub body: PolyConstraint,
}

impl Constraint {
    pub fn logical(vars: &[&str], guard: Guard, body: PolyConstraint) -> Self {
        Constraint { vars: vars.iter().map(|v| Var(v.to_string())).collect(), guard, kind: BodyKind::Logical, body }
    }

    pub fn expectation(vars: &[&str], guard: Guard, body: PolyConstraint) -> Self {
        Constraint { vars: vars.iter().map(|v| Var(v.to_string())).collect(), guard, kind: BodyKind::Expectation, body }
    }

    /// Variables occurring in the guard or body.
    pub fn occurring_vars(&self) -> BTreeSet<Var> {
        let mut vars = self.guard.vars();
        vars.extend(self.body.poly.vars());
        vars
    }

    pub fn quantifier_rank(&self) -> usize {
        self.occurring_vars().len()
    }

    pub fn degree(&self) -> u32 {
        self.body.degree()
    }

    pub fn terms(&self) -> BTreeSet<Term> {
        self.body.poly.term_set()
    }

    /// Generic placeholders mentioned directly (queries over `g1..gk`).
    pub fn max_generic(&self) -> u32 {
        let from_body = self.body.poly.terms().flat_map(|(m, _)| m.generics()).max().unwrap_or(0);
        let from_guard = self
            .guard
            .args()
            .into_iter()
            .filter_map(|a| match a {
                Arg::Name(Name::Generic(i)) => Some(*i),
                _ => None,
            })
            .max()
            .unwrap_or(0);
        from_body.max(from_guard)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RelationSymbol {
    pub label: String,
    pub arity: usize,
    /// Declared with `boolean`; expands to `forall x̄ : P(x̄)^2 - P(x̄) = 0`.
    #[serde(default)]
    pub boolean: bool,
    /// Declared with `bounded U`; expands to `forall x̄ : U - P(x̄)^2 >= 0`.
    #[serde(default)]
    pub bound: Option<f64>,
}

impl RelationSymbol {
    pub fn new(label: impl Into<String>, arity: usize) -> Self {
        RelationSymbol { label: label.into(), arity, boolean: false, bound: None }
    }

    pub fn boolean(mut self) -> Self {
        self.boolean = true;
        self
    }

    pub fn bounded(mut self, u: f64) -> Self {
        self.bound = Some(u);
        self
    }

    fn generic_term(&self) -> (Vec<Var>, Term) {
        let vars: Vec<Var> = (1..=self.arity).map(|i| Var(format!("x{i}"))).collect();
        let term = Term::new(self.label.clone(), vars.iter().cloned().map(Arg::Var).collect());
        (vars, term)
    }

    /// Axioms introduced by the declaration flags.
    pub fn axioms(&self) -> Vec<Constraint> {
        let (vars, term) = self.generic_term();
        let t = Monomial::from_term(term);
        let mut out = Vec::new();
        if self.boolean {
            out.push(Constraint {
                vars: vars.clone(),
                guard: Guard::True,
                kind: BodyKind::Logical,
                body: polynomial_combine([(1.0, t.pow(2)), (-1.0, t.clone())], Cmp::Eq),
            });
        }
        if let Some(u) = self.bound {
            out.push(Constraint {
                vars,
                guard: Guard::True,
                kind: BodyKind::Logical,
                body: polynomial_combine([(u, Monomial::one()), (-1.0, t.pow(2))], Cmp::Ge),
            });
        }
        out
    }

    /// Whether `c` is, up to renaming its variables, one of this relation's
    /// Boolean or bound axioms.
    pub fn is_compactness_axiom(&self, c: &Constraint) -> bool {
        if c.kind != BodyKind::Logical || !c.guard.is_trivial() {
            return false;
        }
        let terms = c.terms();
        let Some(term) = terms.iter().next() else { return false };
        if terms.len() != 1 || term.relation != self.label {
            return false;
        }
        let vars: Vec<&Var> = term.vars().collect();
        let distinct: BTreeSet<&Var> = vars.iter().copied().collect();
        if vars.len() != self.arity || distinct.len() != self.arity {
            return false;
        }
        let t = Monomial::from_term(term.clone());
        let p = &c.body.poly;
        let boolean = c.body.cmp == Cmp::Eq
            && p.len() == 2
            && p.coeff(&t.pow(2)) != 0.0
            && p.coeff(&t.pow(2)) == -p.coeff(&t);
        let bounded = c.body.cmp == Cmp::Ge
            && p.len() == 2
            && p.coeff(&t.pow(2)) < 0.0
            && p.constant_term() >= 0.0;
        boolean || bounded
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Severity {
    Error,
    Warning,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind", content = "at")]
pub enum Location {
    Kb,
    Relation(String),
    Constant(String),
    /// Index into [`KnowledgeBase::constraints`].
    Constraint(usize),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Diagnostic {
    pub severity: Severity,
    pub location: Location,
    pub message: String,
}

impl Diagnostic {
    fn error(location: Location, message: impl Into<String>) -> Self {
        Diagnostic { severity: Severity::Error, location, message: message.into() }
    }

    fn warning(location: Location, message: impl Into<String>) -> Self {
        Diagnostic { severity: Severity::Warning, location, message: message.into() }
    }

    pub fn is_error(&self) -> bool {
        self.severity == Severity::Error
    }
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let sev = match self.severity {
            Severity::Error => "error",
            Severity::Warning => "warning",
        };
        match &self.location {
            Location::Kb => write!(f, "{sev}: {}", self.message),
            Location::Relation(r) => write!(f, "{sev} (relation {r}): {}", self.message),
            Location::Constant(c) => write!(f, "{sev} (constant {c}): {}", self.message),
            Location::Constraint(i) => write!(f, "{sev} (constraint {i}): {}", self.message),
        }
    }
}

/// Declarations plus constraints. Declaration sugar is expanded on
/// construction, so `constraints` holds the full axiom set.
#[derive(Clone, Debug)]
pub struct KnowledgeBase {
    relations: Vec<RelationSymbol>,
    constants: Vec<String>,
    constraints: Vec<Constraint>,
}

impl KnowledgeBase {
    /// Expands relation sugar (axioms first, in declaration order) and drops
    /// exact duplicate constraints.
    pub fn new(relations: Vec<RelationSymbol>, constants: Vec<String>, constraints: Vec<Constraint>) -> Self {
        let mut all: Vec<Constraint> = relations.iter().flat_map(RelationSymbol::axioms).collect();
        all.extend(constraints);
        let mut seen = std::collections::HashSet::new();
        all.retain(|c| seen.insert(c.clone()));
        KnowledgeBase { relations, constants, constraints: all }
    }

    pub fn relations(&self) -> &[RelationSymbol] {
        &self.relations
    }

    pub fn relation(&self, label: &str) -> Option<&RelationSymbol> {
        self.relations.iter().find(|r| r.label == label)
    }

    pub fn constants(&self) -> &[String] {
        &self.constants
    }

    pub fn constant_names(&self) -> Vec<Name> {
        let set: BTreeSet<Name> = self.constants.iter().map(|c| Name::Constant(c.clone())).collect();
        set.into_iter().collect()
    }

    pub fn constraints(&self) -> &[Constraint] {
        &self.constraints
    }

    pub fn is_empty(&self) -> bool {
        self.constraints.is_empty()
    }

    /// Maximum quantifier rank over all constraints.
    pub fn rank(&self) -> usize {
        self.constraints.iter().map(Constraint::quantifier_rank).max().unwrap_or(0)
    }

    pub fn max_degree(&self) -> u32 {
        self.constraints.iter().map(Constraint::degree).max().unwrap_or(0)
    }

    /// Largest `g<i>` mentioned by any constraint.
    pub fn max_generic(&self) -> u32 {
        self.constraints.iter().map(Constraint::max_generic).max().unwrap_or(0)
    }

    /// `Δ ∪ q`.
    pub fn with_constraints(&self, extra: impl IntoIterator<Item = Constraint>) -> KnowledgeBase {
        let mut constraints = self.constraints.clone();
        for c in extra {
            if !constraints.contains(&c) {
                constraints.push(c);
            }
        }
        KnowledgeBase { relations: self.relations.clone(), constants: self.constants.clone(), constraints }
    }

    /// Adds constants that take part in grounding but appear in no constraint.
    pub fn with_constants(&self, extra: impl IntoIterator<Item = String>) -> KnowledgeBase {
        let mut kb = self.clone();
        for c in extra {
            if !kb.constants.contains(&c) {
                kb.constants.push(c);
            }
        }
        kb
    }

    /// Declaration, arity, scope and finiteness checks.
    pub fn validate(&self) -> Vec<Diagnostic> {
        let mut out = Vec::new();
        if self.constraints.is_empty() {
            out.push(Diagnostic::error(Location::Kb, "knowledge base must be non-empty"));
        }
        let mut labels = BTreeSet::new();
        for r in &self.relations {
            let at = || Location::Relation(r.label.clone());
            if !labels.insert(r.label.as_str()) {
                out.push(Diagnostic::error(at(), format!("relation `{}` declared twice", r.label)));
            }
            if r.arity == 0 {
                out.push(Diagnostic::error(at(), "arity must be at least 1"));
            }
            if r.label == "e" {
                out.push(Diagnostic::error(at(), "`e` is reserved for moment terms"));
            }
            if let Some(u) = r.bound {
                if !u.is_finite() || u < 0.0 {
                    out.push(Diagnostic::error(at(), format!("bound {u} must be finite and nonnegative")));
                }
            }
        }
        let mut consts = BTreeSet::new();
        for c in &self.constants {
            if !consts.insert(c.as_str()) {
                out.push(Diagnostic::error(Location::Constant(c.clone()), format!("constant `{c}` declared twice")));
            }
            if generic_index(c).is_some() {
                out.push(Diagnostic::error(
                    Location::Constant(c.clone()),
                    format!("`{c}` is reserved for generic placeholders"),
                ));
            }
            if self.relation(c).is_some() {
                out.push(Diagnostic::error(
                    Location::Constant(c.clone()),
                    format!("`{c}` is declared both as a relation and a constant"),
                ));
            }
        }
        for (i, c) in self.constraints.iter().enumerate() {
            self.validate_constraint(i, c, &consts, &mut out);
        }
        if !self.constraints.is_empty() {
            for r in &self.relations {
                let used = self.constraints.iter().any(|c| c.terms().iter().any(|t| t.relation == r.label));
                let compact = self.constraints.iter().any(|c| r.is_compactness_axiom(c));
                if used && !compact {
                    out.push(Diagnostic::warning(
                        Location::Relation(r.label.clone()),
                        format!("relation `{}` is neither boolean nor bounded; refutation completeness is not guaranteed", r.label),
                    ));
                }
            }
        }
        out
    }

    fn validate_constraint(&self, i: usize, c: &Constraint, consts: &BTreeSet<&str>, out: &mut Vec<Diagnostic>) {
        let at = || Location::Constraint(i);
        let declared: BTreeSet<&Var> = c.vars.iter().collect();
        let mut reported = BTreeSet::new();
        let mut check_arg = |a: &Arg, out: &mut Vec<Diagnostic>| match a {
            Arg::Var(v) if !declared.contains(v) => {
                if reported.insert(v.0.clone()) {
                    out.push(Diagnostic::error(at(), format!("`{v}` is not a quantified variable")));
                }
            }
            Arg::Name(Name::Constant(n)) if !consts.contains(n.as_str()) => {
                if reported.insert(n.clone()) {
                    out.push(Diagnostic::error(
                        at(),
                        format!("`{n}` is neither a quantified variable nor a declared constant"),
                    ));
                }
            }
            _ => {}
        };
        for a in c.guard.args() {
            check_arg(a, out);
        }
        for t in c.terms() {
            match self.relation(&t.relation) {
                None => out.push(Diagnostic::error(at(), format!("undeclared relation `{}`", t.relation))),
                Some(r) if r.arity != t.args.len() => out.push(Diagnostic::error(
                    at(),
                    format!("`{}` has arity {} but is applied to {} argument(s)", r.label, r.arity, t.args.len()),
                )),
                _ => {}
            }
            for a in &t.args {
                check_arg(a, out);
            }
        }
        if c.body.poly.terms().any(|(_, k)| !k.is_finite()) {
            out.push(Diagnostic::error(at(), "coefficients must be finite"));
        }
    }
}

/// Structural equality: relations by label and arity (declaration sugar is
/// provenance only), constants as a set, constraints in order.
impl PartialEq for KnowledgeBase {
    fn eq(&self, other: &Self) -> bool {
        let rels = |kb: &KnowledgeBase| kb.relations.iter().map(|r| (r.label.clone(), r.arity)).collect::<Vec<_>>();
        let consts = |kb: &KnowledgeBase| kb.constants.iter().cloned().collect::<BTreeSet<_>>();
        rels(self) == rels(other) && consts(self) == consts(other) && self.constraints == other.constraints
    }
}

pub fn kb_rank(kb: &KnowledgeBase) -> usize {
    kb.rank()
}

pub fn validate_kb(kb: &KnowledgeBase) -> Vec<Diagnostic> {
    kb.validate()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rel: &str, names: &[&str]) -> Monomial {
        Monomial::from_term(Term::ground(rel, names))
    }

    #[test]
    fn degrees() {
        assert_eq!(monomial_degree(&Monomial::one()), 0);
        let w_lt = t("War", &["a", "b"]).mul(&t("LoveTriangle", &["a", "b", "c"]));
        assert_eq!(monomial_degree(&w_lt), 2);
        let cheb = t("T", &["o"]).pow(2).mul(&t("X", &["o"]).pow(2));
        assert_eq!(monomial_degree(&cheb), 4);
    }

    #[test]
    fn multiply() {
        let tt = t("T", &["o"]);
        assert_eq!(monomial_multiply(&Monomial::one(), &tt), tt);
        assert_eq!(monomial_multiply(&tt, &tt), tt.pow(2));
        let w = t("War", &["a", "b"]);
        let lt = t("LoveTriangle", &["a", "b", "c"]);
        let prod = monomial_multiply(&w, &lt);
        // union of exponent maps
        let mut expect: BTreeMap<Term, u32> = BTreeMap::new();
        for m in [&w, &lt] {
            for (term, e) in m.factors() {
                *expect.entry(term.clone()).or_default() += e;
            }
        }
        assert_eq!(prod.factors().map(|(a, b)| (a.clone(), b)).collect::<BTreeMap<_, _>>(), expect);
        assert_eq!(prod.degree(), 2);
    }

    #[test]
    fn combine_examples() {
        let tt = t("T", &["o"]);
        assert!(polynomial_combine([(1.0, tt.clone()), (-1.0, tt.clone())], Cmp::Ge).poly.is_zero());
        let p = polynomial_combine([(1.0, tt.pow(2)), (-1.0, tt.clone())], Cmp::Eq);
        assert_eq!(p.poly.to_string(), "-T(o) + T(o)^2");
        assert_eq!(p.cmp, Cmp::Eq);
        let w = t("War", &["a", "b"]);
        let lt = t("LoveTriangle", &["a", "b", "c"]);
        let p = polynomial_combine([(1.0, w.mul(&lt)), (-0.75, lt.clone())], Cmp::Ge);
        assert_eq!(p.poly.coeff(&w.mul(&lt)), 1.0);
        assert_eq!(p.poly.coeff(&lt), -0.75);
        assert_eq!(p.poly.degree(), 2);
    }

    #[test]
    fn name_order_and_generic_labels() {
        assert!(Name::constant("zed") < Name::Generic(1));
        assert!(Name::Generic(2) < Name::Generic(10));
        assert_eq!(generic_index("g12"), Some(12));
        assert_eq!(generic_index("g0"), None);
        assert_eq!(generic_index("g01"), None);
        assert_eq!(generic_index("gx"), None);
    }

    #[test]
    fn rank_counts_guard_and_body() {
        let guard = Guard::neq(Arg::var("z"), Arg::name("a"));
        let body = polynomial_combine([(1.0, Monomial::from_term(Term::new("P", vec![Arg::var("x")])))], Cmp::Ge);
        let c = Constraint::logical(&["x", "z"], guard, body);
        assert_eq!(c.quantifier_rank(), 2);
    }

    #[test]
    fn boolean_and_bounded_sugar() {
        let kb = KnowledgeBase::new(vec![RelationSymbol::new("P", 2).boolean().bounded(4.0)], vec![], vec![]);
        assert_eq!(kb.constraints().len(), 2);
        assert_eq!(kb.rank(), 2);
        let r = &kb.relations()[0];
        assert!(kb.constraints().iter().all(|c| r.is_compactness_axiom(c)));
    }

    #[test]
    fn validation_diagnostics() {
        let w = Term::new("War", vec![Arg::var("x")]);
        let kb = KnowledgeBase::new(
            vec![RelationSymbol::new("War", 2).boolean()],
            vec![],
            vec![Constraint::logical(&["x"], Guard::True, polynomial_combine([(1.0, Monomial::from_term(w))], Cmp::Ge))],
        );
        let errs: Vec<_> = kb.validate().into_iter().filter(Diagnostic::is_error).collect();
        assert_eq!(errs.len(), 1, "{errs:?}");
        assert!(errs[0].message.contains("arity"));

        let p = Term::new("P", vec![Arg::var("x")]);
        let kb = KnowledgeBase::new(
            vec![RelationSymbol::new("P", 1).boolean()],
            vec![],
            vec![Constraint::logical(
                &["x"],
                Guard::neq(Arg::var("x"), Arg::Name(Name::constant("z"))),
                polynomial_combine([(1.0, Monomial::from_term(p))], Cmp::Ge),
            )],
        );
        let errs: Vec<_> = kb.validate().into_iter().filter(Diagnostic::is_error).collect();
        assert_eq!(errs.len(), 1, "{errs:?}");
        assert_eq!(errs[0].location, Location::Constraint(1));
    }

    #[test]
    fn empty_kb_is_an_error() {
        let kb = KnowledgeBase::new(vec![], vec![], vec![]);
        assert!(kb.validate().iter().any(|d| d.is_error() && d.message.contains("non-empty")));
        assert_eq!(kb.rank(), 0);
    }

    #[test]
    fn unbounded_relation_warns() {
        let q = Term::new("Q", vec![Arg::var("x")]);
        let kb = KnowledgeBase::new(
            vec![RelationSymbol::new("Q", 1)],
            vec![],
            vec![Constraint::expectation(&["x"], Guard::True, polynomial_combine([(1.0, Monomial::from_term(q))], Cmp::Ge))],
        );
        let diags = kb.validate();
        assert_eq!(diags.len(), 1);
        assert_eq!(diags[0].severity, Severity::Warning);
    }
}
