//! Grounding over a finite name pool and renaming-equivalence of monomials.

use std::collections::{BTreeMap, BTreeSet, HashSet};

use itertools::Itertools;
use serde::Serialize;
use thiserror::Error;

use crate::model::{
    Arg, BodyKind, Cmp, Constraint, Guard, KnowledgeBase, Monomial, Name, Polynomial, Substitution, Term, Var,
};
use crate::parser::polynomial_to_json;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GroundError {
    #[error("guard mentions unbound variable `{0}`")]
    UnboundVariable(String),
    #[error("placeholder g{0} is used but the domain-closure universe has no generic names")]
    PlaceholderInDomainClosure(u32),
}

/// Which generic names join the constants in the name pool.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Universe {
    /// `k` generic names `g1..gk`.
    Names(u32),
    /// Constants only.
    DomainClosure,
    /// As many generic names as the rank of the knowledge base.
    OpenUniverse,
}

impl Universe {
    /// Number of generic names used for `kb`. Placeholders mentioned in the
    /// KB itself raise `k` to at least their index.
    pub fn generics(self, kb: &KnowledgeBase) -> Result<u32, GroundError> {
        let used = kb.max_generic();
        match self {
            Universe::DomainClosure if used > 0 => Err(GroundError::PlaceholderInDomainClosure(used)),
            Universe::DomainClosure => Ok(0),
            Universe::Names(k) => Ok(k.max(used)),
            Universe::OpenUniverse => Ok((kb.rank() as u32).max(used)),
        }
    }
}

pub fn eval_guard(guard: &Guard, theta: &Substitution) -> Result<bool, GroundError> {
    let resolve = |a: &Arg| -> Result<Name, GroundError> {
        match a {
            Arg::Name(n) => Ok(n.clone()),
            Arg::Var(v) => theta.get(v).cloned().ok_or_else(|| GroundError::UnboundVariable(v.0.clone())),
        }
    };
    Ok(match guard {
        Guard::True => true,
        Guard::Eq(a, b) => resolve(a)? == resolve(b)?,
        Guard::Not(g) => !eval_guard(g, theta)?,
        Guard::And(a, b) => eval_guard(a, theta)? && eval_guard(b, theta)?,
        Guard::Or(a, b) => eval_guard(a, theta)? || eval_guard(b, theta)?,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroundConstraint {
    /// `g<i>` for inequalities, `h<j>` for equalities, `b<k>` for bounds.
    pub id: String,
    pub kind: BodyKind,
    pub cmp: Cmp,
    pub poly: Polynomial,
    /// Index of the originating KB constraint.
    pub source: usize,
}

impl GroundConstraint {
    pub fn terms(&self) -> BTreeSet<Term> {
        self.poly.term_set()
    }
}

/// `{g_i >= 0}`, `{h_j = 0}` and the expectation bounds over a name pool.
#[derive(Clone, Debug)]
pub struct GroundTheory {
    pub names: Vec<Name>,
    pub constants: Vec<Name>,
    pub k: u32,
    pub inequalities: Vec<GroundConstraint>,
    pub equalities: Vec<GroundConstraint>,
    pub bounds: Vec<GroundConstraint>,
    /// Pointwise bound on `|P(..)|` for boolean and bounded relations.
    pub magnitudes: BTreeMap<String, f64>,
    pub warnings: Vec<String>,
}

impl GroundTheory {
    pub fn all(&self) -> impl Iterator<Item = &GroundConstraint> {
        self.inequalities.iter().chain(&self.equalities).chain(&self.bounds)
    }

    pub fn get(&self, id: &str) -> Option<&GroundConstraint> {
        self.all().find(|c| c.id == id)
    }

    /// The constraint of the given kind whose polynomial is `p`.
    pub fn find(&self, kind: BodyKind, p: &Polynomial) -> Option<&GroundConstraint> {
        self.all().find(|c| c.kind == kind && &c.poly == p)
    }

    /// Bound on `|m|` in any model, taking 1 for factors of unbounded
    /// relations. Weighs residuals in certificate checks.
    pub fn magnitude(&self, m: &Monomial) -> f64 {
        monomial_magnitude(&self.magnitudes, m)
    }

    pub fn len(&self) -> usize {
        self.inequalities.len() + self.equalities.len() + self.bounds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn terms(&self) -> BTreeSet<Term> {
        self.all().flat_map(GroundConstraint::terms).collect()
    }

    pub fn to_json(&self) -> serde_json::Value {
        let list = |cs: &[GroundConstraint]| -> Vec<serde_json::Value> {
            cs.iter()
                .map(|c| {
                    serde_json::json!({
                        "id": c.id,
                        "kind": c.kind,
                        "cmp": c.cmp,
                        "poly": polynomial_to_json(&c.poly),
                    })
                })
                .collect()
        };
        let monos: BTreeSet<Monomial> =
            self.all().flat_map(|c| c.poly.terms().map(|(m, _)| m.clone()).collect::<Vec<_>>()).collect();
        let classes: Vec<serde_json::Value> = equivalence_classes(monos)
            .into_iter()
            .map(|(canon, members)| {
                serde_json::json!({
                    "canonical": canon.to_string(),
                    "members": members.iter().map(Monomial::to_string).collect::<Vec<_>>(),
                })
            })
            .collect();
        serde_json::json!({
            "names": self.names.iter().map(Name::to_string).collect::<Vec<_>>(),
            "k": self.k,
            "inequalities": list(&self.inequalities),
            "equalities": list(&self.equalities),
            "bounds": list(&self.bounds),
            "classes": classes,
            "warnings": self.warnings,
        })
    }
}

pub(crate) fn monomial_magnitude(bounds: &BTreeMap<String, f64>, m: &Monomial) -> f64 {
    m.factors().map(|(t, e)| bounds.get(&t.relation).map_or(1.0, |b| b.powi(e as i32))).product()
}

/// Every map from `vars` into `pool`, in lexicographic order.
fn substitutions<'a>(vars: &'a [Var], pool: &'a [Name]) -> Box<dyn Iterator<Item = Substitution> + 'a> {
    if vars.is_empty() {
        return Box::new(std::iter::once(Substitution::new()));
    }
    Box::new(
        vars.iter()
            .map(|_| pool.iter())
            .multi_cartesian_product()
            .map(move |names| vars.iter().cloned().zip(names.into_iter().cloned()).collect()),
    )
}

/// Variables a constraint actually uses, in declaration order.
fn active_vars(c: &Constraint) -> Vec<Var> {
    let occurring = c.occurring_vars();
    let mut vars: Vec<Var> = c.vars.iter().filter(|v| occurring.contains(v)).cloned().collect();
    vars.dedup();
    for v in occurring {
        if !vars.contains(&v) {
            vars.push(v);
        }
    }
    vars
}

fn tautology(p: &Polynomial, cmp: Cmp) -> bool {
    p.degree() == 0
        && match cmp {
            Cmp::Ge => p.constant_term() >= 0.0,
            Cmp::Eq => p.is_zero(),
        }
}

/// `GND(kb, k)`: every constraint instantiated by every guard-satisfying map
/// from its variables into the constants plus `k` generic names. Constraints
/// that mention placeholders are also instantiated under every renaming of
/// the generic names, so the theory stays closed under renaming.
pub fn ground(kb: &KnowledgeBase, universe: Universe) -> Result<GroundTheory, GroundError> {
    let k = universe.generics(kb)?;
    let constants = kb.constant_names();
    let mut names = constants.clone();
    names.extend((1..=k).map(Name::Generic));

    let mut seen: HashSet<(BodyKind, Cmp, Polynomial)> = HashSet::new();
    let mut g = GroundTheory {
        names: names.clone(),
        constants,
        k,
        inequalities: Vec::new(),
        equalities: Vec::new(),
        bounds: Vec::new(),
        magnitudes: kb
            .relations()
            .iter()
            .filter_map(|r| {
                let b = if r.boolean { Some(1.0) } else { r.bound.map(f64::sqrt) };
                b.map(|b| (r.label.clone(), b))
            })
            .collect(),
        warnings: Vec::new(),
    };
    let renamings: Vec<Renaming> = Renaming::all(k).collect();
    for (idx, c) in kb.constraints().iter().enumerate() {
        let vars = active_vars(c);
        // a constraint about a placeholder speaks for every generic name
        let images: &[Renaming] = if c.max_generic() > 0 { &renamings } else { &[] };
        for theta in substitutions(&vars, &names) {
            if !eval_guard(&c.guard, &theta)? {
                continue;
            }
            let base = c.body.poly.substitute(&theta);
            let renamed = images.iter().map(|r| r.apply_poly(&base));
            for poly in std::iter::once(base.clone()).chain(renamed) {
                if tautology(&poly, c.body.cmp) || !seen.insert((c.kind, c.body.cmp, poly.clone())) {
                    continue;
                }
                let (list, prefix) = match (c.kind, c.body.cmp) {
                    (BodyKind::Logical, Cmp::Ge) => (&mut g.inequalities, "g"),
                    (BodyKind::Logical, Cmp::Eq) => (&mut g.equalities, "h"),
                    (BodyKind::Expectation, _) => (&mut g.bounds, "b"),
                };
                let id = format!("{prefix}{}", list.len() + 1);
                list.push(GroundConstraint { id, kind: c.kind, cmp: c.body.cmp, poly, source: idx });
            }
        }
    }
    if g.is_empty() && kb.rank() > 0 {
        g.warnings.push(format!(
            "ground theory is empty: the name pool has {} name(s) and the knowledge base has rank {}",
            names.len(),
            kb.rank()
        ));
    }
    Ok(g)
}

/// Total number of distinct ground relation applications per ground
/// constraint, summed over the theory.
pub fn count_atoms(g: &GroundTheory) -> usize {
    g.all().map(|c| c.terms().len()).sum()
}

/// A permutation of generic names, stored as index pairs; constants are fixed.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Renaming(pub BTreeMap<u32, u32>);

impl Renaming {
    pub fn apply_name(&self, n: &Name) -> Name {
        match n {
            Name::Generic(i) => Name::Generic(*self.0.get(i).unwrap_or(i)),
            c => c.clone(),
        }
    }

    pub fn apply(&self, m: &Monomial) -> Monomial {
        m.map_names(&|n| self.apply_name(n))
    }

    pub fn apply_poly(&self, p: &Polynomial) -> Polynomial {
        p.map_monomials(|m| self.apply(m))
    }

    /// All permutations of `g1..gk`.
    pub fn all(k: u32) -> impl Iterator<Item = Renaming> {
        (1..=k).permutations(k as usize).map(move |perm| Renaming((1..=k).zip(perm).collect()))
    }
}

/// Least member of `m`'s class: the minimum over all injective relabelings
/// of its generic names onto `g1..gj`. Returns the witnessing renaming.
pub fn canonicalize(m: &Monomial) -> (Monomial, Renaming) {
    let gens: Vec<u32> = m.generics().into_iter().collect();
    if gens.is_empty() {
        return (m.clone(), Renaming::default());
    }
    let j = gens.len() as u32;
    let mut best: Option<(Monomial, Renaming)> = None;
    for perm in (1..=j).permutations(j as usize) {
        let r = Renaming(gens.iter().copied().zip(perm).collect());
        let image = r.apply(m);
        if best.as_ref().is_none_or(|(b, _)| image < *b) {
            best = Some((image, r));
        }
    }
    best.expect("at least one permutation")
}

/// Partition keyed by canonical representative.
pub fn equivalence_classes(monomials: impl IntoIterator<Item = Monomial>) -> BTreeMap<Monomial, BTreeSet<Monomial>> {
    let mut out: BTreeMap<Monomial, BTreeSet<Monomial>> = BTreeMap::new();
    for m in monomials {
        out.entry(canonicalize(&m).0).or_default().insert(m);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::parser::parse_kb;

    fn q(a: &str, b: &str) -> Monomial {
        Monomial::from_term(Term::ground("Q", &[a, b]))
    }

    const QP: &str = "relation Q/2; relation P/1; constant james; \
        forall x,y : e(Q(x,y)) - 3 >= 0; forall x : e(Q(x,james)) >= 0; e(P(james)) - 1 >= 0;";

    #[test]
    fn placeholders_closed_under_renaming() {
        let kb = parse_kb("relation P/1 boolean; forall x : e(P(x)) >= 0.5; e(P(g1)) <= 0.4;").unwrap().kb;
        let g = ground(&kb, Universe::Names(3)).unwrap();
        let upper: Vec<String> = g.bounds.iter().filter(|c| c.source == 1).map(|c| c.poly.to_string()).collect();
        assert_eq!(upper.len(), 3, "{upper:?}");
        for name in ["g1", "g2", "g3"] {
            assert!(upper.iter().any(|p| p.contains(&format!("P({name})"))), "{upper:?}");
        }
    }

    #[test]
    fn magnitudes_from_declarations() {
        let kb = parse_kb("relation B/1 boolean; relation U/1 bounded 9; relation F/1; constant a; e(B(a)*U(a)^2*F(a)) >= 0;").unwrap().kb;
        let g = ground(&kb, Universe::DomainClosure).unwrap();
        assert_eq!(g.magnitude(&g.bounds[0].poly.terms().next().unwrap().0.clone()), 9.0);
        assert_eq!(g.magnitudes.get("F"), None);
        assert_eq!(g.magnitudes.get("B"), Some(&1.0));
    }

    #[test]
    fn guards() {
        let g = Guard::and(Guard::neq(Arg::var("x"), Arg::name("Antony")), Guard::neq(Arg::var("x"), Arg::name("Cleopatra")));
        let mut theta = Substitution::new();
        theta.insert(Var("x".into()), Name::constant("Octavian"));
        assert!(eval_guard(&g, &theta).unwrap());
        theta.insert(Var("x".into()), Name::constant("Antony"));
        assert!(!eval_guard(&g, &theta).unwrap());
        assert!(eval_guard(&Guard::True, &theta).unwrap());
        assert_eq!(eval_guard(&g, &Substitution::new()), Err(GroundError::UnboundVariable("x".into())));
    }

    #[test]
    fn qp_grounding_contains_listed_constraints() {
        let kb = parse_kb(QP).unwrap().kb;
        let g = ground(&kb, Universe::Names(2)).unwrap();
        let polys: Vec<String> = g.bounds.iter().map(|c| crate::parser::format_moment_poly(&c.poly)).collect();
        for want in [
            "-3 + e(Q(g1,g2))",
            "-3 + e(Q(g2,g1))",
            "-3 + e(Q(james,g1))",
            "e(Q(g1,james))",
            "-1 + e(P(james))",
            "-3 + e(Q(g1,g1))",
        ] {
            assert!(polys.iter().any(|p| p == want), "missing {want} in {polys:?}");
        }
        assert_eq!(g.bounds.len(), 9 + 3 + 1);
    }

    #[test]
    fn dc_without_constants_warns() {
        let kb = parse_kb("relation P/1 boolean;").unwrap().kb;
        let g = ground(&kb, Universe::DomainClosure).unwrap();
        assert!(g.is_empty());
        assert_eq!(g.warnings.len(), 1);
    }

    #[test]
    fn placeholder_in_dc_rejected() {
        let kb = parse_kb("relation P/1 boolean; e(P(g2)) >= 0.5;").unwrap().kb;
        assert!(ground(&kb, Universe::DomainClosure).is_err());
        assert_eq!(ground(&kb, Universe::OpenUniverse).unwrap().k, 2);
    }

    #[test]
    fn single_substitution_atom_count() {
        let kb = parse_kb("relation P/1; forall x : e(P(x)) >= 0;").unwrap().kb;
        let g = ground(&kb, Universe::Names(1)).unwrap();
        assert_eq!(count_atoms(&g), 1);
    }

    #[test]
    fn canonical_forms() {
        let (c, r) = canonicalize(&Monomial::from_term(Term::ground("Q", &["g7", "g3"])));
        assert_eq!(c, q("g1", "g2"));
        assert_eq!(r.apply(&q("g7", "g3")), c);
        assert_eq!(canonicalize(&q("james", "g4")).0, q("james", "g1"));
        let p = Monomial::from_term(Term::ground("P", &["james"]));
        assert_eq!(canonicalize(&p).0, p);
        assert_eq!(canonicalize(&c).0, c);
    }

    #[test]
    fn classes() {
        let cls = equivalence_classes([q("g1", "g2"), q("g2", "g1")]);
        assert_eq!(cls.len(), 1);
        let cls = equivalence_classes([q("g1", "james"), q("g2", "james"), q("james", "g1"), q("james", "g2")]);
        assert_eq!(cls.len(), 2);
        assert_eq!(cls[&q("g1", "james")].len(), 2);
        assert_eq!(equivalence_classes([Monomial::one()]).len(), 1);
    }
}
