//! Degree-d moment relaxation of a ground theory with class-shared moment
//! variables.
//!
//! Every entry of every block is a [`LinearForm`] over moment variables; the
//! constant monomial is pinned to 1 and folded into the form's constant.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};

use serde::Serialize;
use thiserror::Error;

use crate::grounder::{canonicalize, monomial_magnitude, GroundConstraint, GroundTheory};
use crate::model::{Cmp, Monomial, Polynomial, Term};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CompileError {
    #[error("relaxation degree must be even and at least 2, got {0}")]
    BadDegree(u32),
    #[error("constraint {id} has degree {degree}, which exceeds the relaxation degree {d}")]
    DegreeTooLow { id: String, degree: u32, d: u32 },
    #[error("moment e({0}) does not occur in the relaxation")]
    MissingMoment(String),
}

/// How monomial bases are formed.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum BasisScope {
    /// One moment matrix per maximal term set of a ground constraint (or of
    /// the extra monomials). Keeps every moment inside a single grounding.
    #[default]
    Clique,
    /// A single moment matrix over every ground term.
    Dense,
}

#[derive(Clone, Debug)]
pub struct CompileOptions {
    pub degree: u32,
    pub scope: BasisScope,
    /// One variable per renaming class instead of per monomial.
    pub share_classes: bool,
    /// Monomials that must exist as variables, typically an objective's.
    pub extra_monomials: Vec<Monomial>,
}

impl CompileOptions {
    pub fn new(degree: u32) -> Self {
        CompileOptions { degree, scope: BasisScope::Clique, share_classes: true, extra_monomials: Vec::new() }
    }

    pub fn dense(mut self) -> Self {
        self.scope = BasisScope::Dense;
        self
    }

    pub fn unshared(mut self) -> Self {
        self.share_classes = false;
        self
    }

    pub fn with_monomials(mut self, ms: impl IntoIterator<Item = Monomial>) -> Self {
        self.extra_monomials.extend(ms);
        self
    }
}

/// `constant + Σ coeff·x[var]`, with sorted variables and no zero coefficients.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LinearForm {
    pub constant: f64,
    pub coeffs: Vec<(usize, f64)>,
}

impl LinearForm {
    pub fn from_map(constant: f64, map: BTreeMap<usize, f64>) -> Self {
        LinearForm { constant, coeffs: map.into_iter().filter(|(_, c)| *c != 0.0).collect() }
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        self.constant + self.coeffs.iter().map(|&(v, c)| c * x[v]).sum::<f64>()
    }

    pub fn is_zero(&self) -> bool {
        self.constant == 0.0 && self.coeffs.is_empty()
    }

    fn key(&self) -> (u64, Vec<(usize, u64)>) {
        (self.constant.to_bits(), self.coeffs.iter().map(|&(v, c)| (v, c.to_bits())).collect())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum BlockKind {
    Psd,
    Zero,
}

/// A PSD block `[p M]` (rows index the basis) or a list of equations
/// `e(h·m) = 0` (rows are the multiplier monomials `m`).
#[derive(Clone, Debug)]
pub struct SymbolicBlock {
    pub kind: BlockKind,
    /// `"moment"` or the id of the ground constraint.
    pub origin: String,
    /// The ground polynomial the block localizes (1 for a moment matrix).
    pub poly: Polynomial,
    pub rows: Vec<Monomial>,
    /// Psd: packed upper triangle, entry `(i, j)` with `i <= j` at
    /// `j*(j+1)/2 + i`. Zero: one form per row.
    pub entries: Vec<LinearForm>,
}

impl SymbolicBlock {
    pub fn size(&self) -> usize {
        self.rows.len()
    }

    pub fn entry(&self, i: usize, j: usize) -> &LinearForm {
        match self.kind {
            BlockKind::Psd => {
                let (i, j) = if i <= j { (i, j) } else { (j, i) };
                &self.entries[j * (j + 1) / 2 + i]
            }
            BlockKind::Zero => &self.entries[i],
        }
    }
}

/// `sign · e(poly) >= 0`; expectation equalities give one row per sign.
#[derive(Clone, Debug)]
pub struct ScalarRow {
    /// Bound id, prefixed with `-` for the negated half of an equality.
    pub origin: String,
    pub bound: String,
    pub sign: f64,
    pub form: LinearForm,
}

#[derive(Clone, Debug)]
pub struct LiftedSdp {
    pub degree: u32,
    pub shared: bool,
    /// Representative monomial of each variable.
    pub vars: Vec<Monomial>,
    /// Bound on each variable's absolute value in any model; see
    /// [`GroundTheory::magnitude`].
    pub magnitudes: Vec<f64>,
    relation_magnitudes: BTreeMap<String, f64>,
    index: HashMap<Monomial, usize>,
    pub blocks: Vec<SymbolicBlock>,
    pub scalars: Vec<ScalarRow>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct SdpSummary {
    pub variables: usize,
    pub psd_blocks: usize,
    pub zero_rows: usize,
    pub scalar_rows: usize,
    pub total_entries: usize,
    pub largest_block: usize,
}

impl LiftedSdp {
    /// Variable of the class (or, unshared, of the monomial itself). `None`
    /// for the constant monomial and for moments outside the relaxation.
    pub fn var(&self, m: &Monomial) -> Option<usize> {
        if self.shared {
            self.index.get(&canonicalize(m).0).copied()
        } else {
            self.index.get(m).copied()
        }
    }

    pub fn magnitude(&self, m: &Monomial) -> f64 {
        monomial_magnitude(&self.relation_magnitudes, m)
    }

    /// `e(p)` as a form over this program's variables.
    pub fn form(&self, p: &Polynomial) -> Result<LinearForm, CompileError> {
        let mut constant = 0.0;
        let mut map = BTreeMap::new();
        for (m, c) in p.terms() {
            if m.is_one() {
                constant += c;
            } else {
                let v = self.var(m).ok_or_else(|| CompileError::MissingMoment(m.to_string()))?;
                *map.entry(v).or_insert(0.0) += c;
            }
        }
        Ok(LinearForm::from_map(constant, map))
    }

    pub fn psd_blocks(&self) -> impl Iterator<Item = &SymbolicBlock> {
        self.blocks.iter().filter(|b| b.kind == BlockKind::Psd)
    }

    pub fn zero_blocks(&self) -> impl Iterator<Item = &SymbolicBlock> {
        self.blocks.iter().filter(|b| b.kind == BlockKind::Zero)
    }

    pub fn summary(&self) -> SdpSummary {
        let psd: Vec<&SymbolicBlock> = self.psd_blocks().collect();
        SdpSummary {
            variables: self.vars.len() + 1,
            psd_blocks: psd.len(),
            zero_rows: self.zero_blocks().map(SymbolicBlock::size).sum(),
            scalar_rows: self.scalars.len(),
            total_entries: self.blocks.iter().map(|b| b.entries.len()).sum::<usize>() + self.scalars.len(),
            largest_block: psd.iter().map(|b| b.size()).max().unwrap_or(0),
        }
    }

    /// Solver-agnostic dump: variable table, `[i, j, var, coeff]` triplets
    /// per block (`var` is null for the pinned constant), scalar rows.
    pub fn to_json(&self) -> serde_json::Value {
        fn triplets(i: usize, j: usize, f: &LinearForm, out: &mut Vec<serde_json::Value>) {
            if f.constant != 0.0 {
                out.push(serde_json::json!([i, j, null, f.constant]));
            }
            for &(v, c) in &f.coeffs {
                out.push(serde_json::json!([i, j, v, c]));
            }
        }
        let blocks: Vec<serde_json::Value> = self
            .blocks
            .iter()
            .map(|b| {
                let mut entries = Vec::new();
                match b.kind {
                    BlockKind::Psd => {
                        for j in 0..b.size() {
                            for i in 0..=j {
                                triplets(i, j, b.entry(i, j), &mut entries);
                            }
                        }
                    }
                    BlockKind::Zero => {
                        for (i, f) in b.entries.iter().enumerate() {
                            triplets(i, 0, f, &mut entries);
                        }
                    }
                }
                serde_json::json!({
                    "kind": b.kind,
                    "origin": b.origin,
                    "size": b.size(),
                    "rows": b.rows.iter().map(Monomial::to_string).collect::<Vec<_>>(),
                    "entries": entries,
                })
            })
            .collect();
        let scalars: Vec<serde_json::Value> = self
            .scalars
            .iter()
            .map(|s| {
                let mut entries = Vec::new();
                triplets(0, 0, &s.form, &mut entries);
                serde_json::json!({ "origin": s.origin, "entries": entries })
            })
            .collect();
        serde_json::json!({
            "degree": self.degree,
            "variables": self.vars.iter().map(Monomial::to_string).collect::<Vec<_>>(),
            "blocks": blocks,
            "scalars": scalars,
        })
    }
}

/// All monomials over `terms` of degree at most `d/2`, graded order.
pub fn moment_basis(terms: &BTreeSet<Term>, d: u32) -> Result<Vec<Monomial>, CompileError> {
    if d % 2 == 1 || d < 2 {
        return Err(CompileError::BadDegree(d));
    }
    Ok(monomials_upto(terms, d / 2))
}

/// All monomials over `terms` of degree at most `deg`, graded order.
pub fn monomials_upto(terms: &BTreeSet<Term>, deg: u32) -> Vec<Monomial> {
    let terms: Vec<&Term> = terms.iter().collect();
    let mut out = vec![Monomial::one()];
    let mut frontier = vec![(Monomial::one(), 0usize)];
    for _ in 0..deg {
        let mut next = Vec::new();
        for (m, start) in &frontier {
            for (i, t) in terms.iter().enumerate().skip(*start) {
                next.push((m.mul(&Monomial::from_term((*t).clone())), i));
            }
        }
        out.extend(next.iter().map(|(m, _)| m.clone()));
        frontier = next;
    }
    out.sort();
    out
}

/// Maps ground monomials to variables, creating them on first use.
struct VarTable {
    share: bool,
    vars: Vec<Monomial>,
    index: HashMap<Monomial, usize>,
    cache: HashMap<Monomial, usize>,
}

impl VarTable {
    fn var(&mut self, m: &Monomial) -> usize {
        if let Some(&v) = self.cache.get(m) {
            return v;
        }
        let rep = if self.share { canonicalize(m).0 } else { m.clone() };
        let next = self.vars.len();
        let v = *self.index.entry(rep.clone()).or_insert(next);
        if v == next {
            self.vars.push(rep);
        }
        self.cache.insert(m.clone(), v);
        v
    }

    /// `e(p · m)`.
    fn form(&mut self, p: &Polynomial, m: &Monomial) -> LinearForm {
        let mut constant = 0.0;
        let mut map = BTreeMap::new();
        for (pm, c) in p.terms() {
            let prod = pm.mul(m);
            if prod.is_one() {
                constant += c;
            } else {
                *map.entry(self.var(&prod)).or_insert(0.0) += c;
            }
        }
        LinearForm::from_map(constant, map)
    }
}

/// Moment matrix `[M]` over `basis`.
pub fn build_moment_matrix(basis: &[Monomial], share_classes: bool) -> (SymbolicBlock, Vec<Monomial>) {
    let mut table = VarTable { share: share_classes, vars: Vec::new(), index: HashMap::new(), cache: HashMap::new() };
    let b = localizer(&mut table, "moment", &Polynomial::constant(1.0), basis.to_vec());
    (b, table.vars)
}

/// Localizing block for one ground constraint: PSD over the basis rows of
/// degree at most `d/2 - ceil(deg p / 2)` for inequalities, and equations
/// `e(p·m) = 0` for every `m` of degree at most `d - deg p` for equalities.
pub fn build_localizing_matrix(
    c: &GroundConstraint,
    terms: &BTreeSet<Term>,
    d: u32,
    share_classes: bool,
) -> Result<(SymbolicBlock, Vec<Monomial>), CompileError> {
    let mut table = VarTable { share: share_classes, vars: Vec::new(), index: HashMap::new(), cache: HashMap::new() };
    let rows = localizer_rows(c, terms, d)?;
    let b = match c.cmp {
        Cmp::Ge => localizer(&mut table, &c.id, &c.poly, rows),
        Cmp::Eq => equations(&mut table, &c.id, &c.poly, rows, &mut HashSet::new()),
    };
    Ok((b, table.vars))
}

fn localizer_rows(c: &GroundConstraint, terms: &BTreeSet<Term>, d: u32) -> Result<Vec<Monomial>, CompileError> {
    let deg = c.poly.degree();
    if deg > d {
        return Err(CompileError::DegreeTooLow { id: c.id.clone(), degree: deg, d });
    }
    if terms.is_empty() {
        return Ok(vec![Monomial::one()]);
    }
    Ok(match c.cmp {
        Cmp::Ge => monomials_upto(terms, d / 2 - deg.div_ceil(2)),
        Cmp::Eq => monomials_upto(terms, d - deg),
    })
}

fn localizer(table: &mut VarTable, origin: &str, p: &Polynomial, rows: Vec<Monomial>) -> SymbolicBlock {
    let mut entries = Vec::with_capacity(rows.len() * (rows.len() + 1) / 2);
    for j in 0..rows.len() {
        for i in 0..=j {
            entries.push(table.form(p, &rows[i].mul(&rows[j])));
        }
    }
    SymbolicBlock { kind: BlockKind::Psd, origin: origin.to_string(), poly: p.clone(), rows, entries }
}

/// Equation rows, skipping forms that vanish or were already emitted.
fn equations(
    table: &mut VarTable,
    origin: &str,
    p: &Polynomial,
    candidates: Vec<Monomial>,
    seen: &mut HashSet<(u64, Vec<(usize, u64)>)>,
) -> SymbolicBlock {
    let mut rows = Vec::new();
    let mut entries = Vec::new();
    for m in candidates {
        let f = table.form(p, &m);
        if f.is_zero() || !seen.insert(f.key()) {
            continue;
        }
        rows.push(m);
        entries.push(f);
    }
    SymbolicBlock { kind: BlockKind::Zero, origin: origin.to_string(), poly: p.clone(), rows, entries }
}

/// Maximal sets among `sets`, in first-seen order.
fn maximal_sets(sets: Vec<BTreeSet<Term>>) -> Vec<BTreeSet<Term>> {
    let mut order: Vec<usize> = (0..sets.len()).collect();
    order.sort_by_key(|&i| std::cmp::Reverse(sets[i].len()));
    let mut kept: Vec<usize> = Vec::new();
    let mut by_term: HashMap<&Term, Vec<usize>> = HashMap::new();
    let mut seen: HashSet<&BTreeSet<Term>> = HashSet::new();
    for i in order {
        let s = &sets[i];
        if !seen.insert(s) {
            continue;
        }
        let first = s.iter().next().expect("non-empty");
        let covered = by_term.get(first).is_some_and(|cands| cands.iter().any(|&j| s.is_subset(&sets[j])));
        if covered {
            continue;
        }
        for t in s {
            by_term.entry(t).or_default().push(i);
        }
        kept.push(i);
    }
    kept.sort_unstable();
    kept.into_iter().map(|i| sets[i].clone()).collect()
}

/// Compiles the degree-`d` relaxation of `g`.
pub fn compile(g: &GroundTheory, opts: &CompileOptions) -> Result<LiftedSdp, CompileError> {
    let d = opts.degree;
    if d % 2 == 1 || d < 2 {
        return Err(CompileError::BadDegree(d));
    }
    for c in g.all() {
        if c.poly.degree() > d {
            return Err(CompileError::DegreeTooLow { id: c.id.clone(), degree: c.poly.degree(), d });
        }
    }
    let extra_terms: BTreeSet<Term> = opts.extra_monomials.iter().flat_map(|m| m.terms().cloned()).collect();
    let cliques: Vec<BTreeSet<Term>> = match opts.scope {
        BasisScope::Dense => {
            let mut all = g.terms();
            all.extend(extra_terms);
            vec![all]
        }
        BasisScope::Clique => {
            let mut sets: Vec<BTreeSet<Term>> = g.all().map(GroundConstraint::terms).collect();
            sets.push(extra_terms);
            sets.retain(|s| !s.is_empty());
            maximal_sets(sets)
        }
    };
    let mut by_term: HashMap<&Term, Vec<usize>> = HashMap::new();
    for (i, c) in cliques.iter().enumerate() {
        for t in c {
            by_term.entry(t).or_default().push(i);
        }
    }
    let containing = |terms: &BTreeSet<Term>| -> Vec<usize> {
        match terms.iter().next() {
            None => vec![],
            Some(first) => by_term
                .get(first)
                .map(|cs| cs.iter().copied().filter(|&i| terms.is_subset(&cliques[i])).collect())
                .unwrap_or_default(),
        }
    };

    let mut table = VarTable { share: opts.share_classes, vars: Vec::new(), index: HashMap::new(), cache: HashMap::new() };
    let mut blocks = Vec::new();
    let mut block_keys: HashSet<(BlockKind, Vec<(u64, Vec<(usize, u64)>)>)> = HashSet::new();
    let mut push = |b: SymbolicBlock, blocks: &mut Vec<SymbolicBlock>| {
        if b.entries.is_empty() {
            return;
        }
        if block_keys.insert((b.kind, b.entries.iter().map(LinearForm::key).collect())) {
            blocks.push(b);
        }
    };

    if cliques.is_empty() {
        let b = localizer(&mut table, "moment", &Polynomial::constant(1.0), vec![Monomial::one()]);
        push(b, &mut blocks);
    }
    for c in &cliques {
        let b = localizer(&mut table, "moment", &Polynomial::constant(1.0), moment_basis(c, d)?);
        push(b, &mut blocks);
    }
    let mut seen_rows = HashSet::new();
    for c in g.inequalities.iter().chain(&g.equalities) {
        let terms = c.terms();
        let homes = containing(&terms);
        let scopes: Vec<&BTreeSet<Term>> =
            if homes.is_empty() { vec![&terms] } else { homes.iter().map(|&i| &cliques[i]).collect() };
        for scope in scopes {
            let rows = localizer_rows(c, scope, d)?;
            let b = match c.cmp {
                Cmp::Ge => localizer(&mut table, &c.id, &c.poly, rows),
                Cmp::Eq => equations(&mut table, &c.id, &c.poly, rows, &mut seen_rows),
            };
            push(b, &mut blocks);
        }
    }
    let mut scalars = Vec::new();
    for b in &g.bounds {
        let form = table.form(&b.poly, &Monomial::one());
        let signs: &[f64] = match b.cmp {
            Cmp::Ge => &[1.0],
            Cmp::Eq => &[1.0, -1.0],
        };
        for &sign in signs {
            let origin = if sign > 0.0 { b.id.clone() } else { format!("-{}", b.id) };
            let form = LinearForm {
                constant: sign * form.constant,
                coeffs: form.coeffs.iter().map(|&(v, c)| (v, sign * c)).collect(),
            };
            scalars.push(ScalarRow { origin, bound: b.id.clone(), sign, form });
        }
    }
    for m in &opts.extra_monomials {
        if !m.is_one() {
            table.var(m);
        }
    }
    let magnitudes = table.vars.iter().map(|m| g.magnitude(m)).collect();
    Ok(LiftedSdp {
        degree: d,
        shared: opts.share_classes,
        vars: table.vars,
        magnitudes,
        relation_magnitudes: g.magnitudes.clone(),
        index: table.index,
        blocks,
        scalars,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grounder::{ground, Universe};
    use crate::model::BodyKind;
    use crate::parser::parse_kb;

    fn t(r: &str, a: &[&str]) -> Term {
        Term::ground(r, a)
    }

    fn mono(ts: &[Term]) -> Monomial {
        Monomial::from_factors(ts.iter().cloned().map(|t| (t, 1)))
    }

    #[test]
    fn basis_examples() {
        let (tt, xx) = (t("T", &["o"]), t("X", &["o"]));
        let terms: BTreeSet<Term> = [tt.clone(), xx.clone()].into();
        let b = moment_basis(&terms, 4).unwrap();
        let expect = vec![
            Monomial::one(),
            mono(&[tt.clone()]),
            mono(&[xx.clone()]),
            Monomial::from_factors([(tt.clone(), 2)]),
            mono(&[tt.clone(), xx.clone()]),
            Monomial::from_factors([(xx.clone(), 2)]),
        ];
        assert_eq!(b, expect);
        let w: BTreeSet<Term> = [t("W", &["a"])].into();
        assert_eq!(moment_basis(&w, 2).unwrap().len(), 2);
        assert_eq!(moment_basis(&BTreeSet::new(), 2).unwrap(), vec![Monomial::one()]);
        assert_eq!(moment_basis(&terms, 3), Err(CompileError::BadDegree(3)));
    }

    #[test]
    fn exponent_oracle_matches_basis() {
        let terms: BTreeSet<Term> = (0..3).map(|i| t("R", &[&format!("c{i}")])).collect();
        let tv: Vec<&Term> = terms.iter().collect();
        let mut oracle = BTreeSet::new();
        for a in 0..=2u32 {
            for b in 0..=2u32 {
                for c in 0..=2u32 {
                    if a + b + c <= 2 {
                        oracle.insert(Monomial::from_factors([(tv[0].clone(), a), (tv[1].clone(), b), (tv[2].clone(), c)]));
                    }
                }
            }
        }
        let basis = moment_basis(&terms, 4).unwrap();
        assert_eq!(basis.iter().cloned().collect::<BTreeSet<_>>(), oracle);
        assert_eq!(basis.len(), oracle.len());
        assert!(basis.windows(2).all(|w| w[0].degree() <= w[1].degree()));
    }

    #[test]
    fn moment_matrix_entries() {
        let tt = t("T", &["o"]);
        let basis = vec![Monomial::one(), mono(&[tt.clone()])];
        let (b, vars) = build_moment_matrix(&basis, true);
        assert_eq!(b.entry(0, 0), &LinearForm { constant: 1.0, coeffs: vec![] });
        assert_eq!(vars[b.entry(0, 1).coeffs[0].0], mono(&[tt.clone()]));
        assert_eq!(vars[b.entry(1, 1).coeffs[0].0], Monomial::from_factors([(tt, 2)]));
    }

    #[test]
    fn renamed_rows_share_variables() {
        let (q12, q21) = (t("Q", &["g1", "g2"]), t("Q", &["g2", "g1"]));
        let basis = vec![Monomial::one(), mono(&[q12]), mono(&[q21])];
        let (b, _) = build_moment_matrix(&basis, true);
        assert_eq!(b.entry(0, 1), b.entry(0, 2));
        assert_eq!(b.entry(1, 1), b.entry(2, 2));
        let (b, _) = build_moment_matrix(&basis, false);
        assert_ne!(b.entry(0, 1), b.entry(0, 2));
    }

    #[test]
    fn localizer_truncation() {
        let kb = parse_kb(
            "relation T/1; relation X/1; constant o; T(o)^2 - T(o) = 0; \
             relation HR/1; relation H/1; H(o)*(HR(o) - 100) >= 0; X(o)^2 >= 0;",
        )
        .unwrap()
        .kb;
        let g = ground(&kb, Universe::DomainClosure).unwrap();
        let tx: BTreeSet<Term> = [t("T", &["o"]), t("X", &["o"])].into();
        let (h, vars) = build_localizing_matrix(&g.equalities[0], &tx, 4, true).unwrap();
        assert_eq!(h.kind, BlockKind::Zero);
        // multipliers 1, T, X, T^2, TX, X^2
        assert_eq!(h.size(), 6);
        assert!(h.entries.iter().all(|f| f.coeffs.iter().all(|&(v, _)| vars[v].degree() <= 4)));
        let hr: BTreeSet<Term> = [t("H", &["o"]), t("HR", &["o"])].into();
        let (l, vars) = build_localizing_matrix(&g.inequalities[0], &hr, 2, true).unwrap();
        assert_eq!(l.size(), 1);
        let f = l.entry(0, 0);
        assert_eq!(f.coeffs.len(), 2);
        let coeff = |m: Monomial| f.coeffs.iter().find(|(v, _)| vars[*v] == m).unwrap().1;
        assert_eq!(coeff(mono(&[t("H", &["o"]), t("HR", &["o"])])), 1.0);
        assert_eq!(coeff(mono(&[t("H", &["o"])])), -100.0);
        let sq: BTreeSet<Term> = [t("X", &["o"])].into();
        let (s, _) = build_localizing_matrix(&g.inequalities[1], &sq, 2, true).unwrap();
        assert_eq!(s.size(), 1);
    }

    #[test]
    fn degree_too_low_reported() {
        let kb = parse_kb("relation X/1; constant o; X(o)^4 >= 0;").unwrap().kb;
        let g = ground(&kb, Universe::DomainClosure).unwrap();
        assert!(matches!(compile(&g, &CompileOptions::new(2)), Err(CompileError::DegreeTooLow { .. })));
        assert!(compile(&g, &CompileOptions::new(4)).is_ok());
    }

    #[test]
    fn empty_theory_has_only_the_constant() {
        let kb = parse_kb("relation P/1 boolean;").unwrap().kb;
        let g = ground(&kb, Universe::DomainClosure).unwrap();
        let sdp = compile(&g, &CompileOptions::new(2)).unwrap();
        assert_eq!(sdp.summary().variables, 1);
    }

    #[test]
    fn qp_dense_variables_are_classes() {
        let kb = parse_kb(
            "relation Q/2; relation P/1; constant james; \
             forall x,y : e(Q(x,y)) - 3 >= 0; forall x : e(Q(x,james)) >= 0; e(P(james)) - 1 >= 0;",
        )
        .unwrap()
        .kb;
        let g = ground(&kb, Universe::Names(2)).unwrap();
        let sdp = compile(&g, &CompileOptions::new(2).dense()).unwrap();
        let terms = g.terms();
        let monos = monomials_upto(&terms, 2);
        let classes: BTreeSet<Monomial> = monos.iter().map(|m| canonicalize(m).0).collect();
        assert_eq!(sdp.summary().variables, classes.len());
        let unshared = compile(&g, &CompileOptions::new(2).dense().unshared()).unwrap();
        assert_eq!(unshared.summary().variables, monos.len());
    }

    #[test]
    fn boolean_bound_program() {
        let kb = parse_kb("relation P/1 boolean; constant james; e(P(james)) - 1 >= 0;").unwrap().kb;
        let g = ground(&kb, Universe::DomainClosure).unwrap();
        let sdp = compile(&g, &CompileOptions::new(2)).unwrap();
        assert_eq!(sdp.scalars.len(), 1);
        assert_eq!(g.bounds[0].kind, BodyKind::Expectation);
        let p = Monomial::from_term(t("P", &["james"]));
        let v = sdp.var(&p).unwrap();
        assert_eq!(sdp.scalars[0].form, LinearForm { constant: -1.0, coeffs: vec![(v, 1.0)] });
    }

    #[test]
    fn renamed_blocks_deduplicated() {
        let kb = parse_kb("relation W/2 boolean; forall x,y : W(x,y) - 0.5 >= 0;").unwrap().kb;
        let g = ground(&kb, Universe::Names(2)).unwrap();
        let shared = compile(&g, &CompileOptions::new(2)).unwrap();
        let unshared = compile(&g, &CompileOptions::new(2).unshared()).unwrap();
        assert!(shared.summary().psd_blocks < unshared.summary().psd_blocks);
        // W(g1,g1), W(g1,g2): two classes of moment and localizing blocks
        assert_eq!(shared.summary().psd_blocks, 4);
    }
}
