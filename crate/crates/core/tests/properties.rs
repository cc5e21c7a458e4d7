use std::collections::BTreeMap;

use lifted_sos::certificate::symmetrize;
use lifted_sos::grounder::{canonicalize, Renaming};
use lifted_sos::model::{Monomial, Polynomial, Term};
use lifted_sos::parser::{parse_kb, serialize_kb};
use lifted_sos::query::{run_query, QuerySpec, Sides};
use lifted_sos::sdp::MomentAssignment;
use proptest::prelude::*;

const TERMS: &[&str] = &["P(x)", "Q(x,y)", "P(a)", "Q(x,b)", "Q(y,x)", "P(y)"];

fn constraint_text() -> impl Strategy<Value = String> {
    let monomial = prop::collection::vec(0..TERMS.len(), 1..=2).prop_map(|ix| ix.iter().map(|&i| TERMS[i]).collect::<Vec<_>>().join("*"));
    let term = (-9i32..=9, monomial).prop_filter("nonzero", |(c, _)| *c != 0);
    (prop::collection::vec(term, 1..=3), -20i32..=20, any::<bool>(), 0..3usize, 0..3usize).prop_map(|(terms, c0, expect, cmp, guard)| {
        let body: Vec<String> = terms
            .iter()
            .map(|(c, m)| if expect { format!("{}*e({m})", f64::from(*c) / 4.0) } else { format!("{}*{m}", f64::from(*c) / 4.0) })
            .collect();
        let cmp = [">=", "<=", "="][cmp];
        let guard = ["", "x != a => ", "x != y & y != b => "][guard];
        format!("forall x, y : {guard}{} + {} {cmp} 0;", body.join(" + "), f64::from(c0) / 8.0)
    })
}

fn kb_text() -> impl Strategy<Value = String> {
    (any::<bool>(), prop::collection::vec(constraint_text(), 1..=4)).prop_map(|(boolean, cs)| {
        let p = if boolean { "relation P/1 boolean;" } else { "relation P/1 bounded 4;" };
        format!("{p}\nrelation Q/2;\nconstant a, b;\n{}", cs.join("\n"))
    })
}

fn ground_monomial() -> impl Strategy<Value = Monomial> {
    let name = prop::sample::select(vec!["a", "g1", "g2", "g3", "g4"]);
    let term = prop_oneof![
        name.clone().prop_map(|n| Term::ground("P", &[n])),
        (name.clone(), name).prop_map(|(x, y)| Term::ground("Q", &[x, y])),
    ];
    prop::collection::vec((term, 1u32..=2), 1..=3).prop_map(Monomial::from_factors)
}

fn polynomial() -> impl Strategy<Value = Polynomial> {
    prop::collection::vec((-5i32..=5, ground_monomial()), 1..=4)
        .prop_map(|ts| Polynomial::combine(ts.into_iter().map(|(c, m)| (f64::from(c), m))))
        .prop_filter("nonzero", |p| !p.is_zero())
}

proptest! {
    #[test]
    fn kb_text_round_trips(text in kb_text()) {
        let kb = parse_kb(&text).map_err(|d| TestCaseError::fail(format!("{d:?}\n{text}")))?.kb;
        let printed = serialize_kb(&kb);
        let again = parse_kb(&printed).map_err(|d| TestCaseError::fail(format!("{d:?}\n{printed}")))?.kb;
        prop_assert_eq!(kb.constraints(), again.constraints());
        prop_assert_eq!(serialize_kb(&again), printed);
    }

    #[test]
    fn canonical_form_ignores_renaming(m in ground_monomial(), perm in Just(()).prop_perturb(|_, mut rng| {
        let mut v: Vec<u32> = (1..=4).collect();
        for i in (1..v.len()).rev() {
            v.swap(i, rng.random_range(0..=i));
        }
        v
    })) {
        let r = Renaming((1..=4).zip(perm).collect());
        let (c, w) = canonicalize(&m);
        prop_assert_eq!(&canonicalize(&r.apply(&m)).0, &c);
        prop_assert_eq!(w.apply(&m), c.clone());
        prop_assert_eq!(canonicalize(&c).0, c);
    }

    #[test]
    fn degree_is_additive(p in polynomial(), q in polynomial()) {
        prop_assert_eq!(p.mul(&q).degree(), p.degree() + q.degree());
    }

    #[test]
    fn combine_is_idempotent(p in polynomial()) {
        let again = Polynomial::combine(p.terms().map(|(m, c)| (c, m.clone())));
        prop_assert_eq!(again, p);
    }

    #[test]
    fn symmetrize_is_idempotent(ms in prop::collection::vec((ground_monomial(), -1.0f64..1.0), 1..6)) {
        // close the support under renaming so every image has a value
        let mut values = BTreeMap::new();
        for (m, v) in &ms {
            for r in Renaming::all(4) {
                values.entry(r.apply(m)).or_insert(*v);
            }
        }
        let once = symmetrize(&MomentAssignment { values }, 4).unwrap();
        let twice = symmetrize(&once, 4).unwrap();
        for (m, v) in &once.values {
            prop_assert!((twice.values[m] - v).abs() <= 1e-12);
            prop_assert!((once.values[&canonicalize(m).0] - v).abs() <= 1e-12);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn bounds_do_not_depend_on_placeholder(lo in 0.05f64..0.45, gap in 0.05f64..0.5) {
        let text = format!(
            "relation P/1 boolean; relation R/2 boolean;\n\
             forall x : e(P(x)) - {lo} >= 0;\n\
             forall x, y : x != y => e(P(x)*R(x,y)) - {} >= 0;",
            lo * gap
        );
        let kb = parse_kb(&text).unwrap().kb;
        let bound = |obj: &str| run_query(&kb, &QuerySpec::bound(obj, Sides::Both).degree(2)).unwrap();
        let a = bound("e(R(g1,g2))");
        let b = bound("e(R(g2,g1))");
        let c = bound("e(R(g3,g1))");
        for r in [&b, &c] {
            prop_assert!((r.lo.unwrap() - a.lo.unwrap()).abs() < 1e-5);
            prop_assert!((r.hi.unwrap() - a.hi.unwrap()).abs() < 1e-5);
        }
    }
}
