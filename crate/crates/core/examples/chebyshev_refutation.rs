//! Chebyshev's inequality as a degree-4 refutation: the solver finds one,
//! the textbook one is checked symbolically, and without the tail bound the
//! tightest degree-4 bound on the tail is 1/4.
//!
//! cargo run --release --example chebyshev_refutation

use lifted_sos::certificate::{verify_certificate, Certificate};
use lifted_sos::compiler::{compile, CompileOptions};
use lifted_sos::grounder::{ground, Universe};
use lifted_sos::model::{BodyKind, KnowledgeBase, Polynomial};
use lifted_sos::parser::{parse_kb, parse_objective, parse_polynomial};
use lifted_sos::query::{run_query, QuerySpec, QueryStatus, Sides};
use lifted_sos::sdp::{check_assignment, MomentAssignment};

fn kb(text: &str) -> KnowledgeBase {
    parse_kb(text).expect("fixture parses").kb
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let closed = kb(include_str!("../fixtures/chebyshev.lsos"));
    let r = run_query(&closed, &QuerySpec::check())?;
    assert_eq!(r.status, QueryStatus::Infeasible);
    println!("degree {} refutation found, residual {:.2e}", r.degree, r.residual.unwrap());

    // ((1-T)X)^2 + T(X^2-4) - X^2(T^2-T) - (X^2-1) + 4(T-0.26) = -0.04
    let g = ground(&closed, Universe::OpenUniverse)?;
    let p = |s: &str| -> Polynomial { parse_polynomial(s, &closed).expect("polynomial") };
    let id = |kind, s: &str| g.find(kind, &p(s)).expect("constraint in grounding").id.clone();
    let mut hand = Certificate { scale: 25.0, degree: 4, tolerance: 1e-12, generics: g.k, ..Default::default() };
    hand.sigma0.push(p("(1 - T(g1))*X(g1)"));
    hand.sigma.insert(id(BodyKind::Logical, "T(g1)*(X(g1)^2 - 4)"), vec![p("1")]);
    hand.q.insert(id(BodyKind::Logical, "T(g1)^2 - T(g1)"), p("-X(g1)^2"));
    hand.r.insert(format!("-{}", id(BodyKind::Expectation, "X(g1)^2 - 1")), 1.0);
    hand.r.insert(id(BodyKind::Expectation, "T(g1) - 0.26"), 4.0);
    let report = verify_certificate(&g, &hand, 1e-12)?;
    println!("hand certificate: pass = {}, max residual {:.1e}", report.pass, report.max_residual);

    let open = kb(include_str!("../fixtures/chebyshev_open.lsos"));
    let r = run_query(&open, &QuerySpec::bound("e(T(g1))", Sides::Max).degree(4))?;
    println!("without the tail bound: e(T) <= {:.6}", r.hi.unwrap());

    // X in {-2, 0, 2} with weights 1/8, 3/4, 1/8 attains it
    let g = ground(&open, Universe::OpenUniverse)?;
    let obj = parse_objective("e(T(g1))", &open).map_err(|d| format!("{d:?}"))?;
    let sdp = compile(&g, &CompileOptions::new(4).with_monomials(obj.terms().map(|(m, _)| m.clone())))?;
    let world = |x: f64| move |t: &lifted_sos::model::Term| if t.relation == "X" { x } else if x.abs() >= 2.0 { 1.0 } else { 0.0 };
    let witness = MomentAssignment::from_distribution(&sdp, &[(0.125, world(-2.0)), (0.75, world(0.0)), (0.125, world(2.0))]);
    let violations = check_assignment(&sdp, &witness, 1e-9)?;
    println!("three-point witness: feasible = {}, e(T) = {}", violations.is_empty(), sdp.form(&obj)?.eval(&witness.to_vector(&sdp)?));
    Ok(())
}
