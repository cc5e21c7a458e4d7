//! Average heart rate when a fifth of the population is above 100 and the
//! rest above 60. The degree-2 bound is exact: a two-point population
//! attains it.
//!
//! cargo run --release --example heart_rate

use lifted_sos::compiler::{compile, CompileOptions};
use lifted_sos::grounder::{ground, Universe};
use lifted_sos::model::Term;
use lifted_sos::parser::{parse_kb, parse_objective};
use lifted_sos::query::{run_query, QuerySpec, Sides};
use lifted_sos::sdp::{check_assignment, MomentAssignment};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let kb = parse_kb(include_str!("../fixtures/heart_rate.lsos")).map_err(|d| format!("{d:?}"))?.kb;
    let r = run_query(&kb, &QuerySpec::bound("e(HR(g1))", Sides::Min))?;
    println!("e(HR) >= {:.6} at degree {} ({:.3}s)", r.lo.unwrap(), r.degree, r.timings.total());

    let g = ground(&kb, Universe::OpenUniverse)?;
    let obj = parse_objective("e(HR(g1))", &kb).map_err(|d| format!("{d:?}"))?;
    let sdp = compile(&g, &CompileOptions::new(2).with_monomials(obj.terms().map(|(m, _)| m.clone())))?;
    let person = |high: bool, hr: f64| move |t: &Term| if t.relation == "HR" { hr } else { f64::from(u8::from(high)) };
    let witness = MomentAssignment::from_distribution(&sdp, &[(0.2, person(true, 100.0)), (0.8, person(false, 60.0))]);
    let report = check_assignment(&sdp, &witness, 1e-9)?;
    println!("population 20% at 100, 80% at 60: feasible = {}, e(HR) = {}", report.is_empty(), sdp.form(&obj)?.eval(&witness.to_vector(&sdp)?));
    Ok(())
}
