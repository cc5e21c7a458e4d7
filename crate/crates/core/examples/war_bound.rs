//! Lower bound on Antony's chance of war with a generic individual, and a
//! refutation of anything below it.
//!
//! cargo run --release --example war_bound

use lifted_sos::certificate::verify_certificate;
use lifted_sos::grounder::{ground, Universe};
use lifted_sos::parser::{parse_constraint, parse_kb};
use lifted_sos::query::{run_query, QuerySpec, QueryStatus, Sides};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let kb = parse_kb(include_str!("../fixtures/war.lsos")).map_err(|d| format!("{d:?}"))?.kb;

    let r = run_query(&kb, &QuerySpec::bound("e(War(Antony,g1))", Sides::Both).degree(4))?;
    println!("e(War(Antony,g1)) in [{:.6}, {:.6}]", r.lo.unwrap(), r.hi.unwrap());
    println!("k = {}, {} moment variables, solved in {:.2}s", r.k, r.size.variables, r.timings.total());

    let query = "e(War(Antony,g1)) <= 0.74";
    let r = run_query(&kb, &QuerySpec::refute(query).degree(4))?;
    assert_eq!(r.status, QueryStatus::Infeasible);
    let cert = r.certificate.expect("infeasible results carry a certificate");
    println!("`{query}` refuted: {} squares, largest coefficient {:.1}", cert.num_squares(), cert.max_coefficient());

    // independent check against a fresh grounding
    let kb2 = kb.with_constraints([parse_constraint(query, &kb).map_err(|d| format!("{d:?}"))?]);
    let g = ground(&kb2, Universe::Names(cert.generics))?;
    let report = verify_certificate(&g, &cert, 1e-4)?;
    println!("verification: pass = {}, max residual {:.2e}, degree {}", report.pass, report.max_residual, report.max_degree);
    Ok(())
}
