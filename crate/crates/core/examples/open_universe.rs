//! The same query as the pool of generic names grows.
//!
//! cargo run --release --example open_universe

use lifted_sos::compiler::BasisScope;
use lifted_sos::parser::parse_kb;
use lifted_sos::query::{compare_universes, QuerySpec, Sides};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let war = parse_kb(include_str!("../fixtures/war.lsos")).map_err(|d| format!("{d:?}"))?.kb;
    println!("war, quantifier rank {}", war.rank());
    let spec = QuerySpec::bound("e(War(Antony,g1))", Sides::Both).degree(4);
    for (k, r) in compare_universes(&war, &spec, &[3, 4, 5], true) {
        let r = r?;
        println!("  k = {k}: [{:.6}, {:.6}], {} variables, {:.2}s", r.lo.unwrap(), r.hi.unwrap(), r.size.variables, r.timings.total());
    }

    // no two distinct individuals both lead. Per-constraint moment matrices
    // only see pairs; one matrix over all names sees that e(L) <= 1/k.
    let leaders = parse_kb(
        "relation L/1 boolean;\n\
         forall x,y : x != y => e(L(x)*L(y)) = 0;",
    )
    .map_err(|d| format!("{d:?}"))?
    .kb;
    println!("leaders, quantifier rank {}", leaders.rank());
    for scope in [BasisScope::Clique, BasisScope::Dense] {
        let spec = QuerySpec::bound("e(L(g1))", Sides::Max).degree(2).scope(scope);
        for (k, r) in compare_universes(&leaders, &spec, &[2, 3, 4, 6], false) {
            println!("  {scope:?}, k = {k}: e(L(g1)) <= {:.6}", r?.hi.unwrap());
        }
    }
    Ok(())
}
