//! Grounding over two generic names, and how moments fall into renaming
//! classes.
//!
//! cargo run --example grounding_classes

use lifted_sos::grounder::{canonicalize, count_atoms, equivalence_classes, ground, Universe};
use lifted_sos::parser::{parse_kb, parse_monomial};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let kb = parse_kb(include_str!("../fixtures/qp.lsos")).map_err(|d| format!("{d:?}"))?.kb;
    let g = ground(&kb, Universe::Names(2))?;
    println!("names: {:?}", g.names.iter().map(ToString::to_string).collect::<Vec<_>>());
    for c in g.all() {
        println!("  {:>4}  e({}) {} 0", c.id, c.poly, c.cmp);
    }
    println!("{} constraints, {} atoms", g.len(), count_atoms(&g));

    let moments = g.all().flat_map(|c| c.poly.terms().map(|(m, _)| m.clone()).collect::<Vec<_>>()).filter(|m| !m.is_one());
    for (rep, members) in equivalence_classes(moments) {
        println!("class of {rep}: {}", members.iter().map(ToString::to_string).collect::<Vec<_>>().join(", "));
    }

    for text in ["Q(g2,g1)", "Q(g1,g2)", "Q(james,g2)", "Q(g2,g1)*Q(g1,g1)"] {
        let m = parse_monomial(text)?;
        println!("canonical form of {text}: {}", canonicalize(&m).0);
    }
    Ok(())
}
