//! Pseudo-models without shared class variables: solve, average over all
//! renamings of the generic names, then reuse the averaged moments for a
//! larger pool of names.
//!
//! cargo run --release --example pseudomodel

use lifted_sos::certificate::{extend_pseudomodel, symmetrize};
use lifted_sos::compiler::{compile, CompileOptions};
use lifted_sos::grounder::{canonicalize, ground, Universe};
use lifted_sos::parser::parse_kb;
use lifted_sos::sdp::{check_assignment, solve_feasibility, SolveStatus, SolverConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let kb = parse_kb(include_str!("../fixtures/qp.lsos")).map_err(|d| format!("{d:?}"))?.kb;
    let k = 2;
    let sdp = compile(&ground(&kb, Universe::Names(k))?, &CompileOptions::new(2).unshared())?;
    let SolveStatus::Feasible(m) = solve_feasibility(&sdp, &SolverConfig::default()) else {
        return Err("expected a feasible relaxation".into());
    };
    println!("{} moments solved", m.values.len());

    let sym = symmetrize(&m, k)?;
    let mut spread = std::collections::BTreeMap::<_, (f64, f64)>::new();
    for (mono, v) in &sym.values {
        let e = spread.entry(canonicalize(mono).0).or_insert((f64::INFINITY, f64::NEG_INFINITY));
        *e = (e.0.min(*v), e.1.max(*v));
    }
    let worst = spread.values().map(|(lo, hi)| hi - lo).fold(0.0, f64::max);
    println!("symmetrized: {} classes, largest spread within a class {worst:.1e}", spread.len());
    println!("symmetrized still feasible: {}", check_assignment(&sdp, &sym, 1e-6)?.is_empty());

    for bigger in [k + 1, k + 2] {
        let sdp2 = compile(&ground(&kb, Universe::Names(bigger))?, &CompileOptions::new(2).unshared())?;
        let ext = extend_pseudomodel(&sym, sdp2.vars.iter().cloned())?;
        println!("extended to k = {bigger} ({} moments): feasible = {}", ext.values.len(), check_assignment(&sdp2, &ext, 1e-6)?.is_empty());
    }
    Ok(())
}
