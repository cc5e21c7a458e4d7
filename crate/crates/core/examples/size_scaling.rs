//! Grounding size and solve time as named individuals are added to the war
//! knowledge base, with the generic pool and degree fixed.
//!
//! cargo run --release --example size_scaling [max_constants]

use std::time::Instant;

use lifted_sos::compiler::{compile, CompileOptions};
use lifted_sos::grounder::{count_atoms, ground, Universe};
use lifted_sos::parser::parse_kb;
use lifted_sos::sdp::{solve_feasibility, SolveStatus, SolverConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let max: usize = std::env::args().nth(1).map(|a| a.parse()).transpose()?.unwrap_or(8);
    let base = parse_kb(include_str!("../fixtures/war.lsos")).map_err(|d| format!("{d:?}"))?.kb;
    let (k, d) = (3u32, 4u32);
    println!("{:>3} {:>8} {:>10} {:>8} {:>8} {:>9}", "c", "atoms", "n*m*(c+k)^k", "vars", "status", "seconds");
    let mut c_added = 2;
    while c_added <= max {
        let kb = base.with_constants((1..=c_added).map(|i| format!("Person{i}")));
        let c = kb.constants().len();
        let t = Instant::now();
        let g = ground(&kb, Universe::Names(k))?;
        let sdp = compile(&g, &CompileOptions::new(d))?;
        let status = match solve_feasibility(&sdp, &SolverConfig::default()) {
            SolveStatus::Feasible(_) => "feasible",
            SolveStatus::Infeasible(_) => "infeasible",
            SolveStatus::Unknown(_) => "unknown",
        };
        let n = kb.constraints().len();
        let m = kb.constraints().iter().map(|c| c.terms().len()).max().unwrap_or(0);
        let bound = n * m * (c + k as usize).pow(k);
        println!("{c:>3} {:>8} {bound:>10} {:>8} {status:>8} {:>9.3}", count_atoms(&g), sdp.vars.len(), t.elapsed().as_secs_f64());
        c_added *= 2;
    }
    Ok(())
}
