//! A refutation certificate written to disk, reloaded, checked against a
//! fresh grounding, and rejected once tampered with.
//!
//! cargo run --release --example certificate_roundtrip

use lifted_sos::certificate::{verify_certificate, Certificate};
use lifted_sos::grounder::{ground, Universe};
use lifted_sos::parser::parse_kb;
use lifted_sos::query::{run_query, QuerySpec};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let kb = parse_kb(include_str!("../fixtures/chebyshev.lsos")).map_err(|d| format!("{d:?}"))?.kb;
    let r = run_query(&kb, &QuerySpec::check())?;
    let cert = r.certificate.ok_or("expected a refutation")?;

    let path = std::env::temp_dir().join(format!("chebyshev-{}.cert.json", std::process::id()));
    std::fs::write(&path, serde_json::to_string_pretty(&cert.to_json())?)?;
    println!("wrote {} ({} bytes)", path.display(), std::fs::metadata(&path)?.len());

    let loaded = Certificate::from_json(&serde_json::from_str(&std::fs::read_to_string(&path)?)?)?;
    std::fs::remove_file(&path)?;
    let g = ground(&kb, Universe::Names(loaded.generics))?;
    let report = verify_certificate(&g, &loaded, loaded.tolerance)?;
    println!("reloaded: pass = {}, max residual {:.2e}", report.pass, report.max_residual);

    let mut tampered = loaded.clone();
    let key = tampered.r.keys().next().ok_or("no bound multipliers")?.clone();
    *tampered.r.get_mut(&key).unwrap() *= 1.01;
    let report = verify_certificate(&g, &tampered, loaded.tolerance)?;
    println!("multiplier on {key} raised 1%: pass = {}, max residual {:.2e}", report.pass, report.max_residual);
    Ok(())
}
