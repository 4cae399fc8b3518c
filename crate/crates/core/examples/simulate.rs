//! Generates the default synthetic city and writes it as CSV.
//!
//! `cargo run --example simulate -- [out_dir]`

use crome::synth::{generate, write_scenario, ScenarioConfig};

fn main() -> crome::Result<()> {
    let out = std::env::args().nth(1).map(Into::into).unwrap_or_else(|| std::env::temp_dir().join("crome-sim"));
    let cfg = ScenarioConfig { duration_days: 14.0, ..ScenarioConfig::default() };
    let scenario = generate(&cfg)?;
    let ds = &scenario.dataset;
    let genuine = scenario.provenance.iter().filter(|p| p.incident_id.is_some()).count();
    println!("{} incidents, {} reports ({} genuine)", ds.incidents.len(), ds.reports.len(), genuine);
    println!("{} traffic and {} weather rows", ds.traffic.len(), ds.weather.len());
    std::fs::create_dir_all(&out).map_err(|e| crome::Error::io(&out, e))?;
    write_scenario(&scenario, &out)?;
    println!("written to {}", out.display());
    Ok(())
}
