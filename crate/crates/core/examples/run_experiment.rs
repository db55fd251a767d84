//! Full pipeline from a JSON config, writing reports and artifacts.
//!
//!     cargo run --release --example run_experiment -- configs/default.json out

use std::path::PathBuf;

use mergelab::experiment::{run_experiment, write_outputs, ExperimentConfig};

fn main() -> mergelab::Result<()> {
    let mut args = std::env::args().skip(1);
    let cfg = match args.next() {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    let out = PathBuf::from(args.next().unwrap_or_else(|| "out".into()));
    let outcome = run_experiment(&cfg)?;
    write_outputs(&cfg, &outcome, &out)?;
    for s in &outcome.summary {
        if s.k_or_fraction == "-" || s.k_or_fraction == cfg.k.to_string() {
            println!(
                "{:<9} {:<5} {:<14} {:.3} ± {:.3}",
                s.model,
                s.method,
                s.protocol.name(),
                s.mean,
                s.std
            );
        }
    }
    println!("config digest {}", outcome.report.config_digest);
    println!("reports in {}", out.display());
    Ok(())
}
