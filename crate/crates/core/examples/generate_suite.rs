//! Generate the default three-task suite and write it as CSV.
//!
//!     cargo run --example generate_suite -- [out_dir] [seed]

use std::path::PathBuf;

use mergelab::experiment::{generate_suite, write_dataset_artifacts, ExperimentConfig};
use mergelab::synthdata::Split;

fn main() -> mergelab::Result<()> {
    let mut args = std::env::args().skip(1);
    let dir = PathBuf::from(args.next().unwrap_or_else(|| "suite".into()));
    let seed: u64 = args
        .next()
        .map_or(0, |s| s.parse().expect("seed must be an integer"));

    let cfg = ExperimentConfig::default();
    for ds in generate_suite(&cfg, seed)? {
        let counts: Vec<_> = Split::ALL
            .iter()
            .map(|&s| (s, ds.class_counts(s)))
            .collect();
        println!(
            "task {} ({} classes, {} samples)",
            ds.task_id,
            ds.num_classes,
            ds.len()
        );
        for (split, c) in counts {
            println!("  {split:<5} {c:?}");
        }
        write_dataset_artifacts(&dir, &ds, &cfg.digest(), seed)?;
    }
    println!("wrote {}", dir.display());
    Ok(())
}
