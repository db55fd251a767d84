//! Score a weight-averaged encoder under every evaluation protocol.
//!
//!     cargo run --release --example compare_protocols -- [seed]

use mergelab::experiment::{evaluate_protocols, train_seed, ExperimentConfig};
use mergelab::merging::MergeMethod;
use mergelab::protocols::Protocol;

fn main() -> mergelab::Result<()> {
    let seed: u64 = std::env::args()
        .nth(1)
        .map_or(0, |s| s.parse().expect("seed must be an integer"));
    let mut cfg = ExperimentConfig::default();
    cfg.k_sweep = vec![1, 5, 20];
    let (art, _) = train_seed(&cfg, seed)?;
    let (_, _, wa) = art
        .merged
        .iter()
        .find(|(spec, _, _)| spec.method == MergeMethod::WeightAveraging)
        .expect("default config merges with WA");

    println!("{:<14} {:>5} accuracy per task", "protocol", "k");
    for p in Protocol::ALL {
        cfg.protocols = vec![p];
        let mut by_tag: Vec<(String, Vec<f64>)> = Vec::new();
        for (ft, ds) in art.finetuned.iter().zip(&art.datasets) {
            let (rows, _) = evaluate_protocols(&cfg, seed, "merged", "wa", wa, ft, ds)?;
            for r in rows {
                match by_tag.iter_mut().find(|(t, _)| *t == r.k_or_fraction) {
                    Some((_, v)) => v.push(r.accuracy),
                    None => by_tag.push((r.k_or_fraction, vec![r.accuracy])),
                }
            }
        }
        for (tag, accs) in by_tag {
            println!("{:<14} {tag:>5} {accs:.3?}", p.name());
        }
    }
    Ok(())
}
