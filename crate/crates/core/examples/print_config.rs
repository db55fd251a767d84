//! Print the built-in experiment config as JSON.
//!
//!     cargo run --example print_config > my.json

use mergelab::experiment::ExperimentConfig;

fn main() {
    println!("{}", ExperimentConfig::default().to_json());
}
