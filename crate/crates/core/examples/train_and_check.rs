//! Pretrain the base encoder, fine-tune it on one task and verify the
//! hand-written gradients against finite differences.
//!
//!     cargo run --release --example train_and_check

use mergelab::experiment::{build_base, generate_suite, ExperimentConfig};
use mergelab::protocols::current_eval;
use mergelab::synthdata::Split;
use mergelab::training::{finetune, grad_check};

fn main() -> mergelab::Result<()> {
    let cfg = ExperimentConfig::default();
    let seed = 0;
    let datasets = generate_suite(&cfg, seed)?;
    let (base, pre_log) = build_base(&cfg, &datasets, seed)?;
    println!("pretext losses: {:.3?}", pre_log.train_losses());

    let ds = &datasets[1];
    let mut ft = cfg.finetune.clone();
    ft.seed = seed;
    let (model, log) = finetune(&base, ds, cfg.model.use_bias, &ft)?;
    let losses = log.train_losses();
    println!(
        "task {} fine-tune loss {:.3} -> {:.3}",
        ds.task_id,
        losses[0],
        losses[losses.len() - 1]
    );
    let test = ds.batch(Split::Test);
    println!(
        "test accuracy {:.3}",
        current_eval(&model.encoder, &model.head, &test)?.value()
    );

    let batch = test.select(&(0..16).collect::<Vec<_>>());
    println!("{}", grad_check(&model, &batch, 1e-5, 1e-4, 0)?);
    Ok(())
}
