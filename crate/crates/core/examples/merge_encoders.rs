//! Fine-tune one model per task and merge their encoders with weight
//! averaging, task arithmetic and Ties, choosing λ on validation data.
//!
//!     cargo run --release --example merge_encoders

use mergelab::experiment::{build_base, generate_suite, ExperimentConfig};
use mergelab::merging::{
    default_lambda_grid, merge_with_lambda, select_lambda, MergeMethod, MergeSpec,
};
use mergelab::models::{MlpEncoder, ModelParams};
use mergelab::protocols::current_eval;
use mergelab::synthdata::Split;
use mergelab::training::finetune;

fn main() -> mergelab::Result<()> {
    let cfg = ExperimentConfig::default();
    let seed = 1;
    let datasets = generate_suite(&cfg, seed)?;
    let (base, _) = build_base(&cfg, &datasets, seed)?;
    let mut ft = cfg.finetune.clone();
    ft.seed = seed;
    let models = datasets
        .iter()
        .map(|ds| Ok(finetune(&base, ds, true, &ft)?.0))
        .collect::<mergelab::Result<Vec<_>>>()?;
    let encoders: Vec<ModelParams> = models.iter().map(|m| m.encoder.params().clone()).collect();
    let val: Vec<_> = datasets.iter().map(|d| d.batch(Split::Val)).collect();

    let test_acc = |enc: &MlpEncoder| -> mergelab::Result<Vec<f64>> {
        models
            .iter()
            .zip(&datasets)
            .map(|(m, ds)| Ok(current_eval(enc, &m.head, &ds.batch(Split::Test))?.value()))
            .collect()
    };
    let own: Vec<f64> = models
        .iter()
        .zip(&datasets)
        .map(|(m, ds)| current_eval(&m.encoder, &m.head, &ds.batch(Split::Test)).map(|a| a.value()))
        .collect::<mergelab::Result<_>>()?;
    println!("fine-tuned     {own:.3?}");

    for method in MergeMethod::ALL {
        let spec = MergeSpec::new(method);
        let lambda = if method.uses_lambda() {
            let choice =
                select_lambda(base.params(), &models, &val, &spec, &default_lambda_grid())?;
            choice.lambda
        } else {
            1.0
        };
        let merged =
            MlpEncoder::from_params(&merge_with_lambda(base.params(), &encoders, &spec, lambda)?)?;
        let label = if method.uses_lambda() {
            format!("{} λ={lambda:.1}", method.tag())
        } else {
            method.tag().to_string()
        };
        println!("{label:<14} {:.3?}", test_acc(&merged)?);
    }
    Ok(())
}
