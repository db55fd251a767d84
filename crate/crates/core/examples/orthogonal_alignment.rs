//! Plant a known rotation after a fine-tuned encoder and recover it with
//! the mapping and orthogonal-mapping alignments.
//!
//!     cargo run --release --example orthogonal_alignment

use mergelab::experiment::{build_base, generate_suite, ExperimentConfig};
use mergelab::models::Layer;
use mergelab::numkit::{mat_vec, orth_penalty, random_orthogonal, Rng};
use mergelab::protocols::{aligned_m_eval, current_eval, AlignVariant, AlignmentConfig};
use mergelab::synthdata::Split;
use mergelab::training::finetune;

fn main() -> mergelab::Result<()> {
    let cfg = ExperimentConfig::default();
    let datasets = generate_suite(&cfg, 3)?;
    let (base, _) = build_base(&cfg, &datasets, 3)?;
    let ds = &datasets[2];
    let (teacher, _) = finetune(&base, ds, true, &cfg.finetune)?;

    // Student embeddings are the teacher's rotated by R.
    let d = teacher.encoder.embed_dim();
    let r = random_orthogonal(d, &mut Rng::new(42));
    let last = teacher.encoder.arch().layer_dims().len() - 1;
    let (wn, bn) = (format!("enc.{last}.weight"), format!("enc.{last}.bias"));
    let mut p = teacher.encoder.params().clone();
    let w = p.get(&wn).expect("weight").to_matrix()?;
    let b = mat_vec(&r.transpose(), p.get(&bn).expect("bias").values())?;
    *p.get_mut(&wn).expect("weight") = Layer::from_matrix(wn.clone(), &w.matmul(&r)?);
    *p.get_mut(&bn).expect("bias") = Layer::from_vector(bn.clone(), &b);
    let student = teacher.encoder.with_params(p)?;

    let test = ds.batch(Split::Test);
    println!(
        "teacher          {:.3}",
        current_eval(&teacher.encoder, &teacher.head, &test)?.value()
    );
    println!(
        "rotated, no fix  {:.3}",
        current_eval(&student, &teacher.head, &test)?.value()
    );
    for variant in [AlignVariant::MappingM, AlignVariant::OrthMappingM] {
        let acfg = AlignmentConfig::few_shot(variant, cfg.k, 7);
        let out = aligned_m_eval(&student, &teacher, ds, &test, &acfg)?;
        let m = out.model.mapping.as_ref().expect("mapping variant");
        println!(
            "{:<16} {:.3}  ‖MᵀM−I‖₁/d² {:.4}",
            format!("{variant:?}"),
            out.accuracy.value(),
            orth_penalty(m)? / (d * d) as f64
        );
    }
    Ok(())
}
