//! Trains both encoders on a synthetic multiclass dataset and reports
//! cross-modal retrieval quality.
//!
//! `cargo run --release --example train_cross_modal [epochs]`

use std::time::Instant;

use jcch::coefficients::{estimate_coefficients, rescale};
use jcch::data::{gen_synthetic, split, LabelModel, SplitSpec, SynthSpec};
use jcch::trainer::{evaluate_cross_modal, fit, nearest_center_accuracy, Modality, TrainConfig};
use jcch::AnchorSet;

fn main() -> jcch::Result<()> {
    let epochs = std::env::args().nth(1).map_or(30, |a| a.parse().expect("epochs"));
    let ds = gen_synthetic(&SynthSpec {
        n: 600,
        num_labels: 10,
        d1: 64,
        d2: 48,
        label_model: LabelModel::Multiclass,
        noise_sigma: 0.5,
        seed: 7,
    })?;
    let parts = split(
        &ds,
        &SplitSpec {
            n_query: 100,
            n_train: 500,
            seed: 7,
        },
    )?;
    let train = ds.subset(&parts.train)?;
    let (coeffs, _) = estimate_coefficients(train.labels(), &AnchorSet::sample(train.n(), 250, 7)?, false)?;
    let coeffs = rescale(&coeffs, train.labels())?;

    let config = TrainConfig {
        epochs,
        ..TrainConfig::default()
    };
    let start = Instant::now();
    let (params, report) = fit(&train, &coeffs, &config)?;
    println!("trained {epochs} epochs in {:.1?}", start.elapsed());
    for r in &report.records {
        println!(
            "epoch {:>2}  loss {:.4}  cmul {:.4}  lq {:.3}/{:.3}  |F| {:.3}/{:.3}  |c| {:.3}",
            r.epoch, r.total, r.cmul, r.quant1, r.quant2, r.f_norm1, r.f_norm2, r.center_norm_mean
        );
    }

    let query = ds.subset(&parts.query)?;
    let db = ds.subset(&parts.db)?;
    for rep in evaluate_cross_modal(&params, &query, &db, &[100])? {
        println!(
            "{}: MAP {:.4}  P@100 {:.4}",
            rep.direction.tag(),
            rep.map,
            rep.precision_at_k[0].1
        );
    }
    for m in [Modality::One, Modality::Two] {
        println!(
            "nearest-center accuracy {m:?}: {:.3}",
            nearest_center_accuracy(&params, &train, m)?
        );
    }
    Ok(())
}
