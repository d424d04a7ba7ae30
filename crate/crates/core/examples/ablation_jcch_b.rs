//! Compares anchor-estimated coefficients with the constant-coefficient
//! baseline on correlated multilabel data, each tuned on its own validation
//! split.
//!
//! `cargo run --release --example ablation_jcch_b [seed...]`

use jcch::ablation::{run_ablation, AblationPlan};
use jcch::data::{gen_synthetic, split, LabelModel, SplitSpec, SynthSpec};
use jcch::trainer::TrainConfig;

fn main() -> jcch::Result<()> {
    let mut seeds: Vec<u64> = std::env::args().skip(1).map(|a| a.parse().expect("seed")).collect();
    if seeds.is_empty() {
        seeds.push(11);
    }
    for seed in seeds {
        let ds = gen_synthetic(&SynthSpec {
            n: 800,
            num_labels: 12,
            d1: 64,
            d2: 48,
            label_model: LabelModel::Chain {
                p_root: 0.5,
                p_child: 0.6,
            },
            noise_sigma: 1.0,
            seed,
        })?;
        let parts = split(
            &ds,
            &SplitSpec {
                n_query: 150,
                n_train: 650,
                seed,
            },
        )?;
        let train = ds.subset(&parts.train)?;
        let (query, db) = (ds.subset(&parts.query)?, ds.subset(&parts.db)?);
        let base = TrainConfig {
            seed,
            ..TrainConfig::default()
        };
        let outcome = run_ablation(&train, &query, &db, &base, &AblationPlan::default())?;
        for m in [&outcome.jcch, &outcome.baseline] {
            let [a, b] = m.maps();
            println!(
                "seed {seed} {:<7} lr {:<5} lambda {:<5} val {:.4}  1to2 MAP {a:.4}  2to1 MAP {b:.4}",
                m.mode.name(),
                m.learning_rate,
                m.lambda,
                m.val_map
            );
        }
        let [g1, g2] = outcome.map_gain();
        println!("seed {seed} gain 1to2 {g1:+.4}  2to1 {g2:+.4}");
    }
    Ok(())
}
