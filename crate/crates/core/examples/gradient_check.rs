//! Compares the analytic gradient of the full training objective with
//! central finite differences in every parameter block.
//!
//! `cargo run --release --example gradient_check`

use jcch::coefficients::{estimate_coefficients, rescale};
use jcch::data::{gen_synthetic, LabelModel, SynthSpec};
use jcch::trainer::{grad_check, init_params, Batch, Dims, BLOCK_NAMES};
use jcch::{AnchorSet, LossWeights};

fn main() -> jcch::Result<()> {
    let ds = gen_synthetic(&SynthSpec {
        n: 16,
        num_labels: 4,
        d1: 6,
        d2: 5,
        label_model: LabelModel::Uniform { p: 0.35 },
        noise_sigma: 0.3,
        seed: 4,
    })?;
    let (coeffs, _) = estimate_coefficients(ds.labels(), &AnchorSet::all(ds.n()), false)?;
    let coeffs = rescale(&coeffs, ds.labels())?;
    let dims = Dims {
        d1: 6,
        d2: 5,
        hidden: 8,
        code_len: 6,
        num_labels: 4,
    };
    let weights = LossWeights {
        lambda: 0.3,
        mu: 0.5,
        alpha: 0.4,
        beta: 0.3,
        ..LossWeights::default()
    };
    let batch = Batch::from_dataset(&ds, &(0..ds.n()).collect::<Vec<_>>())?;

    let mut params = init_params(dims, 0)?;
    // Scaled-up head weights keep activations away from the near-zero start.
    for b in [2, 3, 6, 7] {
        params.blocks_mut()[b].iter_mut().for_each(|v| *v *= 30.0);
    }
    let gc = grad_check(&params, &batch, ds.labels(), &coeffs, &weights, 30, 0)?;
    for (name, err) in BLOCK_NAMES.iter().zip(gc.per_block) {
        println!("{name:<14} max rel error {err:.2e}");
    }
    println!("{} coordinates, worst {:.2e}", gc.coordinates, gc.max_rel_error);
    Ok(())
}
