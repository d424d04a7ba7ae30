//! Estimates the per-item, per-label bound coefficients from a sampled
//! anchor set and compares them with the exact and brute-force values.
//!
//! `cargo run --release --example estimate_coefficients [anchors]`

use jcch::coefficients::{
    bruteforce_coefficients, estimate_coefficients, exact_coefficients, rescale, BRUTE_FORCE_CAP,
};
use jcch::data::{sample_labels, LabelModel};
use jcch::{rng, AnchorSet};

fn main() -> jcch::Result<()> {
    let l = std::env::args().nth(1).map_or(20, |a| a.parse().expect("anchor count"));
    let model = LabelModel::Chain {
        p_root: 0.5,
        p_child: 0.4,
    };
    let labels = sample_labels(model, 40, 6, &mut rng::seeded(1))?;
    let n = labels.n();

    let exact = exact_coefficients(&labels).reduce(n);
    let brute = bruteforce_coefficients(&labels, BRUTE_FORCE_CAP)?.reduce(n);
    let (all, _) = estimate_coefficients(&labels, &AnchorSet::all(n), false)?;
    let (sampled, _) = estimate_coefficients(&labels, &AnchorSet::sample(n, l, 5)?, false)?;

    let max_diff = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    println!(
        "all anchors vs exact:  max |dq| {:.2e}",
        max_diff(all.q_values(), exact.q_values())
    );
    println!(
        "exact vs brute force:  max |dq| {:.2e}",
        max_diff(exact.q_values(), brute.q_values())
    );
    let rel = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() / b.iter().sum::<f64>();
    println!(
        "{l} anchors vs exact:  relative L1 error of q {:.3}",
        rel(sampled.q_values(), exact.q_values())
    );

    let scaled = rescale(&exact, &labels)?;
    println!("item  labels      q (rescaled)          u (rescaled)");
    for i in 0..8 {
        let ls = labels.labels(i);
        let q: Vec<String> = ls.iter().map(|&s| format!("{:.3}", scaled.q(i, s))).collect();
        let u: Vec<String> = ls.iter().map(|&s| format!("{:.3}", scaled.u(i, s))).collect();
        println!(
            "{i:>4}  {:<10}  {:<20}  {}",
            format!("{ls:?}"),
            q.join(" "),
            u.join(" ")
        );
    }
    Ok(())
}
