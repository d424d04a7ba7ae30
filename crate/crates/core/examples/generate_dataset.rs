//! Generates a correlated multilabel dataset, prints its label statistics and
//! round-trips it through the binary dataset format.
//!
//! `cargo run --release --example generate_dataset [path]`

use jcch::data::{chain_parent, gen_synthetic, LabelModel, SynthSpec};
use jcch::io;

fn main() -> jcch::Result<()> {
    let spec = SynthSpec {
        n: 1000,
        num_labels: 8,
        d1: 32,
        d2: 24,
        label_model: LabelModel::Chain {
            p_root: 0.5,
            p_child: 0.6,
        },
        noise_sigma: 1.0,
        seed: 3,
    };
    let ds = gen_synthetic(&spec)?;
    let labels = ds.labels();
    println!(
        "{} items, {} labels, mean |Y| {:.3}",
        ds.n(),
        labels.num_labels(),
        labels.total_cardinality() as f64 / ds.n() as f64
    );
    for s in 0..labels.num_labels() {
        let count = (0..ds.n()).filter(|&i| labels.contains(i, s)).count();
        let parent = if s == 0 {
            "root".to_string()
        } else {
            format!("parent {}", chain_parent(s))
        };
        println!("label {s}: {:.3} ({parent})", count as f64 / ds.n() as f64);
    }

    let path = std::env::args()
        .nth(1)
        .map_or_else(|| std::env::temp_dir().join("jcch_example.jccd"), Into::into);
    io::save_dataset(&path, &ds)?;
    let back = io::load_dataset(&path)?;
    println!(
        "wrote {} ({} bytes), reloads equal: {}",
        path.display(),
        std::fs::metadata(&path)?.len(),
        back == ds
    );
    Ok(())
}
