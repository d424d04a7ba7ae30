//! Sweeps the anchor-set size on a correlated multilabel dataset, driven by
//! the same flat config the `jcch` binary reads.
//!
//! `cargo run --release --example anchor_sweep`

use jcch::cli::run_sweep;
use jcch::config::RunConfig;
use jcch::data::gen_synthetic;

const CONFIG: &str = "
seed = 11
n = 800
num_labels = 12
d1 = 64
d2 = 48
label_model = chain
p_root = 0.5
p_child = 0.6
noise_sigma = 1.0
n_query = 150
sweep_param = anchor_l
sweep_values = 81, 162, 325, 650
";

fn main() -> jcch::Result<()> {
    let config = RunConfig::parse(CONFIG)?;
    let ds = gen_synthetic(&config.synth_spec()?)?;
    let outcome = run_sweep(&config, &ds)?;
    for direction in ["1to2", "2to1"] {
        let maps = outcome.scores(direction, "map");
        let spread =
            maps.iter().copied().fold(f64::NEG_INFINITY, f64::max) - maps.iter().copied().fold(f64::INFINITY, f64::min);
        let shown: Vec<String> = maps.iter().map(|m| format!("{m:.4}")).collect();
        println!(
            "{direction} MAP by anchor count {:?}: {}  (spread {spread:.4})",
            config.sweep_values,
            shown.join(" ")
        );
    }
    Ok(())
}
