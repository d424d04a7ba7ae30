//! Checks numerically that the unary losses upper-bound the triplet ranking
//! losses on seeded random instances, and that shrunken coefficients are
//! caught.
//!
//! `cargo run --release --example certify_bounds [trials] [csv path]`

use jcch::bounds::{certify, CertifyPlan};

fn main() -> jcch::Result<()> {
    let mut args = std::env::args().skip(1);
    let trials = args.next().map_or(600, |a| a.parse().expect("trials"));
    let plan = CertifyPlan {
        trials,
        ..CertifyPlan::default()
    };

    let cert = certify(&plan)?;
    println!(
        "{} instances, {} violations, min slack {:.3e}",
        cert.reports.len(),
        cert.violations().len(),
        cert.min_slack().unwrap_or(f64::NAN)
    );
    if let Some(path) = args.next() {
        cert.write_csv(std::fs::File::create(&path)?)?;
        println!("wrote {path}");
    }

    let control = certify(&CertifyPlan { corrupt: 0.5, ..plan })?;
    println!(
        "halved coefficients: {} of {} instances violate",
        control.violations().len(),
        control.reports.len()
    );
    Ok(())
}
