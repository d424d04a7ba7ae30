//! Sign-encodes real-valued vectors into packed codes, ranks a database by
//! Hamming distance and scores the ranking.
//!
//! `cargo run --release --example hamming_retrieval`

use jcch::labels::LabelMatrix;
use jcch::retrieval::{average_precision, encode, evaluate, hamming, rank_database, Direction};
use jcch::{rng, Matrix};
use rand_distr::{Distribution, StandardNormal};

fn main() -> jcch::Result<()> {
    let (n, r, classes) = (200, 48, 4);
    let mut g = rng::seeded(9);
    let prototypes: Vec<Vec<f64>> = (0..classes)
        .map(|_| (0..r).map(|_| StandardNormal.sample(&mut g)).collect())
        .collect();
    let class: Vec<usize> = (0..n).map(|i| i % classes).collect();
    let mut data = Vec::with_capacity(n * r);
    for &c in &class {
        data.extend(prototypes[c].iter().map(|p| {
            let z: f64 = StandardNormal.sample(&mut g);
            p + 0.8 * z
        }));
    }
    let codes = encode(&Matrix::from_vec(n, r, data)?)?;
    let labels = LabelMatrix::multiclass(classes, &class)?;

    let ranking = rank_database(codes.code(0), &codes)?;
    let relevant: Vec<bool> = (0..n).map(|j| class[j] == class[0]).collect();
    let dists: Vec<u32> = ranking[..8]
        .iter()
        .map(|&j| hamming(codes.code(0), codes.code(j)))
        .collect::<Result<_, _>>()?;
    println!("item 0 nearest: {:?} at distances {dists:?}", &ranking[..8]);
    println!("item 0 AP {:.4}", average_precision(&ranking, &relevant));

    let report = evaluate(&codes, &codes, &labels, &labels, &[10, 50], Direction::OneToTwo)?;
    println!(
        "MAP {:.4}  P@10 {:.4}  P@50 {:.4}",
        report.map, report.precision_at_k[0].1, report.precision_at_k[1].1
    );
    Ok(())
}
