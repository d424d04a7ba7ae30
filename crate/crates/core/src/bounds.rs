//! Brute-force triplet losses and numeric certification of the unary upper
//! bounds.
//!
//! With exact, unrescaled coefficients and `λ = 1` the following chain holds
//! on every instance:
//!
//! ```text
//! triplet(H; m)  ≤  structured(H, C; m)                      for any margin m ≥ 0
//! triplet(H; 0)  ≤  structured(H, C; 0)  ≤  improved(H, C)
//! cross12(H1, H2) ≤ Σ_i Σ_{s∈Y_i} [q_is·l_c(h_i1, s) + u_is·d(h_i2, c_s)]
//! ```
//!
//! The first follows from the triangle inequality and the Lipschitz and
//! monotonicity properties of the hinge; the second from `l_c ≥ hinge₀`.

use std::io::Write;

use rand::Rng as _;
use rayon::prelude::*;

use crate::coefficients::{exact_coefficients, CoefficientSet, FullTripletCoefficients};
use crate::data::{sample_labels, LabelModel};
use crate::error::{Error, Result};
use crate::labels::LabelMatrix;
use crate::losses::{center_softmax_loss, g_hinge, improved_unary_loss, CenterMatrix, Metric};
use crate::matrix::Matrix;
use crate::rng;

/// Default cap on `n` for the O(n³) triplet enumerations.
pub const TRIPLET_CAP: usize = 30;

/// Slack below which a bound counts as violated.
pub const SLACK_TOLERANCE: f64 = -1e-9;

fn check_triplet_inputs(h: &Matrix, labels: &LabelMatrix, cap: usize) -> Result<()> {
    if labels.n() > cap {
        return Err(Error::CapExceeded { n: labels.n(), cap });
    }
    if h.rows() != labels.n() {
        return Err(Error::Shape(format!("{} code rows for {} items", h.rows(), labels.n())));
    }
    Ok(())
}

/// `Σ_{(i,j)∈S, j≠i, (i,k)∉S} g(d(h_i, h_j), d(h_i, h_k), m)`.
pub fn triplet_loss_single(h: &Matrix, labels: &LabelMatrix, metric: Metric, margin: f64, cap: usize) -> Result<f64> {
    triplet_loss_between(h, h, labels, metric, margin, cap)
}

/// Triplet loss with anchors from `anchor` and positives / negatives from
/// `other`.
fn triplet_loss_between(
    anchor: &Matrix,
    other: &Matrix,
    labels: &LabelMatrix,
    metric: Metric,
    margin: f64,
    cap: usize,
) -> Result<f64> {
    check_triplet_inputs(anchor, labels, cap)?;
    check_triplet_inputs(other, labels, cap)?;
    let n = labels.n();
    let mut total = 0.0;
    for i in 0..n {
        let d: Vec<f64> = (0..n).map(|j| metric.distance(anchor.row(i), other.row(j))).collect();
        for j in 0..n {
            if j == i || !labels.is_similar(i, j) {
                continue;
            }
            for k in 0..n {
                if !labels.is_similar(i, k) {
                    total += g_hinge(d[j], d[k], margin);
                }
            }
        }
    }
    Ok(total)
}

/// Directional parts of a cross-modal quantity.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CrossParts {
    /// Modality 1 as query, modality 2 as database.
    pub r12: f64,
    pub r21: f64,
    pub total: f64,
}

/// Cross-modal triplet losses: `r12` measures `d(h_i1, h_j2)` against
/// `d(h_i1, h_k2)`, `r21` the reverse.
pub fn triplet_loss_cross(
    h1: &Matrix,
    h2: &Matrix,
    labels: &LabelMatrix,
    metric: Metric,
    margin: f64,
    cap: usize,
) -> Result<CrossParts> {
    let r12 = triplet_loss_between(h1, h2, labels, metric, margin, cap)?;
    let r21 = triplet_loss_between(h2, h1, labels, metric, margin, cap)?;
    Ok(CrossParts {
        r12,
        r21,
        total: r12 + r21,
    })
}

fn check_centers(h: &Matrix, labels: &LabelMatrix, centers: &CenterMatrix) -> Result<()> {
    if h.rows() != labels.n() || h.cols() != centers.code_len() || centers.num_labels() != labels.num_labels() {
        return Err(Error::Shape(format!(
            "{}x{} codes, {} centers of length {}, {} x {} labels",
            h.rows(),
            h.cols(),
            centers.num_labels(),
            centers.code_len(),
            labels.n(),
            labels.num_labels()
        )));
    }
    Ok(())
}

/// `Σ_i [Σ_{s∈Y_i} Σ_t q_ist·g(d(h_i,c_s), d(h_i,c_t), m) + Σ_{s∈Y_i} u_is·d(h_i,c_s)]`.
pub fn rhs_structured_bound(
    h: &Matrix,
    labels: &LabelMatrix,
    full: &FullTripletCoefficients,
    centers: &CenterMatrix,
    metric: Metric,
    margin: f64,
) -> Result<f64> {
    full.check_against(labels)?;
    check_centers(h, labels, centers)?;
    let c = labels.num_labels();
    let mut total = 0.0;
    for i in 0..labels.n() {
        let d: Vec<f64> = (0..c).map(|s| metric.distance(h.row(i), centers.center(s))).collect();
        for &s in labels.labels(i) {
            for t in 0..c {
                let q = full.q(i, s, t);
                if q != 0.0 {
                    total += q * g_hinge(d[s], d[t], margin);
                }
            }
            total += full.u(i, s) * d[s];
        }
    }
    Ok(total)
}

/// The improved bound `Σ_i Σ_{s∈Y_i} [q_is·l_c(h_i, s) + u_is·d(h_i, c_s)]`.
pub fn rhs_improved_uub(
    h: &Matrix,
    labels: &LabelMatrix,
    coeffs: &CoefficientSet,
    centers: &CenterMatrix,
    metric: Metric,
) -> Result<f64> {
    let items: Vec<usize> = (0..labels.n()).collect();
    improved_unary_loss(h, &items, labels, coeffs, centers, 1.0, metric)
}

/// Cross-modal bound: the softmax term on the query modality and the center
/// distance on the database modality.
pub fn rhs_cross_bound(
    h1: &Matrix,
    h2: &Matrix,
    labels: &LabelMatrix,
    coeffs: &CoefficientSet,
    centers: &CenterMatrix,
    metric: Metric,
) -> Result<CrossParts> {
    coeffs.check_against(labels)?;
    check_centers(h1, labels, centers)?;
    check_centers(h2, labels, centers)?;
    let directed = |query: &Matrix, db: &Matrix| {
        let mut total = 0.0;
        for i in 0..labels.n() {
            for &s in labels.labels(i) {
                let q = coeffs.q(i, s);
                if q != 0.0 {
                    total += q * center_softmax_loss(query.row(i), s, centers, metric);
                }
                total += coeffs.u(i, s) * metric.distance(db.row(i), centers.center(s));
            }
        }
        total
    };
    let r12 = directed(h1, h2);
    let r21 = directed(h2, h1);
    Ok(CrossParts {
        r12,
        r21,
        total: r12 + r21,
    })
}

/// One certified instance.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundReport {
    pub seed: u64,
    pub n: usize,
    pub num_labels: usize,
    pub code_len: usize,
    pub metric: Metric,
    pub margin: f64,
    /// Single-modal triplet loss at `margin`.
    pub lhs: f64,
    /// Structured bound at `margin`.
    pub rhs7: f64,
    /// Improved (softmax) bound.
    pub rhs8: f64,
    /// Cross-modal triplet loss at margin 0.
    pub lhs_cross: f64,
    pub rhs12: f64,
    /// Smallest slack over every inequality checked on this instance.
    pub min_slack: f64,
}

impl BoundReport {
    pub fn holds(&self) -> bool {
        self.min_slack >= SLACK_TOLERANCE
    }
}

/// Instance-generation plan for [`certify`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CertifyPlan {
    pub trials: usize,
    pub seed: u64,
    pub max_n: usize,
    pub max_labels: usize,
    pub max_code_len: usize,
    /// Multiplies every coefficient; values below 1 are a negative control.
    pub corrupt: f64,
}

impl Default for CertifyPlan {
    fn default() -> Self {
        Self {
            trials: 600,
            seed: 0,
            max_n: 20,
            max_labels: 5,
            max_code_len: 8,
            corrupt: 1.0,
        }
    }
}

/// Reports of one certification run, sorted by seed.
#[derive(Debug, Clone, PartialEq)]
pub struct Certification {
    pub reports: Vec<BoundReport>,
}

impl Certification {
    /// Seeds of instances with a violated bound.
    pub fn violations(&self) -> Vec<u64> {
        self.reports.iter().filter(|r| !r.holds()).map(|r| r.seed).collect()
    }

    pub fn passed(&self) -> bool {
        self.reports.iter().all(BoundReport::holds)
    }

    pub fn min_slack(&self) -> Option<f64> {
        self.reports.iter().map(|r| r.min_slack).reduce(f64::min)
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record([
            "seed",
            "n",
            "C",
            "r",
            "metric",
            "margin",
            "lhs",
            "rhs7",
            "rhs8",
            "lhs_cross",
            "rhs12",
            "min_slack",
        ])?;
        for r in &self.reports {
            w.write_record([
                r.seed.to_string(),
                r.n.to_string(),
                r.num_labels.to_string(),
                r.code_len.to_string(),
                r.metric.name().to_string(),
                r.margin.to_string(),
                r.lhs.to_string(),
                r.rhs7.to_string(),
                r.rhs8.to_string(),
                r.lhs_cross.to_string(),
                r.rhs12.to_string(),
                r.min_slack.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Random instance for trial `seed`: even seeds use L1, odd L2; seeds with
/// bit 1 set use margin 0.5. Every third group of four is a tight instance
/// with codes sitting on nearly coincident centers, where the structured
/// bound is close to equality.
fn certify_instance(plan: &CertifyPlan, seed: u64) -> Result<BoundReport> {
    let mut g = rng::stream(plan.seed, seed);
    let metric = if seed.is_multiple_of(2) { Metric::L1 } else { Metric::L2 };
    let margin = if (seed / 2).is_multiple_of(2) { 0.0 } else { 0.5 };
    let tight = (seed / 4) % 3 == 2;
    let n = g.random_range(2..=plan.max_n.max(2));
    let c = g.random_range(1..=plan.max_labels.max(1));
    let r = g.random_range(1..=plan.max_code_len.max(1));
    let model = if g.random_bool(0.5) {
        LabelModel::Uniform {
            p: g.random_range(0.15..0.6),
        }
    } else {
        LabelModel::Chain {
            p_root: g.random_range(0.3..0.8),
            p_child: g.random_range(0.3..0.9),
        }
    };
    let labels = sample_labels(model, n, c, &mut g)?;

    let center_std = if tight { 1e-3 } else { g.random_range(0.2..2.0) };
    let centers = CenterMatrix::from_columns(r, c, (0..r * c).map(|_| rng::normal(&mut g, center_std)).collect())?;
    let codes = |g: &mut rng::Rng| {
        Matrix::from_fn(n, r, |i, k| {
            if tight {
                centers.center(labels.labels(i)[0])[k] + rng::normal(g, 1e-3)
            } else {
                rng::normal(g, 1.0)
            }
        })
    };
    let h1 = codes(&mut g);
    let h2 = codes(&mut g);

    let full = exact_coefficients(&labels).scaled(plan.corrupt);
    let coeffs = full.reduce(n);
    let lhs = triplet_loss_single(&h1, &labels, metric, margin, plan.max_n.max(2))?;
    let rhs7 = rhs_structured_bound(&h1, &labels, &full, &centers, metric, margin)?;
    let rhs8 = rhs_improved_uub(&h1, &labels, &coeffs, &centers, metric)?;
    let cross = triplet_loss_cross(&h1, &h2, &labels, metric, 0.0, plan.max_n.max(2))?;
    let rhs12 = rhs_cross_bound(&h1, &h2, &labels, &coeffs, &centers, metric)?;

    let mut min_slack = (rhs7 - lhs).min(rhs12.r12 - cross.r12).min(rhs12.r21 - cross.r21);
    if margin == 0.0 {
        min_slack = min_slack.min(rhs8 - rhs7);
    }
    Ok(BoundReport {
        seed,
        n,
        num_labels: c,
        code_len: r,
        metric,
        margin,
        lhs,
        rhs7,
        rhs8,
        lhs_cross: cross.total,
        rhs12: rhs12.total,
        min_slack,
    })
}

/// Certifies the bound chain on `plan.trials` seeded instances, in parallel.
pub fn certify(plan: &CertifyPlan) -> Result<Certification> {
    let reports = (0..plan.trials as u64)
        .into_par_iter()
        .map(|seed| certify_instance(plan, seed))
        .collect::<Result<Vec<_>>>()?;
    Ok(Certification { reports })
}
