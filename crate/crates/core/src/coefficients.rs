//! Per-item, per-label coefficients of the unary upper bound.
//!
//! For every anchor item `i`, label `s ∈ Y_i` and label `t ∉ Y_i`, the
//! triplet loss over all `(i, j, k)` with `j` similar and `k` dissimilar to
//! `i` is bounded by
//!
//! ```text
//! Σ_i [ Σ_{s∈Y_i} Σ_{t∉Y_i} q_ist · g(d(h_i,c_s), d(h_i,c_t)) + Σ_{s∈Y_i} u_is · d(h_i,c_s) ]
//! ```
//!
//! where each triplet spreads unit mass uniformly over the labels it shares
//! (`1/|Y_i ∩ Y_j|`) and over the negative's labels (`1/|Y_k|`):
//!
//! ```text
//! q_ist = Σ_{j≠i: s∈Y_i∩Y_j} 1/|Y_i∩Y_j| · Σ_{k: (i,k)∉S, t∈Y_k} 1/|Y_k|
//! u_js  = Σ_{i≠j: s∈Y_i∩Y_j} |n_i| / |Y_i∩Y_j|   +   Σ_{i: (i,j)∉S} |p_i| / |Y_j|
//! ```
//!
//! Three routes compute these numbers:
//!
//! - [`estimate_coefficients`]: the anchor-sampled O(n·l) estimator. The
//!   first pass draws `(j, k)` from the anchors for every item, the second
//!   pass draws the triplet head `i` from the anchors; results are scaled by
//!   `(n/l)²` and `n/l` respectively. With all items as anchors it is exact.
//! - [`exact_coefficients`]: the closed-form O(n²) sums above.
//! - [`bruteforce_coefficients`]: literal O(n³) triplet accumulation.
//!
//! Positives never include the item itself.

use rand::seq::index;
use rayon::prelude::*;

use crate::error::{invalid, Error, Result};
use crate::labels::LabelMatrix;
use crate::rng;

/// Default cap on `n` for [`bruteforce_coefficients`].
pub const BRUTE_FORCE_CAP: usize = 200;

/// Reduced coefficients `q_is = Σ_t q_ist` and `u_is`, both `n × C` row-major,
/// zero wherever `s ∉ Y_i`.
#[derive(Debug, Clone, PartialEq)]
pub struct CoefficientSet {
    n: usize,
    num_labels: usize,
    q: Vec<f64>,
    u: Vec<f64>,
    anchor_size: usize,
    rescaled: bool,
}

impl CoefficientSet {
    pub fn from_parts(
        n: usize,
        num_labels: usize,
        q: Vec<f64>,
        u: Vec<f64>,
        anchor_size: usize,
        rescaled: bool,
    ) -> Result<Self> {
        if q.len() != n * num_labels || u.len() != n * num_labels {
            return Err(Error::Shape(format!(
                "coefficient arrays of length {} / {} for n = {n}, C = {num_labels}",
                q.len(),
                u.len()
            )));
        }
        if q.iter().chain(&u).any(|v| !v.is_finite() || *v < 0.0) {
            return Err(invalid("coefficients", "entries must be finite and >= 0"));
        }
        Ok(Self {
            n,
            num_labels,
            q,
            u,
            anchor_size,
            rescaled,
        })
    }

    /// Constant coefficients `q_is = 1/|Y_i|`, `u_is = 1` of the uniform-label
    /// baseline (JCCH-B).
    pub fn constant_baseline(labels: &LabelMatrix) -> Self {
        let (n, c) = (labels.n(), labels.num_labels());
        let mut q = vec![0.0; n * c];
        let mut u = vec![0.0; n * c];
        for i in 0..n {
            let w = 1.0 / labels.card(i) as f64;
            for &s in labels.labels(i) {
                q[i * c + s] = w;
                u[i * c + s] = 1.0;
            }
        }
        Self {
            n,
            num_labels: c,
            q,
            u,
            anchor_size: n,
            rescaled: false,
        }
    }

    pub fn zeros(n: usize, num_labels: usize) -> Self {
        Self {
            n,
            num_labels,
            q: vec![0.0; n * num_labels],
            u: vec![0.0; n * num_labels],
            anchor_size: n,
            rescaled: false,
        }
    }

    #[inline]
    pub fn n(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn num_labels(&self) -> usize {
        self.num_labels
    }

    #[inline]
    pub fn q(&self, i: usize, s: usize) -> f64 {
        self.q[i * self.num_labels + s]
    }

    #[inline]
    pub fn u(&self, i: usize, s: usize) -> f64 {
        self.u[i * self.num_labels + s]
    }

    pub fn q_values(&self) -> &[f64] {
        &self.q
    }

    pub fn u_values(&self) -> &[f64] {
        &self.u
    }

    pub fn anchor_size(&self) -> usize {
        self.anchor_size
    }

    pub fn rescaled(&self) -> bool {
        self.rescaled
    }

    /// Both `q` and `u` multiplied by `factor`.
    pub fn scaled(&self, factor: f64) -> Self {
        let mut out = self.clone();
        out.q.iter_mut().chain(out.u.iter_mut()).for_each(|v| *v *= factor);
        out
    }

    /// Rows `idx` of the set (e.g. the items of one minibatch).
    pub fn select_rows(&self, idx: &[usize]) -> Self {
        let c = self.num_labels;
        let mut q = Vec::with_capacity(idx.len() * c);
        let mut u = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            q.extend_from_slice(&self.q[i * c..(i + 1) * c]);
            u.extend_from_slice(&self.u[i * c..(i + 1) * c]);
        }
        Self {
            n: idx.len(),
            num_labels: c,
            q,
            u,
            anchor_size: self.anchor_size,
            rescaled: self.rescaled,
        }
    }

    pub(crate) fn check_against(&self, labels: &LabelMatrix) -> Result<()> {
        if self.n != labels.n() || self.num_labels != labels.num_labels() {
            return Err(Error::Shape(format!(
                "coefficients cover {} items x {} labels, labels are {} x {}",
                self.n,
                self.num_labels,
                labels.n(),
                labels.num_labels()
            )));
        }
        Ok(())
    }
}

/// Full `q_ist` tensor (one dense `C × C` block per item) plus `u_is`.
#[derive(Debug, Clone, PartialEq)]
pub struct FullTripletCoefficients {
    n: usize,
    num_labels: usize,
    q: Vec<f64>,
    u: Vec<f64>,
}

impl FullTripletCoefficients {
    fn zeros(n: usize, num_labels: usize) -> Self {
        Self {
            n,
            num_labels,
            q: vec![0.0; n * num_labels * num_labels],
            u: vec![0.0; n * num_labels],
        }
    }

    #[inline]
    fn q_index(&self, i: usize, s: usize, t: usize) -> usize {
        (i * self.num_labels + s) * self.num_labels + t
    }

    #[inline]
    pub fn q(&self, i: usize, s: usize, t: usize) -> f64 {
        self.q[self.q_index(i, s, t)]
    }

    #[inline]
    pub fn u(&self, i: usize, s: usize) -> f64 {
        self.u[i * self.num_labels + s]
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn num_labels(&self) -> usize {
        self.num_labels
    }

    /// `q_is = Σ_t q_ist`, summed in ascending `t`.
    pub fn reduce(&self, anchor_size: usize) -> CoefficientSet {
        let c = self.num_labels;
        let q = self.q.chunks(c).map(|row| row.iter().sum::<f64>()).collect();
        CoefficientSet {
            n: self.n,
            num_labels: c,
            q,
            u: self.u.clone(),
            anchor_size,
            rescaled: false,
        }
    }

    pub fn scaled(&self, factor: f64) -> Self {
        let mut out = self.clone();
        out.q.iter_mut().chain(out.u.iter_mut()).for_each(|v| *v *= factor);
        out
    }

    pub(crate) fn check_against(&self, labels: &LabelMatrix) -> Result<()> {
        if self.n != labels.n() || self.num_labels != labels.num_labels() {
            return Err(Error::Shape(format!(
                "full coefficients cover {} x {}, labels are {} x {}",
                self.n,
                self.num_labels,
                labels.n(),
                labels.num_labels()
            )));
        }
        Ok(())
    }
}

/// Sorted, distinct anchor indices into the training set.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AnchorSet {
    indices: Vec<usize>,
    seed: Option<u64>,
}

impl AnchorSet {
    /// Every training item is an anchor; the estimator is then exact.
    pub fn all(n: usize) -> Self {
        Self {
            indices: (0..n).collect(),
            seed: None,
        }
    }

    /// `l` anchors drawn uniformly without replacement from `0..n`.
    pub fn sample(n: usize, l: usize, seed: u64) -> Result<Self> {
        if l == 0 {
            return Err(invalid("anchor set", "anchor size must be at least 1"));
        }
        if l > n {
            return Err(invalid("anchor set", format!("l = {l} exceeds n = {n}")));
        }
        let mut indices = index::sample(&mut rng::seeded(seed), n, l).into_vec();
        indices.sort_unstable();
        Ok(Self {
            indices,
            seed: Some(seed),
        })
    }

    pub fn from_indices(n: usize, mut indices: Vec<usize>) -> Result<Self> {
        indices.sort_unstable();
        indices.dedup();
        if indices.is_empty() {
            return Err(invalid("anchor set", "empty"));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= n) {
            return Err(Error::IndexOutOfRange { index: bad, len: n });
        }
        Ok(Self { indices, seed: None })
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn seed(&self) -> Option<u64> {
        self.seed
    }
}

/// Anchor-sampled coefficient estimate.
///
/// With `keep_full` the per-item `q_ist` blocks are returned as well;
/// otherwise they are reduced over `t` on the fly.
pub fn estimate_coefficients(
    labels: &LabelMatrix,
    anchors: &AnchorSet,
    keep_full: bool,
) -> Result<(CoefficientSet, Option<FullTripletCoefficients>)> {
    let n = labels.n();
    let c = labels.num_labels();
    let l = anchors.len();
    if l == 0 {
        return Err(invalid("anchor set", "empty"));
    }
    if l > n {
        return Err(invalid("anchor set", format!("l = {l} exceeds n = {n}")));
    }
    if let Some(&bad) = anchors.indices().iter().find(|&&a| a >= n) {
        return Err(Error::IndexOutOfRange { index: bad, len: n });
    }
    let a = anchors.indices();
    let ratio = n as f64 / l as f64;
    let q_scale = ratio * ratio;
    let inv_card: Vec<f64> = (0..n).map(|k| 1.0 / labels.card(k) as f64).collect();

    // First pass: j, k drawn from the anchors, every item i.
    // pos_mass[s] = column sums of L_i^{s'}, neg_mass[t] = column sums of Y'[n_i].
    let q_blocks: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut pos_mass = vec![0.0; c];
            let mut neg_mass = vec![0.0; c];
            for &j in a {
                if j == i {
                    continue;
                }
                if labels.is_similar(i, j) {
                    let w = 1.0 / labels.intersection(i, j) as f64;
                    for s in labels.shared(i, j) {
                        pos_mass[s] += w;
                    }
                } else {
                    for &t in labels.labels(j) {
                        neg_mass[t] += inv_card[j];
                    }
                }
            }
            let mut block = vec![0.0; c * c];
            for &s in labels.labels(i) {
                for t in 0..c {
                    block[s * c + t] = pos_mass[s] * neg_mass[t] * q_scale;
                }
            }
            block
        })
        .collect();

    // Second pass: triplet head i drawn from the anchors, (p_i, n_i) from all
    // items. Gathered per output row in anchor order, which reproduces the
    // scatter order of a sequential sweep over anchors.
    let anchor_counts: Vec<(usize, usize)> = a
        .par_iter()
        .map(|&i| {
            let pos = (0..n).filter(|&j| j != i && labels.is_similar(i, j)).count();
            (pos, n - 1 - pos)
        })
        .collect();
    let u: Vec<f64> = (0..n)
        .into_par_iter()
        .flat_map_iter(|j| {
            let mut row = vec![0.0; c];
            for (&i, &(pos, neg)) in a.iter().zip(&anchor_counts) {
                if i == j {
                    continue;
                }
                if labels.is_similar(i, j) {
                    let w = neg as f64 * (1.0 / labels.intersection(i, j) as f64);
                    for s in labels.shared(i, j) {
                        row[s] += w;
                    }
                } else {
                    let w = pos as f64 * inv_card[j];
                    for &t in labels.labels(j) {
                        row[t] += w;
                    }
                }
            }
            row.into_iter().map(move |v| v * ratio)
        })
        .collect();

    let q: Vec<f64> = q_blocks
        .iter()
        .flat_map(|block| block.chunks(c).map(|row| row.iter().sum::<f64>()))
        .collect();
    let full = keep_full.then(|| FullTripletCoefficients {
        n,
        num_labels: c,
        q: q_blocks.concat(),
        u: u.clone(),
    });
    let reduced = CoefficientSet {
        n,
        num_labels: c,
        q,
        u,
        anchor_size: l,
        rescaled: false,
    };
    Ok((reduced, full))
}

/// Closed-form coefficients from the O(n²) pair sums.
pub fn exact_coefficients(labels: &LabelMatrix) -> FullTripletCoefficients {
    let n = labels.n();
    let c = labels.num_labels();
    let mut out = FullTripletCoefficients::zeros(n, c);

    let mut pos_count = vec![0usize; n];
    let mut neg_count = vec![0usize; n];
    for i in 0..n {
        for j in 0..n {
            if j == i {
                continue;
            }
            if labels.is_similar(i, j) {
                pos_count[i] += 1;
            } else {
                neg_count[i] += 1;
            }
        }
    }

    for i in 0..n {
        // share[s] = Σ_{j≠i: s∈Y_i∩Y_j} 1/|Y_i∩Y_j|; spread[t] = Σ_{k dissimilar, t∈Y_k} 1/|Y_k|
        let mut share = vec![0.0; c];
        let mut spread = vec![0.0; c];
        for k in 0..n {
            if k == i {
                continue;
            }
            let overlap = labels.intersection(i, k);
            if overlap > 0 {
                for s in labels.shared(i, k) {
                    share[s] += 1.0 / overlap as f64;
                }
                // i is a positive of k: every dissimilar item of i pairs with it.
                for s in labels.shared(i, k) {
                    out.u[k * c + s] += neg_count[i] as f64 / overlap as f64;
                }
            } else {
                for &t in labels.labels(k) {
                    spread[t] += 1.0 / labels.card(k) as f64;
                    out.u[k * c + t] += pos_count[i] as f64 / labels.card(k) as f64;
                }
            }
        }
        for &s in labels.labels(i) {
            for (t, &sp) in spread.iter().enumerate() {
                let idx = out.q_index(i, s, t);
                out.q[idx] = share[s] * sp;
            }
        }
    }
    out
}

/// Literal triplet accumulation of `1/(|Y_i∩Y_j|·|Y_k|)` over every
/// `(i, j, k, s, t)`; O(n³C²). Fails when `n > cap`.
pub fn bruteforce_coefficients(labels: &LabelMatrix, cap: usize) -> Result<FullTripletCoefficients> {
    let n = labels.n();
    if n > cap {
        return Err(Error::CapExceeded { n, cap });
    }
    let c = labels.num_labels();
    let mut out = FullTripletCoefficients::zeros(n, c);
    for i in 0..n {
        for j in 0..n {
            if j == i || !labels.is_similar(i, j) {
                continue;
            }
            let shared: Vec<usize> = labels.shared(i, j).collect();
            for k in 0..n {
                if labels.is_similar(i, k) {
                    continue;
                }
                let w = 1.0 / (shared.len() as f64 * labels.card(k) as f64);
                for &s in &shared {
                    for &t in labels.labels(k) {
                        let idx = out.q_index(i, s, t);
                        out.q[idx] += w;
                        out.u[j * c + s] += w;
                        out.u[k * c + t] += w;
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Normalises so that `Σ_{i,s} q_is / Σ_i |Y_i| = 1`; `u` is divided by the
/// same factor.
pub fn rescale(coeffs: &CoefficientSet, labels: &LabelMatrix) -> Result<CoefficientSet> {
    coeffs.check_against(labels)?;
    let mean = coeffs.q.iter().sum::<f64>() / labels.total_cardinality() as f64;
    if mean <= 0.0 || !mean.is_finite() {
        return Err(Error::Degenerate(
            "no (positive, negative) triplets: all q coefficients are zero".into(),
        ));
    }
    let mut out = coeffs.clone();
    out.q.iter_mut().chain(out.u.iter_mut()).for_each(|v| *v /= mean);
    out.rescaled = true;
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SculMode {
    /// Balanced classes, one label per item.
    Multiclass,
    /// Every label present independently with probability `p`.
    Multilabel { p: f64 },
}

/// Constants of the balanced / uncorrelated-label bound: the multiplier
/// `M_ro` and the per-item weights `q(|Y_i|)`, `u(|Y_i|)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SculConstants {
    pub m_ro: f64,
    pub q: f64,
    pub u: f64,
}

/// `x` is `|Y_i|`; ignored in multiclass mode.
pub fn scul_constants(n: usize, num_labels: usize, mode: SculMode, x: usize) -> Result<SculConstants> {
    if num_labels < 2 {
        return Err(invalid("bound constants", "need C >= 2"));
    }
    let (n, c) = (n as f64, num_labels as f64);
    match mode {
        SculMode::Multiclass => Ok(SculConstants {
            m_ro: (n / c).powi(2) * (c - 1.0),
            q: 1.0,
            u: 2.0,
        }),
        SculMode::Multilabel { p } => {
            if !(p > 0.0 && p < 1.0) {
                return Err(invalid("bound constants", format!("p = {p} outside (0, 1)")));
            }
            let x = x as f64;
            let q = (c - x) / (c - 1.0) * (1.0 - p).powf(x);
            let u = q + (1.0 - p).powi(2) * (1.0 - p * p).powf(c - 2.0);
            Ok(SculConstants {
                m_ro: (c - 1.0) * p * p * n * n,
                q,
                u,
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn three_items() -> LabelMatrix {
        LabelMatrix::from_sets(3, vec![vec![0, 1], vec![1], vec![2]]).unwrap()
    }

    fn balanced_multiclass() -> LabelMatrix {
        LabelMatrix::multiclass(3, &[0, 0, 1, 1, 2, 2]).unwrap()
    }

    fn rel_close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol * a.abs().max(b.abs()).max(1e-300)
    }

    #[test]
    fn three_item_hand_enumeration() {
        // Triplets (1,2,3) and (2,1,3) in 1-based ids, each with shared label 2
        // and negative label 3.
        let y = three_items();
        let (est, full) = estimate_coefficients(&y, &AnchorSet::all(3), true).unwrap();
        let full = full.unwrap();
        let mut q = [[0.0; 3]; 3];
        let mut u = [[0.0; 3]; 3];
        q[0][1] = 1.0;
        q[1][1] = 1.0;
        u[0][1] = 1.0;
        u[1][1] = 1.0;
        u[2][2] = 2.0;
        let exact = exact_coefficients(&y);
        let brute = bruteforce_coefficients(&y, BRUTE_FORCE_CAP).unwrap();
        for i in 0..3 {
            for s in 0..3 {
                assert_eq!(est.q(i, s), q[i][s], "q[{i}][{s}]");
                assert_eq!(est.u(i, s), u[i][s], "u[{i}][{s}]");
                assert_eq!(exact.reduce(3).q(i, s), q[i][s]);
                assert_eq!(brute.reduce(3).q(i, s), q[i][s]);
                assert_eq!(exact.u(i, s), u[i][s]);
                assert_eq!(brute.u(i, s), u[i][s]);
            }
        }
        assert_eq!(full.q(0, 1, 2), 1.0);
        assert_eq!(full.q(1, 1, 2), 1.0);
        assert_eq!(full.q(0, 1, 0), 0.0);
    }

    #[test]
    fn balanced_multiclass_closed_form() {
        // q = (n/C - 1)(n/C)(C - 1) = 4, u = 2(n/C - 1)(n - n/C) = 8.
        let y = balanced_multiclass();
        let (est, _) = estimate_coefficients(&y, &AnchorSet::all(6), false).unwrap();
        let exact = exact_coefficients(&y).reduce(6);
        for i in 0..6 {
            let s = y.labels(i)[0];
            for (name, set) in [("estimate", &est), ("exact", &exact)] {
                assert_eq!(set.q(i, s), 4.0, "{name} q");
                assert_eq!(set.u(i, s), 8.0, "{name} u");
                for t in (0..3).filter(|&t| t != s) {
                    assert_eq!(set.q(i, t), 0.0);
                    assert_eq!(set.u(i, t), 0.0);
                }
            }
        }
    }

    #[test]
    fn no_dissimilar_pairs_gives_zero() {
        let y = LabelMatrix::multiclass(2, &[1, 1, 1]).unwrap();
        let (est, _) = estimate_coefficients(&y, &AnchorSet::all(3), false).unwrap();
        assert!(est.q_values().iter().chain(est.u_values()).all(|&v| v == 0.0));
        let brute = bruteforce_coefficients(&y, 10).unwrap();
        assert!(brute.q.iter().chain(&brute.u).all(|&v| v == 0.0));
        assert!(matches!(rescale(&est, &y), Err(Error::Degenerate(_))));
    }

    #[test]
    fn one_item_per_class_has_no_positives() {
        let y = LabelMatrix::multiclass(4, &[0, 1, 2, 3]).unwrap();
        let exact = exact_coefficients(&y).reduce(4);
        assert!(exact.q_values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn estimator_input_errors() {
        let y = three_items();
        assert!(AnchorSet::sample(3, 0, 1).is_err());
        assert!(AnchorSet::sample(3, 4, 1).is_err());
        assert!(AnchorSet::from_indices(3, vec![]).is_err());
        assert!(AnchorSet::from_indices(3, vec![3]).is_err());
        let big = AnchorSet::all(4);
        assert!(estimate_coefficients(&y, &big, false).is_err());
        assert!(matches!(
            bruteforce_coefficients(&balanced_multiclass(), 5),
            Err(Error::CapExceeded { n: 6, cap: 5 })
        ));
    }

    #[test]
    fn anchor_sampling_is_seeded() {
        let a = AnchorSet::sample(50, 10, 4).unwrap();
        assert_eq!(a, AnchorSet::sample(50, 10, 4).unwrap());
        assert_eq!(a.len(), 10);
        assert!(a.indices().windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn rescale_examples() {
        let y = three_items();
        let (est, _) = estimate_coefficients(&y, &AnchorSet::all(3), false).unwrap();
        // Σq = 2, Σ|Y| = 4, so M = 1/2.
        let r = rescale(&est, &y).unwrap();
        assert!(r.rescaled());
        assert_eq!(r.q(0, 1), 2.0);
        assert_eq!(r.u(2, 2), 4.0);

        let again = rescale(&r, &y).unwrap();
        assert_eq!(again.q_values(), r.q_values());
        assert_eq!(again.u_values(), r.u_values());

        let doubled = rescale(&est.scaled(2.0), &y).unwrap();
        assert_eq!(doubled.q_values(), r.q_values());
        assert_eq!(doubled.u_values(), r.u_values());
    }

    #[test]
    fn scul_constant_examples() {
        let mc = scul_constants(6, 3, SculMode::Multiclass, 1).unwrap();
        assert_eq!((mc.m_ro, mc.q, mc.u), (8.0, 1.0, 2.0));
        let ml = scul_constants(10, 2, SculMode::Multilabel { p: 0.5 }, 1).unwrap();
        assert_eq!(ml.q, 0.5);
        assert_eq!(ml.u, ml.q + 0.25);
        assert!(scul_constants(10, 2, SculMode::Multilabel { p: 1.0 }, 1).is_err());
    }

    #[test]
    fn parallel_estimate_matches_single_thread_bitwise() {
        let sets: Vec<Vec<usize>> = (0..40).map(|i| vec![i % 5, (i * 7 + 1) % 5]).collect();
        let y = LabelMatrix::from_sets(5, sets).unwrap();
        let anchors = AnchorSet::sample(40, 13, 3).unwrap();
        let multi = estimate_coefficients(&y, &anchors, true).unwrap();
        let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let single = pool.install(|| estimate_coefficients(&y, &anchors, true).unwrap());
        assert_eq!(multi, single);
    }

    fn arb_labels(max_n: usize, max_c: usize) -> impl Strategy<Value = LabelMatrix> {
        (1usize..=max_c, 1usize..=max_n).prop_flat_map(|(c, n)| {
            proptest::collection::vec(proptest::collection::vec(0..c, 1..=c), n)
                .prop_map(move |sets| LabelMatrix::from_sets(c, sets).unwrap())
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn three_routes_agree(y in arb_labels(14, 5)) {
            let n = y.n();
            let (est, est_full) = estimate_coefficients(&y, &AnchorSet::all(n), true).unwrap();
            let est_full = est_full.unwrap();
            let exact = exact_coefficients(&y);
            let brute = bruteforce_coefficients(&y, BRUTE_FORCE_CAP).unwrap();
            let c = y.num_labels();
            for i in 0..n {
                for s in 0..c {
                    prop_assert!(rel_close(est.u(i, s), exact.u(i, s), 1e-9));
                    prop_assert!(rel_close(brute.u(i, s), exact.u(i, s), 1e-9));
                    for t in 0..c {
                        prop_assert!(rel_close(est_full.q(i, s, t), exact.q(i, s, t), 1e-9));
                        prop_assert!(rel_close(brute.q(i, s, t), exact.q(i, s, t), 1e-9));
                    }
                }
            }
        }

        #[test]
        fn support_is_confined_to_label_pattern(y in arb_labels(14, 5)) {
            let full = exact_coefficients(&y);
            for i in 0..y.n() {
                for s in 0..y.num_labels() {
                    if full.u(i, s) > 0.0 {
                        prop_assert!(y.contains(i, s));
                    }
                    for t in 0..y.num_labels() {
                        if full.q(i, s, t) > 0.0 {
                            prop_assert!(y.contains(i, s) && !y.contains(i, t));
                        }
                    }
                }
            }
        }

        #[test]
        fn rescale_normalises_mean(y in arb_labels(14, 5)) {
            let (est, _) = estimate_coefficients(&y, &AnchorSet::all(y.n()), false).unwrap();
            if let Ok(r) = rescale(&est, &y) {
                let mean = r.q_values().iter().sum::<f64>() / y.total_cardinality() as f64;
                prop_assert!((mean - 1.0).abs() <= 1e-12);
            }
        }
    }
}
