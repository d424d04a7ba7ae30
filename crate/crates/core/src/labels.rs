//! Label sets and the similarity relation they induce.
//!
//! Two items are similar iff their label sets intersect. Every row carries
//! at least one label, so similarity is reflexive; it is symmetric by
//! construction.

use crate::error::{invalid, Error, Result};

/// `n × C` binary label assignment, stored both as packed bit rows and as
/// sorted label lists.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMatrix {
    num_labels: usize,
    words: usize,
    bits: Vec<u64>,
    sets: Vec<Vec<usize>>,
}

impl LabelMatrix {
    /// Builds from per-item label lists (0-based label ids). Duplicates are
    /// collapsed; lists need not be sorted.
    pub fn from_sets(num_labels: usize, sets: Vec<Vec<usize>>) -> Result<Self> {
        if num_labels == 0 {
            return Err(invalid("label matrix", "need at least one label"));
        }
        if sets.is_empty() {
            return Err(invalid("label matrix", "need at least one item"));
        }
        let words = num_labels.div_ceil(64);
        let mut bits = vec![0u64; sets.len() * words];
        let mut clean = Vec::with_capacity(sets.len());
        for (i, mut set) in sets.into_iter().enumerate() {
            set.sort_unstable();
            set.dedup();
            if set.is_empty() {
                return Err(invalid("label matrix", format!("item {i} has no labels")));
            }
            if let Some(&s) = set.iter().find(|&&s| s >= num_labels) {
                return Err(invalid(
                    "label matrix",
                    format!("item {i} has label {s} but C = {num_labels}"),
                ));
            }
            for &s in &set {
                bits[i * words + s / 64] |= 1u64 << (s % 64);
            }
            clean.push(set);
        }
        Ok(Self {
            num_labels,
            words,
            bits,
            sets: clean,
        })
    }

    /// Builds from dense 0/1 rows.
    pub fn from_dense(rows: &[Vec<bool>]) -> Result<Self> {
        let num_labels = rows.first().map_or(0, Vec::len);
        let mut sets = Vec::with_capacity(rows.len());
        for (i, row) in rows.iter().enumerate() {
            if row.len() != num_labels {
                return Err(Error::Shape(format!(
                    "label row {i} has {} cells, expected {num_labels}",
                    row.len()
                )));
            }
            sets.push(row.iter().enumerate().filter_map(|(s, &b)| b.then_some(s)).collect());
        }
        Self::from_sets(num_labels, sets)
    }

    /// Multiclass labels: item `i` carries exactly `classes[i]`.
    pub fn multiclass(num_labels: usize, classes: &[usize]) -> Result<Self> {
        Self::from_sets(num_labels, classes.iter().map(|&c| vec![c]).collect())
    }

    #[inline]
    pub fn n(&self) -> usize {
        self.sets.len()
    }

    #[inline]
    pub fn num_labels(&self) -> usize {
        self.num_labels
    }

    /// Sorted label ids of item `i`.
    #[inline]
    pub fn labels(&self, i: usize) -> &[usize] {
        &self.sets[i]
    }

    /// `|Y_i|`.
    #[inline]
    pub fn card(&self, i: usize) -> usize {
        self.sets[i].len()
    }

    #[inline]
    pub fn contains(&self, i: usize, s: usize) -> bool {
        self.bits[i * self.words + s / 64] >> (s % 64) & 1 == 1
    }

    #[inline]
    fn row_bits(&self, i: usize) -> &[u64] {
        &self.bits[i * self.words..(i + 1) * self.words]
    }

    /// `|Y_i ∩ Y_j|`.
    #[inline]
    pub fn intersection(&self, i: usize, j: usize) -> usize {
        self.row_bits(i)
            .iter()
            .zip(self.row_bits(j))
            .map(|(a, b)| (a & b).count_ones() as usize)
            .sum()
    }

    /// Unchecked similarity test; panics on out-of-range indices.
    #[inline]
    pub fn is_similar(&self, i: usize, j: usize) -> bool {
        self.row_bits(i).iter().zip(self.row_bits(j)).any(|(a, b)| a & b != 0)
    }

    /// True iff `Y_i ∩ Y_j ≠ ∅`.
    pub fn similar(&self, i: usize, j: usize) -> Result<bool> {
        self.check(i)?;
        self.check(j)?;
        Ok(self.is_similar(i, j))
    }

    /// Labels shared by `i` and `j`, ascending.
    pub fn shared(&self, i: usize, j: usize) -> impl Iterator<Item = usize> + '_ {
        self.sets[i].iter().copied().filter(move |&s| self.contains(j, s))
    }

    /// Total label count `Σ_i |Y_i|`.
    pub fn total_cardinality(&self) -> usize {
        self.sets.iter().map(Vec::len).sum()
    }

    /// Dense 0/1 view, one row per item.
    pub fn to_dense(&self) -> Vec<Vec<bool>> {
        (0..self.n())
            .map(|i| (0..self.num_labels).map(|s| self.contains(i, s)).collect())
            .collect()
    }

    pub fn select_rows(&self, idx: &[usize]) -> Result<Self> {
        for &i in idx {
            self.check(i)?;
        }
        Self::from_sets(self.num_labels, idx.iter().map(|&i| self.sets[i].clone()).collect())
    }

    fn check(&self, i: usize) -> Result<()> {
        if i < self.n() {
            Ok(())
        } else {
            Err(Error::IndexOutOfRange {
                index: i,
                len: self.n(),
            })
        }
    }
}

/// Splits `pool` into the positives (similar to `i`, excluding `i` itself)
/// and negatives (dissimilar to `i`) of item `i`, both ascending.
pub fn positives_negatives(labels: &LabelMatrix, i: usize, pool: &[usize]) -> Result<(Vec<usize>, Vec<usize>)> {
    labels.check(i)?;
    let mut pos = Vec::new();
    let mut neg = Vec::new();
    for &j in pool {
        labels.check(j)?;
        if j == i {
            continue;
        }
        if labels.is_similar(i, j) {
            pos.push(j);
        } else {
            neg.push(j);
        }
    }
    pos.sort_unstable();
    neg.sort_unstable();
    Ok((pos, neg))
}
