//! Cross-modal datasets, the synthetic structured-multilabel generator and
//! query/database/train splits.

use rand::seq::SliceRandom;
use rand::Rng as _;

use crate::error::{invalid, Error, Result};
use crate::labels::LabelMatrix;
use crate::matrix::FeatureMatrix;
use crate::rng;

/// Two feature views of the same `n` items plus their labels.
#[derive(Debug, Clone, PartialEq)]
pub struct CrossModalDataset {
    features1: FeatureMatrix,
    features2: FeatureMatrix,
    labels: LabelMatrix,
    paired: bool,
}

impl CrossModalDataset {
    pub fn new(features1: FeatureMatrix, features2: FeatureMatrix, labels: LabelMatrix, paired: bool) -> Result<Self> {
        if features1.rows() != labels.n() || features2.rows() != labels.n() {
            return Err(Error::Shape(format!(
                "feature rows {} / {} do not match {} labelled items",
                features1.rows(),
                features2.rows(),
                labels.n()
            )));
        }
        if !features1.is_finite() || !features2.is_finite() {
            return Err(Error::NonFinite("dataset features".into()));
        }
        Ok(Self {
            features1,
            features2,
            labels,
            paired,
        })
    }

    pub fn n(&self) -> usize {
        self.labels.n()
    }

    pub fn features1(&self) -> &FeatureMatrix {
        &self.features1
    }

    pub fn features2(&self) -> &FeatureMatrix {
        &self.features2
    }

    pub fn labels(&self) -> &LabelMatrix {
        &self.labels
    }

    /// Row `i` of both modalities describes the same item.
    pub fn paired(&self) -> bool {
        self.paired
    }

    pub fn subset(&self, idx: &[usize]) -> Result<Self> {
        Ok(Self {
            labels: self.labels.select_rows(idx)?,
            features1: self.features1.select_rows(idx),
            features2: self.features2.select_rows(idx),
            paired: self.paired,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LabelModel {
    /// Every label set independently with probability `p`.
    Uniform { p: f64 },
    /// Label 1 set with `p_root`; label `s > 1` set with `p_child` when its
    /// parent `⌈s/2⌉` is set and with `p_child / 4` otherwise (1-based ids).
    Chain { p_root: f64, p_child: f64 },
    /// Exactly one label per item, item `i` in class `i mod C`.
    Multiclass,
}

/// Parameters of [`gen_synthetic`].
#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub n: usize,
    pub num_labels: usize,
    pub d1: usize,
    pub d2: usize,
    pub label_model: LabelModel,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |r: &str| Err(invalid("synthetic spec", r));
        if self.n == 0 || self.num_labels == 0 || self.d1 == 0 || self.d2 == 0 {
            return bad("n, C, d1 and d2 must all be at least 1");
        }
        if !(self.noise_sigma.is_finite() && self.noise_sigma >= 0.0) {
            return bad("noise_sigma must be finite and >= 0");
        }
        let open = |p: f64| p > 0.0 && p < 1.0;
        match self.label_model {
            LabelModel::Uniform { p } if !open(p) => bad("uniform p must lie in (0, 1)"),
            LabelModel::Chain { p_root, p_child } if !open(p_root) || !open(p_child) => {
                bad("chain p_root and p_child must lie in (0, 1)")
            }
            _ => Ok(()),
        }
    }
}

const LABEL_STREAM: u64 = 0;
const PROJECTION_STREAM: [u64; 2] = [1, 2];
const NOISE_STREAM: [u64; 2] = [3, 4];

/// Index of the chain-model parent of 0-based label `s >= 1`.
#[inline]
pub fn chain_parent(s: usize) -> usize {
    s / 2
}

fn sample_row(model: LabelModel, c: usize, item: usize, rng: &mut rng::Rng) -> Vec<usize> {
    if let LabelModel::Multiclass = model {
        return vec![item % c];
    }
    loop {
        let mut row = Vec::new();
        let mut set = vec![false; c];
        for s in 0..c {
            let p = match model {
                LabelModel::Uniform { p } => p,
                LabelModel::Chain { p_root, .. } if s == 0 => p_root,
                LabelModel::Chain { p_child, .. } => {
                    if set[chain_parent(s)] {
                        p_child
                    } else {
                        p_child / 4.0
                    }
                }
                LabelModel::Multiclass => unreachable!(),
            };
            if rng.random::<f64>() < p {
                set[s] = true;
                row.push(s);
            }
        }
        if !row.is_empty() {
            return row;
        }
    }
}

/// Draws `n` label rows from `model`; empty rows are redrawn.
pub fn sample_labels(model: LabelModel, n: usize, num_labels: usize, rng: &mut rng::Rng) -> Result<LabelMatrix> {
    let sets = (0..n).map(|i| sample_row(model, num_labels, i, rng)).collect();
    LabelMatrix::from_sets(num_labels, sets)
}

/// Generates a dataset as a pure function of `spec`.
///
/// Each item's latent vector is its L2-normalised multi-hot label vector
/// `z`; modality `m` observes `z · A_m + ε` with `A_m` a seeded `C × d_m`
/// standard-normal projection and `ε ~ N(0, σ²)`.
pub fn gen_synthetic(spec: &SynthSpec) -> Result<CrossModalDataset> {
    spec.validate()?;
    let c = spec.num_labels;
    let mut label_rng = rng::stream(spec.seed, LABEL_STREAM);
    let labels = sample_labels(spec.label_model, spec.n, c, &mut label_rng)?;

    let mut views = Vec::with_capacity(2);
    for (m, d) in [spec.d1, spec.d2].into_iter().enumerate() {
        let mut proj_rng = rng::stream(spec.seed, PROJECTION_STREAM[m]);
        let proj: Vec<f64> = (0..c * d).map(|_| rng::normal(&mut proj_rng, 1.0)).collect();
        let mut noise_rng = rng::stream(spec.seed, NOISE_STREAM[m]);
        let mut data = Vec::with_capacity(spec.n * d);
        for i in 0..spec.n {
            let ys = labels.labels(i);
            let z = 1.0 / (ys.len() as f64).sqrt();
            for k in 0..d {
                let signal: f64 = ys.iter().map(|&s| z * proj[s * d + k]).sum();
                let x = signal + rng::normal(&mut noise_rng, spec.noise_sigma);
                data.push(x as f32);
            }
        }
        views.push(FeatureMatrix::from_vec(spec.n, d, data)?);
    }
    let features2 = views.pop().expect("two views");
    let features1 = views.pop().expect("two views");
    CrossModalDataset::new(features1, features2, labels, true)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SplitSpec {
    pub n_query: usize,
    pub n_train: usize,
    pub seed: u64,
}

/// Disjoint query and database index sets; the training set is drawn from
/// the database. All lists ascending.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Split {
    pub query: Vec<usize>,
    pub train: Vec<usize>,
    pub db: Vec<usize>,
}

pub fn split(ds: &CrossModalDataset, spec: &SplitSpec) -> Result<Split> {
    split_n(ds.n(), spec)
}

pub fn split_n(n: usize, spec: &SplitSpec) -> Result<Split> {
    if spec.n_query + 1 > n {
        return Err(invalid(
            "split",
            format!("n_query = {} leaves an empty database of {n} items", spec.n_query),
        ));
    }
    if spec.n_train > n - spec.n_query {
        return Err(invalid(
            "split",
            format!(
                "n_train = {} exceeds the {} database items",
                spec.n_train,
                n - spec.n_query
            ),
        ));
    }
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut rng::seeded(spec.seed));
    let mut query = perm[..spec.n_query].to_vec();
    let db_perm = &perm[spec.n_query..];
    let mut train = db_perm[..spec.n_train].to_vec();
    let mut db = db_perm.to_vec();
    query.sort_unstable();
    train.sort_unstable();
    db.sort_unstable();
    Ok(Split { query, train, db })
}
