//! Two-modality MLP hash encoders sharing one set of cluster centers, and
//! their SGD training.
//!
//! Each modality maps `x ↦ hidden = relu(x·W_hidden + b)`, then
//! `F = hidden·W_hash` (linear hash layer) and `logits = hidden·W_cls`.
//! Both modalities pull `F` towards the same centers `c_s`.

use std::io::Write;

use rand::seq::{index, SliceRandom};

use crate::coefficients::CoefficientSet;
use crate::data::CrossModalDataset;
use crate::error::{invalid, Error, Result};
use crate::labels::LabelMatrix;
use crate::losses::{self, BatchActivations, CenterMatrix, Gradients, LossWeights, Metric, Objective};
use crate::matrix::{FeatureMatrix, Matrix};
use crate::retrieval::{self, Direction, EvalReport, HashCodeSet};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Mode {
    /// Coefficients supplied by the caller (anchor estimates, rescaled).
    #[default]
    Jcch,
    /// Constant coefficients `q_is = 1/|Y_i|`, `u_is = 1`.
    JcchB,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Jcch => "jcch",
            Mode::JcchB => "jcch-b",
        }
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "jcch" => Ok(Mode::Jcch),
            "jcch-b" => Ok(Mode::JcchB),
            other => Err(invalid("mode", format!("{other:?} (expected jcch or jcch-b)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Dims {
    pub d1: usize,
    pub d2: usize,
    pub hidden: usize,
    pub code_len: usize,
    pub num_labels: usize,
}

impl Dims {
    pub fn input(&self, modality: Modality) -> usize {
        match modality {
            Modality::One => self.d1,
            Modality::Two => self.d2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Modality {
    One,
    Two,
}

/// One modality's backbone, hash layer and classifier.
#[derive(Debug, Clone, PartialEq)]
pub struct ModalityEncoder {
    /// `d × h`.
    pub w_hidden: Matrix,
    pub b_hidden: Vec<f64>,
    /// `h × r`.
    pub w_hash: Matrix,
    /// `h × C`.
    pub w_cls: Matrix,
}

impl ModalityEncoder {
    fn zeros(d: usize, h: usize, r: usize, c: usize) -> Self {
        Self {
            w_hidden: Matrix::zeros(d, h),
            b_hidden: vec![0.0; h],
            w_hash: Matrix::zeros(h, r),
            w_cls: Matrix::zeros(h, c),
        }
    }
}

/// Parameters of both encoders plus the shared centers. Also used as the
/// shape of gradients and momentum buffers.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub m1: ModalityEncoder,
    pub m2: ModalityEncoder,
    pub centers: CenterMatrix,
}

/// Parameter block names in storage order.
pub const BLOCK_NAMES: [&str; 9] = [
    "m1.w_hidden",
    "m1.b_hidden",
    "m1.w_hash",
    "m1.w_cls",
    "m2.w_hidden",
    "m2.b_hidden",
    "m2.w_hash",
    "m2.w_cls",
    "centers",
];

impl EncoderParams {
    pub fn zeros(dims: Dims) -> Self {
        let Dims {
            d1,
            d2,
            hidden,
            code_len,
            num_labels,
        } = dims;
        Self {
            m1: ModalityEncoder::zeros(d1, hidden, code_len, num_labels),
            m2: ModalityEncoder::zeros(d2, hidden, code_len, num_labels),
            centers: CenterMatrix::zeros(code_len, num_labels),
        }
    }

    pub fn dims(&self) -> Dims {
        Dims {
            d1: self.m1.w_hidden.rows(),
            d2: self.m2.w_hidden.rows(),
            hidden: self.m1.w_hidden.cols(),
            code_len: self.centers.code_len(),
            num_labels: self.centers.num_labels(),
        }
    }

    pub fn encoder(&self, modality: Modality) -> &ModalityEncoder {
        match modality {
            Modality::One => &self.m1,
            Modality::Two => &self.m2,
        }
    }

    /// The nine parameter blocks in [`BLOCK_NAMES`] order.
    pub fn blocks(&self) -> [&[f64]; 9] {
        [
            self.m1.w_hidden.as_slice(),
            &self.m1.b_hidden,
            self.m1.w_hash.as_slice(),
            self.m1.w_cls.as_slice(),
            self.m2.w_hidden.as_slice(),
            &self.m2.b_hidden,
            self.m2.w_hash.as_slice(),
            self.m2.w_cls.as_slice(),
            self.centers.as_slice(),
        ]
    }

    pub fn blocks_mut(&mut self) -> [&mut [f64]; 9] {
        [
            self.m1.w_hidden.as_mut_slice(),
            &mut self.m1.b_hidden,
            self.m1.w_hash.as_mut_slice(),
            self.m1.w_cls.as_mut_slice(),
            self.m2.w_hidden.as_mut_slice(),
            &mut self.m2.b_hidden,
            self.m2.w_hash.as_mut_slice(),
            self.m2.w_cls.as_mut_slice(),
            self.centers.as_mut_slice(),
        ]
    }

    pub fn is_finite(&self) -> bool {
        self.blocks().iter().all(|b| b.iter().all(|v| v.is_finite()))
    }
}

const INIT_STREAM: u64 = 100;
const SHUFFLE_STREAM: u64 = 200;

/// Seeded initialization: hidden weights `N(0, 2/(d+h))`, hash and classifier
/// weights `N(0, 0.01²)`, centers `N(0, 0.5²)`, zero biases. Centers start
/// far larger than the initial activations so that both cannot shrink to
/// zero together.
pub fn init_params(dims: Dims, seed: u64) -> Result<EncoderParams> {
    if [dims.d1, dims.d2, dims.hidden, dims.code_len, dims.num_labels].contains(&0) {
        return Err(invalid("dimensions", "all dimensions must be at least 1"));
    }
    let mut p = EncoderParams::zeros(dims);
    let stds = [
        (2.0 / (dims.d1 + dims.hidden) as f64).sqrt(),
        0.0,
        0.01,
        0.01,
        (2.0 / (dims.d2 + dims.hidden) as f64).sqrt(),
        0.0,
        0.01,
        0.01,
        0.5,
    ];
    for (b, (block, std)) in p.blocks_mut().into_iter().zip(stds).enumerate() {
        if std == 0.0 {
            continue;
        }
        let mut g = rng::stream(seed, INIT_STREAM + b as u64);
        block.iter_mut().for_each(|v| *v = rng::normal(&mut g, std));
    }
    Ok(p)
}

/// Activations of one item.
#[derive(Debug, Clone, PartialEq)]
pub struct Forward {
    pub hidden: Vec<f64>,
    pub f: Vec<f64>,
    pub logits: Vec<f64>,
}

pub fn forward(params: &EncoderParams, x: &[f64], modality: Modality) -> Result<Forward> {
    let enc = params.encoder(modality);
    if x.len() != enc.w_hidden.rows() {
        return Err(Error::Shape(format!(
            "input of length {} for a modality of dimension {}",
            x.len(),
            enc.w_hidden.rows()
        )));
    }
    Ok(forward_unchecked(enc, x))
}

fn forward_unchecked(enc: &ModalityEncoder, x: &[f64]) -> Forward {
    let mut hidden = vec![0.0; enc.w_hidden.cols()];
    enc.w_hidden.left_mul(x, &mut hidden);
    for (v, b) in hidden.iter_mut().zip(&enc.b_hidden) {
        *v = (*v + b).max(0.0);
    }
    let mut f = vec![0.0; enc.w_hash.cols()];
    enc.w_hash.left_mul(&hidden, &mut f);
    let mut logits = vec![0.0; enc.w_cls.cols()];
    enc.w_cls.left_mul(&hidden, &mut logits);
    Forward { hidden, f, logits }
}

/// Accumulates the parameter gradient of one item given `∂L/∂F` and
/// `∂L/∂logits`.
fn backward_item(enc: &ModalityEncoder, x: &[f64], fwd: &Forward, df: &[f64], dz: &[f64], grad: &mut ModalityEncoder) {
    grad.w_hash.add_outer(&fwd.hidden, df);
    grad.w_cls.add_outer(&fwd.hidden, dz);
    let mut dh = vec![0.0; fwd.hidden.len()];
    enc.w_hash.mul_add_into(df, &mut dh);
    enc.w_cls.mul_add_into(dz, &mut dh);
    for (d, h) in dh.iter_mut().zip(&fwd.hidden) {
        if *h <= 0.0 {
            *d = 0.0;
        }
    }
    for (b, d) in grad.b_hidden.iter_mut().zip(&dh) {
        *b += d;
    }
    grad.w_hidden.add_outer(x, &dh);
}

/// Inputs of one minibatch: feature rows of both modalities and the item
/// indices they belong to.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub x1: Matrix,
    pub x2: Matrix,
    pub items: Vec<usize>,
}

impl Batch {
    pub fn from_dataset(ds: &CrossModalDataset, items: &[usize]) -> Result<Self> {
        if let Some(&bad) = items.iter().find(|&&i| i >= ds.n()) {
            return Err(Error::IndexOutOfRange {
                index: bad,
                len: ds.n(),
            });
        }
        let widen = |m: &FeatureMatrix| {
            Matrix::from_vec(
                items.len(),
                m.cols(),
                items.iter().flat_map(|&i| m.row_f64(i)).collect(),
            )
            .expect("row count matches")
        };
        Ok(Self {
            x1: widen(ds.features1()),
            x2: widen(ds.features2()),
            items: items.to_vec(),
        })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

/// Objective of `batch` divided by its size, with the matching gradient.
fn batch_loss(
    params: &EncoderParams,
    batch: &Batch,
    labels: &LabelMatrix,
    coeffs: &CoefficientSet,
    weights: &LossWeights,
    want_grad: bool,
) -> Result<(Objective, [Vec<Forward>; 2], Option<EncoderParams>)> {
    let dims = params.dims();
    if batch.x1.cols() != dims.d1 || batch.x2.cols() != dims.d2 {
        return Err(Error::Shape("batch features do not match the encoder inputs".into()));
    }
    let fw1: Vec<Forward> = batch.x1.iter_rows().map(|x| forward_unchecked(&params.m1, x)).collect();
    let fw2: Vec<Forward> = batch.x2.iter_rows().map(|x| forward_unchecked(&params.m2, x)).collect();
    let stack = |fw: &[Forward], pick: fn(&Forward) -> &Vec<f64>, cols: usize| {
        Matrix::from_vec(
            fw.len(),
            cols,
            fw.iter().flat_map(|f| pick(f).iter().copied()).collect(),
        )
        .expect("activation shapes")
    };
    let acts = BatchActivations::new(
        stack(&fw1, |f| &f.f, dims.code_len),
        stack(&fw2, |f| &f.f, dims.code_len),
        stack(&fw1, |f| &f.logits, dims.num_labels),
        stack(&fw2, |f| &f.logits, dims.num_labels),
        batch.items.clone(),
    )?;
    let scale = 1.0 / batch.len().max(1) as f64;
    if !want_grad {
        let mut obj = losses::total_objective(&acts, labels, coeffs, &params.centers, weights)?;
        obj.total *= scale;
        return Ok((obj, [fw1, fw2], None));
    }
    let (mut obj, g): (Objective, Gradients) = losses::gradients(&acts, labels, coeffs, &params.centers, weights)?;
    obj.total *= scale;
    let mut grad = EncoderParams::zeros(dims);
    for b in 0..batch.len() {
        let df1: Vec<f64> = g.f1.row(b).iter().map(|v| v * scale).collect();
        let dz1: Vec<f64> = g.logits1.row(b).iter().map(|v| v * scale).collect();
        backward_item(&params.m1, batch.x1.row(b), &fw1[b], &df1, &dz1, &mut grad.m1);
        let df2: Vec<f64> = g.f2.row(b).iter().map(|v| v * scale).collect();
        let dz2: Vec<f64> = g.logits2.row(b).iter().map(|v| v * scale).collect();
        backward_item(&params.m2, batch.x2.row(b), &fw2[b], &df2, &dz2, &mut grad.m2);
    }
    grad.centers = g.centers;
    grad.centers.as_mut_slice().iter_mut().for_each(|v| *v *= scale);
    Ok((obj, [fw1, fw2], Some(grad)))
}

/// Size-normalised objective and parameter gradient on one batch.
pub fn loss_and_gradient(
    params: &EncoderParams,
    batch: &Batch,
    labels: &LabelMatrix,
    coeffs: &CoefficientSet,
    weights: &LossWeights,
) -> Result<(Objective, EncoderParams)> {
    let (obj, _, grad) = batch_loss(params, batch, labels, coeffs, weights, true)?;
    Ok((obj, grad.expect("gradient requested")))
}

/// `v ← momentum·v + (g + wd·w)`, `w ← w − lr·v`.
pub fn sgd_update(w: &mut [f64], v: &mut [f64], g: &[f64], lr: f64, momentum: f64, weight_decay: f64) {
    for ((wk, vk), gk) in w.iter_mut().zip(v.iter_mut()).zip(g) {
        *vk = momentum * *vk + (gk + weight_decay * *wk);
        *wk -= lr * *vk;
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Learning rate of the hidden layers.
    pub lr_backbone: f64,
    /// Learning rate of the hash layer, classifier and centers.
    pub lr_head: f64,
    pub momentum: f64,
    /// Applied to weight matrices only, never to biases or centers.
    pub weight_decay: f64,
    pub weights: LossWeights,
    pub hidden_dim: usize,
    pub code_len: usize,
    /// Multiplicative control of `α` towards `alpha_target`.
    pub auto_alpha: bool,
    pub alpha_target: f64,
    pub mode: Mode,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 32,
            lr_backbone: 0.05,
            lr_head: 0.05,
            momentum: 0.9,
            weight_decay: 1e-4,
            weights: LossWeights::default(),
            hidden_dim: 256,
            code_len: 32,
            auto_alpha: false,
            alpha_target: 0.15,
            mode: Mode::Jcch,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, n: usize) -> Result<()> {
        let bad = |r: String| Err(invalid("train config", r));
        if !(self.lr_backbone > 0.0 && self.lr_backbone.is_finite() && self.lr_head > 0.0 && self.lr_head.is_finite()) {
            return bad("learning rates must be positive and finite".into());
        }
        if self.batch_size == 0 || self.batch_size > n {
            return bad(format!("batch_size {} must lie in 1..={n}", self.batch_size));
        }
        if !(0.0..1.0).contains(&self.momentum) || !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad("momentum must lie in [0, 1) and weight_decay be >= 0".into());
        }
        if self.hidden_dim == 0 || self.code_len == 0 {
            return bad("hidden_dim and code_len must be at least 1".into());
        }
        if !(self.alpha_target > 0.0 && self.alpha_target < 1.0) {
            return bad("alpha_target must lie in (0, 1)".into());
        }
        self.weights.validate()
    }
}

fn sgd_step(
    params: &mut EncoderParams,
    grad: &EncoderParams,
    velocity: &mut EncoderParams,
    config: &TrainConfig,
) -> Result<()> {
    if !grad.is_finite() {
        return Err(Error::NonFinite("gradient".into()));
    }
    // Block order: hidden W, hidden b, hash W, classifier W (per modality), centers.
    let lr = [0, 0, 1, 1, 0, 0, 1, 1, 1].map(|h| if h == 0 { config.lr_backbone } else { config.lr_head });
    let decayed = [true, false, true, true, true, false, true, true, false];
    let grads = grad.blocks();
    for (b, (w, v)) in params.blocks_mut().into_iter().zip(velocity.blocks_mut()).enumerate() {
        let wd = if decayed[b] { config.weight_decay } else { 0.0 };
        sgd_update(w, v, grads[b], lr[b], config.momentum, wd);
    }
    Ok(())
}

/// One SGD-with-momentum step over all blocks; fails on non-finite gradients.
pub fn apply_sgd(
    params: &mut EncoderParams,
    grad: &EncoderParams,
    velocity: &mut EncoderParams,
    config: &TrainConfig,
) -> Result<()> {
    if params.dims() != grad.dims() || params.dims() != velocity.dims() {
        return Err(Error::Shape("parameter, gradient and velocity shapes differ".into()));
    }
    sgd_step(params, grad, velocity, config)
}

/// Per-epoch training statistics (means over the epoch's batches, per item).
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub alpha: f64,
    pub total: f64,
    pub cmul: f64,
    pub classification: f64,
    pub quantization: f64,
    pub pairing: Option<f64>,
    /// Mean `l_q` of each modality's hash activations.
    pub quant1: f64,
    pub quant2: f64,
    /// Mean `‖F‖` of each modality.
    pub f_norm1: f64,
    pub f_norm2: f64,
    /// Mean and minimum center norm at the end of the epoch.
    pub center_norm_mean: f64,
    pub center_norm_min: f64,
    pub degenerate: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainReport {
    pub mode: Mode,
    pub records: Vec<EpochRecord>,
}

impl TrainReport {
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record([
            "mode",
            "epoch",
            "alpha",
            "total",
            "cmul",
            "classification",
            "quantization",
            "pairing",
            "quant1",
            "quant2",
            "f_norm1",
            "f_norm2",
            "center_norm_mean",
            "center_norm_min",
            "degenerate",
        ])?;
        for r in &self.records {
            w.write_record([
                self.mode.name().to_string(),
                r.epoch.to_string(),
                r.alpha.to_string(),
                r.total.to_string(),
                r.cmul.to_string(),
                r.classification.to_string(),
                r.quantization.to_string(),
                r.pairing.map_or_else(String::new, |p| p.to_string()),
                r.quant1.to_string(),
                r.quant2.to_string(),
                r.f_norm1.to_string(),
                r.f_norm2.to_string(),
                r.center_norm_mean.to_string(),
                r.center_norm_min.to_string(),
                r.degenerate.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Trains both encoders and the shared centers on `train`.
///
/// `coeffs` must be rescaled and cover the items of `train`; in
/// [`Mode::JcchB`] it is ignored in favour of the constant baseline. With
/// `beta = 0` the pairing term is dropped, as for unpaired data.
pub fn fit(
    train: &CrossModalDataset,
    coeffs: &CoefficientSet,
    config: &TrainConfig,
) -> Result<(EncoderParams, TrainReport)> {
    config.validate(train.n())?;
    let labels = train.labels();
    let baseline;
    let coeffs = match config.mode {
        Mode::Jcch => {
            if !coeffs.rescaled() {
                return Err(invalid("coefficients", "training expects rescaled coefficients"));
            }
            coeffs
        }
        Mode::JcchB => {
            baseline = CoefficientSet::constant_baseline(labels);
            &baseline
        }
    };
    coeffs.check_against(labels)?;
    let dims = Dims {
        d1: train.features1().cols(),
        d2: train.features2().cols(),
        hidden: config.hidden_dim,
        code_len: config.code_len,
        num_labels: labels.num_labels(),
    };
    let mut params = init_params(dims, config.seed)?;
    let mut velocity = EncoderParams::zeros(dims);
    let mut report = TrainReport {
        mode: config.mode,
        records: Vec::with_capacity(config.epochs),
    };
    let mut weights = config.weights;
    let mut order: Vec<usize> = (0..train.n()).collect();
    let mut shuffle = rng::stream(config.seed, SHUFFLE_STREAM);

    for epoch in 0..config.epochs {
        order.shuffle(&mut shuffle);
        let mut acc = EpochRecord {
            epoch,
            alpha: weights.alpha,
            total: 0.0,
            cmul: 0.0,
            classification: 0.0,
            quantization: 0.0,
            pairing: (weights.beta != 0.0).then_some(0.0),
            quant1: 0.0,
            quant2: 0.0,
            f_norm1: 0.0,
            f_norm2: 0.0,
            center_norm_mean: 0.0,
            center_norm_min: 0.0,
            degenerate: 0,
        };
        for chunk in order.chunks(config.batch_size) {
            let batch = Batch::from_dataset(train, chunk)?;
            let (obj, fw, grad) = batch_loss(&params, &batch, labels, coeffs, &weights, true)?;
            if !obj.total.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    reason: format!("non-finite loss {}", obj.total),
                    report: Box::new(report),
                });
            }
            if let Err(e) = sgd_step(
                &mut params,
                grad.as_ref().expect("gradient requested"),
                &mut velocity,
                config,
            ) {
                return Err(Error::Diverged {
                    epoch,
                    reason: e.to_string(),
                    report: Box::new(report),
                });
            }
            let b = batch.len() as f64;
            acc.total += obj.total * b;
            acc.cmul += obj.terms.cmul;
            acc.classification += obj.terms.classification;
            acc.quantization += obj.terms.quantization;
            if let (Some(p), Some(t)) = (acc.pairing.as_mut(), obj.terms.pairing) {
                *p += t;
            }
            acc.degenerate += obj.terms.degenerate;
            for f in &fw[0] {
                acc.quant1 += losses::quantization_loss(&f.f, weights.quantization).value;
                acc.f_norm1 += norm(&f.f);
            }
            for f in &fw[1] {
                acc.quant2 += losses::quantization_loss(&f.f, weights.quantization).value;
                acc.f_norm2 += norm(&f.f);
            }
        }
        let n = train.n() as f64;
        for v in [
            &mut acc.total,
            &mut acc.cmul,
            &mut acc.classification,
            &mut acc.quantization,
            &mut acc.quant1,
            &mut acc.quant2,
            &mut acc.f_norm1,
            &mut acc.f_norm2,
        ] {
            *v /= n;
        }
        if let Some(p) = acc.pairing.as_mut() {
            *p /= n;
        }
        let norms = params.centers.norms();
        acc.center_norm_mean = norms.iter().sum::<f64>() / norms.len() as f64;
        acc.center_norm_min = norms.iter().copied().fold(f64::INFINITY, f64::min);

        if config.auto_alpha {
            let lq = 0.5 * (acc.quant1 + acc.quant2);
            if lq > config.alpha_target + 0.05 {
                weights.alpha *= 1.2;
            } else if lq < config.alpha_target - 0.05 {
                weights.alpha /= 1.2;
            }
        }
        report.records.push(acc);
    }
    Ok((params, report))
}

/// Hash-layer activations of every row of `features` (one modality).
pub fn hash_activations(params: &EncoderParams, features: &FeatureMatrix, modality: Modality) -> Result<Matrix> {
    let enc = params.encoder(modality);
    if features.cols() != enc.w_hidden.rows() {
        return Err(Error::Shape(format!(
            "features of dimension {} for an encoder of dimension {}",
            features.cols(),
            enc.w_hidden.rows()
        )));
    }
    let r = enc.w_hash.cols();
    let mut out = Matrix::zeros(features.rows(), r);
    for i in 0..features.rows() {
        let fwd = forward_unchecked(enc, &features.row_f64(i));
        out.row_mut(i).copy_from_slice(&fwd.f);
    }
    Ok(out)
}

/// Sign codes of every row of `features`.
pub fn encode_features(params: &EncoderParams, features: &FeatureMatrix, modality: Modality) -> Result<HashCodeSet> {
    retrieval::encode(&hash_activations(params, features, modality)?)
}

/// Fraction of items whose normalised activation is nearest (L2) to the
/// normalised center of one of their own labels.
pub fn nearest_center_accuracy(params: &EncoderParams, ds: &CrossModalDataset, modality: Modality) -> Result<f64> {
    let features = match modality {
        Modality::One => ds.features1(),
        Modality::Two => ds.features2(),
    };
    let f = hash_activations(params, features, modality)?;
    let unit = |v: &[f64]| {
        let n = norm(v);
        if n < losses::ZERO_NORM {
            v.to_vec()
        } else {
            v.iter().map(|x| x / n).collect::<Vec<_>>()
        }
    };
    let centers: Vec<Vec<f64>> = (0..params.centers.num_labels())
        .map(|s| unit(params.centers.center(s)))
        .collect();
    let mut hits = 0usize;
    for i in 0..ds.n() {
        let h = unit(f.row(i));
        let best = (0..centers.len())
            .map(|s| (Metric::L2.distance(&h, &centers[s]), s))
            .min_by(|a, b| a.0.total_cmp(&b.0))
            .map(|p| p.1)
            .expect("at least one center");
        hits += usize::from(ds.labels().contains(i, best));
    }
    Ok(hits as f64 / ds.n() as f64)
}

/// MAP and precision@k in both directions: modality-1 queries against the
/// modality-2 codes of `db`, and the reverse.
pub fn evaluate_cross_modal(
    params: &EncoderParams,
    query: &CrossModalDataset,
    db: &CrossModalDataset,
    ks: &[usize],
) -> Result<[EvalReport; 2]> {
    let q1 = encode_features(params, query.features1(), Modality::One)?;
    let q2 = encode_features(params, query.features2(), Modality::Two)?;
    let d1 = encode_features(params, db.features1(), Modality::One)?;
    let d2 = encode_features(params, db.features2(), Modality::Two)?;
    Ok([
        retrieval::evaluate(&q1, &d2, query.labels(), db.labels(), ks, Direction::OneToTwo)?,
        retrieval::evaluate(&q2, &d1, query.labels(), db.labels(), ks, Direction::TwoToOne)?,
    ])
}

/// Outcome of [`grad_check`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub max_rel_error: f64,
    /// Worst error per block, in [`BLOCK_NAMES`] order.
    pub per_block: [f64; 9],
    pub coordinates: usize,
    /// Rounding resolution `ε·max(|L|, 1)/step` of the difference quotient.
    pub resolution: f64,
}

/// Denominator floor of the relative error in [`grad_check`].
pub const GRAD_CHECK_FLOOR: f64 = 1e-6;

/// Compares analytic parameter gradients of the batch objective with central
/// differences (step `1e−5`) on `per_block` seeded coordinates of every
/// block. Relative error is `max(|a − n| − ρ, 0) / max(|a|, |n|, GRAD_CHECK_FLOOR)`
/// where `ρ` is the rounding resolution of the difference quotient, below
/// which central differences cannot tell two gradients apart.
pub fn grad_check(
    params: &EncoderParams,
    batch: &Batch,
    labels: &LabelMatrix,
    coeffs: &CoefficientSet,
    weights: &LossWeights,
    per_block: usize,
    seed: u64,
) -> Result<GradCheck> {
    const STEP: f64 = 1e-5;
    let (objective, analytic) = loss_and_gradient(params, batch, labels, coeffs, weights)?;
    let resolution = f64::EPSILON * objective.total.abs().max(1.0) / STEP;
    let analytic_blocks = analytic.blocks();
    let mut probe = params.clone();
    let mut per_block_err = [0.0f64; 9];
    let mut coordinates = 0;
    let mut g = rng::stream(seed, 0);
    for b in 0..9 {
        let len = params.blocks()[b].len();
        let picks = index::sample(&mut g, len, per_block.min(len)).into_vec();
        for k in picks {
            let orig = params.blocks()[b][k];
            probe.blocks_mut()[b][k] = orig + STEP;
            let up = batch_loss(&probe, batch, labels, coeffs, weights, false)?.0.total;
            probe.blocks_mut()[b][k] = orig - STEP;
            let down = batch_loss(&probe, batch, labels, coeffs, weights, false)?.0.total;
            probe.blocks_mut()[b][k] = orig;
            let numeric = (up - down) / (2.0 * STEP);
            let a = analytic_blocks[b][k];
            let err = ((a - numeric).abs() - resolution).max(0.0) / a.abs().max(numeric.abs()).max(GRAD_CHECK_FLOOR);
            per_block_err[b] = per_block_err[b].max(err);
            coordinates += 1;
        }
    }
    Ok(GradCheck {
        max_rel_error: per_block_err.iter().copied().fold(0.0, f64::max),
        per_block: per_block_err,
        coordinates,
        resolution,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coefficients::{estimate_coefficients, rescale, AnchorSet};
    use crate::data::{gen_synthetic, LabelModel, SynthSpec};

    fn small_dims() -> Dims {
        Dims {
            d1: 5,
            d2: 4,
            hidden: 6,
            code_len: 3,
            num_labels: 4,
        }
    }

    #[test]
    fn init_is_seeded() {
        let a = init_params(small_dims(), 3).unwrap();
        assert_eq!(a, init_params(small_dims(), 3).unwrap());
        assert_ne!(a, init_params(small_dims(), 4).unwrap());
        assert!(a.m1.b_hidden.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn center_init_std_and_scale() {
        let dims = Dims {
            d1: 8,
            d2: 8,
            hidden: 16,
            code_len: 100,
            num_labels: 100,
        };
        let p = init_params(dims, 1).unwrap();
        let c = p.centers.as_slice();
        let mean = c.iter().sum::<f64>() / c.len() as f64;
        let std = (c.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / c.len() as f64).sqrt();
        assert!((0.45..=0.55).contains(&std), "std {std}");

        // Center norms ≈ 0.5·√r dwarf the initial activations.
        let norms = p.centers.norms();
        let mean_norm = norms.iter().sum::<f64>() / norms.len() as f64;
        assert!((mean_norm - 5.0).abs() < 0.5);
        let mut g = rng::seeded(2);
        let x: Vec<f64> = (0..8).map(|_| rng::normal(&mut g, 1.0)).collect();
        let f = forward(&p, &x, Modality::One).unwrap().f;
        assert!(norm(&f) < 0.1 * mean_norm);
    }

    #[test]
    fn forward_examples() {
        let p = init_params(small_dims(), 5).unwrap();
        let zero = forward(&p, &[0.0; 5], Modality::One).unwrap();
        assert!(zero.f.iter().chain(&zero.logits).all(|&v| v == 0.0));
        assert!(forward(&p, &[0.0; 4], Modality::One).is_err());

        let x = [0.3, -1.2, 0.8, 2.0, -0.1];
        let base = forward(&p, &x, Modality::One).unwrap();
        let scaled = forward(&p, &x.map(|v| 2.5 * v), Modality::One).unwrap();
        for (a, b) in base.f.iter().zip(&scaled.f) {
            assert!((2.5 * a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn forward_matches_explicit_loops() {
        let mut p = init_params(small_dims(), 8).unwrap();
        p.m2.b_hidden
            .iter_mut()
            .enumerate()
            .for_each(|(k, b)| *b = 0.1 * k as f64 - 0.2);
        let x = [0.5, -0.7, 1.1, 0.2];
        let enc = &p.m2;
        let mut hidden = [0.0; 6];
        for (j, hj) in hidden.iter_mut().enumerate() {
            let mut s = enc.b_hidden[j];
            for (i, xi) in x.iter().enumerate() {
                s += xi * enc.w_hidden.get(i, j);
            }
            *hj = if s > 0.0 { s } else { 0.0 };
        }
        let mut f = [0.0; 3];
        for (k, fk) in f.iter_mut().enumerate() {
            for (j, hj) in hidden.iter().enumerate() {
                *fk += hj * enc.w_hash.get(j, k);
            }
        }
        let got = forward(&p, &x, Modality::Two).unwrap();
        for (a, b) in got.f.iter().zip(&f) {
            assert!((a - b).abs() < 1e-14);
        }
        assert_eq!(got.hidden.len(), 6);
    }

    #[test]
    fn sgd_update_examples() {
        let (mut w, mut v) = ([1.0], [0.0]);
        sgd_update(&mut w, &mut v, &[1.0], 0.1, 0.9, 0.0);
        assert_eq!((w[0], v[0]), (0.9, 1.0));
        let (mut w, mut v) = ([1.0, -2.0], [0.0, 0.0]);
        sgd_update(&mut w, &mut v, &[0.0, 0.0], 0.1, 0.9, 0.0);
        assert_eq!(w, [1.0, -2.0]);
    }

    #[test]
    fn sgd_skips_decay_on_centers_and_biases() {
        let dims = small_dims();
        let mut p = init_params(dims, 1).unwrap();
        p.m1.b_hidden[0] = 1.0;
        let before = p.clone();
        let mut v = EncoderParams::zeros(dims);
        let cfg = TrainConfig {
            weight_decay: 0.5,
            ..TrainConfig::default()
        };
        apply_sgd(&mut p, &EncoderParams::zeros(dims), &mut v, &cfg).unwrap();
        assert_eq!(p.centers, before.centers);
        assert_eq!(p.m1.b_hidden, before.m1.b_hidden);
        assert_ne!(p.m1.w_hash, before.m1.w_hash);

        let mut bad = EncoderParams::zeros(dims);
        bad.centers.as_mut_slice()[0] = f64::NAN;
        assert!(apply_sgd(&mut p, &bad, &mut v, &cfg).is_err());
    }

    fn toy_set(seed: u64, n: usize) -> (CrossModalDataset, CoefficientSet) {
        let ds = gen_synthetic(&SynthSpec {
            n,
            num_labels: 4,
            d1: 5,
            d2: 4,
            label_model: LabelModel::Uniform { p: 0.35 },
            noise_sigma: 0.3,
            seed,
        })
        .unwrap();
        let (c, _) = estimate_coefficients(ds.labels(), &AnchorSet::all(n), false).unwrap();
        let c = rescale(&c, ds.labels()).unwrap();
        (ds, c)
    }

    #[test]
    fn gradients_pass_finite_difference_check() {
        let (ds, coeffs) = toy_set(1, 12);
        let weights = LossWeights {
            lambda: 0.3,
            mu: 0.5,
            alpha: 0.4,
            beta: 0.3,
            ..LossWeights::default()
        };
        let batch = Batch::from_dataset(&ds, &(0..12).collect::<Vec<_>>()).unwrap();
        for seed in 0..5 {
            let mut p = init_params(small_dims(), seed).unwrap();
            // Larger head weights move the check away from the near-zero start.
            for blk in [2, 3, 6, 7] {
                p.blocks_mut()[blk].iter_mut().for_each(|v| *v *= 30.0);
            }
            let gc = grad_check(&p, &batch, ds.labels(), &coeffs, &weights, 25, seed).unwrap();
            assert!(gc.max_rel_error <= 1e-6, "seed {seed}: {:?}", gc.per_block);
            assert!(gc.coordinates >= 9 * 3);
            assert!(gc.resolution < 1e-9);
        }
    }

    #[test]
    fn zero_objective_has_zero_gradient() {
        let (ds, _) = toy_set(2, 8);
        let p = init_params(small_dims(), 0).unwrap();
        let batch = Batch::from_dataset(&ds, &(0..8).collect::<Vec<_>>()).unwrap();
        let w = LossWeights {
            mu: 0.0,
            alpha: 0.0,
            beta: 0.0,
            ..LossWeights::default()
        };
        let (_, g) = loss_and_gradient(&p, &batch, ds.labels(), &CoefficientSet::zeros(8, 4), &w).unwrap();
        assert!(g.blocks().iter().all(|b| b.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn zero_epochs_return_init() {
        let (ds, coeffs) = toy_set(3, 16);
        let cfg = TrainConfig {
            epochs: 0,
            hidden_dim: 6,
            code_len: 3,
            batch_size: 4,
            ..TrainConfig::default()
        };
        let (p, rep) = fit(&ds, &coeffs, &cfg).unwrap();
        assert!(rep.records.is_empty());
        assert_eq!(p, init_params(small_dims(), cfg.seed).unwrap());
    }

    #[test]
    fn fit_is_deterministic_and_logs_every_epoch() {
        let (ds, coeffs) = toy_set(4, 24);
        let cfg = TrainConfig {
            epochs: 3,
            hidden_dim: 6,
            code_len: 3,
            batch_size: 5,
            auto_alpha: true,
            ..TrainConfig::default()
        };
        let a = fit(&ds, &coeffs, &cfg).unwrap();
        let b = fit(&ds, &coeffs, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.1.records.len(), 3);
        let unscaled = CoefficientSet::zeros(24, 4);
        assert!(fit(&ds, &unscaled, &cfg).is_err());
        let baseline = TrainConfig {
            mode: Mode::JcchB,
            ..cfg
        };
        assert_eq!(fit(&ds, &unscaled, &baseline).unwrap().1.mode, Mode::JcchB);
    }

    #[test]
    fn divergence_is_reported() {
        let (ds, coeffs) = toy_set(5, 16);
        let cfg = TrainConfig {
            epochs: 50,
            hidden_dim: 6,
            code_len: 3,
            batch_size: 4,
            lr_backbone: 1e6,
            lr_head: 1e6,
            ..TrainConfig::default()
        };
        match fit(&ds, &coeffs, &cfg) {
            Err(Error::Diverged { report, .. }) => assert!(report.records.len() < 50),
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn report_csv_has_one_row_per_epoch() {
        let (ds, coeffs) = toy_set(6, 16);
        let cfg = TrainConfig {
            epochs: 2,
            hidden_dim: 6,
            code_len: 3,
            batch_size: 8,
            ..TrainConfig::default()
        };
        let (_, rep) = fit(&ds, &coeffs, &cfg).unwrap();
        let mut buf = Vec::new();
        rep.write_csv(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap().lines().count(), 3);
    }
}
