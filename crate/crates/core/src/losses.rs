//! Loss terms of the training objective and their analytic gradients.
//!
//! ```text
//! L = L_u + μ·Σ_i [cls(z_i1, Y_i) + cls(z_i2, Y_i)]
//!         + α·Σ_i [l_q(F_i1) + l_q(F_i2)]
//!         + β·Σ_i (1 − cos⟨F_i1, F_i2⟩)
//! L_u = Σ_i Σ_{s∈Y_i} [q_is·l_c(F_i1, s) + λ·u_is·d(F_i1, c_s)
//!                     + q_is·l_c(F_i2, s) + λ·u_is·d(F_i2, c_s)]
//! ```
//!
//! `l_c(h, s) = −log softmax_s(−d(h, c_1), …, −d(h, c_C))` is the center
//! softmax loss; the centers `c_s` are shared by both modalities.

use crate::coefficients::CoefficientSet;
use crate::error::{invalid, Error, Result};
use crate::labels::LabelMatrix;
use crate::matrix::Matrix;

/// Norms below this are treated as zero by the quantization and pairing guards.
pub const ZERO_NORM: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Metric {
    L1,
    #[default]
    L2,
}

impl Metric {
    pub fn distance(self, a: &[f64], b: &[f64]) -> f64 {
        match self {
            Metric::L1 => a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum(),
            Metric::L2 => a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt(),
        }
    }

    /// Adds `scale · ∂d(a, b)/∂a` to `out`. Uses the zero subgradient where
    /// `d` is not differentiable (L2 at `a = b`, L1 at `a_k = b_k`).
    pub fn add_distance_grad(self, a: &[f64], b: &[f64], scale: f64, out: &mut [f64]) {
        match self {
            Metric::L1 => {
                for ((o, x), y) in out.iter_mut().zip(a).zip(b) {
                    let diff = x - y;
                    if diff > 0.0 {
                        *o += scale;
                    } else if diff < 0.0 {
                        *o -= scale;
                    }
                }
            }
            Metric::L2 => {
                let d = self.distance(a, b);
                if d == 0.0 {
                    return;
                }
                let k = scale / d;
                for ((o, x), y) in out.iter_mut().zip(a).zip(b) {
                    *o += k * (x - y);
                }
            }
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Metric::L1 => "l1",
            Metric::L2 => "l2",
        }
    }
}

impl std::str::FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "l1" => Ok(Metric::L1),
            "l2" => Ok(Metric::L2),
            other => Err(invalid("metric", format!("{other:?} (expected l1 or l2)"))),
        }
    }
}

/// `r × C` semantic cluster centers. Stored column-major: center `s` is the
/// contiguous slice `[s·r, (s+1)·r)`.
#[derive(Debug, Clone, PartialEq)]
pub struct CenterMatrix {
    code_len: usize,
    num_labels: usize,
    data: Vec<f64>,
}

impl CenterMatrix {
    pub fn zeros(code_len: usize, num_labels: usize) -> Self {
        Self {
            code_len,
            num_labels,
            data: vec![0.0; code_len * num_labels],
        }
    }

    /// `data` holds the centers one after another (column-major `r × C`).
    pub fn from_columns(code_len: usize, num_labels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != code_len * num_labels {
            return Err(Error::Shape(format!(
                "{} values for {num_labels} centers of length {code_len}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("centers".into()));
        }
        Ok(Self {
            code_len,
            num_labels,
            data,
        })
    }

    #[inline]
    pub fn code_len(&self) -> usize {
        self.code_len
    }

    #[inline]
    pub fn num_labels(&self) -> usize {
        self.num_labels
    }

    #[inline]
    pub fn center(&self, s: usize) -> &[f64] {
        &self.data[s * self.code_len..(s + 1) * self.code_len]
    }

    #[inline]
    pub fn center_mut(&mut self, s: usize) -> &mut [f64] {
        &mut self.data[s * self.code_len..(s + 1) * self.code_len]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// L2 norm of every center.
    pub fn norms(&self) -> Vec<f64> {
        (0..self.num_labels)
            .map(|s| self.center(s).iter().map(|v| v * v).sum::<f64>().sqrt())
            .collect()
    }

    pub fn add_assign(&mut self, other: &CenterMatrix) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum QuantForm {
    /// `1 − 1ᵀ|f| / (‖1‖_{1.5}·‖f‖_3)`: zero iff all magnitudes are equal.
    #[default]
    Abs,
    /// `1 − 1ᵀf / (‖1‖_{1.5}·‖f‖_3)`: the signed numerator, minimised only by
    /// all-positive vectors.
    Literal,
}

/// Weights of the objective plus the hinge margin and distance choice.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub lambda: f64,
    pub mu: f64,
    pub alpha: f64,
    pub beta: f64,
    pub margin: f64,
    pub metric: Metric,
    pub quantization: QuantForm,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda: 0.01,
            mu: 0.1,
            alpha: 0.1,
            beta: 0.2,
            margin: 0.0,
            metric: Metric::L2,
            quantization: QuantForm::Abs,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda", self.lambda),
            ("mu", self.mu),
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("margin", self.margin),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(invalid("loss weights", format!("{name} = {v} must be finite and >= 0")));
            }
        }
        Ok(())
    }
}

/// A loss value with a flag raised when a zero-norm guard fired.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Guarded {
    pub value: f64,
    pub degenerate: bool,
}

/// `max(0, m + a − b)`.
#[inline]
pub fn g_hinge(a: f64, b: f64, margin: f64) -> f64 {
    (margin + a - b).max(0.0)
}

/// Softmax over negated center distances; returns `(loss, probabilities)`.
fn center_softmax(h: &[f64], s: usize, centers: &CenterMatrix, metric: Metric) -> (f64, Vec<f64>) {
    let d: Vec<f64> = (0..centers.num_labels())
        .map(|j| metric.distance(h, centers.center(j)))
        .collect();
    let min = d.iter().copied().fold(f64::INFINITY, f64::min);
    let mut p: Vec<f64> = d.iter().map(|dj| (-(dj - min)).exp()).collect();
    let z: f64 = p.iter().sum();
    p.iter_mut().for_each(|v| *v /= z);
    (d[s] - min + z.ln(), p)
}

/// `l_c(h, s) = −log [exp(−d(h,c_s)) / Σ_j exp(−d(h,c_j))]`, max-shifted.
pub fn center_softmax_loss(h: &[f64], s: usize, centers: &CenterMatrix, metric: Metric) -> f64 {
    center_softmax(h, s, centers, metric).0
}

/// Accumulates `weight · ∇l_c(h, s)` into `dh` and `dc`; returns `l_c`.
fn center_softmax_grad(
    h: &[f64],
    s: usize,
    centers: &CenterMatrix,
    metric: Metric,
    weight: f64,
    dh: &mut [f64],
    dc: &mut CenterMatrix,
) -> f64 {
    let (loss, p) = center_softmax(h, s, centers, metric);
    for (j, pj) in p.iter().enumerate() {
        let coef = if j == s { 1.0 - pj } else { -pj };
        if coef == 0.0 {
            continue;
        }
        let c = centers.center(j);
        metric.add_distance_grad(h, c, weight * coef, dh);
        metric.add_distance_grad(c, h, weight * coef, dc.center_mut(j));
    }
    loss
}

/// Gradient sinks for one modality's unary term.
struct UnaryGrad<'a> {
    dh: &'a mut [f64],
    dc: &'a mut CenterMatrix,
    scale: f64,
}

/// `Σ_{s∈Y} [q_s·l_c(h, s) + λ·u_s·d(h, c_s)]` for one item, optionally
/// accumulating `scale ·` its gradient.
#[allow(clippy::too_many_arguments)]
fn unary_item(
    h: &[f64],
    ys: &[usize],
    coeffs: &CoefficientSet,
    row: usize,
    centers: &CenterMatrix,
    lambda: f64,
    metric: Metric,
    mut grad: Option<UnaryGrad<'_>>,
) -> f64 {
    let mut total = 0.0;
    for &s in ys {
        let q = coeffs.q(row, s);
        let u = coeffs.u(row, s);
        if q != 0.0 {
            let lc = match grad.as_mut() {
                Some(g) => center_softmax_grad(h, s, centers, metric, g.scale * q, g.dh, g.dc),
                None => center_softmax_loss(h, s, centers, metric),
            };
            total += q * lc;
        }
        if u != 0.0 && lambda != 0.0 {
            let c = centers.center(s);
            total += lambda * u * metric.distance(h, c);
            if let Some(g) = grad.as_mut() {
                let w = g.scale * lambda * u;
                metric.add_distance_grad(h, c, w, g.dh);
                metric.add_distance_grad(c, h, w, g.dc.center_mut(s));
            }
        }
    }
    total
}

fn check_rows(
    h: &Matrix,
    items: &[usize],
    labels: &LabelMatrix,
    coeffs: &CoefficientSet,
    centers: &CenterMatrix,
) -> Result<()> {
    coeffs.check_against(labels)?;
    if h.rows() != items.len() {
        return Err(Error::Shape(format!(
            "{} activation rows for {} items",
            h.rows(),
            items.len()
        )));
    }
    if h.cols() != centers.code_len() || centers.num_labels() != labels.num_labels() {
        return Err(Error::Shape(format!(
            "activations of width {} vs {} centers of length {} for {} labels",
            h.cols(),
            centers.num_labels(),
            centers.code_len(),
            labels.num_labels()
        )));
    }
    if let Some(&bad) = items.iter().find(|&&i| i >= labels.n()) {
        return Err(Error::IndexOutOfRange {
            index: bad,
            len: labels.n(),
        });
    }
    Ok(())
}

/// Improved unary loss `Σ_i Σ_{s∈Y_i} [q_is·l_c(h_i,s) + λ·u_is·d(h_i,c_s)]`.
///
/// Row `b` of `h` belongs to item `items[b]` of `labels` / `coeffs`.
pub fn improved_unary_loss(
    h: &Matrix,
    items: &[usize],
    labels: &LabelMatrix,
    coeffs: &CoefficientSet,
    centers: &CenterMatrix,
    lambda: f64,
    metric: Metric,
) -> Result<f64> {
    check_rows(h, items, labels, coeffs, centers)?;
    Ok(items
        .iter()
        .enumerate()
        .map(|(b, &i)| unary_item(h.row(b), labels.labels(i), coeffs, i, centers, lambda, metric, None))
        .sum())
}

/// Value and gradients (w.r.t. `h` and the centers) of [`improved_unary_loss`].
pub fn unary_gradients(
    h: &Matrix,
    items: &[usize],
    labels: &LabelMatrix,
    coeffs: &CoefficientSet,
    centers: &CenterMatrix,
    lambda: f64,
    metric: Metric,
) -> Result<(f64, Matrix, CenterMatrix)> {
    check_rows(h, items, labels, coeffs, centers)?;
    let mut dh = Matrix::zeros(h.rows(), h.cols());
    let mut dc = CenterMatrix::zeros(centers.code_len(), centers.num_labels());
    let mut total = 0.0;
    for (b, &i) in items.iter().enumerate() {
        let grad = UnaryGrad {
            dh: dh.row_mut(b),
            dc: &mut dc,
            scale: 1.0,
        };
        total += unary_item(
            h.row(b),
            labels.labels(i),
            coeffs,
            i,
            centers,
            lambda,
            metric,
            Some(grad),
        );
    }
    Ok((total, dh, dc))
}

/// The uniform-label baseline: [`improved_unary_loss`] with
/// `q_is = 1/|Y_i|`, `u_is = 1`.
pub fn scul_loss_jcchb(
    h: &Matrix,
    items: &[usize],
    labels: &LabelMatrix,
    centers: &CenterMatrix,
    lambda: f64,
    metric: Metric,
) -> Result<f64> {
    let coeffs = CoefficientSet::constant_baseline(labels);
    improved_unary_loss(h, items, labels, &coeffs, centers, lambda, metric)
}

/// Hash-layer and classifier outputs of both modalities for one batch.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchActivations {
    pub f1: Matrix,
    pub f2: Matrix,
    pub logits1: Matrix,
    pub logits2: Matrix,
    /// Row `b` belongs to item `items[b]` of the label / coefficient sets.
    pub items: Vec<usize>,
}

impl BatchActivations {
    pub fn new(f1: Matrix, f2: Matrix, logits1: Matrix, logits2: Matrix, items: Vec<usize>) -> Result<Self> {
        let b = items.len();
        if [f1.rows(), f2.rows(), logits1.rows(), logits2.rows()]
            .iter()
            .any(|&r| r != b)
        {
            return Err(Error::Shape(format!(
                "batch of {b} items with mismatched activation rows"
            )));
        }
        if f1.cols() != f2.cols() || logits1.cols() != logits2.cols() {
            return Err(Error::Shape("modalities disagree on code length or label count".into()));
        }
        Ok(Self {
            f1,
            f2,
            logits1,
            logits2,
            items,
        })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

/// Cross-modal unary loss: the improved unary loss of each modality, summed.
pub fn cmul(
    batch: &BatchActivations,
    labels: &LabelMatrix,
    coeffs: &CoefficientSet,
    centers: &CenterMatrix,
    lambda: f64,
    metric: Metric,
) -> Result<f64> {
    Ok(
        improved_unary_loss(&batch.f1, &batch.items, labels, coeffs, centers, lambda, metric)?
            + improved_unary_loss(&batch.f2, &batch.items, labels, coeffs, centers, lambda, metric)?,
    )
}

fn quantization_parts(f: &[f64], form: QuantForm) -> (f64, f64, f64) {
    let r = f.len() as f64;
    let numer: f64 = match form {
        QuantForm::Abs => f.iter().map(|v| v.abs()).sum(),
        QuantForm::Literal => f.iter().sum(),
    };
    let norm3 = f.iter().map(|v| v.abs().powi(3)).sum::<f64>().cbrt();
    (numer, norm3, r.powf(2.0 / 3.0))
}

/// `l_q(f) = 1 − 1ᵀ|f| / (r^{2/3}·‖f‖_3)` (or the signed numerator with
/// [`QuantForm::Literal`]). Returns 1 with the degenerate flag for `f ≈ 0`.
///
/// Evaluated on `f / max|f_j|`, so equal magnitudes give exactly 0 under
/// [`QuantForm::Abs`].
pub fn quantization_loss(f: &[f64], form: QuantForm) -> Guarded {
    let (_, norm3, _) = quantization_parts(f, form);
    if norm3 < ZERO_NORM {
        return Guarded {
            value: 1.0,
            degenerate: true,
        };
    }
    let top = f.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let unit: Vec<f64> = f.iter().map(|v| v / top).collect();
    let (numer, norm3, ones) = quantization_parts(&unit, form);
    if form == QuantForm::Abs && numer == f.len() as f64 {
        // Every |f_j| equals the maximum.
        return Guarded {
            value: 0.0,
            degenerate: false,
        };
    }
    Guarded {
        value: 1.0 - numer / (ones * norm3),
        degenerate: false,
    }
}

/// Adds `scale · ∇l_q(f)` to `out`.
fn quantization_grad(f: &[f64], form: QuantForm, scale: f64, out: &mut [f64]) {
    let (numer, norm3, ones) = quantization_parts(f, form);
    if norm3 < ZERO_NORM {
        return;
    }
    let inv = 1.0 / (ones * norm3);
    let cubic = numer / (ones * norm3.powi(4));
    for (o, &v) in out.iter_mut().zip(f) {
        let sign = if v > 0.0 {
            1.0
        } else if v < 0.0 {
            -1.0
        } else {
            0.0
        };
        let d_numer = match form {
            QuantForm::Abs => sign,
            QuantForm::Literal => 1.0,
        };
        *o -= scale * (d_numer * inv - cubic * v * v * sign);
    }
}

fn norm2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// `1 − cos⟨a, b⟩`; 1 with the degenerate flag when either vector is ≈ 0.
pub fn pairing_loss(a: &[f64], b: &[f64]) -> Guarded {
    let (na, nb) = (norm2(a), norm2(b));
    if na < ZERO_NORM || nb < ZERO_NORM {
        return Guarded {
            value: 1.0,
            degenerate: true,
        };
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Guarded {
        value: 1.0 - dot / (na * nb),
        degenerate: false,
    }
}

/// Adds `scale · ∂(1 − cos⟨a,b⟩)/∂a` to `da` and the `b` counterpart to `db`.
fn pairing_grad(a: &[f64], b: &[f64], scale: f64, da: &mut [f64], db: &mut [f64]) {
    let (na, nb) = (norm2(a), norm2(b));
    if na < ZERO_NORM || nb < ZERO_NORM {
        return;
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let cos = dot / (na * nb);
    for k in 0..a.len() {
        da[k] -= scale * (b[k] / (na * nb) - cos * a[k] / (na * na));
        db[k] -= scale * (a[k] / (na * nb) - cos * b[k] / (nb * nb));
    }
}

fn log_softmax_denominator(z: &[f64]) -> f64 {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Softmax cross-entropy against the uniform distribution over `ys`.
pub fn classification_loss(logits: &[f64], ys: &[usize]) -> f64 {
    let lse = log_softmax_denominator(logits);
    let w = 1.0 / ys.len() as f64;
    ys.iter().map(|&s| w * (lse - logits[s])).sum()
}

fn classification_grad(logits: &[f64], ys: &[usize], scale: f64, out: &mut [f64]) {
    let lse = log_softmax_denominator(logits);
    let w = 1.0 / ys.len() as f64;
    for (o, z) in out.iter_mut().zip(logits) {
        *o += scale * (z - lse).exp();
    }
    for &s in ys {
        out[s] -= scale * w;
    }
}

/// Unweighted term sums of one objective evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct TermBreakdown {
    pub cmul: f64,
    pub classification: f64,
    pub quantization: f64,
    /// `None` when `β = 0` (the term is not evaluated).
    pub pairing: Option<f64>,
    /// Number of zero-norm guard hits.
    pub degenerate: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Objective {
    pub total: f64,
    pub terms: TermBreakdown,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub f1: Matrix,
    pub f2: Matrix,
    pub logits1: Matrix,
    pub logits2: Matrix,
    /// Sum of both modalities' center gradients.
    pub centers: CenterMatrix,
}

pub fn total_objective(
    batch: &BatchActivations,
    labels: &LabelMatrix,
    coeffs: &CoefficientSet,
    centers: &CenterMatrix,
    weights: &LossWeights,
) -> Result<Objective> {
    Ok(evaluate(batch, labels, coeffs, centers, weights, false)?.0)
}

/// Objective value together with its gradient w.r.t. both modalities'
/// hash activations and logits and the shared centers.
pub fn gradients(
    batch: &BatchActivations,
    labels: &LabelMatrix,
    coeffs: &CoefficientSet,
    centers: &CenterMatrix,
    weights: &LossWeights,
) -> Result<(Objective, Gradients)> {
    let (obj, grads) = evaluate(batch, labels, coeffs, centers, weights, true)?;
    Ok((obj, grads.expect("gradients requested")))
}

fn evaluate(
    batch: &BatchActivations,
    labels: &LabelMatrix,
    coeffs: &CoefficientSet,
    centers: &CenterMatrix,
    weights: &LossWeights,
    want_grad: bool,
) -> Result<(Objective, Option<Gradients>)> {
    weights.validate()?;
    check_rows(&batch.f1, &batch.items, labels, coeffs, centers)?;
    check_rows(&batch.f2, &batch.items, labels, coeffs, centers)?;
    if batch.logits1.cols() != labels.num_labels() {
        return Err(Error::Shape(format!(
            "{} logits for {} labels",
            batch.logits1.cols(),
            labels.num_labels()
        )));
    }
    let (b, r, c) = (batch.len(), centers.code_len(), labels.num_labels());
    let w = weights;
    let mut terms = TermBreakdown {
        pairing: (w.beta != 0.0).then_some(0.0),
        ..TermBreakdown::default()
    };
    let mut grads = want_grad.then(|| Gradients {
        f1: Matrix::zeros(b, r),
        f2: Matrix::zeros(b, r),
        logits1: Matrix::zeros(b, c),
        logits2: Matrix::zeros(b, c),
        centers: CenterMatrix::zeros(r, c),
    });
    // Per-modality center gradients, summed at the end.
    let mut dc = [CenterMatrix::zeros(r, c), CenterMatrix::zeros(r, c)];

    for (row, &i) in batch.items.iter().enumerate() {
        let ys = labels.labels(i);
        for (m, dc_m) in dc.iter_mut().enumerate() {
            let (f, z) = if m == 0 {
                (batch.f1.row(row), batch.logits1.row(row))
            } else {
                (batch.f2.row(row), batch.logits2.row(row))
            };
            let unary_grad = grads.as_mut().map(|g| UnaryGrad {
                dh: if m == 0 { g.f1.row_mut(row) } else { g.f2.row_mut(row) },
                dc: dc_m,
                scale: 1.0,
            });
            terms.cmul += unary_item(f, ys, coeffs, i, centers, w.lambda, w.metric, unary_grad);

            if w.mu != 0.0 {
                terms.classification += classification_loss(z, ys);
            }
            if w.alpha != 0.0 {
                let lq = quantization_loss(f, w.quantization);
                terms.quantization += lq.value;
                terms.degenerate += usize::from(lq.degenerate);
            }
            if let Some(g) = grads.as_mut() {
                if w.mu != 0.0 {
                    let dz = if m == 0 {
                        g.logits1.row_mut(row)
                    } else {
                        g.logits2.row_mut(row)
                    };
                    classification_grad(z, ys, w.mu, dz);
                }
                if w.alpha != 0.0 {
                    let df = if m == 0 { g.f1.row_mut(row) } else { g.f2.row_mut(row) };
                    quantization_grad(f, w.quantization, w.alpha, df);
                }
            }
        }
        if let Some(pair) = terms.pairing.as_mut() {
            let (f1, f2) = (batch.f1.row(row), batch.f2.row(row));
            let p = pairing_loss(f1, f2);
            *pair += p.value;
            terms.degenerate += usize::from(p.degenerate);
            if let Some(g) = grads.as_mut() {
                let mut d1 = vec![0.0; r];
                let mut d2 = vec![0.0; r];
                pairing_grad(f1, f2, w.beta, &mut d1, &mut d2);
                g.f1.row_mut(row).iter_mut().zip(&d1).for_each(|(a, v)| *a += v);
                g.f2.row_mut(row).iter_mut().zip(&d2).for_each(|(a, v)| *a += v);
            }
        }
    }
    if let Some(g) = grads.as_mut() {
        let [d1, d2] = dc;
        g.centers = d1;
        g.centers.add_assign(&d2);
    }
    let total =
        terms.cmul + w.mu * terms.classification + w.alpha * terms.quantization + w.beta * terms.pairing.unwrap_or(0.0);
    Ok((Objective { total, terms }, grads))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coefficients::{estimate_coefficients, AnchorSet};
    use crate::rng;
    use proptest::prelude::*;
    use rand::Rng as _;

    fn approx(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    fn line_centers(values: &[f64]) -> CenterMatrix {
        CenterMatrix::from_columns(1, values.len(), values.to_vec()).unwrap()
    }

    #[test]
    fn hinge_examples() {
        assert_eq!(g_hinge(1.0, 1.0, 0.0), 0.0);
        assert_eq!(g_hinge(3.0, 1.0, 0.5), 2.5);
        assert_eq!(g_hinge(0.0, 5.0, 0.5), 0.0);
    }

    #[test]
    fn hinge_properties_on_random_samples() {
        let mut r = rng::seeded(11);
        for _ in 0..100_000 {
            let mut a = [r.random_range(-5.0..5.0), r.random_range(-5.0..5.0)];
            let mut bb = [r.random_range(-5.0..5.0), r.random_range(-5.0..5.0)];
            a.sort_by(f64::total_cmp);
            bb.sort_by(f64::total_cmp);
            let b = r.random_range(-5.0..5.0);
            let m = r.random_range(0.0..2.0);
            assert!(g_hinge(a[0], b, m) >= 0.0);
            let da = g_hinge(a[1], b, m) - g_hinge(a[0], b, m);
            assert!(da >= 0.0 && da <= a[1] - a[0] + 1e-12);
            let db = g_hinge(a[0], bb[0], m) - g_hinge(a[0], bb[1], m);
            assert!(db >= 0.0 && db <= bb[1] - bb[0] + 1e-12);
        }
    }

    #[test]
    fn center_softmax_examples() {
        assert_eq!(center_softmax_loss(&[3.0], 0, &line_centers(&[-1.0]), Metric::L2), 0.0);
        // Equidistant from all centers.
        let eq = line_centers(&[-1.0, 1.0]);
        assert!(approx(
            center_softmax_loss(&[0.0], 1, &eq, Metric::L2),
            2f64.ln(),
            1e-15
        ));
        // log(1 + e^{-2}) by hand: 0.1269280110429725.
        let lc = center_softmax_loss(&[0.0], 0, &line_centers(&[0.0, 2.0]), Metric::L2);
        assert!(approx(lc, 0.126_928_011_042_972_5, 1e-12));
        // No overflow for far-away centers.
        let far = center_softmax_loss(&[0.0], 0, &line_centers(&[1e4, 2e4]), Metric::L2);
        assert!(far.is_finite() && approx(far, 0.0, 1e-12));
    }

    #[test]
    fn quantization_examples() {
        assert_eq!(quantization_loss(&[1.0; 8], QuantForm::Abs).value, 0.0);
        let s = [2.5, -2.5, 2.5, 2.5, -2.5];
        assert!(quantization_loss(&s, QuantForm::Abs).value.abs() < 1e-15);
        let v = quantization_loss(&[1.0, 0.0], QuantForm::Abs).value;
        assert!(approx(v, 1.0 - 2f64.powf(-2.0 / 3.0), 1e-12));
        let z = quantization_loss(&[0.0; 4], QuantForm::Abs);
        assert!(z.degenerate && z.value == 1.0);
        // The signed numerator penalises negative entries.
        assert!(quantization_loss(&[-1.0, -1.0], QuantForm::Literal).value > 1.0);
    }

    #[test]
    fn pairing_examples() {
        assert!(approx(pairing_loss(&[2.0, 4.0], &[1.0, 2.0]).value, 0.0, 1e-15));
        assert!(approx(pairing_loss(&[1.0, 0.0], &[0.0, 3.0]).value, 1.0, 1e-15));
        assert!(approx(pairing_loss(&[1.0, -2.0], &[-1.0, 2.0]).value, 2.0, 1e-15));
        assert!(pairing_loss(&[0.0, 0.0], &[1.0, 2.0]).degenerate);
    }

    #[test]
    fn classification_examples() {
        assert!(approx(classification_loss(&[0.5; 4], &[2]), 4f64.ln(), 1e-15));
        assert!(classification_loss(&[0.0, 60.0, 0.0], &[1]) < 1e-20);
        assert!(approx(classification_loss(&[0.0; 3], &[0, 1]), 3f64.ln(), 1e-15));
    }

    fn three_items() -> LabelMatrix {
        LabelMatrix::from_sets(3, vec![vec![0, 1], vec![1], vec![2]]).unwrap()
    }

    #[test]
    fn unary_loss_hand_sum() {
        let y = three_items();
        let (coeffs, _) = estimate_coefficients(&y, &AnchorSet::all(3), false).unwrap();
        let centers = line_centers(&[0.0, 1.0, 3.0]);
        let h = Matrix::from_rows(&[vec![0.5], vec![1.5], vec![2.0]]).unwrap();
        let lambda = 0.3;
        // Nonzero coefficients: q(0,1)=1, q(1,1)=1, u(0,1)=1, u(1,1)=1, u(2,2)=2.
        let lc = |x: f64, s: usize| {
            let d = [x.abs(), (x - 1.0).abs(), (x - 3.0).abs()];
            d[s] + d.iter().map(|v| (-v).exp()).sum::<f64>().ln()
        };
        let expected = lc(0.5, 1) + lambda * 0.5 + lc(1.5, 1) + lambda * 0.5 + lambda * 2.0 * 1.0;
        let got = improved_unary_loss(&h, &[0, 1, 2], &y, &coeffs, &centers, lambda, Metric::L2).unwrap();
        assert!(approx(got, expected, 1e-12), "{got} vs {expected}");

        let zero = CoefficientSet::zeros(3, 3);
        assert_eq!(
            improved_unary_loss(&h, &[0, 1, 2], &y, &zero, &centers, lambda, Metric::L2).unwrap(),
            0.0
        );
    }

    #[test]
    fn single_label_single_center_is_zero() {
        let y = LabelMatrix::multiclass(1, &[0]).unwrap();
        let coeffs = CoefficientSet::from_parts(1, 1, vec![1.0], vec![0.0], 1, false).unwrap();
        let h = Matrix::from_rows(&[vec![4.0, -1.0]]).unwrap();
        let c = CenterMatrix::from_columns(2, 1, vec![0.0, 0.0]).unwrap();
        assert_eq!(
            improved_unary_loss(&h, &[0], &y, &coeffs, &c, 1.0, Metric::L2).unwrap(),
            0.0
        );
    }

    #[test]
    fn baseline_loss_matches_constant_coefficients() {
        let y = LabelMatrix::multiclass(3, &[0, 1, 2, 0]).unwrap();
        let ones = CoefficientSet::from_parts(
            4,
            3,
            {
                let mut q = vec![0.0; 12];
                for i in 0..4 {
                    q[i * 3 + y.labels(i)[0]] = 1.0;
                }
                q
            },
            {
                let mut u = vec![0.0; 12];
                for i in 0..4 {
                    u[i * 3 + y.labels(i)[0]] = 1.0;
                }
                u
            },
            4,
            false,
        )
        .unwrap();
        let h = Matrix::from_rows(&[vec![0.1, 0.2], vec![-0.3, 1.0], vec![0.7, 0.7], vec![0.0, -1.0]]).unwrap();
        let c = CenterMatrix::from_columns(2, 3, vec![1.0, 0.0, 0.0, 1.0, -1.0, -1.0]).unwrap();
        let items = [0, 1, 2, 3];
        let a = scul_loss_jcchb(&h, &items, &y, &c, 0.5, Metric::L2).unwrap();
        let b = improved_unary_loss(&h, &items, &y, &ones, &c, 0.5, Metric::L2).unwrap();
        assert_eq!(a, b);

        // λ = 0 leaves only the weighted softmax terms.
        let soft: f64 = items
            .iter()
            .map(|&i| center_softmax_loss(h.row(i), y.labels(i)[0], &c, Metric::L2))
            .sum();
        assert!(approx(
            scul_loss_jcchb(&h, &items, &y, &c, 0.0, Metric::L2).unwrap(),
            soft,
            1e-12
        ));
    }

    #[test]
    fn baseline_differs_from_improved_on_three_items() {
        let y = three_items();
        let (coeffs, _) = estimate_coefficients(&y, &AnchorSet::all(3), false).unwrap();
        let coeffs = crate::coefficients::rescale(&coeffs, &y).unwrap();
        let centers = line_centers(&[0.0, 1.0, 3.0]);
        let h = Matrix::from_rows(&[vec![0.5], vec![1.5], vec![2.0]]).unwrap();
        let items = [0, 1, 2];
        let a = scul_loss_jcchb(&h, &items, &y, &centers, 0.1, Metric::L2).unwrap();
        let b = improved_unary_loss(&h, &items, &y, &coeffs, &centers, 0.1, Metric::L2).unwrap();
        assert!((a - b).abs() > 1e-3);
    }

    pub(crate) fn random_batch(seed: u64, y: &LabelMatrix, r: usize) -> (BatchActivations, CenterMatrix) {
        let mut g = rng::seeded(seed);
        let (b, c) = (y.n(), y.num_labels());
        let mut rand_matrix = |rows, cols, std| Matrix::from_fn(rows, cols, |_, _| rng::normal(&mut g, std));
        let f1 = rand_matrix(b, r, 1.0);
        let f2 = rand_matrix(b, r, 1.0);
        let z1 = rand_matrix(b, c, 1.0);
        let z2 = rand_matrix(b, c, 1.0);
        let centers = CenterMatrix::from_columns(r, c, rand_matrix(c, r, 0.8).as_slice().to_vec()).unwrap();
        (
            BatchActivations::new(f1, f2, z1, z2, (0..b).collect()).unwrap(),
            centers,
        )
    }

    fn chain_labels() -> LabelMatrix {
        LabelMatrix::from_sets(4, vec![vec![0], vec![0, 1], vec![1, 3], vec![2], vec![3], vec![0, 2]]).unwrap()
    }

    #[test]
    fn cmul_is_sum_of_modalities() {
        let y = chain_labels();
        let (coeffs, _) = estimate_coefficients(&y, &AnchorSet::all(6), false).unwrap();
        let (batch, centers) = random_batch(5, &y, 4);
        let items = &batch.items;
        let sum = improved_unary_loss(&batch.f1, items, &y, &coeffs, &centers, 0.2, Metric::L2).unwrap()
            + improved_unary_loss(&batch.f2, items, &y, &coeffs, &centers, 0.2, Metric::L2).unwrap();
        let got = cmul(&batch, &y, &coeffs, &centers, 0.2, Metric::L2).unwrap();
        assert!(approx(got, sum, 1e-12 * sum.abs().max(1.0)));

        let mut same = batch.clone();
        same.f2 = same.f1.clone();
        let one = improved_unary_loss(&same.f1, items, &y, &coeffs, &centers, 0.2, Metric::L2).unwrap();
        assert_eq!(cmul(&same, &y, &coeffs, &centers, 0.2, Metric::L2).unwrap(), 2.0 * one);

        let zero = CoefficientSet::zeros(6, 4);
        assert_eq!(cmul(&batch, &y, &zero, &centers, 0.2, Metric::L2).unwrap(), 0.0);
    }

    #[test]
    fn total_objective_composition() {
        let y = chain_labels();
        let (coeffs, _) = estimate_coefficients(&y, &AnchorSet::all(6), false).unwrap();
        let (batch, centers) = random_batch(9, &y, 5);
        let w = LossWeights {
            lambda: 0.05,
            mu: 0.3,
            alpha: 0.7,
            beta: 0.4,
            ..LossWeights::default()
        };
        let obj = total_objective(&batch, &y, &coeffs, &centers, &w).unwrap();
        let cm = cmul(&batch, &y, &coeffs, &centers, w.lambda, w.metric).unwrap();
        let mut cls = 0.0;
        let mut quant = 0.0;
        let mut pair = 0.0;
        for b in 0..batch.len() {
            let ys = y.labels(batch.items[b]);
            cls += classification_loss(batch.logits1.row(b), ys) + classification_loss(batch.logits2.row(b), ys);
            quant += quantization_loss(batch.f1.row(b), QuantForm::Abs).value
                + quantization_loss(batch.f2.row(b), QuantForm::Abs).value;
            pair += pairing_loss(batch.f1.row(b), batch.f2.row(b)).value;
        }
        let expected = cm + w.mu * cls + w.alpha * quant + w.beta * pair;
        assert!(approx(obj.total, expected, 1e-12 * expected.abs()));
        assert!(approx(obj.terms.pairing.unwrap(), pair, 1e-12));

        let bare = LossWeights {
            mu: 0.0,
            alpha: 0.0,
            beta: 0.0,
            ..w
        };
        let only = total_objective(&batch, &y, &coeffs, &centers, &bare).unwrap();
        assert_eq!(only.total, cm);
        assert_eq!(only.terms.pairing, None);
    }

    #[test]
    fn total_objective_is_permutation_equivariant() {
        let y = chain_labels();
        let (coeffs, _) = estimate_coefficients(&y, &AnchorSet::all(6), false).unwrap();
        let (batch, centers) = random_batch(21, &y, 3);
        let perm = [4, 2, 5, 0, 1, 3];
        let pick =
            |m: &Matrix| Matrix::from_rows(&perm.iter().map(|&p| m.row(p).to_vec()).collect::<Vec<_>>()).unwrap();
        let permuted = BatchActivations::new(
            pick(&batch.f1),
            pick(&batch.f2),
            pick(&batch.logits1),
            pick(&batch.logits2),
            perm.to_vec(),
        )
        .unwrap();
        let w = LossWeights::default();
        let a = total_objective(&batch, &y, &coeffs, &centers, &w).unwrap().total;
        let b = total_objective(&permuted, &y, &coeffs, &centers, &w).unwrap().total;
        assert!(approx(a, b, 1e-12 * a.abs()));
    }

    #[test]
    fn shape_errors() {
        let y = chain_labels();
        let (coeffs, _) = estimate_coefficients(&y, &AnchorSet::all(6), false).unwrap();
        let (batch, centers) = random_batch(1, &y, 3);
        let narrow = CenterMatrix::zeros(2, 4);
        assert!(cmul(&batch, &y, &coeffs, &narrow, 0.1, Metric::L2).is_err());
        let wrong = CoefficientSet::zeros(5, 4);
        assert!(cmul(&batch, &y, &wrong, &centers, 0.1, Metric::L2).is_err());
        let h = Matrix::zeros(2, 3);
        assert!(improved_unary_loss(&h, &[0], &y, &coeffs, &centers, 0.1, Metric::L2).is_err());
    }

    /// Central differences of `f` at `x`.
    fn numeric_grad(x: &[f64], step: f64, f: impl Fn(&[f64]) -> f64) -> Vec<f64> {
        let mut p = x.to_vec();
        (0..x.len())
            .map(|k| {
                p[k] = x[k] + step;
                let up = f(&p);
                p[k] = x[k] - step;
                let down = f(&p);
                p[k] = x[k];
                (up - down) / (2.0 * step)
            })
            .collect()
    }

    fn rel_err(a: f64, n: f64) -> f64 {
        (a - n).abs() / a.abs().max(n.abs()).max(1.0)
    }

    #[test]
    fn activation_and_center_gradients_match_finite_differences() {
        let y = chain_labels();
        let (coeffs, _) = estimate_coefficients(&y, &AnchorSet::all(6), false).unwrap();
        let coeffs = crate::coefficients::rescale(&coeffs, &y).unwrap();
        let w = LossWeights {
            lambda: 0.3,
            mu: 0.5,
            alpha: 0.8,
            beta: 0.6,
            ..LossWeights::default()
        };
        for seed in 0..20 {
            let (batch, centers) = random_batch(100 + seed, &y, 4);
            let (_, g) = gradients(&batch, &y, &coeffs, &centers, &w).unwrap();
            let eval = |b: &BatchActivations, c: &CenterMatrix| total_objective(b, &y, &coeffs, c, &w).unwrap().total;

            let num_f1 = numeric_grad(batch.f1.as_slice(), 1e-5, |x| {
                let mut b = batch.clone();
                b.f1 = Matrix::from_vec(b.f1.rows(), b.f1.cols(), x.to_vec()).unwrap();
                eval(&b, &centers)
            });
            let num_z2 = numeric_grad(batch.logits2.as_slice(), 1e-5, |x| {
                let mut b = batch.clone();
                b.logits2 = Matrix::from_vec(b.logits2.rows(), b.logits2.cols(), x.to_vec()).unwrap();
                eval(&b, &centers)
            });
            let num_c = numeric_grad(centers.as_slice(), 1e-5, |x| {
                eval(&batch, &CenterMatrix::from_columns(4, 4, x.to_vec()).unwrap())
            });
            for (a, n) in
                g.f1.as_slice()
                    .iter()
                    .zip(&num_f1)
                    .chain(g.logits2.as_slice().iter().zip(&num_z2))
                    .chain(g.centers.as_slice().iter().zip(&num_c))
            {
                assert!(rel_err(*a, *n) <= 1e-6, "seed {seed}: analytic {a} vs numeric {n}");
            }
        }
    }

    #[test]
    fn zero_coefficients_give_zero_gradients() {
        let y = chain_labels();
        let (batch, centers) = random_batch(3, &y, 4);
        let w = LossWeights {
            mu: 0.0,
            alpha: 0.0,
            beta: 0.0,
            ..LossWeights::default()
        };
        let (_, g) = gradients(&batch, &y, &CoefficientSet::zeros(6, 4), &centers, &w).unwrap();
        assert!(g
            .f1
            .as_slice()
            .iter()
            .chain(g.f2.as_slice())
            .chain(g.centers.as_slice())
            .all(|&v| v == 0.0));
    }

    #[test]
    fn quantization_gradient_vanishes_at_equal_magnitudes() {
        let mut out = vec![0.0; 6];
        quantization_grad(&[1.0; 6], QuantForm::Abs, 1.0, &mut out);
        assert!(out.iter().all(|v| v.abs() < 1e-15), "{out:?}");
    }

    #[test]
    fn shared_centers_double_when_modalities_coincide() {
        let y = chain_labels();
        let (coeffs, _) = estimate_coefficients(&y, &AnchorSet::all(6), false).unwrap();
        let (mut batch, centers) = random_batch(8, &y, 4);
        batch.f2 = batch.f1.clone();
        let w = LossWeights {
            mu: 0.0,
            alpha: 0.0,
            beta: 0.0,
            ..LossWeights::default()
        };
        let (_, g) = gradients(&batch, &y, &coeffs, &centers, &w).unwrap();
        let (_, _, single) =
            unary_gradients(&batch.f1, &batch.items, &y, &coeffs, &centers, w.lambda, w.metric).unwrap();
        for (a, b) in g.centers.as_slice().iter().zip(single.as_slice()) {
            assert_eq!(*a, 2.0 * b);
        }
    }

    proptest! {
        #[test]
        fn softmax_dominates_hinge(
            h in proptest::collection::vec(-3.0f64..3.0, 3),
            cs in proptest::collection::vec(-3.0f64..3.0, 12),
            s in 0usize..4, t in 0usize..4, l1 in any::<bool>(),
        ) {
            prop_assume!(s != t);
            let metric = if l1 { Metric::L1 } else { Metric::L2 };
            let centers = CenterMatrix::from_columns(3, 4, cs).unwrap();
            let lc = center_softmax_loss(&h, s, &centers, metric);
            let g = g_hinge(metric.distance(&h, centers.center(s)), metric.distance(&h, centers.center(t)), 0.0);
            prop_assert!(lc >= g - 1e-12);
        }

        #[test]
        fn softmax_is_translation_invariant(
            h in proptest::collection::vec(-3.0f64..3.0, 3),
            cs in proptest::collection::vec(-3.0f64..3.0, 9),
            shift in proptest::collection::vec(-10.0f64..10.0, 3),
            s in 0usize..3,
        ) {
            let centers = CenterMatrix::from_columns(3, 3, cs.clone()).unwrap();
            let moved: Vec<f64> = cs.iter().enumerate().map(|(k, v)| v + shift[k % 3]).collect();
            let moved = CenterMatrix::from_columns(3, 3, moved).unwrap();
            let hm: Vec<f64> = h.iter().zip(&shift).map(|(a, b)| a + b).collect();
            let a = center_softmax_loss(&h, s, &centers, Metric::L2);
            let b = center_softmax_loss(&hm, s, &moved, Metric::L2);
            prop_assert!((a - b).abs() <= 1e-9);
        }

        #[test]
        fn quantization_is_scale_invariant_and_bounded(
            f in proptest::collection::vec(-5.0f64..5.0, 1..40),
            c in 1e-3f64..1e3,
        ) {
            let base = quantization_loss(&f, QuantForm::Abs);
            prop_assume!(!base.degenerate);
            let scaled: Vec<f64> = f.iter().map(|v| v * c).collect();
            let other = quantization_loss(&scaled, QuantForm::Abs).value;
            prop_assert!((base.value - other).abs() <= 1e-12);
            let upper = 1.0 - (f.len() as f64).powf(-2.0 / 3.0);
            prop_assert!(base.value >= -1e-15 && base.value <= upper + 1e-12);
        }
    }
}
