//! Tuned comparison of anchor-estimated coefficients against the
//! constant-coefficient baseline.
//!
//! Each mode gets its own learning rate and unary weight, picked on a
//! validation split carved from the training items. The winners are refit on
//! the whole training set and scored on the held-out query set, so neither
//! mode is judged at the other's operating point.

use crate::coefficients::{estimate_coefficients, rescale, AnchorSet, CoefficientSet};
use crate::data::{split_n, CrossModalDataset, SplitSpec};
use crate::error::{invalid, Result};
use crate::retrieval::EvalReport;
use crate::trainer::{evaluate_cross_modal, fit, Mode, TrainConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct AblationPlan {
    pub learning_rates: Vec<f64>,
    pub lambdas: Vec<f64>,
    /// Training items held out for selection.
    pub n_val: usize,
    pub ks: Vec<usize>,
}

impl Default for AblationPlan {
    fn default() -> Self {
        Self {
            learning_rates: vec![0.02, 0.05],
            lambdas: vec![0.01, 0.03, 0.1],
            n_val: 100,
            ks: vec![100],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModeOutcome {
    pub mode: Mode,
    pub learning_rate: f64,
    pub lambda: f64,
    /// Mean of the two validation MAPs at the chosen point.
    pub val_map: f64,
    pub test: [EvalReport; 2],
}

impl ModeOutcome {
    pub fn maps(&self) -> [f64; 2] {
        [self.test[0].map, self.test[1].map]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationOutcome {
    pub jcch: ModeOutcome,
    pub baseline: ModeOutcome,
}

impl AblationOutcome {
    /// Test MAP of the estimated coefficients minus the baseline, per direction.
    pub fn map_gain(&self) -> [f64; 2] {
        let (a, b) = (self.jcch.maps(), self.baseline.maps());
        [a[0] - b[0], a[1] - b[1]]
    }
}

fn train_coefficients(train: &CrossModalDataset) -> Result<CoefficientSet> {
    let (coeffs, _) = estimate_coefficients(train.labels(), &AnchorSet::all(train.n()), false)?;
    rescale(&coeffs, train.labels())
}

fn with_point(base: &TrainConfig, mode: Mode, lr: f64, lambda: f64) -> TrainConfig {
    let mut config = base.clone();
    config.mode = mode;
    config.lr_backbone = lr;
    config.lr_head = lr;
    config.weights.lambda = lambda;
    config
}

/// Runs the selection and final comparison; `base` supplies every setting
/// outside the grid, and its seed also fixes the validation split.
pub fn run_ablation(
    train: &CrossModalDataset,
    query: &CrossModalDataset,
    db: &CrossModalDataset,
    base: &TrainConfig,
    plan: &AblationPlan,
) -> Result<AblationOutcome> {
    if plan.learning_rates.is_empty() || plan.lambdas.is_empty() {
        return Err(invalid("ablation plan", "empty grid"));
    }
    let parts = split_n(
        train.n(),
        &SplitSpec {
            n_query: plan.n_val,
            n_train: train.n() - plan.n_val.min(train.n()),
            seed: base.seed,
        },
    )?;
    let val = train.subset(&parts.query)?;
    let fit_set = train.subset(&parts.train)?;
    let fit_coeffs = train_coefficients(&fit_set)?;
    let full_coeffs = train_coefficients(train)?;

    let run_mode = |mode: Mode| -> Result<ModeOutcome> {
        let mut best: Option<(f64, f64, f64)> = None;
        for &lr in &plan.learning_rates {
            for &lambda in &plan.lambdas {
                let config = with_point(base, mode, lr, lambda);
                let (params, _) = fit(&fit_set, &fit_coeffs, &config)?;
                let [a, b] = evaluate_cross_modal(&params, &val, &fit_set, &plan.ks)?;
                let score = 0.5 * (a.map + b.map);
                if best.is_none_or(|(s, _, _)| score > s) {
                    best = Some((score, lr, lambda));
                }
            }
        }
        let (val_map, learning_rate, lambda) = best.expect("non-empty grid");
        let config = with_point(base, mode, learning_rate, lambda);
        let (params, _) = fit(train, &full_coeffs, &config)?;
        let test = evaluate_cross_modal(&params, query, db, &plan.ks)?;
        Ok(ModeOutcome {
            mode,
            learning_rate,
            lambda,
            val_map,
            test,
        })
    };
    Ok(AblationOutcome {
        jcch: run_mode(Mode::Jcch)?,
        baseline: run_mode(Mode::JcchB)?,
    })
}
