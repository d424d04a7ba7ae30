//! Flat `key = value` run configs.
//!
//! One key per line, `#` starts a comment, unknown and repeated keys are
//! rejected. Every key has a default except the dataset shape (`n`,
//! `num_labels`, `d1`, `d2`), needed only by generation, and the sweep keys,
//! needed only by sweeps. The derived seeds `split_seed`, `anchor_seed` and
//! `train_seed` fall back to `seed`; [`RunConfig::resolved`] writes them out
//! so a resolved config reproduces its run on its own.

use std::fmt::Write as _;
use std::path::Path;

use crate::bounds::CertifyPlan;
use crate::coefficients::AnchorSet;
use crate::data::{LabelModel, SplitSpec, SynthSpec};
use crate::error::{Error, Result};
use crate::losses::{LossWeights, Metric, QuantForm};
use crate::trainer::{Mode, TrainConfig};

/// Every accepted key, in the order the resolved config lists them.
pub const KEYS: &[&str] = &[
    "seed",
    "n",
    "num_labels",
    "d1",
    "d2",
    "label_model",
    "p",
    "p_root",
    "p_child",
    "noise_sigma",
    "n_query",
    "n_train",
    "split_seed",
    "anchor_l",
    "anchor_seed",
    "epochs",
    "batch_size",
    "lr_backbone",
    "lr_head",
    "momentum",
    "weight_decay",
    "lambda",
    "mu",
    "alpha",
    "beta",
    "margin",
    "metric",
    "quant_form",
    "hidden_dim",
    "code_len",
    "auto_alpha",
    "alpha_target",
    "mode",
    "train_seed",
    "ks",
    "trials",
    "max_n",
    "max_labels",
    "max_code_len",
    "corrupt",
    "sweep_param",
    "sweep_values",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LabelKind {
    Uniform,
    Chain,
    Multiclass,
}

impl LabelKind {
    pub fn name(self) -> &'static str {
        match self {
            LabelKind::Uniform => "uniform",
            LabelKind::Chain => "chain",
            LabelKind::Multiclass => "multiclass",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepParam {
    Lambda,
    Beta,
    AnchorL,
}

impl SweepParam {
    pub fn name(self) -> &'static str {
        match self {
            SweepParam::Lambda => "lambda",
            SweepParam::Beta => "beta",
            SweepParam::AnchorL => "anchor_l",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub n: Option<usize>,
    pub num_labels: Option<usize>,
    pub d1: Option<usize>,
    pub d2: Option<usize>,
    pub label_model: LabelKind,
    pub p: f64,
    pub p_root: f64,
    pub p_child: f64,
    pub noise_sigma: f64,
    pub n_query: usize,
    /// 0 takes every database item.
    pub n_train: usize,
    pub split_seed: Option<u64>,
    /// 0 takes every training item, which gives the exact coefficients.
    pub anchor_l: usize,
    pub anchor_seed: Option<u64>,
    pub train: TrainConfig,
    pub train_seed: Option<u64>,
    pub ks: Vec<usize>,
    pub certify: CertifyPlan,
    pub sweep_param: Option<SweepParam>,
    pub sweep_values: Vec<f64>,
    seen: Vec<&'static str>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            n: None,
            num_labels: None,
            d1: None,
            d2: None,
            label_model: LabelKind::Uniform,
            p: 0.5,
            p_root: 0.5,
            p_child: 0.6,
            noise_sigma: 1.0,
            n_query: 100,
            n_train: 0,
            split_seed: None,
            anchor_l: 0,
            anchor_seed: None,
            train: TrainConfig::default(),
            train_seed: None,
            ks: vec![100],
            certify: CertifyPlan::default(),
            sweep_param: None,
            sweep_values: Vec::new(),
            seen: Vec::new(),
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("bad value {value:?} for key `{key}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(Error::Config(format!(
            "bad value {value:?} for key `{key}` (expected true or false)"
        ))),
    }
}

fn parse_list<T: std::str::FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    value
        .split(',')
        .map(str::trim)
        .filter(|v| !v.is_empty())
        .map(|v| parse(key, v))
        .collect()
}

fn join<T: ToString>(values: &[T]) -> String {
    values.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

fn missing(key: &str) -> Error {
    Error::Config(format!("missing required key `{key}`"))
}

fn canonical(key: &str) -> Result<&'static str> {
    KEYS.iter()
        .copied()
        .find(|k| *k == key)
        .ok_or_else(|| Error::Config(format!("unknown key `{key}`")))
}

impl RunConfig {
    /// Parses config text; keys may appear at most once.
    pub fn parse(text: &str) -> Result<Self> {
        let mut config = Self::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", lineno + 1)))?;
            let key = canonical(key.trim())?;
            if config.seen.contains(&key) {
                return Err(Error::Config(format!("line {}: key `{key}` repeated", lineno + 1)));
            }
            config.set(key, value.trim())?;
        }
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Applies a `key=value` override.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (key, value) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override {assignment:?} is not `key=value`")))?;
        self.set(key.trim(), value.trim())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let key = canonical(key)?;
        let t = &mut self.train;
        let w = &mut t.weights;
        let c = &mut self.certify;
        match key {
            "seed" => self.seed = parse(key, value)?,
            "n" => self.n = Some(parse(key, value)?),
            "num_labels" => self.num_labels = Some(parse(key, value)?),
            "d1" => self.d1 = Some(parse(key, value)?),
            "d2" => self.d2 = Some(parse(key, value)?),
            "label_model" => {
                self.label_model = match value {
                    "uniform" => LabelKind::Uniform,
                    "chain" => LabelKind::Chain,
                    "multiclass" => LabelKind::Multiclass,
                    _ => {
                        return Err(Error::Config(format!(
                            "bad value {value:?} for key `label_model` (expected uniform, chain or multiclass)"
                        )))
                    }
                }
            }
            "p" => self.p = parse(key, value)?,
            "p_root" => self.p_root = parse(key, value)?,
            "p_child" => self.p_child = parse(key, value)?,
            "noise_sigma" => self.noise_sigma = parse(key, value)?,
            "n_query" => self.n_query = parse(key, value)?,
            "n_train" => self.n_train = parse(key, value)?,
            "split_seed" => self.split_seed = Some(parse(key, value)?),
            "anchor_l" => self.anchor_l = parse(key, value)?,
            "anchor_seed" => self.anchor_seed = Some(parse(key, value)?),
            "epochs" => t.epochs = parse(key, value)?,
            "batch_size" => t.batch_size = parse(key, value)?,
            "lr_backbone" => t.lr_backbone = parse(key, value)?,
            "lr_head" => t.lr_head = parse(key, value)?,
            "momentum" => t.momentum = parse(key, value)?,
            "weight_decay" => t.weight_decay = parse(key, value)?,
            "lambda" => w.lambda = parse(key, value)?,
            "mu" => w.mu = parse(key, value)?,
            "alpha" => w.alpha = parse(key, value)?,
            "beta" => w.beta = parse(key, value)?,
            "margin" => w.margin = parse(key, value)?,
            "metric" => w.metric = value.parse::<Metric>()?,
            "quant_form" => {
                w.quantization = match value {
                    "abs" => QuantForm::Abs,
                    "literal" => QuantForm::Literal,
                    _ => {
                        return Err(Error::Config(format!(
                            "bad value {value:?} for key `quant_form` (expected abs or literal)"
                        )))
                    }
                }
            }
            "hidden_dim" => t.hidden_dim = parse(key, value)?,
            "code_len" => t.code_len = parse(key, value)?,
            "auto_alpha" => t.auto_alpha = parse_bool(key, value)?,
            "alpha_target" => t.alpha_target = parse(key, value)?,
            "mode" => t.mode = value.parse::<Mode>()?,
            "train_seed" => self.train_seed = Some(parse(key, value)?),
            "ks" => self.ks = parse_list(key, value)?,
            "trials" => c.trials = parse(key, value)?,
            "max_n" => c.max_n = parse(key, value)?,
            "max_labels" => c.max_labels = parse(key, value)?,
            "max_code_len" => c.max_code_len = parse(key, value)?,
            "corrupt" => c.corrupt = parse(key, value)?,
            "sweep_param" => {
                self.sweep_param = Some(match value {
                    "lambda" => SweepParam::Lambda,
                    "beta" => SweepParam::Beta,
                    "anchor_l" => SweepParam::AnchorL,
                    _ => {
                        return Err(Error::Config(format!(
                            "bad value {value:?} for key `sweep_param` (expected lambda, beta or anchor_l)"
                        )))
                    }
                })
            }
            "sweep_values" => self.sweep_values = parse_list(key, value)?,
            _ => unreachable!("every key in KEYS is handled"),
        }
        if !self.seen.contains(&key) {
            self.seen.push(key);
        }
        Ok(())
    }

    pub fn split_seed(&self) -> u64 {
        self.split_seed.unwrap_or(self.seed)
    }

    pub fn anchor_seed(&self) -> u64 {
        self.anchor_seed.unwrap_or(self.seed)
    }

    pub fn train_seed(&self) -> u64 {
        self.train_seed.unwrap_or(self.seed)
    }

    pub fn synth_spec(&self) -> Result<SynthSpec> {
        let label_model = match self.label_model {
            LabelKind::Uniform => LabelModel::Uniform { p: self.p },
            LabelKind::Chain => LabelModel::Chain {
                p_root: self.p_root,
                p_child: self.p_child,
            },
            LabelKind::Multiclass => LabelModel::Multiclass,
        };
        Ok(SynthSpec {
            n: self.n.ok_or_else(|| missing("n"))?,
            num_labels: self.num_labels.ok_or_else(|| missing("num_labels"))?,
            d1: self.d1.ok_or_else(|| missing("d1"))?,
            d2: self.d2.ok_or_else(|| missing("d2"))?,
            label_model,
            noise_sigma: self.noise_sigma,
            seed: self.seed,
        })
    }

    /// Split of an `n`-item dataset.
    pub fn split_spec(&self, n: usize) -> SplitSpec {
        let n_train = if self.n_train == 0 {
            n.saturating_sub(self.n_query)
        } else {
            self.n_train
        };
        SplitSpec {
            n_query: self.n_query,
            n_train,
            seed: self.split_seed(),
        }
    }

    /// Anchors over `n` training items; `anchor_l` of 0 or `n` takes all.
    pub fn anchor_set(&self, n: usize) -> Result<AnchorSet> {
        if self.anchor_l == 0 || self.anchor_l == n {
            Ok(AnchorSet::all(n))
        } else {
            AnchorSet::sample(n, self.anchor_l, self.anchor_seed())
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.train_seed(),
            ..self.train.clone()
        }
    }

    pub fn certify_plan(&self) -> CertifyPlan {
        CertifyPlan {
            seed: self.seed,
            ..self.certify
        }
    }

    /// The sweep keys, both required.
    pub fn sweep(&self) -> Result<(SweepParam, &[f64])> {
        let param = self.sweep_param.ok_or_else(|| missing("sweep_param"))?;
        if self.sweep_values.is_empty() {
            return Err(Error::Config("`sweep_values` is empty".into()));
        }
        Ok((param, &self.sweep_values))
    }

    /// Full config text with every default and derived seed spelled out.
    /// Unset required keys are left out.
    pub fn resolved(&self) -> String {
        let t = self.train_config();
        let w: LossWeights = t.weights;
        let c = &self.certify;
        let mut out = format!("# jcch {} resolved config\n", env!("CARGO_PKG_VERSION"));
        let mut line = |k: &str, v: String| writeln!(out, "{k} = {v}").expect("write to String");
        line("seed", self.seed.to_string());
        for (k, v) in [
            ("n", self.n),
            ("num_labels", self.num_labels),
            ("d1", self.d1),
            ("d2", self.d2),
        ] {
            if let Some(v) = v {
                line(k, v.to_string());
            }
        }
        line("label_model", self.label_model.name().into());
        line("p", self.p.to_string());
        line("p_root", self.p_root.to_string());
        line("p_child", self.p_child.to_string());
        line("noise_sigma", self.noise_sigma.to_string());
        line("n_query", self.n_query.to_string());
        line("n_train", self.n_train.to_string());
        line("split_seed", self.split_seed().to_string());
        line("anchor_l", self.anchor_l.to_string());
        line("anchor_seed", self.anchor_seed().to_string());
        line("epochs", t.epochs.to_string());
        line("batch_size", t.batch_size.to_string());
        line("lr_backbone", t.lr_backbone.to_string());
        line("lr_head", t.lr_head.to_string());
        line("momentum", t.momentum.to_string());
        line("weight_decay", t.weight_decay.to_string());
        line("lambda", w.lambda.to_string());
        line("mu", w.mu.to_string());
        line("alpha", w.alpha.to_string());
        line("beta", w.beta.to_string());
        line("margin", w.margin.to_string());
        line("metric", w.metric.name().to_ascii_lowercase());
        let quant = match w.quantization {
            QuantForm::Abs => "abs",
            QuantForm::Literal => "literal",
        };
        line("quant_form", quant.into());
        line("hidden_dim", t.hidden_dim.to_string());
        line("code_len", t.code_len.to_string());
        line("auto_alpha", t.auto_alpha.to_string());
        line("alpha_target", t.alpha_target.to_string());
        line("mode", t.mode.name().into());
        line("train_seed", t.seed.to_string());
        line("ks", join(&self.ks));
        line("trials", c.trials.to_string());
        line("max_n", c.max_n.to_string());
        line("max_labels", c.max_labels.to_string());
        line("max_code_len", c.max_code_len.to_string());
        line("corrupt", c.corrupt.to_string());
        if let Some(p) = self.sweep_param {
            line("sweep_param", p.name().into());
        }
        if !self.sweep_values.is_empty() {
            line("sweep_values", join(&self.sweep_values));
        }
        out
    }
}
