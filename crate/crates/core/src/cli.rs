//! Command drivers behind the `jcch` binary.
//!
//! Every command writes into its own output directory, refuses a non-empty
//! one unless forced, and leaves a `config.resolved` next to its outputs.
//! Runs are deterministic given that file.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::bounds::{certify, Certification};
use crate::coefficients::{estimate_coefficients, rescale, CoefficientSet};
use crate::config::{RunConfig, SweepParam};
use crate::data::{gen_synthetic, split, CrossModalDataset};
use crate::error::{invalid, Error, Result};
use crate::io;
use crate::retrieval::{self, Direction, EvalReport, HashCodeSet};
use crate::trainer::{encode_features, evaluate_cross_modal, fit, Modality, Mode, TrainReport};

pub const RESOLVED_CONFIG: &str = "config.resolved";
pub const DATASET_FILE: &str = "dataset.jccd";
pub const SPLIT_FILES: [&str; 3] = ["train.jccd", "query.jccd", "db.jccd"];
pub const COEFFS_FILE: &str = "coeffs.jccf";
pub const MODEL_FILE: &str = "model.jccm";
pub const TRAIN_CSV: &str = "train.csv";
pub const CERTIFY_CSV: &str = "certify.csv";
pub const EVAL_CSV: &str = "eval.csv";
pub const SWEEP_CSV: &str = "sweep.csv";
pub const SWEEP_JSON: &str = "sweep.json";

/// A final-epoch mean `‖F‖` below this fraction of the sweep's first point
/// counts as shrinking.
pub const SHRINK_RATIO: f64 = 0.5;

/// Code file for one side of the split and one modality.
pub fn codes_file(side: &str, modality: Modality) -> String {
    let m = match modality {
        Modality::One => 1,
        Modality::Two => 2,
    };
    format!("codes_{side}_m{m}.jccb")
}

#[derive(Debug, Parser)]
#[command(name = "jcch", version, about = "Joint cluster cross-modal hashing experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// Config file of `key = value` lines.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one config key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Shorthand for `--set seed=N`.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Write into a non-empty output directory.
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum DirectionArg {
    #[value(name = "1to2")]
    OneToTwo,
    #[value(name = "2to1")]
    TwoToOne,
    Both,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic two-modality dataset and its train/query/db split.
    Gen {
        #[command(flatten)]
        common: Common,
    },
    /// Import a CSV dataset and split it like `gen`.
    Import {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        csv: PathBuf,
        /// Label count; defaults to one past the largest label id.
        #[arg(long)]
        num_labels: Option<usize>,
    },
    /// Estimate the bound coefficients of a dataset from `anchor_l` anchors.
    Coeffs {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        dataset: PathBuf,
    },
    /// Check the unary upper bounds on seeded random instances.
    Certify {
        #[command(flatten)]
        common: Common,
        /// Multiply every coefficient by this factor (a negative control when < 1).
        #[arg(long)]
        corrupt: Option<f64>,
    },
    /// Train both encoders and the shared centers.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        dataset: PathBuf,
        /// Coefficient file; not needed with `mode = jcch-b`.
        #[arg(long)]
        coeffs: Option<PathBuf>,
    },
    /// Write sign codes of a query and a database set in both modalities.
    Encode {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        query: PathBuf,
        #[arg(long)]
        db: PathBuf,
    },
    /// MAP and precision@k from the code files written by `encode`.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Directory holding the code files.
        #[arg(long)]
        codes: PathBuf,
        /// Dataset supplying the query labels.
        #[arg(long)]
        query: PathBuf,
        /// Dataset supplying the database labels.
        #[arg(long)]
        db: PathBuf,
        #[arg(long, value_enum, default_value = "both")]
        direction: DirectionArg,
    },
    /// Repeat split, coefficients, training and evaluation over `sweep_values`.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        dataset: PathBuf,
    },
}

/// Exit status for an error: 2 for file and I/O problems, 1 otherwise.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Io(_)
        | Error::Csv(_)
        | Error::Format { .. }
        | Error::UnsupportedVersion { .. }
        | Error::Truncated(_) => 2,
        _ => 1,
    }
}

/// Loads the config file, applies `--seed` and then `--set` overrides.
pub fn load_config(common: &Common) -> Result<RunConfig> {
    let mut config = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        config.seed = seed;
    }
    for o in &common.overrides {
        config.apply_override(o)?;
    }
    Ok(config)
}

/// Creates `out`, refusing a non-empty directory unless `force`.
pub fn prepare_out(out: &Path, force: bool) -> Result<()> {
    if out.exists() {
        if !out.is_dir() {
            return Err(invalid(
                "output directory",
                format!("{} is not a directory", out.display()),
            ));
        }
        if !force && fs::read_dir(out)?.next().is_some() {
            return Err(invalid(
                "output directory",
                format!("{} is not empty (pass --force to write into it)", out.display()),
            ));
        }
    }
    fs::create_dir_all(out)?;
    Ok(())
}

fn start(config: &RunConfig, out: &Path, force: bool) -> Result<()> {
    prepare_out(out, force)?;
    fs::write(out.join(RESOLVED_CONFIG), config.resolved())?;
    Ok(())
}

fn write_split(ds: &CrossModalDataset, config: &RunConfig, out: &Path) -> Result<()> {
    io::save_dataset(&out.join(DATASET_FILE), ds)?;
    if config.n_query == 0 {
        return Ok(());
    }
    let parts = split(ds, &config.split_spec(ds.n()))?;
    for (name, idx) in SPLIT_FILES.iter().zip([&parts.train, &parts.query, &parts.db]) {
        io::save_dataset(&out.join(name), &ds.subset(idx)?)?;
    }
    Ok(())
}

/// Writes the dataset and, unless `n_query = 0`, its train/query/db split.
pub fn cmd_gen(config: &RunConfig, out: &Path, force: bool) -> Result<CrossModalDataset> {
    let spec = config.synth_spec()?;
    spec.validate()?;
    start(config, out, force)?;
    let ds = gen_synthetic(&spec)?;
    write_split(&ds, config, out)?;
    Ok(ds)
}

pub fn cmd_import(
    config: &RunConfig,
    csv: &Path,
    num_labels: Option<usize>,
    out: &Path,
    force: bool,
) -> Result<CrossModalDataset> {
    let ds = io::import_csv(fs::File::open(csv)?, num_labels)?;
    start(config, out, force)?;
    write_split(&ds, config, out)?;
    Ok(ds)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoeffsOutcome {
    pub coeffs: CoefficientSet,
    /// Set when the labels admit no (positive, negative) triplet.
    pub warning: Option<String>,
}

/// Estimates unrescaled coefficients; training rescales them.
pub fn cmd_coeffs(config: &RunConfig, dataset: &Path, out: &Path, force: bool) -> Result<CoeffsOutcome> {
    let ds = io::load_dataset(dataset)?;
    let anchors = config.anchor_set(ds.n())?;
    start(config, out, force)?;
    let (coeffs, _) = estimate_coefficients(ds.labels(), &anchors, false)?;
    let warning = coeffs
        .q_values()
        .iter()
        .all(|&q| q == 0.0)
        .then(|| "labels admit no (positive, negative) triplet; all coefficients are zero".to_string());
    io::save_coefficients(&out.join(COEFFS_FILE), &coeffs)?;
    Ok(CoeffsOutcome { coeffs, warning })
}

/// Writes `certify.csv`; the caller maps violations to exit status 1.
pub fn cmd_certify(config: &RunConfig, out: &Path, force: bool) -> Result<Certification> {
    start(config, out, force)?;
    let cert = certify(&config.certify_plan())?;
    cert.write_csv(fs::File::create(out.join(CERTIFY_CSV))?)?;
    Ok(cert)
}

fn training_coefficients(config: &RunConfig, ds: &CrossModalDataset, coeffs: Option<&Path>) -> Result<CoefficientSet> {
    match (config.train.mode, coeffs) {
        (Mode::JcchB, _) => Ok(CoefficientSet::constant_baseline(ds.labels())),
        (Mode::Jcch, None) => Err(Error::Config("missing required `--coeffs` for mode jcch".into())),
        (Mode::Jcch, Some(path)) => {
            let c = io::load_coefficients(path)?;
            if c.rescaled() {
                Ok(c)
            } else {
                rescale(&c, ds.labels())
            }
        }
    }
}

/// Writes `model.jccm` and the per-epoch `train.csv`. On divergence the
/// report up to the last finished epoch is still written.
pub fn cmd_train(
    config: &RunConfig,
    dataset: &Path,
    coeffs: Option<&Path>,
    out: &Path,
    force: bool,
) -> Result<TrainReport> {
    let ds = io::load_dataset(dataset)?;
    let coeffs = training_coefficients(config, &ds, coeffs)?;
    let train = config.train_config();
    train.validate(ds.n())?;
    start(config, out, force)?;
    match fit(&ds, &coeffs, &train) {
        Ok((params, report)) => {
            io::save_model(&out.join(MODEL_FILE), &params)?;
            report.write_csv(fs::File::create(out.join(TRAIN_CSV))?)?;
            Ok(report)
        }
        Err(Error::Diverged { epoch, reason, report }) => {
            report.write_csv(fs::File::create(out.join(TRAIN_CSV))?)?;
            Err(Error::Diverged { epoch, reason, report })
        }
        Err(e) => Err(e),
    }
}

/// Writes the four `codes_{query,db}_m{1,2}.jccb` files.
pub fn cmd_encode(config: &RunConfig, model: &Path, query: &Path, db: &Path, out: &Path, force: bool) -> Result<()> {
    let params = io::load_model(model)?;
    let sets = [("query", io::load_dataset(query)?), ("db", io::load_dataset(db)?)];
    start(config, out, force)?;
    for (side, ds) in &sets {
        for (modality, features) in [(Modality::One, ds.features1()), (Modality::Two, ds.features2())] {
            let codes = encode_features(&params, features, modality)?;
            io::save_codes(&out.join(codes_file(side, modality)), &codes)?;
        }
    }
    Ok(())
}

fn evaluate_direction(
    codes: &Path,
    direction: Direction,
    query: &CrossModalDataset,
    db: &CrossModalDataset,
    ks: &[usize],
) -> Result<EvalReport> {
    let (qm, dm) = match direction {
        Direction::OneToTwo => (Modality::One, Modality::Two),
        Direction::TwoToOne => (Modality::Two, Modality::One),
    };
    let q: HashCodeSet = io::load_codes(&codes.join(codes_file("query", qm)))?;
    let d: HashCodeSet = io::load_codes(&codes.join(codes_file("db", dm)))?;
    retrieval::evaluate(&q, &d, query.labels(), db.labels(), ks, direction)
}

/// Writes `eval.csv` with one row per requested direction.
pub fn cmd_eval(
    config: &RunConfig,
    codes: &Path,
    query: &Path,
    db: &Path,
    direction: DirectionArg,
    out: &Path,
    force: bool,
) -> Result<Vec<EvalReport>> {
    let (query, db) = (io::load_dataset(query)?, io::load_dataset(db)?);
    let directions = match direction {
        DirectionArg::OneToTwo => vec![Direction::OneToTwo],
        DirectionArg::TwoToOne => vec![Direction::TwoToOne],
        DirectionArg::Both => vec![Direction::OneToTwo, Direction::TwoToOne],
    };
    let reports = directions
        .into_iter()
        .map(|d| evaluate_direction(codes, d, &query, &db, &config.ks))
        .collect::<Result<Vec<_>>>()?;
    start(config, out, force)?;
    retrieval::write_eval_csv(&reports, fs::File::create(out.join(EVAL_CSV))?)?;
    Ok(reports)
}

/// One `(value, direction, metric)` row of a sweep.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub value: f64,
    /// `1to2`, `2to1`, or `both` for metrics of the trained model as a whole.
    pub direction: String,
    pub metric: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepSeries {
    pub direction: String,
    pub metric: String,
    /// `(value, score)` pairs in sweep order.
    pub points: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepOutcome {
    pub param: String,
    pub rows: Vec<SweepRow>,
}

impl SweepOutcome {
    /// Rows grouped into plot series, in first-appearance order.
    pub fn series(&self) -> Vec<SweepSeries> {
        let mut out: Vec<SweepSeries> = Vec::new();
        for r in &self.rows {
            match out
                .iter_mut()
                .find(|s| s.direction == r.direction && s.metric == r.metric)
            {
                Some(s) => s.points.push((r.value, r.score)),
                None => out.push(SweepSeries {
                    direction: r.direction.clone(),
                    metric: r.metric.clone(),
                    points: vec![(r.value, r.score)],
                }),
            }
        }
        out
    }

    /// Scores of one series in sweep order.
    pub fn scores(&self, direction: &str, metric: &str) -> Vec<f64> {
        self.rows
            .iter()
            .filter(|r| r.direction == direction && r.metric == metric)
            .map(|r| r.score)
            .collect()
    }
}

fn point_config(base: &RunConfig, param: SweepParam, value: f64) -> Result<RunConfig> {
    let mut config = base.clone();
    match param {
        SweepParam::Lambda => config.train.weights.lambda = value,
        SweepParam::Beta => config.train.weights.beta = value,
        SweepParam::AnchorL => {
            if value < 1.0 || value.fract() != 0.0 {
                return Err(invalid(
                    "sweep value",
                    format!("anchor_l = {value} is not a positive integer"),
                ));
            }
            config.anchor_l = value as usize;
        }
    }
    Ok(config)
}

/// Runs the sweep in memory on a dataset split per the config.
pub fn run_sweep(config: &RunConfig, ds: &CrossModalDataset) -> Result<SweepOutcome> {
    let (param, values) = config.sweep()?;
    let parts = split(ds, &config.split_spec(ds.n()))?;
    let train = ds.subset(&parts.train)?;
    let (query, db) = (ds.subset(&parts.query)?, ds.subset(&parts.db)?);
    let mut rows = Vec::new();
    let mut first_norm = None;
    for &value in values {
        let point = point_config(config, param, value)?;
        let tc = point.train_config();
        let coeffs = match tc.mode {
            Mode::JcchB => CoefficientSet::constant_baseline(train.labels()),
            Mode::Jcch => {
                let (c, _) = estimate_coefficients(train.labels(), &point.anchor_set(train.n())?, false)?;
                rescale(&c, train.labels())?
            }
        };
        let (params, report) = fit(&train, &coeffs, &tc)?;
        for r in evaluate_cross_modal(&params, &query, &db, &config.ks)? {
            let mut push = |metric: String, score: f64| {
                rows.push(SweepRow {
                    value,
                    direction: r.direction.tag().into(),
                    metric,
                    score,
                })
            };
            push("map".into(), r.map);
            for &(k, p) in &r.precision_at_k {
                push(format!("precision@{k}"), p);
            }
        }
        let norm = report.records.last().map_or(0.0, |e| 0.5 * (e.f_norm1 + e.f_norm2));
        let reference = *first_norm.get_or_insert(norm);
        let ratio = if reference > 0.0 { norm / reference } else { 1.0 };
        for (metric, score) in [
            ("mean_f_norm", norm),
            ("f_norm_ratio", ratio),
            ("f_norm_shrunk", if ratio < SHRINK_RATIO { 1.0 } else { 0.0 }),
        ] {
            rows.push(SweepRow {
                value,
                direction: "both".into(),
                metric: metric.into(),
                score,
            });
        }
    }
    Ok(SweepOutcome {
        param: param.name().into(),
        rows,
    })
}

/// Writes `sweep.csv` (`param,value,direction,metric,score`) and the same
/// points as plot series in `sweep.json`.
pub fn cmd_sweep(config: &RunConfig, dataset: &Path, out: &Path, force: bool) -> Result<SweepOutcome> {
    config.sweep()?;
    let ds = io::load_dataset(dataset)?;
    start(config, out, force)?;
    let outcome = run_sweep(config, &ds)?;
    let mut w = csv::Writer::from_path(out.join(SWEEP_CSV))?;
    w.write_record(["param", "value", "direction", "metric", "score"])?;
    for r in &outcome.rows {
        w.write_record([
            &outcome.param,
            &r.value.to_string(),
            &r.direction,
            &r.metric,
            &r.score.to_string(),
        ])?;
    }
    w.flush()?;
    #[derive(Serialize)]
    struct Plot<'a> {
        param: &'a str,
        series: Vec<SweepSeries>,
    }
    let plot = Plot {
        param: &outcome.param,
        series: outcome.series(),
    };
    let json = serde_json::to_string_pretty(&plot).map_err(|e| invalid("sweep plot data", e.to_string()))?;
    fs::write(out.join(SWEEP_JSON), json + "\n")?;
    Ok(outcome)
}

/// Runs a parsed command line and returns the process exit status.
pub fn run(cli: Cli) -> i32 {
    match dispatch(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn dispatch(cli: Cli) -> Result<i32> {
    match cli.command {
        Command::Gen { common } => {
            let ds = cmd_gen(&load_config(&common)?, &common.out, common.force)?;
            println!("wrote {} items to {}", ds.n(), common.out.display());
        }
        Command::Import {
            common,
            csv,
            num_labels,
        } => {
            let ds = cmd_import(&load_config(&common)?, &csv, num_labels, &common.out, common.force)?;
            println!("imported {} items to {}", ds.n(), common.out.display());
        }
        Command::Coeffs { common, dataset } => {
            let outcome = cmd_coeffs(&load_config(&common)?, &dataset, &common.out, common.force)?;
            if let Some(w) = outcome.warning {
                eprintln!("warning: {w}");
            }
            println!("wrote coefficients from {} anchors", outcome.coeffs.anchor_size());
        }
        Command::Certify { common, corrupt } => {
            let mut config = load_config(&common)?;
            if let Some(c) = corrupt {
                config.certify.corrupt = c;
            }
            let cert = cmd_certify(&config, &common.out, common.force)?;
            let bad = cert.violations();
            match cert.min_slack() {
                Some(s) => println!(
                    "{} instances, {} violations, min slack {s:e}",
                    cert.reports.len(),
                    bad.len()
                ),
                None => println!("0 instances"),
            }
            if !bad.is_empty() {
                eprintln!("bound violated for seeds {bad:?}");
                return Ok(1);
            }
        }
        Command::Train {
            common,
            dataset,
            coeffs,
        } => {
            let report = cmd_train(
                &load_config(&common)?,
                &dataset,
                coeffs.as_deref(),
                &common.out,
                common.force,
            )?;
            if let Some(last) = report.records.last() {
                println!(
                    "mode {} epoch {} loss {:.6}",
                    report.mode.name(),
                    last.epoch,
                    last.total
                );
            }
        }
        Command::Encode {
            common,
            model,
            query,
            db,
        } => {
            cmd_encode(&load_config(&common)?, &model, &query, &db, &common.out, common.force)?;
            println!("wrote codes to {}", common.out.display());
        }
        Command::Eval {
            common,
            codes,
            query,
            db,
            direction,
        } => {
            for r in cmd_eval(
                &load_config(&common)?,
                &codes,
                &query,
                &db,
                direction,
                &common.out,
                common.force,
            )? {
                println!("{} MAP {:.4}", r.direction.tag(), r.map);
            }
        }
        Command::Sweep { common, dataset } => {
            let outcome = cmd_sweep(&load_config(&common)?, &dataset, &common.out, common.force)?;
            for s in outcome.series().iter().filter(|s| s.metric == "map") {
                let scores: Vec<String> = s.points.iter().map(|(v, m)| format!("{v}:{m:.4}")).collect();
                println!("{} {} MAP {}", outcome.param, s.direction, scores.join(" "));
            }
        }
    }
    Ok(0)
}
