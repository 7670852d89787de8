//! The `corml` command-line tool.
//!
//! Settings resolve as built-in defaults, then a flat `key = value` config
//! file (`--config`), then `CORML_*` environment variables and flags.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dataio::{
    file_hash, load_model, read_interactions, read_split, save_model, split, write_split, GfcfModel, ModelKind,
    SplitConfig, SplitDataset, SplitStrategy, TrainedModel,
};
use crate::error::Error;
use crate::eval::{
    comparison_table, evaluate, rank_topk, EvalMode, EvalOptions, EvalReport, ModelScorer, PopularityScorer, Scorer,
};
use crate::geometry::{
    distance_residual, metric_gershgorin_intervals, predicted_half_distance_residual, MetricWeight, ResidualCase,
    SignalFeatureSpace,
};
use crate::par;
use crate::signal::{fit_ease, truncated_svd, DENSE_G_MAX_ITEMS};
use crate::solver::{default_nnz_budget, fit_corml, CormlHyperparams, FitReport, SymmetrizationWeights};
use crate::sparse::sparsify;
use crate::synth::{generate, SyntheticConfig};

/// Item count above which the dense item-item solves get expensive.
pub const LARGE_ITEM_WARNING: usize = 20_000;
pub const DEFAULT_EASE_L2: f64 = 100.0;

const AFTER_HELP: &str = "\
Settings are resolved as: built-in defaults < --config file < CORML_* environment variables and flags.
The config file holds `key = value` lines using the long flag names with dashes replaced by underscores
(for example `theta = 0.1`, `nnz_budget = 5000`, `k = 5,10,20`).

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.

Report fields (eval): config.<key>, mode, users_evaluated, users_skipped, truncated_lists,
zero_degree_recommendations, ndcg@K, mrr@K, novelty@K. The JSON report carries the same values.";

#[derive(Debug, Parser)]
#[command(name = "corml", version, about = "Implicit-feedback recommender with a learned item-item metric", after_help = AFTER_HELP)]
pub struct Cli {
    /// Flat `key = value` settings file.
    #[arg(long, global = true, env = "CORML_CONFIG")]
    pub config: Option<PathBuf>,
    /// Worker threads (default: available parallelism).
    #[arg(long, global = true, env = "CORML_THREADS")]
    pub threads: Option<usize>,
    /// More log output on stderr (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a seeded synthetic interaction log.
    Generate(GenerateArgs),
    /// Split an interaction log into train/valid/test.
    Split(SplitArgs),
    /// Fit a model on a split.
    Train(TrainArgs),
    /// Evaluate one or more models on a split.
    Eval(EvalArgs),
    /// Top-K recommendations for given users.
    Recommend(RecommendArgs),
    /// Metric-geometry checks for a fitted CoRML model.
    Analyze(AnalyzeArgs),
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 2000)]
    pub users: usize,
    #[arg(long, default_value_t = 500)]
    pub items: usize,
    #[arg(long, default_value_t = 10)]
    pub communities: usize,
    #[arg(long, default_value_t = 0.9)]
    pub exponent: f64,
    #[arg(long, default_value_t = 0.8)]
    pub affinity: f64,
    #[arg(long, default_value_t = 8)]
    pub min_degree: usize,
    #[arg(long, default_value_t = 60)]
    pub max_degree: usize,
    #[arg(long, env = "CORML_SEED")]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct SplitArgs {
    /// Interaction log (`user<TAB>item` per line).
    #[arg(long)]
    pub input: PathBuf,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Train,valid,test fractions.
    #[arg(long, env = "CORML_RATIO")]
    pub ratio: Option<String>,
    #[arg(long, env = "CORML_SEED")]
    pub seed: Option<u64>,
    #[arg(long, env = "CORML_MIN_USER_DEGREE")]
    pub min_user_degree: Option<usize>,
    /// per-user | global
    #[arg(long, env = "CORML_SPLIT_STRATEGY")]
    pub split_strategy: Option<String>,
}

#[derive(Debug, Args, Default)]
pub struct HyperArgs {
    #[arg(long, env = "CORML_T", allow_negative_numbers = true)]
    pub t: Option<f64>,
    #[arg(long, env = "CORML_TU", allow_negative_numbers = true)]
    pub tu: Option<f64>,
    #[arg(long, env = "CORML_EPS")]
    pub eps: Option<f64>,
    #[arg(long, env = "CORML_THETA")]
    pub theta: Option<f64>,
    #[arg(long, env = "CORML_LAMBDA")]
    pub lambda: Option<f64>,
    #[arg(long, env = "CORML_RANK")]
    pub rank: Option<usize>,
    /// ADMM penalty relative to the mean curvature of the objective.
    #[arg(long, env = "CORML_RHO")]
    pub rho: Option<f64>,
    #[arg(long, env = "CORML_ITERS")]
    pub iters: Option<usize>,
    #[arg(long, env = "CORML_TOL")]
    pub tol: Option<f64>,
    #[arg(long, env = "CORML_SEED")]
    pub seed: Option<u64>,
    /// Stored nonzeros allowed in the learned matrix (default 32 x (users + items)).
    #[arg(long, env = "CORML_NNZ_BUDGET")]
    pub nnz_budget: Option<usize>,
    /// Ridge strength for the EASE baseline.
    #[arg(long, env = "CORML_L2")]
    pub l2: Option<f64>,
    /// degree | uniform
    #[arg(long, env = "CORML_WEIGHTS")]
    pub weights: Option<String>,
    #[arg(long, env = "CORML_POWER_ITERS")]
    pub power_iters: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub split: PathBuf,
    /// Output model file.
    #[arg(long)]
    pub out: PathBuf,
    /// ease | gfcf | corml
    #[arg(long, env = "CORML_MODEL")]
    pub model: Option<String>,
    /// Training log (default: <out>.log).
    #[arg(long)]
    pub log: Option<PathBuf>,
    #[command(flatten)]
    pub hyper: HyperArgs,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub split: PathBuf,
    /// Model file(s) to evaluate.
    #[arg(long = "model-file", required = true)]
    pub model_files: Vec<PathBuf>,
    /// Comma-separated cutoffs.
    #[arg(long, env = "CORML_K")]
    pub k: Option<String>,
    /// valid | test
    #[arg(long, env = "CORML_MODE")]
    pub mode: Option<String>,
    /// Keep validation items as candidates in test mode.
    #[arg(long)]
    pub keep_valid: bool,
    /// Also evaluate a popularity recommender.
    #[arg(long)]
    pub popularity: bool,
    /// Include per-user values in the JSON report.
    #[arg(long)]
    pub per_user: bool,
    /// Directory for report files.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct RecommendArgs {
    #[arg(long)]
    pub split: PathBuf,
    #[arg(long = "model-file")]
    pub model_file: PathBuf,
    /// Comma-separated user tokens.
    #[arg(long, required = true)]
    pub users: String,
    #[arg(long, default_value_t = 10)]
    pub k: usize,
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    #[arg(long)]
    pub split: PathBuf,
    #[arg(long = "model-file")]
    pub model_file: PathBuf,
    /// Number of sampled (user, item, item) triples.
    #[arg(long, default_value_t = 2000)]
    pub samples: usize,
    #[arg(long, env = "CORML_SEED")]
    pub seed: Option<u64>,
}

/// Error with the process exit code it maps to.
#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    pub fn usage(message: impl Into<String>) -> Self {
        CliError {
            code: 1,
            message: message.into(),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::InvalidArgument(_) => 1,
            Error::Factorization(_)
            | Error::NotSymmetric { .. }
            | Error::NotHollow { .. }
            | Error::NonPositive { .. }
            | Error::AllDegreesZero
            | Error::DegenerateRankingSet => 3,
            _ => 2,
        };
        CliError {
            code,
            message: e.to_string(),
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

// ---------------------------------------------------------------------------
// Config resolution
// ---------------------------------------------------------------------------

const CONFIG_KEYS: &[&str] = &[
    "t",
    "tu",
    "eps",
    "theta",
    "lambda",
    "rank",
    "rho",
    "iters",
    "tol",
    "seed",
    "nnz_budget",
    "l2",
    "weights",
    "power_iters",
    "model",
    "k",
    "mode",
    "ratio",
    "min_user_degree",
    "split_strategy",
    "threads",
];

#[derive(Debug, Default)]
pub struct ConfigFile(BTreeMap<String, String>);

impl ConfigFile {
    pub fn parse(text: &str, origin: &Path) -> CliResult<Self> {
        let mut map = BTreeMap::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(CliError::usage(format!(
                    "{}:{}: expected `key = value`",
                    origin.display(),
                    n + 1
                )));
            };
            let key = k.trim().replace('-', "_");
            if !CONFIG_KEYS.contains(&key.as_str()) {
                return Err(CliError::usage(format!(
                    "{}:{}: unknown key '{key}'",
                    origin.display(),
                    n + 1
                )));
            }
            map.insert(key, v.trim().to_string());
        }
        Ok(ConfigFile(map))
    }

    pub fn load(path: Option<&Path>) -> CliResult<Self> {
        match path {
            None => Ok(ConfigFile::default()),
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| CliError::from(Error::io(p, e)))?;
                ConfigFile::parse(&text, p)
            }
        }
    }

    /// Flag value if given, else the file value, else `default`.
    fn pick<T: FromStr>(&self, flag: Option<T>, key: &str, default: T) -> CliResult<T>
    where
        T::Err: std::fmt::Display,
    {
        if let Some(v) = flag {
            return Ok(v);
        }
        match self.0.get(key) {
            Some(raw) => raw
                .parse()
                .map_err(|e| CliError::usage(format!("config key '{key}': {e}"))),
            None => Ok(default),
        }
    }

    fn pick_opt<T: FromStr>(&self, flag: Option<T>, key: &str) -> CliResult<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        if flag.is_some() {
            return Ok(flag);
        }
        self.0
            .get(key)
            .map(|raw| {
                raw.parse()
                    .map_err(|e| CliError::usage(format!("config key '{key}': {e}")))
            })
            .transpose()
    }
}

fn parse_list<T: FromStr>(raw: &str, what: &str) -> CliResult<Vec<T>> {
    raw.split(',')
        .map(|s| {
            s.trim()
                .parse()
                .map_err(|_| CliError::usage(format!("invalid {what} entry '{s}'")))
        })
        .collect()
}

/// Fully resolved CoRML / baseline settings.
#[derive(Debug, Clone)]
pub struct TrainSettings {
    pub kind: ModelKind,
    pub hp: CormlHyperparams,
    pub l2: f64,
}

fn resolve_hyper(h: &HyperArgs, cfg: &ConfigFile) -> CliResult<(CormlHyperparams, f64)> {
    let d = CormlHyperparams::default();
    let weights: String = cfg.pick(h.weights.clone(), "weights", d.weights.to_string())?;
    let hp = CormlHyperparams {
        t: cfg.pick(h.t, "t", d.t)?,
        t_u: cfg.pick(h.tu, "tu", d.t_u)?,
        epsilon: cfg.pick(h.eps, "eps", d.epsilon)?,
        theta: cfg.pick(h.theta, "theta", d.theta)?,
        lambda: cfg.pick(h.lambda, "lambda", d.lambda)?,
        rank: cfg.pick(h.rank, "rank", d.rank)?,
        rho: cfg.pick(h.rho, "rho", d.rho)?,
        max_iters: cfg.pick(h.iters, "iters", d.max_iters)?,
        tol: cfg.pick(h.tol, "tol", d.tol)?,
        seed: cfg.pick(h.seed, "seed", d.seed)?,
        power_iters: cfg.pick(h.power_iters, "power_iters", d.power_iters)?,
        weights: SymmetrizationWeights::from_str(&weights)?,
        nnz_budget: cfg.pick_opt(h.nnz_budget, "nnz_budget")?,
    };
    hp.validate()?;
    let l2 = cfg.pick(h.l2, "l2", DEFAULT_EASE_L2)?;
    Ok((hp, l2))
}

fn hyper_echo(kind: ModelKind, hp: &CormlHyperparams, l2: f64, budget: usize) -> Vec<(String, String)> {
    let mut v = vec![("model".to_string(), kind.to_string())];
    let mut push = |k: &str, val: String| v.push((k.to_string(), val));
    match kind {
        ModelKind::Ease => {
            push("l2", l2.to_string());
        }
        ModelKind::Gfcf => {
            push("rank", hp.rank.to_string());
            push("power_iters", hp.power_iters.to_string());
            push("seed", hp.seed.to_string());
        }
        ModelKind::Corml => {
            push("t", hp.t.to_string());
            push("tu", hp.t_u.to_string());
            push("eps", hp.epsilon.to_string());
            push("theta", hp.theta.to_string());
            push("lambda", hp.lambda.to_string());
            push("rank", hp.rank.to_string());
            push("rho", hp.rho.to_string());
            push("iters", hp.max_iters.to_string());
            push("tol", hp.tol.to_string());
            push("seed", hp.seed.to_string());
            push("power_iters", hp.power_iters.to_string());
            push("weights", hp.weights.to_string());
        }
    }
    push("nnz_budget", budget.to_string());
    v
}

// ---------------------------------------------------------------------------
// Entry point
// ---------------------------------------------------------------------------

/// Parse arguments, run, and return the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return code;
        }
    };
    init_logging(cli.verbose);
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {}", e.message);
            e.code
        }
    }
}

fn init_logging(verbose: u8) {
    let level = match verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    let _ = env_logger::Builder::new()
        .filter_level(level)
        .parse_env("CORML_LOG")
        .format_timestamp(None)
        .try_init();
}

pub fn run(cli: &Cli) -> CliResult<()> {
    let cfg = ConfigFile::load(cli.config.as_deref())?;
    let threads = cfg.pick_opt(cli.threads, "threads")?;
    if threads == Some(0) {
        return Err(CliError::usage("--threads must be at least 1"));
    }
    par::init_threads(threads);
    let mut out = std::io::stdout().lock();
    let text = match &cli.command {
        Command::Generate(a) => cmd_generate(a, &cfg)?,
        Command::Split(a) => cmd_split(a, &cfg)?,
        Command::Train(a) => cmd_train(a, &cfg)?,
        Command::Eval(a) => cmd_eval(a, &cfg)?,
        Command::Recommend(a) => cmd_recommend(a)?,
        Command::Analyze(a) => cmd_analyze(a, &cfg)?,
    };
    out.write_all(text.as_bytes())
        .map_err(|e| CliError::from(Error::io("<stdout>", e)))
}

fn write_file(path: &Path, bytes: &[u8]) -> CliResult<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e).into())
}

// ---------------------------------------------------------------------------
// Subcommands
// ---------------------------------------------------------------------------

pub fn cmd_generate(a: &GenerateArgs, cfg: &ConfigFile) -> CliResult<String> {
    let sc = SyntheticConfig {
        n_users: a.users,
        n_items: a.items,
        n_communities: a.communities,
        popularity_exponent: a.exponent,
        affinity: a.affinity,
        min_degree: a.min_degree,
        max_degree: a.max_degree,
        seed: cfg.pick(a.seed, "seed", 0)?,
    };
    let pairs = generate(&sc)?;
    let mut text = String::new();
    let _ = writeln!(
        text,
        "# synthetic users={} items={} communities={} exponent={} affinity={} degrees={}..{} seed={}",
        sc.n_users,
        sc.n_items,
        sc.n_communities,
        sc.popularity_exponent,
        sc.affinity,
        sc.min_degree,
        sc.max_degree,
        sc.seed
    );
    for (u, i) in &pairs {
        let _ = writeln!(text, "{u}\t{i}");
    }
    write_file(&a.out, text.as_bytes())?;
    Ok(format!("interactions\t{}\n", pairs.len()))
}

pub fn cmd_split(a: &SplitArgs, cfg: &ConfigFile) -> CliResult<String> {
    let d = SplitConfig::default();
    let ratio_raw: Option<String> = cfg.pick_opt(a.ratio.clone(), "ratio")?;
    let ratios = match ratio_raw {
        None => d.ratios,
        Some(raw) => {
            let v: Vec<f64> = parse_list(&raw, "ratio")?;
            let [x, y, z] = v[..] else {
                return Err(CliError::usage("--ratio needs three comma-separated fractions"));
            };
            [x, y, z]
        }
    };
    let strategy: String = cfg.pick(a.split_strategy.clone(), "split_strategy", d.strategy.to_string())?;
    let config = SplitConfig {
        ratios,
        seed: cfg.pick(a.seed, "seed", d.seed)?,
        min_user_degree: cfg.pick(a.min_user_degree, "min_user_degree", d.min_user_degree)?,
        strategy: SplitStrategy::from_str(&strategy)?,
    };
    config.validate()?;

    let parsed = read_interactions(&a.input)?;
    for diag in &parsed.diagnostics {
        log::warn!("{}:{}: {} (skipped)", a.input.display(), diag.line, diag.message);
    }
    let data = split(&parsed.pairs, &config)?;
    let header = vec![
        (
            "ratio".to_string(),
            format!("{},{},{}", ratios[0], ratios[1], ratios[2]),
        ),
        ("seed".to_string(), config.seed.to_string()),
        ("min_user_degree".to_string(), config.min_user_degree.to_string()),
        ("split_strategy".to_string(), config.strategy.to_string()),
    ];
    write_split(&a.out, &data, &header)?;
    let mut s = String::new();
    let _ = writeln!(s, "users\t{}", data.n_users());
    let _ = writeln!(s, "items\t{}", data.n_items());
    let _ = writeln!(s, "train\t{}", data.train.nnz());
    let _ = writeln!(s, "valid\t{}", data.valid.nnz());
    let _ = writeln!(s, "test\t{}", data.test.nnz());
    let _ = writeln!(s, "skipped_lines\t{}", parsed.diagnostics.len());
    let _ = writeln!(s, "duplicates\t{}", parsed.duplicates);
    Ok(s)
}

pub fn resolve_train(a: &TrainArgs, cfg: &ConfigFile) -> CliResult<TrainSettings> {
    let kind: String = cfg.pick(a.model.clone(), "model", "corml".to_string())?;
    let kind = ModelKind::from_str(&kind)?;
    let (hp, l2) = resolve_hyper(&a.hyper, cfg)?;
    if kind == ModelKind::Ease && !(l2.is_finite() && l2 > 0.0) {
        return Err(CliError::usage("--l2 must be positive"));
    }
    Ok(TrainSettings { kind, hp, l2 })
}

fn training_log(echo: &[(String, String)], report: Option<&FitReport>) -> String {
    let mut s: String = echo.iter().map(|(k, v)| format!("# {k}={v}\n")).collect();
    if let Some(r) = report {
        let _ = writeln!(s, "# converged={}", r.converged);
        let _ = writeln!(s, "# rank_limited={}", r.rank_limited);
        let _ = writeln!(s, "# g_budgeted={}", r.g_budgeted);
        let _ = writeln!(s, "# condition_estimate={:e}", r.condition_estimate);
        let _ = writeln!(s, "# nnz_before_budget={}", r.nnz_before_budget);
        let _ = writeln!(s, "iteration\tprimal_residual\tdual_residual\tloss\tobjective");
        let _ = writeln!(s, "0\t\t\t{}\t{}", r.initial.loss, r.initial.objective);
        for h in &r.history {
            let _ = writeln!(
                s,
                "{}\t{:e}\t{:e}\t{}\t{}",
                h.iteration, h.primal_residual, h.dual_residual, h.loss, h.objective
            );
        }
    }
    s
}

pub fn cmd_train(a: &TrainArgs, cfg: &ConfigFile) -> CliResult<String> {
    let settings = resolve_train(a, cfg)?;
    let data = read_split(&a.split)?;
    let r = &data.train;
    if r.nnz() == 0 {
        return Err(Error::data(&a.split, "training split is empty").into());
    }
    let budget = settings
        .hp
        .nnz_budget
        .unwrap_or_else(|| default_nnz_budget(r.n_users(), r.n_items()));
    if budget < r.n_items() {
        log::warn!("nnz budget {budget} is smaller than the item count {}", r.n_items());
    }
    if r.n_items() > LARGE_ITEM_WARNING && settings.kind != ModelKind::Gfcf {
        log::warn!(
            "{} items: the dense item-item solve needs O(n^2) memory and O(n^3) time",
            r.n_items()
        );
    }
    let mut hp = settings.hp.clone();
    hp.nnz_budget = Some(budget);
    let echo = hyper_echo(settings.kind, &hp, settings.l2, budget);

    let mut summary = String::new();
    let (model, report) = match settings.kind {
        ModelKind::Ease => {
            let mut m = fit_ease(r, settings.l2)?;
            let sparse = sparsify(&m.weights, budget)?;
            m.weights = sparse.to_dense();
            let _ = writeln!(summary, "nnz\t{}", sparse.nnz());
            (TrainedModel::Ease(m), None)
        }
        ModelKind::Gfcf => {
            let filter = truncated_svd(r, hp.rank, hp.seed, hp.power_iters)?;
            if filter.rank_limited {
                log::warn!("rank limited to {} (requested {})", filter.rank(), hp.rank);
            }
            let _ = writeln!(summary, "rank\t{}", filter.rank());
            let m = GfcfModel {
                filter,
                user_degrees: r.user_degrees().to_vec(),
                rank: hp.rank,
                seed: hp.seed,
            };
            (TrainedModel::Gfcf(m), None)
        }
        ModelKind::Corml => {
            if r.n_items() > DENSE_G_MAX_ITEMS {
                log::info!("graph filter built blockwise under the nnz budget");
            }
            // the solver logs its own non-convergence warning
            let (m, report) = fit_corml(r, &hp)?;
            let _ = writeln!(summary, "nnz\t{}", m.h.nnz());
            let _ = writeln!(summary, "iterations\t{}", report.iterations);
            let _ = writeln!(summary, "converged\t{}", report.converged);
            (TrainedModel::Corml(m), Some(report))
        }
    };
    save_model(&model, r.item_degrees(), r.user_degrees(), &a.out)?;
    let log_path = a.log.clone().unwrap_or_else(|| {
        let mut p = a.out.clone().into_os_string();
        p.push(".log");
        PathBuf::from(p)
    });
    write_file(&log_path, training_log(&echo, report.as_ref()).as_bytes())?;
    let mut s = format!("model\t{}\n", settings.kind);
    s += &summary;
    let _ = writeln!(s, "model_hash\t{}", file_hash(&a.out)?);
    Ok(s)
}

fn model_name(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "model".into())
}

fn check_model_matches(model: &TrainedModel, data: &SplitDataset, path: &Path) -> CliResult<()> {
    if model.n_items() != data.n_items() {
        return Err(Error::data(
            path,
            format!(
                "model has {} items but the split has {}",
                model.n_items(),
                data.n_items()
            ),
        )
        .into());
    }
    Ok(())
}

pub fn cmd_eval(a: &EvalArgs, cfg: &ConfigFile) -> CliResult<String> {
    let k_raw: String = cfg.pick(a.k.clone(), "k", "5,10,20".to_string())?;
    let ks: Vec<usize> = parse_list(&k_raw, "K")?;
    if ks.is_empty() || ks.contains(&0) {
        return Err(CliError::usage("--k needs positive cutoffs"));
    }
    let mode: String = cfg.pick(a.mode.clone(), "mode", "test".to_string())?;
    let options = EvalOptions {
        ks,
        mode: EvalMode::from_str(&mode)?,
        exclude_valid: !a.keep_valid,
        per_user: a.per_user,
    };
    let data = read_split(&a.split)?;
    let dataset_hash = data.content_hash();

    let base_echo = |extra: Vec<(String, String)>| {
        let mut v = vec![
            ("dataset_hash".to_string(), dataset_hash.clone()),
            (
                "k".to_string(),
                options.ks.iter().map(usize::to_string).collect::<Vec<_>>().join(","),
            ),
            ("mode".to_string(), options.mode.to_string()),
            ("exclude_valid".to_string(), options.exclude_valid.to_string()),
        ];
        v.extend(extra);
        v
    };

    let mut reports: Vec<(String, EvalReport)> = Vec::new();
    for path in &a.model_files {
        let (model, _, _) = load_model(path)?;
        check_model_matches(&model, &data, path)?;
        let scorer = ModelScorer::new(&model);
        let mut report = evaluate(&scorer, &data, &options)?;
        report.config = base_echo(vec![
            ("model".to_string(), model.kind().to_string()),
            ("model_hash".to_string(), file_hash(path)?),
        ]);
        reports.push((model_name(path), report));
    }
    if a.popularity {
        let mut report = evaluate(&PopularityScorer::new(&data.train), &data, &options)?;
        report.config = base_echo(vec![("model".to_string(), "popularity".to_string())]);
        reports.push(("popularity".to_string(), report));
    }

    if let Some(dir) = &a.out {
        fs::create_dir_all(dir).map_err(|e| CliError::from(Error::io(dir, e)))?;
        for (name, report) in &reports {
            write_file(&dir.join(format!("{name}.report.tsv")), report.to_text().as_bytes())?;
            write_file(&dir.join(format!("{name}.report.json")), report.to_json().as_bytes())?;
        }
        if reports.len() > 1 {
            let rows: Vec<(String, &EvalReport)> = reports.iter().map(|(n, r)| (n.clone(), r)).collect();
            write_file(&dir.join("comparison.tsv"), comparison_table(&rows).as_bytes())?;
        }
    }
    Ok(if reports.len() == 1 {
        reports[0].1.to_text()
    } else {
        let rows: Vec<(String, &EvalReport)> = reports.iter().map(|(n, r)| (n.clone(), r)).collect();
        comparison_table(&rows)
    })
}

pub fn cmd_recommend(a: &RecommendArgs) -> CliResult<String> {
    if a.k == 0 {
        return Err(CliError::usage("--k must be at least 1"));
    }
    let data = read_split(&a.split)?;
    let (model, _, _) = load_model(&a.model_file)?;
    check_model_matches(&model, &data, &a.model_file)?;
    let scorer = ModelScorer::new(&model);
    let mut s = String::from("user\trank\titem\tscore\n");
    let mut scores = vec![0.0; data.n_items()];
    for token in a.users.split(',').map(str::trim).filter(|t| !t.is_empty()) {
        let Some(u) = data.index.users.index(token) else {
            let _ = writeln!(s, "{token}\terror\tunknown user\t");
            continue;
        };
        let train = data.train.row(u);
        scorer.score_user(u, train, &mut scores);
        let exclude: Vec<usize> = train.iter().map(|&i| i as usize).collect();
        let list = rank_topk(u, &scores, &exclude, a.k)?;
        for (pos, (&item, &score)) in list.items.iter().zip(&list.scores).enumerate() {
            let item_token = data.index.items.token(item).unwrap_or("?");
            let _ = writeln!(s, "{token}\t{}\t{item_token}\t{score}", pos + 1);
        }
        if list.truncated {
            let _ = writeln!(s, "{token}\tnote\tonly {} candidates\t", list.items.len());
        }
    }
    Ok(s)
}

#[derive(Debug, Default, Clone, Copy)]
struct CaseStats {
    count: usize,
    max_violation: f64,
}

pub fn cmd_analyze(a: &AnalyzeArgs, cfg: &ConfigFile) -> CliResult<String> {
    let data = read_split(&a.split)?;
    let (model, _, _) = load_model(&a.model_file)?;
    check_model_matches(&model, &data, &a.model_file)?;
    let TrainedModel::Corml(m) = model else {
        return Err(CliError::usage("analyze needs a CoRML model (symmetric hollow H)"));
    };
    let seed = cfg.pick(a.seed, "seed", 0)?;
    let r = &data.train;
    let space = SignalFeatureSpace::new(r, m.hyperparams.t);
    let w = MetricWeight::for_space(&space, m.h.clone())?;
    let intervals = metric_gershgorin_intervals(&w);
    let min_lower = intervals.iter().map(|g| g.lower()).fold(f64::INFINITY, f64::min);
    let max_upper = intervals.iter().map(|g| g.upper()).fold(f64::NEG_INFINITY, f64::max);
    let negative = intervals.iter().filter(|g| g.lower() < -1e-9).count();

    let users: Vec<usize> = (0..r.n_users()).filter(|&u| r.user_degrees()[u] > 0).collect();
    let items: Vec<usize> = (0..r.n_items()).filter(|&i| r.item_degrees()[i] > 0).collect();
    let mut stats: BTreeMap<ResidualCase, CaseStats> = BTreeMap::new();
    if !users.is_empty() && items.len() >= 2 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..a.samples {
            let u = users[rng.random_range(0..users.len())];
            // Half the draws take i from the user's own items so every case shows up.
            let i = if rng.random::<bool>() {
                r.row(u)[rng.random_range(0..r.row(u).len())] as usize
            } else {
                items[rng.random_range(0..items.len())]
            };
            let mut j = items[rng.random_range(0..items.len())];
            while j == i {
                j = items[rng.random_range(0..items.len())];
            }
            let actual = 0.5 * distance_residual(&space, &w, u, i, j)?;
            let predicted = predicted_half_distance_residual(&space, &w, u, i, j)?;
            let entry = stats.entry(ResidualCase::classify(r, u, i, j)).or_default();
            entry.count += 1;
            entry.max_violation = entry.max_violation.max((actual - predicted).abs());
        }
    }

    let mut s = String::new();
    let _ = writeln!(s, "t\t{}", m.hyperparams.t);
    let _ = writeln!(s, "omega\t{}", w.omega());
    let _ = writeln!(s, "h_nnz\t{}", m.h.nnz());
    let _ = writeln!(s, "gershgorin_min_lower\t{min_lower}");
    let _ = writeln!(s, "gershgorin_max_upper\t{max_upper}");
    let _ = writeln!(s, "gershgorin_negative_intervals\t{negative}");
    let _ = writeln!(s, "samples\t{}", a.samples);
    for (case, name) in [
        (ResidualCase::BothUninteracted, "case1"),
        (ResidualCase::OneInteracted, "case2"),
        (ResidualCase::BothInteracted, "case3"),
    ] {
        let st = stats.get(&case).copied().unwrap_or_default();
        let _ = writeln!(s, "{name}_count\t{}", st.count);
        let _ = writeln!(s, "{name}_max_violation\t{:e}", st.max_violation);
    }
    Ok(s)
}
