//! Command-line interface.
//!
//! Exit codes: 0 on success, 1 on usage or configuration errors, 2 on data
//! and format errors. A `--config FILE` of `key = value` lines supplies
//! defaults for the subcommand's flags; flags given on the command line win.

use std::ffi::OsString;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;

use crate::data_io::{load_dataset, load_model, read_instance_labels, save_dataset, save_model, write_instance_labels};
use crate::dp_mixture::{elbo_trace_table, FitConfig};
use crate::evaluation::{accuracy, aupr, auroc, kfold_split, macro_f1, ood_table, run_ood_experiment};
use crate::pipeline::{predict_bag, train, Bag, PatchConfig, Pooling, TrainConfig, TrainedModel};
use crate::synth::{generate_synthetic, SynthConfig};
use crate::uncertainty::{patch_score_table, patch_scores, OodMeasure, ScoreMode};
use crate::{Error, Result};

pub const THREADS_ENV: &str = "CDPMIL_THREADS";
pub const LABELS_FILE: &str = "labels.tsv";

#[derive(Parser, Debug)]
#[command(name = "cdpmil", version, about = "Cascaded Dirichlet-process multiple instance learning", args_override_self = true)]
struct Cli {
    /// File of `key = value` lines used as flag defaults.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic dataset with train and test splits.
    Synth(SynthArgs),
    /// Train a model and save it.
    Train(TrainArgs),
    /// Predict bag labels.
    Predict(PredictArgs),
    /// Per-instance scores for localization.
    ScorePatches(ScoreArgs),
    /// OOD detection report.
    Ood(OodArgs),
    /// Classification metrics on a labeled dataset.
    Eval(EvalArgs),
    /// Stratified K-fold cross-validation.
    Crossval(CrossvalArgs),
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long, default_value_t = 200)]
    n_bags: usize,
    #[arg(long, default_value_t = 50)]
    min_instances: usize,
    #[arg(long, default_value_t = 150)]
    max_instances: usize,
    #[arg(long, default_value_t = 4)]
    dim: usize,
    #[arg(long, default_value_t = 2)]
    classes: usize,
    #[arg(long, default_value_t = 0.05)]
    tumor_min: f64,
    #[arg(long, default_value_t = 0.30)]
    tumor_max: f64,
    #[arg(long, default_value_t = 8.0)]
    separation: f64,
    #[arg(long, default_value_t = 1)]
    normal_modes: usize,
    #[arg(long, default_value_t = 0.2)]
    test_fraction: f64,
    /// Add this offset to every feature (OOD sets).
    #[arg(long, default_value_t = 0.0)]
    shift: f64,
}

#[derive(Args, Debug, Clone)]
struct DataArgs {
    #[arg(long)]
    data: PathBuf,
    /// Label table; defaults to `labels.tsv` inside the data directory.
    #[arg(long)]
    labels: Option<PathBuf>,
}

impl DataArgs {
    fn labels_path(&self) -> PathBuf {
        self.labels.clone().unwrap_or_else(|| self.data.join(LABELS_FILE))
    }

    fn load_labeled(&self) -> Result<Vec<Bag>> {
        load_dataset(&self.data, Some(&self.labels_path()))
    }

    /// Labeled if a label table exists, otherwise every feature file.
    fn load_any(&self) -> Result<Vec<Bag>> {
        let lp = self.labels_path();
        if self.labels.is_some() || lp.is_file() {
            load_dataset(&self.data, Some(&lp))
        } else {
            load_dataset(&self.data, None)
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum PoolingArg {
    LogMean,
    Mean,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ScoreModeArg {
    Posterior,
    Weighted,
    Raw,
}

#[derive(Args, Debug, Clone)]
struct ModelOpts {
    /// Patch-level truncation.
    #[arg(long = "T", default_value_t = 10)]
    t: usize,
    /// Slide-level truncation; defaults to the number of classes.
    #[arg(long = "K")]
    k: Option<usize>,
    #[arg(long, default_value_t = 1.0)]
    eta1: f64,
    #[arg(long, default_value_t = 1.0)]
    eta2: f64,
    #[arg(long, default_value_t = 10)]
    epochs: usize,
    #[arg(long, default_value_t = 3)]
    patience: usize,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long)]
    slide_hidden: Option<usize>,
    #[arg(long, default_value_t = 200)]
    max_iters: usize,
    #[arg(long, default_value_t = 1e-6)]
    rel_tol: f64,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 0.0)]
    entropy_weight: f64,
    /// Freeze patch-level aggregation after the first epoch.
    #[arg(long)]
    cache_aggregation: bool,
    #[arg(long)]
    project_dim: Option<usize>,
    #[arg(long, value_enum, default_value_t = PoolingArg::LogMean)]
    pooling: PoolingArg,
    /// Train encoder hidden and output weights, not only the output biases.
    #[arg(long)]
    train_network: bool,
    #[arg(long)]
    no_merge: bool,
}

impl ModelOpts {
    fn config(&self) -> TrainConfig {
        let fit = FitConfig {
            max_iters: self.max_iters,
            rel_tol: self.rel_tol,
            lr: self.lr,
            seed: self.seed,
            entropy_weight: self.entropy_weight,
            train_network: self.train_network,
            merge_moves: !self.no_merge,
            ..FitConfig::default()
        };
        TrainConfig {
            patch: PatchConfig { truncation: self.t, eta: self.eta1, hidden: self.hidden, fit: fit.clone() },
            n_components: self.k,
            eta2: self.eta2,
            slide_hidden: self.slide_hidden,
            slide_fit: fit,
            epochs: self.epochs,
            patience: self.patience,
            seed: self.seed,
            cache_aggregation: self.cache_aggregation,
            project_dim: self.project_dim,
            pooling: match self.pooling {
                PoolingArg::LogMean => Pooling::LogMean,
                PoolingArg::Mean => Pooling::Mean,
            },
        }
    }
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    opts: ModelOpts,
    #[arg(long)]
    out: PathBuf,
    /// Validation set used for early stopping.
    #[arg(long)]
    val_data: Option<PathBuf>,
    #[arg(long)]
    val_labels: Option<PathBuf>,
    /// Write the slide-level ELBO trace here.
    #[arg(long)]
    elbo_trace: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct PredictArgs {
    #[arg(long)]
    model: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ScoreArgs {
    #[arg(long)]
    model: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, value_enum, default_value_t = ScoreModeArg::Posterior)]
    score_mode: ScoreModeArg,
    /// Score with the raw mixture likelihood, without tumor reweighting.
    #[arg(long)]
    raw_likelihood: bool,
    /// Instance labels (`bag_id<TAB>index<TAB>0|1`) for an instance-level AUROC.
    #[arg(long)]
    instance_labels: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct OodArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    in_data: PathBuf,
    #[arg(long)]
    ood_data: PathBuf,
    /// Comma-separated measures; all by default.
    #[arg(long, value_delimiter = ',')]
    measures: Vec<String>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct CrossvalArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    opts: ModelOpts,
    #[arg(long, default_value_t = 10)]
    folds: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Parses `key = value` lines into flags. `true` becomes a bare flag and
/// `false` drops the key.
pub fn config_file_args(text: &str, path: &Path) -> Result<Vec<OsString>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("{}:{}: expected key = value", path.display(), i + 1)))?;
        let key = k.trim().trim_start_matches("--").replace('_', "-");
        let v = v.trim();
        if key.is_empty() {
            return Err(Error::Config(format!("{}:{}: empty key", path.display(), i + 1)));
        }
        match v {
            "true" => out.push(format!("--{key}").into()),
            "false" => {}
            _ => {
                out.push(format!("--{key}").into());
                out.push(v.into());
            }
        }
    }
    Ok(out)
}

/// Splices config-file flags in right after the subcommand, so that any
/// flag repeated on the command line overrides them.
fn expand_config(args: Vec<OsString>) -> Result<Vec<OsString>> {
    let mut rest = Vec::with_capacity(args.len());
    let mut config = None;
    let mut it = args.into_iter();
    if let Some(bin) = it.next() {
        rest.push(bin);
    }
    while let Some(a) = it.next() {
        let s = a.to_string_lossy();
        if s == "--config" {
            config = Some(PathBuf::from(it.next().ok_or_else(|| Error::Config("--config needs a file".into()))?));
        } else if let Some(p) = s.strip_prefix("--config=") {
            config = Some(PathBuf::from(p));
        } else {
            rest.push(a);
        }
    }
    let Some(path) = config else { return Ok(rest) };
    let text = fs::read_to_string(&path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    let extra = config_file_args(&text, &path)?;
    let sub = rest
        .iter()
        .skip(1)
        .position(|a| !a.to_string_lossy().starts_with('-'))
        .map(|i| i + 2)
        .unwrap_or(rest.len());
    rest.splice(sub..sub, extra);
    Ok(rest)
}

fn configure_threads() -> Result<()> {
    let Ok(v) = std::env::var(THREADS_ENV) else { return Ok(()) };
    let n: usize = v
        .parse()
        .ok()
        .filter(|n| *n > 0)
        .ok_or_else(|| Error::Config(format!("{THREADS_ENV} must be a positive integer, got {v:?}")))?;
    // a pool built earlier in the process keeps its size
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => fs::write(p, text).map_err(|e| Error::io(p, e)),
        None => {
            let mut so = std::io::stdout().lock();
            so.write_all(text.as_bytes()).map_err(|e| Error::io("<stdout>", e))
        }
    }
}

fn fmt_metric(v: Option<f64>) -> String {
    v.map_or_else(|| "nan".to_string(), |v| format!("{v:.6}"))
}

/// Bag-level metrics of a model on labeled bags.
#[derive(Debug, Clone, PartialEq)]
pub struct BagMetrics {
    pub accuracy: f64,
    pub macro_f1: f64,
    /// Mean one-vs-rest AUROC over classes present with both outcomes.
    pub auroc: Option<f64>,
    pub aupr: Option<f64>,
}

pub fn evaluate_bags(bags: &[Bag], model: &TrainedModel) -> Result<BagMetrics> {
    let preds: Vec<(usize, Vec<f64>)> = bags.par_iter().map(|b| predict_bag(b, model)).collect::<Result<_>>()?;
    let ys: Vec<usize> = bags
        .iter()
        .map(|b| b.label.ok_or_else(|| Error::Dataset(format!("bag {} is unlabeled", b.bag_id))))
        .collect::<Result<_>>()?;
    let hard: Vec<usize> = preds.iter().map(|p| p.0).collect();
    let k = model.n_classes.max(ys.iter().max().map_or(0, |m| m + 1));
    let mut rocs = Vec::new();
    let mut prs = Vec::new();
    // binary: the positive class alone, since both classes give the same AUROC
    let scored = if model.n_classes == 2 { 1..2 } else { 0..model.n_classes };
    for c in scored {
        let s: Vec<f64> = preds.iter().map(|p| p.1[c]).collect();
        let l: Vec<bool> = ys.iter().map(|y| *y == c).collect();
        if let (Ok(a), Ok(b)) = (auroc(&s, &l), aupr(&s, &l)) {
            rocs.push(a);
            prs.push(b);
        }
    }
    let mean = |v: &[f64]| (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64);
    Ok(BagMetrics {
        accuracy: accuracy(&hard, &ys)?,
        macro_f1: macro_f1(&hard, &ys, k)?,
        auroc: mean(&rocs),
        aupr: mean(&prs),
    })
}

fn run_synth(a: &SynthArgs) -> Result<String> {
    let cfg = SynthConfig {
        n_bags: a.n_bags,
        instances_per_bag: (a.min_instances, a.max_instances),
        dim: a.dim,
        n_classes: a.classes,
        tumor_fraction: (a.tumor_min, a.tumor_max),
        separation: a.separation,
        normal_modes: a.normal_modes,
        test_fraction: a.test_fraction,
        seed: a.seed,
    };
    let mut d = generate_synthetic(&cfg)?;
    if a.shift != 0.0 {
        for b in d.train.iter_mut().chain(d.test.iter_mut()) {
            b.features.apply(|v| *v += a.shift);
        }
    }
    let train_dir = a.out.join("train");
    let test_dir = a.out.join("test");
    save_dataset(&train_dir, &d.train, Some(&train_dir.join(LABELS_FILE)))?;
    if !d.test.is_empty() {
        save_dataset(&test_dir, &d.test, Some(&test_dir.join(LABELS_FILE)))?;
    }
    write_instance_labels(&a.out.join("instance_labels.tsv"), &d.instance_labels)?;
    Ok(format!("split,bags\ntrain,{}\ntest,{}\n", d.train.len(), d.test.len()))
}

fn run_train(a: &TrainArgs) -> Result<String> {
    let bags = a.data.load_labeled()?;
    let val = match &a.val_data {
        Some(dir) => {
            let lp = a.val_labels.clone().unwrap_or_else(|| dir.join(LABELS_FILE));
            Some(load_dataset(dir, Some(&lp))?)
        }
        None => None,
    };
    let outcome = train(&bags, val.as_deref(), &a.opts.config())?;
    save_model(&outcome.model, &a.out)?;
    if let Some(p) = &a.elbo_trace {
        emit(Some(p), &elbo_trace_table(&outcome.model.slide.elbo_trace))?;
    }
    let mut s = String::from("epoch,accuracy,slide_converged,unconverged_bags,centroids\n");
    for e in &outcome.epochs {
        s.push_str(&format!(
            "{},{:.6},{},{},{}\n",
            e.epoch, e.accuracy, e.slide_converged, e.unconverged_bags, e.n_centroids
        ));
    }
    Ok(s)
}

fn run_predict(a: &PredictArgs) -> Result<String> {
    let model = load_model(&a.model)?;
    let bags = a.data.load_any()?;
    let preds: Vec<(usize, Vec<f64>)> = bags.par_iter().map(|b| predict_bag(b, &model)).collect::<Result<_>>()?;
    let mut s = String::from("bag_id,predicted");
    for c in 0..model.n_classes {
        s.push_str(&format!(",p_{c}"));
    }
    s.push('\n');
    for (b, (y, p)) in bags.iter().zip(&preds) {
        s.push_str(&format!("{},{y}", b.bag_id));
        for v in p {
            s.push_str(&format!(",{v:.6}"));
        }
        s.push('\n');
    }
    Ok(s)
}

fn run_score(a: &ScoreArgs) -> Result<String> {
    let model = load_model(&a.model)?;
    let bags = a.data.load_any()?;
    let mode = if a.raw_likelihood {
        ScoreMode::Raw
    } else {
        match a.score_mode {
            ScoreModeArg::Posterior => ScoreMode::Posterior,
            ScoreModeArg::Weighted => ScoreMode::Weighted,
            ScoreModeArg::Raw => ScoreMode::Raw,
        }
    };
    let reports: Vec<_> = bags.par_iter().map(|b| patch_scores(b, &model, mode)).collect::<Result<_>>()?;
    let table = patch_score_table(&reports);
    if let Some(p) = &a.instance_labels {
        let truth = read_instance_labels(p)?;
        let mut s = Vec::new();
        let mut l = Vec::new();
        for r in &reports {
            let t = truth
                .get(&r.bag_id)
                .ok_or_else(|| Error::Dataset(format!("no instance labels for bag {}", r.bag_id)))?;
            if t.len() != r.scores.len() {
                return Err(Error::Dataset(format!(
                    "bag {} has {} instances but {} instance labels",
                    r.bag_id,
                    r.scores.len(),
                    t.len()
                )));
            }
            s.extend(&r.scores);
            l.extend(t);
        }
        let v = auroc(&s, &l).ok();
        eprintln!("instance_auroc,{}", fmt_metric(v));
    }
    Ok(table)
}

fn run_ood(a: &OodArgs) -> Result<String> {
    let measures: Vec<OodMeasure> = if a.measures.is_empty() {
        OodMeasure::ALL.to_vec()
    } else {
        a.measures
            .iter()
            .map(|m| OodMeasure::parse(m.trim()).ok_or_else(|| Error::Config(format!("unknown measure {m:?}"))))
            .collect::<Result<_>>()?
    };
    let model = load_model(&a.model)?;
    let in_dist = load_dataset(&a.in_data, None)?;
    let ood = load_dataset(&a.ood_data, None)?;
    Ok(ood_table(&run_ood_experiment(&in_dist, &ood, &model, &measures)?))
}

fn metrics_table(m: &BagMetrics) -> String {
    format!(
        "metric,value\naccuracy,{:.6}\nmacro_f1,{:.6}\nauroc,{}\naupr,{}\n",
        m.accuracy,
        m.macro_f1,
        fmt_metric(m.auroc),
        fmt_metric(m.aupr)
    )
}

fn run_eval(a: &EvalArgs) -> Result<String> {
    let model = load_model(&a.model)?;
    let bags = a.data.load_labeled()?;
    Ok(metrics_table(&evaluate_bags(&bags, &model)?))
}

fn run_crossval(a: &CrossvalArgs) -> Result<String> {
    let bags = a.data.load_labeled()?;
    let items: Vec<(String, usize)> = bags.iter().map(|b| (b.bag_id.clone(), b.label.expect("labeled"))).collect();
    let split = kfold_split(&items, a.folds, a.opts.seed)?;
    let cfg = a.opts.config();
    let mut s = String::from("fold,accuracy,macro_f1,auroc,aupr\n");
    let mut rows = Vec::new();
    for f in 0..a.folds {
        let (tr, te): (Vec<Bag>, Vec<Bag>) = bags.iter().cloned().partition(|b| split.folds[&b.bag_id] != f);
        let model = train(&tr, None, &cfg)?.model;
        let m = evaluate_bags(&te, &model)?;
        s.push_str(&format!(
            "{f},{:.6},{:.6},{},{}\n",
            m.accuracy,
            m.macro_f1,
            fmt_metric(m.auroc),
            fmt_metric(m.aupr)
        ));
        rows.push(m);
    }
    let mean_std = |v: Vec<f64>| -> (Option<f64>, Option<f64>) {
        if v.is_empty() {
            return (None, None);
        }
        let n = v.len() as f64;
        let mu = v.iter().sum::<f64>() / n;
        let sd = (v.iter().map(|x| (x - mu).powi(2)).sum::<f64>() / n).sqrt();
        (Some(mu), Some(sd))
    };
    let cols: [Vec<f64>; 4] = [
        rows.iter().map(|m| m.accuracy).collect(),
        rows.iter().map(|m| m.macro_f1).collect(),
        rows.iter().filter_map(|m| m.auroc).collect(),
        rows.iter().filter_map(|m| m.aupr).collect(),
    ];
    let stats: Vec<(Option<f64>, Option<f64>)> = cols.into_iter().map(mean_std).collect();
    s.push_str("mean");
    for (m, _) in &stats {
        s.push_str(&format!(",{}", fmt_metric(*m)));
    }
    s.push_str("\nstd");
    for (_, d) in &stats {
        s.push_str(&format!(",{}", fmt_metric(*d)));
    }
    s.push('\n');
    Ok(s)
}

fn dispatch(cli: &Cli) -> Result<()> {
    configure_threads()?;
    match &cli.command {
        Command::Synth(a) => emit(None, &run_synth(a)?),
        Command::Train(a) => emit(None, &run_train(a)?),
        Command::Predict(a) => emit(a.out.as_deref(), &run_predict(a)?),
        Command::ScorePatches(a) => emit(a.out.as_deref(), &run_score(a)?),
        Command::Ood(a) => emit(a.out.as_deref(), &run_ood(a)?),
        Command::Eval(a) => emit(a.out.as_deref(), &run_eval(a)?),
        Command::Crossval(a) => emit(a.out.as_deref(), &run_crossval(a)?),
    }
}

/// Runs the CLI on `args` (program name first) and returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString>,
{
    let args = match expand_config(args.into_iter().map(Into::into).collect()) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("error: {e}");
            return 1;
        }
    };
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_data_error() {
                2
            } else {
                1
            }
        }
    }
}
