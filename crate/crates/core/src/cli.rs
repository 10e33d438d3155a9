//! Command-line entry point: `synth`, `compress`, `cluster`, `train`,
//! `eval`, `bench` and `ablate`.
//!
//! Every subcommand resolves one flat [`RunConfig`] (defaults, then an
//! optional `--config` JSON file, then flags) and embeds it in each artifact
//! it writes. Fields whose names end in `_ms` carry wall-clock timings; all
//! other output is a deterministic function of the config.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::cluster::{induce_catalog, kmeans_fit, DEFAULT_MAX_ITER, DEFAULT_TOL};
use crate::compressor::{compress, PlanRecord};
use crate::datalog::{
    format_events, generate_synthetic, load_catalog, load_events, partition_history_recent, split,
    write_catalog, ActionId, Dataset, Format, ItemCatalog, SplitSpec, SynthConfig,
};
use crate::error::{Error, Result};
use crate::evalmetrics::{evaluate, EvalReport, Metrics, Protocol};
use crate::model::{AssemblyMode, ModelConfig};
use crate::perfbench::{
    compression_report, flop_cost, flop_ratio, time_forward, BenchShape, CostBreakdown,
    TimingStats, REFERENCE_ACCURACY_GAIN, REFERENCE_TIME_RATIO,
};
use crate::training::{build_data, train, EpochLog, TrainConfig, TrainData};
use crate::{Model32, Tensor64};

pub const RUN_CONFIG_FILE: &str = "run_config.json";
pub const EVENTS_FILE: &str = "events.jsonl";
pub const CATALOG_FILE: &str = "catalog.jsonl";
pub const MODEL_DIR: &str = "model";

/// Resolved settings of one invocation. Unset fields keep their defaults.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub command: String,
    pub seed: u64,
    pub data: Option<PathBuf>,
    pub catalog: Option<PathBuf>,
    /// Trained model directory read by `eval` and `cluster`.
    pub model: Option<PathBuf>,
    /// Where artifacts go; not recorded, so reruns elsewhere match.
    #[serde(skip_serializing)]
    pub out: Option<PathBuf>,
    /// Keep only events with these actions; empty keeps all.
    pub keep_actions: Vec<ActionId>,

    pub users: usize,
    pub items: usize,
    pub cats: usize,
    pub actions: usize,
    pub events: usize,
    pub interest_strength: f64,
    pub drift: f64,

    #[serde(rename = "iLen")]
    pub i_len: usize,
    #[serde(rename = "V")]
    pub v: usize,
    #[serde(rename = "G")]
    pub g: usize,
    pub layers: usize,
    pub dim: usize,
    pub heads: usize,
    pub ffn_expansion: usize,
    pub tau: f64,
    pub mode: AssemblyMode,
    pub align: bool,
    pub action_loss: bool,
    pub history: bool,

    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub negatives: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub patience: usize,
    pub protocol: Protocol,

    pub k: usize,
    pub kmeans_max_iter: usize,
    pub kmeans_tol: f64,

    /// Padded lengths timed by `bench`.
    #[serde(rename = "L")]
    pub lengths: Vec<usize>,
    pub bench_batch: usize,
    pub warmup: usize,
    pub reps: usize,

    /// Consecutive seeds averaged by `ablate`.
    pub seeds: usize,
    /// When nonzero, `ablate` adds a run on a K-Means catalog with this k.
    pub induce_k: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let s = SynthConfig::default();
        let m = ModelConfig::default();
        let t = TrainConfig::default();
        Self {
            command: String::new(),
            seed: 0,
            data: None,
            catalog: None,
            model: None,
            out: None,
            keep_actions: Vec::new(),
            users: s.num_users,
            items: s.num_items,
            cats: s.num_categories,
            actions: s.num_actions,
            events: s.events_per_user,
            interest_strength: s.long_range_interest_strength,
            drift: s.recency_drift,
            i_len: m.max_recent,
            v: m.max_buckets,
            g: m.max_items_per_bucket,
            layers: m.num_layers,
            dim: m.hidden_dim,
            heads: m.num_heads,
            ffn_expansion: m.ffn_expansion,
            tau: m.temperature,
            mode: m.mode,
            align: m.use_align,
            action_loss: m.use_action_head,
            history: m.use_history,
            lr: t.learning_rate,
            beta1: t.beta1,
            beta2: t.beta2,
            adam_eps: t.adam_eps,
            negatives: t.negatives,
            epochs: t.epochs,
            batch_size: t.batch_size,
            patience: t.patience,
            protocol: Protocol::Full,
            k: 8,
            kmeans_max_iter: DEFAULT_MAX_ITER,
            kmeans_tol: DEFAULT_TOL,
            lengths: vec![256, 1024],
            bench_batch: 4,
            warmup: 2,
            reps: 5,
            seeds: 1,
            induce_k: 0,
        }
    }
}

impl RunConfig {
    pub fn synth_config(&self) -> SynthConfig {
        SynthConfig {
            num_users: self.users,
            num_items: self.items,
            num_categories: self.cats,
            num_actions: self.actions,
            events_per_user: self.events,
            long_range_interest_strength: self.interest_strength,
            recency_drift: self.drift,
            seed: self.seed,
        }
    }

    /// Model settings; vocabulary sizes are filled from the data.
    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            hidden_dim: self.dim,
            num_layers: self.layers,
            num_heads: self.heads,
            ffn_expansion: self.ffn_expansion,
            max_recent: self.i_len,
            max_buckets: self.v,
            max_items_per_bucket: self.g,
            temperature: self.tau,
            mode: self.mode,
            use_align: self.align,
            use_action_head: self.action_loss,
            use_history: self.history,
            ..ModelConfig::default()
        }
    }

    pub fn model_config_for(&self, ds: &Dataset) -> ModelConfig {
        ModelConfig {
            item_vocab: ds.vocab.items,
            action_vocab: ds.vocab.actions,
            user_vocab: ds.vocab.users,
            category_vocab: ds.catalog.num_categories(),
            ..self.model_config()
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            learning_rate: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            adam_eps: self.adam_eps,
            epochs: self.epochs,
            batch_size: self.batch_size,
            negatives: self.negatives,
            patience: self.patience,
            seed: self.seed,
        }
    }

    pub fn eval_protocol(&self) -> Protocol {
        self.protocol.with_seed(self.seed)
    }

    /// Checks every setting the given subcommand relies on.
    pub fn validate(&self) -> Result<()> {
        let needs = |field: &Option<PathBuf>, flag: &str| {
            field
                .as_ref()
                .map(|_| ())
                .ok_or_else(|| Error::Config(format!("{} requires --{flag}", self.command)))
        };
        match self.command.as_str() {
            "synth" => {
                needs(&self.out, "out")?;
                self.synth_config().validate()?;
            }
            "compress" => {
                needs(&self.data, "data")?;
                needs(&self.out, "out")?;
                self.model_config().validate()?;
            }
            "cluster" => {
                needs(&self.model, "model")?;
                needs(&self.out, "out")?;
                if self.k == 0 {
                    return Err(Error::Config("k must be >= 1".into()));
                }
            }
            "train" | "ablate" => {
                needs(&self.data, "data")?;
                needs(&self.out, "out")?;
                self.model_config().validate()?;
                self.train_config().validate()?;
                if self.seeds == 0 {
                    return Err(Error::Config("seeds must be >= 1".into()));
                }
            }
            "eval" => {
                needs(&self.data, "data")?;
                needs(&self.model, "model")?;
                needs(&self.out, "out")?;
            }
            "bench" => {
                needs(&self.out, "out")?;
                self.model_config().validate()?;
                if self.lengths.is_empty() || self.bench_batch == 0 {
                    return Err(Error::Config(
                        "bench needs at least one --L and a batch >= 1".into(),
                    ));
                }
                if self.reps < 5 {
                    return Err(Error::Config(format!(
                        "reps must be >= 5, got {}",
                        self.reps
                    )));
                }
            }
            other => return Err(Error::Config(format!("unknown command {other:?}"))),
        }
        Ok(())
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "cause",
    version,
    about = "Categorical user-sequence compression for generative recommendation"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic event log and catalog.
    Synth(Flags),
    /// Write bucket plans and a compression report for a log.
    Compress(Flags),
    /// Induce a catalog by K-Means over a trained model's item embeddings.
    Cluster(Flags),
    /// Train on a leave-one-out split and evaluate the best checkpoint.
    Train(Flags),
    /// Evaluate a trained model on the test split.
    Eval(Flags),
    /// Analytic cost and forward wall-clock per padded length.
    Bench(Flags),
    /// Train the full model and its three ablations.
    Ablate(Flags),
}

#[derive(Debug, Default, Args)]
pub struct Flags {
    /// Flat JSON run config; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub catalog: Option<PathBuf>,
    /// Trained model directory.
    #[arg(long, alias = "embeddings")]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Keep only events with these action ids (comma separated).
    #[arg(long, value_delimiter = ',')]
    pub keep_actions: Option<Vec<ActionId>>,

    #[arg(long)]
    pub users: Option<usize>,
    #[arg(long)]
    pub items: Option<usize>,
    #[arg(long)]
    pub cats: Option<usize>,
    #[arg(long)]
    pub actions: Option<usize>,
    #[arg(long)]
    pub events: Option<usize>,
    #[arg(long)]
    pub interest_strength: Option<f64>,
    #[arg(long)]
    pub drift: Option<f64>,

    #[arg(long = "iLen")]
    pub i_len: Option<usize>,
    #[arg(long = "V")]
    pub v: Option<usize>,
    #[arg(long = "G")]
    pub g: Option<usize>,
    #[arg(long)]
    pub layers: Option<usize>,
    #[arg(long)]
    pub dim: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long)]
    pub ffn_expansion: Option<usize>,
    #[arg(long)]
    pub tau: Option<f64>,
    /// interleaved | merged
    #[arg(long)]
    pub mode: Option<AssemblyMode>,
    #[arg(long)]
    pub no_align: bool,
    #[arg(long)]
    pub no_action_loss: bool,
    #[arg(long)]
    pub no_history: bool,

    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub negatives: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub patience: Option<usize>,
    /// full | sampled:K
    #[arg(long)]
    pub protocol: Option<Protocol>,

    #[arg(long)]
    pub k: Option<usize>,

    /// Padded length to time; repeatable.
    #[arg(long = "L")]
    pub lengths: Vec<usize>,
    #[arg(long)]
    pub bench_batch: Option<usize>,
    #[arg(long)]
    pub warmup: Option<usize>,
    #[arg(long)]
    pub reps: Option<usize>,

    #[arg(long)]
    pub seeds: Option<usize>,
    #[arg(long)]
    pub induce_k: Option<usize>,
}

macro_rules! set {
    ($cfg:ident, $flags:ident, $($field:ident),+) => {
        $(if let Some(v) = $flags.$field.clone() { $cfg.$field = v; })+
    };
}

impl Flags {
    /// Defaults, then the `--config` file, then explicit flags.
    pub fn resolve(&self, command: &str) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => serde_json::from_slice::<RunConfig>(&fs::read(path)?)
                .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?,
            None => RunConfig::default(),
        };
        cfg.command = command.to_string();
        if self.data.is_some() {
            cfg.data = self.data.clone();
        }
        if self.catalog.is_some() {
            cfg.catalog = self.catalog.clone();
        }
        if self.model.is_some() {
            cfg.model = self.model.clone();
        }
        if self.out.is_some() {
            cfg.out = self.out.clone();
        }
        set!(
            cfg,
            self,
            seed,
            keep_actions,
            users,
            items,
            cats,
            actions,
            events,
            interest_strength,
            drift
        );
        set!(
            cfg,
            self,
            i_len,
            v,
            g,
            layers,
            dim,
            heads,
            ffn_expansion,
            tau,
            mode
        );
        set!(cfg, self, lr, negatives, epochs, batch_size, patience, protocol, k);
        set!(cfg, self, bench_batch, warmup, reps, seeds, induce_k);
        if self.no_align {
            cfg.align = false;
        }
        if self.no_action_loss {
            cfg.action_loss = false;
        }
        if self.no_history {
            cfg.history = false;
        }
        if !self.lengths.is_empty() {
            cfg.lengths = self.lengths.clone();
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Parses `args` (program name first), runs the subcommand and returns the
/// process exit code: 0 on success, 2 for usage errors, 1 otherwise.
pub fn run<I, A>(args: I) -> i32
where
    I: IntoIterator<Item = A>,
    A: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = e.exit_code();
            e.print().ok();
            return code;
        }
    };
    match execute(&cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

pub fn execute(command: &Command) -> Result<()> {
    let (name, flags) = match command {
        Command::Synth(f) => ("synth", f),
        Command::Compress(f) => ("compress", f),
        Command::Cluster(f) => ("cluster", f),
        Command::Train(f) => ("train", f),
        Command::Eval(f) => ("eval", f),
        Command::Bench(f) => ("bench", f),
        Command::Ablate(f) => ("ablate", f),
    };
    let cfg = flags.resolve(name)?;
    match name {
        "synth" => cmd_synth(&cfg),
        "compress" => cmd_compress(&cfg),
        "cluster" => cmd_cluster(&cfg),
        "train" => cmd_train(&cfg),
        "eval" => cmd_eval(&cfg),
        "bench" => cmd_bench(&cfg),
        _ => cmd_ablate(&cfg),
    }
}

fn out_dir(cfg: &RunConfig) -> Result<&Path> {
    let dir = cfg.out.as_deref().expect("validated");
    fs::create_dir_all(dir)?;
    Ok(dir)
}

fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    let mut json = serde_json::to_string_pretty(value)?;
    json.push('\n');
    fs::write(path, json)?;
    Ok(())
}

fn config_line(cfg: &RunConfig) -> Result<String> {
    Ok(format!("#config {}\n", serde_json::to_string(cfg)?))
}

fn write_run_config(dir: &Path, cfg: &RunConfig) -> Result<()> {
    write_json(&dir.join(RUN_CONFIG_FILE), cfg)
}

/// The event log named by `--data`, with `--catalog` and the action filter
/// applied.
pub fn load_dataset(cfg: &RunConfig) -> Result<Dataset> {
    let path = cfg.data.as_deref().expect("validated");
    let mut ds = load_events(path, Format::from_path(path))?;
    if let Some(cat) = &cfg.catalog {
        ds = ds.with_catalog(load_catalog(cat)?)?;
    }
    if !cfg.keep_actions.is_empty() {
        ds = ds.filter_actions(&cfg.keep_actions);
    }
    if ds.sequences.is_empty() {
        return Err(Error::EmptyInput(format!(
            "{} has no events",
            path.display()
        )));
    }
    Ok(ds)
}

fn cmd_synth(cfg: &RunConfig) -> Result<()> {
    let dir = out_dir(cfg)?;
    let ds = generate_synthetic(&cfg.synth_config())?;
    let mut text = config_line(cfg)?;
    text.push_str(&format_events(&ds, Format::Jsonl)?);
    fs::write(dir.join(EVENTS_FILE), text)?;
    write_catalog(&dir.join(CATALOG_FILE), &ds.catalog)?;
    write_run_config(dir, cfg)?;
    println!(
        "wrote {} users, {} events to {}",
        ds.sequences.len(),
        ds.num_events(),
        dir.display()
    );
    Ok(())
}

#[derive(Serialize)]
struct Report<'a, T: Serialize> {
    config: &'a RunConfig,
    #[serde(flatten)]
    body: T,
}

fn cmd_compress(cfg: &RunConfig) -> Result<()> {
    let dir = out_dir(cfg)?;
    let ds = load_dataset(cfg)?;
    let mut plans = config_line(cfg)?;
    for s in &ds.sequences {
        let (history, _) = partition_history_recent(&s.events, cfg.i_len)?;
        let plan = compress(history, &ds.catalog, cfg.v, cfg.g)?;
        writeln!(
            plans,
            "{}",
            serde_json::to_string(&PlanRecord::new(s.user, &plan))?
        )
        .ok();
    }
    fs::write(dir.join("plans.jsonl"), plans)?;
    let report = compression_report(
        &ds.sequences,
        &ds.catalog,
        cfg.v,
        cfg.g,
        cfg.i_len,
        cfg.layers,
        cfg.dim,
        cfg.ffn_expansion,
    )?;
    println!(
        "{} users: mean sLen {:.1} vs {:.1} uncompressed, cost ratio {:.3}",
        report.users, report.mean_total_slen, report.mean_uncompressed_slen, report.flop_ratio
    );
    write_json(
        &dir.join("compression_report.json"),
        &Report {
            config: cfg,
            body: report,
        },
    )?;
    write_run_config(dir, cfg)
}

#[derive(Serialize)]
struct ClusterSummary {
    k: usize,
    inertia: f64,
    iterations_run: usize,
    cluster_sizes: Vec<usize>,
}

fn cmd_cluster(cfg: &RunConfig) -> Result<()> {
    let model = Model32::load(cfg.model.as_deref().expect("validated"))?;
    let points: Tensor64 = model.item_embeddings().cast();
    let result = kmeans_fit(
        &points,
        cfg.k,
        cfg.seed,
        cfg.kmeans_max_iter,
        cfg.kmeans_tol,
    )?;
    let catalog = induce_catalog(&result);
    let out = cfg.out.as_deref().expect("validated");
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    write_catalog(out, &catalog)?;
    let mut text = config_line(cfg)?;
    text.push_str(&fs::read_to_string(out)?);
    fs::write(out, text)?;
    let mut sizes = vec![0; result.k()];
    for &a in &result.assignment {
        sizes[a as usize] += 1;
    }
    println!(
        "k={} inertia {:.6} after {} iterations",
        result.k(),
        result.inertia,
        result.iterations_run
    );
    write_json(
        &sidecar(out, "cluster.json"),
        &Report {
            config: cfg,
            body: ClusterSummary {
                k: result.k(),
                inertia: result.inertia,
                iterations_run: result.iterations_run,
                cluster_sizes: sizes,
            },
        },
    )
}

fn sidecar(path: &Path, suffix: &str) -> PathBuf {
    let mut name = path
        .file_name()
        .map(|n| n.to_os_string())
        .unwrap_or_default();
    name.push(".");
    name.push(suffix);
    path.with_file_name(name)
}

/// Result of training one configuration.
#[derive(Clone, Debug, Serialize)]
pub struct TrainSummary {
    pub best_epoch: usize,
    pub best_val_ndcg10: Option<f64>,
    pub val: Option<EvalReport>,
    pub test: Option<EvalReport>,
    pub log: Vec<EpochLog>,
}

fn split_data(model_cfg: &ModelConfig, ds: &Dataset) -> Result<TrainData> {
    let splits = split(&ds.sequences, SplitSpec::LeaveOneOut);
    build_data(model_cfg, &splits, &ds.catalog)
}

/// Trains `model_cfg` on `ds` and evaluates the best checkpoint on the
/// validation and test splits.
pub fn train_and_evaluate(
    cfg: &RunConfig,
    model_cfg: &ModelConfig,
    ds: &Dataset,
    seed: u64,
) -> Result<(Model32, TrainSummary)> {
    let data = split_data(model_cfg, ds)?;
    let tcfg = TrainConfig {
        seed,
        ..cfg.train_config()
    };
    let out = train(Model32::new(model_cfg.clone(), seed)?, &tcfg, &data)?;
    let protocol = cfg.protocol.with_seed(seed);
    let report = |cases: &[crate::model::TokenSequence]| -> Result<Option<EvalReport>> {
        if cases.is_empty() {
            return Ok(None);
        }
        let eval = evaluate(&out.best, cases, protocol)?;
        Ok(Some(EvalReport::new(&eval, protocol, cfg)?))
    };
    let summary = TrainSummary {
        best_epoch: out.best_epoch,
        best_val_ndcg10: out.best_val,
        val: report(&data.val)?,
        test: report(&data.test)?,
        log: out.log,
    };
    Ok((out.best, summary))
}

fn cmd_train(cfg: &RunConfig) -> Result<()> {
    let dir = out_dir(cfg)?;
    let ds = load_dataset(cfg)?;
    let model_cfg = cfg.model_config_for(&ds);
    let (model, summary) = train_and_evaluate(cfg, &model_cfg, &ds, cfg.seed)?;
    let model_dir = dir.join(MODEL_DIR);
    model.save(&model_dir)?;
    write_run_config(&model_dir, cfg)?;
    if let Some(t) = &summary.test {
        println!(
            "best epoch {}: test {}",
            summary.best_epoch,
            t.csv_row("test")
        );
    }
    write_json(
        &dir.join("train_report.json"),
        &Report {
            config: cfg,
            body: &summary,
        },
    )?;
    write_run_config(dir, cfg)
}

fn cmd_eval(cfg: &RunConfig) -> Result<()> {
    let dir = out_dir(cfg)?;
    let model = Model32::load(cfg.model.as_deref().expect("validated"))?;
    let ds = load_dataset(cfg)?;
    let data = split_data(&model.cfg, &ds)?;
    let protocol = cfg.eval_protocol();
    let eval = evaluate(&model, &data.test, protocol)?;
    let report = EvalReport::new(&eval, protocol, cfg)?;
    let mut csv = config_line(cfg)?;
    writeln!(csv, "{}", EvalReport::csv_header()).ok();
    writeln!(csv, "{}", report.csv_row("test")).ok();
    fs::write(dir.join("eval.csv"), csv)?;
    println!("{}", report.csv_row("test"));
    write_json(
        &dir.join("eval_report.json"),
        &Report {
            config: cfg,
            body: &report,
        },
    )?;
    write_run_config(dir, cfg)
}

#[derive(Clone, Debug, Serialize)]
pub struct BenchEntry {
    #[serde(rename = "L")]
    pub len: usize,
    pub cost_breakdown: CostBreakdown,
    pub timing_stats: TimingStats,
}

#[derive(Clone, Debug, Serialize)]
pub struct BenchRatio {
    pub long: usize,
    pub short: usize,
    pub flop_ratio: f64,
    pub time_ratio_ms: f64,
}

/// Published figures printed alongside measurements for comparison.
#[derive(Clone, Debug, Serialize)]
pub struct BenchReference {
    pub time_ratio: f64,
    pub cost_reduction: f64,
    pub accuracy_gain: f64,
}

fn cmd_bench(cfg: &RunConfig) -> Result<()> {
    let dir = out_dir(cfg)?;
    let longest = *cfg.lengths.iter().max().expect("validated");
    let model_cfg = ModelConfig {
        item_vocab: cfg.items,
        action_vocab: cfg.actions,
        user_vocab: cfg.users,
        category_vocab: cfg.cats,
        max_recent: cfg.i_len.max(longest.div_ceil(2)),
        ..cfg.model_config()
    };
    let mut entries = Vec::with_capacity(cfg.lengths.len());
    for &len in &cfg.lengths {
        let buckets = if cfg.history && len > 5 + cfg.v {
            cfg.v
        } else {
            0
        };
        let shape = BenchShape {
            len,
            buckets,
            bucket_items: cfg.g,
        };
        let timing_stats = time_forward(
            &model_cfg,
            shape,
            cfg.bench_batch,
            cfg.warmup,
            cfg.reps,
            cfg.seed,
        )?;
        println!(
            "L={len:5}: {:9.3} ms mean, {:9.3} ms min",
            timing_stats.mean_ms, timing_stats.min_ms
        );
        entries.push(BenchEntry {
            len,
            cost_breakdown: flop_cost(cfg.layers, len, cfg.dim, cfg.ffn_expansion),
            timing_stats,
        });
    }
    let shortest = entries
        .iter()
        .min_by_key(|e| e.len)
        .expect("nonempty")
        .clone();
    let ratios: Vec<BenchRatio> = entries
        .iter()
        .filter(|e| e.len != shortest.len)
        .map(|e| BenchRatio {
            long: e.len,
            short: shortest.len,
            flop_ratio: flop_ratio(cfg.layers, e.len, shortest.len, cfg.dim, cfg.ffn_expansion),
            time_ratio_ms: e.timing_stats.mean_ms / shortest.timing_stats.mean_ms,
        })
        .collect();
    let reference = BenchReference {
        time_ratio: REFERENCE_TIME_RATIO,
        cost_reduction: 6.0,
        accuracy_gain: REFERENCE_ACCURACY_GAIN,
    };
    for r in &ratios {
        println!(
            "L={} vs L={}: cost x{:.3}, time x{:.2} (reference time x{:.2})",
            r.long, r.short, r.flop_ratio, r.time_ratio_ms, reference.time_ratio
        );
    }
    let mut csv = config_line(cfg)?;
    writeln!(
        csv,
        "L,attention_cost,ffn_cost,total_cost,mean_ms,std_ms,min_ms"
    )
    .ok();
    for e in &entries {
        let c = &e.cost_breakdown;
        let t = &e.timing_stats;
        writeln!(
            csv,
            "{},{},{},{},{:.4},{:.4},{:.4}",
            e.len, c.attention_cost, c.ffn_cost, c.total, t.mean_ms, t.std_ms, t.min_ms
        )
        .ok();
    }
    fs::write(dir.join("bench.csv"), csv)?;
    #[derive(Serialize)]
    struct Body {
        entries: Vec<BenchEntry>,
        ratios: Vec<BenchRatio>,
        reference: BenchReference,
    }
    write_json(
        &dir.join("bench.json"),
        &Report {
            config: cfg,
            body: Body {
                entries,
                ratios,
                reference,
            },
        },
    )?;
    write_run_config(dir, cfg)
}

/// The full model and its three ablations, each with one component off.
pub fn ablation_variants(base: &ModelConfig) -> Vec<(&'static str, ModelConfig)> {
    vec![
        ("full", base.clone()),
        (
            "no_align",
            ModelConfig {
                use_align: false,
                ..base.clone()
            },
        ),
        (
            "no_action",
            ModelConfig {
                use_action_head: false,
                ..base.clone()
            },
        ),
        (
            "no_history",
            ModelConfig {
                use_history: false,
                ..base.clone()
            },
        ),
    ]
}

/// Per-variant outcome averaged over seeds.
#[derive(Clone, Debug, Serialize)]
pub struct AblationRow {
    pub variant: String,
    pub seeds: Vec<u64>,
    pub best_epochs: Vec<usize>,
    pub val_ndcg10: Vec<f64>,
    pub mean_val_ndcg10: f64,
    pub mean_test: Metrics,
}

fn ablation_row(variant: &str, runs: &[(u64, TrainSummary)]) -> AblationRow {
    let val: Vec<f64> = runs
        .iter()
        .map(|(_, s)| s.best_val_ndcg10.unwrap_or(0.0))
        .collect();
    let tests: Vec<Metrics> = runs
        .iter()
        .map(|(_, s)| s.test.as_ref().map(|t| t.metrics).unwrap_or_default())
        .collect();
    AblationRow {
        variant: variant.to_string(),
        seeds: runs.iter().map(|(s, _)| *s).collect(),
        best_epochs: runs.iter().map(|(_, s)| s.best_epoch).collect(),
        mean_val_ndcg10: val.iter().sum::<f64>() / val.len() as f64,
        val_ndcg10: val,
        mean_test: Metrics::mean(&tests),
    }
}

/// Runs every ablation variant for `cfg.seeds` consecutive seeds. With
/// `cfg.induce_k > 0` a final row retrains the full model on a catalog
/// clustered from each seed's full-model item embeddings.
pub fn run_ablation(cfg: &RunConfig, ds: &Dataset) -> Result<Vec<AblationRow>> {
    let base = cfg.model_config_for(ds);
    let seeds: Vec<u64> = (0..cfg.seeds as u64).map(|i| cfg.seed + i).collect();
    let mut rows = Vec::new();
    let mut full_models = Vec::new();
    for (name, mcfg) in ablation_variants(&base) {
        let mut runs = Vec::new();
        for &seed in &seeds {
            let (model, summary) = train_and_evaluate(cfg, &mcfg, ds, seed)?;
            if name == "full" {
                full_models.push(model);
            }
            runs.push((seed, summary));
        }
        rows.push(ablation_row(name, &runs));
    }
    if cfg.induce_k > 0 {
        let mut runs = Vec::new();
        for (&seed, model) in seeds.iter().zip(&full_models) {
            let induced = induced_catalog(model, cfg.induce_k, seed, cfg)?;
            let ds = ds.with_catalog(induced)?;
            let (_, summary) = train_and_evaluate(cfg, &cfg.model_config_for(&ds), &ds, seed)?;
            runs.push((seed, summary));
        }
        rows.push(ablation_row("induced", &runs));
    }
    Ok(rows)
}

/// K-Means catalog over a model's item embeddings.
pub fn induced_catalog(
    model: &Model32,
    k: usize,
    seed: u64,
    cfg: &RunConfig,
) -> Result<ItemCatalog> {
    let points: Tensor64 = model.item_embeddings().cast();
    let result = kmeans_fit(&points, k, seed, cfg.kmeans_max_iter, cfg.kmeans_tol)?;
    Ok(induce_catalog(&result))
}

fn cmd_ablate(cfg: &RunConfig) -> Result<()> {
    let dir = out_dir(cfg)?;
    let ds = load_dataset(cfg)?;
    let rows = run_ablation(cfg, &ds)?;
    let mut csv = config_line(cfg)?;
    writeln!(csv, "variant,mean_val_N@10,test_N@10,test_N@20,test_MRR").ok();
    for r in &rows {
        let line = format!(
            "{},{:.6},{:.6},{:.6},{:.6}",
            r.variant, r.mean_val_ndcg10, r.mean_test.n10, r.mean_test.n20, r.mean_test.mrr
        );
        println!("{line}");
        writeln!(csv, "{line}").ok();
    }
    fs::write(dir.join("ablation.csv"), csv)?;
    #[derive(Serialize)]
    struct Body<'a> {
        rows: &'a [AblationRow],
    }
    write_json(
        &dir.join("ablation.json"),
        &Report {
            config: cfg,
            body: Body { rows: &rows },
        },
    )?;
    write_run_config(dir, cfg)
}
