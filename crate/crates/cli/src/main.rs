use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use cachejoint::cachesim::{
    simulate, useful_prefetch_ratio, write_events_csv, CacheConfig, Lru, Mru, NextLinePrefetcher,
    Prefetcher, ReplacementPolicy, SimOptions, StridePrefetcher,
};
use cachejoint::oracle::{belady_simulate, read_labels_csv, write_labels_csv, LabeledInsertion};
use cachejoint::pipeline::{
    comparison_table, evaluate_accuracy, load_model, loss_curve_csv, metrics_csv, model_replacement_policy,
    parse_reports_csv, prepare_dataset, prepare_dataset_with_vocabs, reports_csv, save_model, sha256_hex,
    train_model, Mode, ModelPolicy, OraclePredictor, RunConfig,
};
use cachejoint::trace::{gen_synthetic, parse_trace, write_trace, BlockGeometry, Trace, Workload};

/// Marks errors caused by how the command was invoked (exit code 2).
#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

#[derive(Parser)]
#[command(name = "cachejoint", version, about = "Cache replacement / prefetching learning laboratory")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic trace
    Gen(GenArgs),
    /// Label insertions with Belady's MIN
    Label(LabelArgs),
    /// Replay a trace through the cache simulator
    Simulate(SimulateArgs),
    /// Featurize, train and evaluate one model
    Train(TrainArgs),
    /// Evaluate a checkpoint on a trace's test split
    Eval(EvalArgs),
    /// Build a comparison table from evaluation reports
    Report(ReportArgs),
}

#[derive(Args)]
struct ConfigArgs {
    /// Flat `key = value` config file
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config key (repeatable)
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => {
                let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                RunConfig::parse(&text).with_context(|| format!("in {}", p.display()))?
            }
            None => RunConfig::default(),
        };
        for kv in &self.set {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| usage(format!("--set expects KEY=VALUE, got `{kv}`")))?;
            cfg.set(k.trim(), v.trim())?;
        }
        Ok(cfg)
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum GenKind {
    Loop,
    Stream,
    Stride,
    Mixed,
    Coupled,
}

#[derive(Args)]
struct GenArgs {
    #[arg(long, value_enum)]
    kind: GenKind,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    length: Option<usize>,
    #[arg(long)]
    working_set: Option<u64>,
    #[arg(long, allow_hyphen_values = true)]
    stride: Option<i64>,
    #[arg(long)]
    stream_fraction: Option<f64>,
    #[arg(long)]
    phases: Option<usize>,
    #[arg(long)]
    phase_len: Option<usize>,
    #[arg(long, default_value_t = 64)]
    block_size: u64,
    #[arg(long, default_value_t = 4096)]
    page_size: u64,
    #[arg(short, long)]
    output: PathBuf,
}

#[derive(Args)]
struct LabelArgs {
    trace: PathBuf,
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(short, long)]
    output: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum PolicyArg {
    Lru,
    Mru,
    /// Label-guided eviction replaying Belady labels (needs --labels)
    Oracle,
    /// Checkpoint-backed classifier (needs --checkpoint)
    Model,
}

#[derive(Clone, Copy, ValueEnum)]
enum PrefetcherArg {
    None,
    Stride,
    NextLine,
}

#[derive(Args)]
struct SimulateArgs {
    trace: PathBuf,
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long, value_enum, default_value = "lru")]
    policy: PolicyArg,
    #[arg(long, value_enum, default_value = "none")]
    prefetcher: PrefetcherArg,
    #[arg(long)]
    labels: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Event log CSV
    #[arg(short, long)]
    output: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Baseline,
    Joint,
    Contrastive,
}

impl From<ModeArg> for Mode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Baseline => Mode::Baseline,
            ModeArg::Joint => Mode::Joint,
            ModeArg::Contrastive => Mode::Contrastive,
        }
    }
}

#[derive(Args)]
struct TrainArgs {
    trace: PathBuf,
    #[arg(long)]
    labels: PathBuf,
    #[arg(long, value_enum)]
    mode: ModeArg,
    #[command(flatten)]
    config: ConfigArgs,
    /// Overrides the config's `seed`
    #[arg(long)]
    seed: Option<u64>,
    /// Unfreeze encoders during contrastive stage 2
    #[arg(long)]
    finetune: bool,
    /// Parent directory; the run goes to `<digest>-s<seed>/` inside it
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    trace: PathBuf,
    #[arg(long)]
    labels: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(short, long)]
    output: PathBuf,
}

#[derive(Args)]
struct ReportArgs {
    #[arg(required = true)]
    reports: Vec<PathBuf>,
    /// Markdown table
    #[arg(short, long)]
    output: PathBuf,
    /// CSV table (defaults to the markdown path with a .csv extension)
    #[arg(long)]
    csv: Option<PathBuf>,
}

/// Writes through a temporary sibling and renames into place.
fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let name = path
        .file_name()
        .ok_or_else(|| usage(format!("not a file path: {}", path.display())))?
        .to_string_lossy();
    let tmp = path.with_file_name(format!(".{name}.tmp{}", std::process::id()));
    fs::write(&tmp, bytes).with_context(|| format!("writing {}", tmp.display()))?;
    fs::rename(&tmp, path).with_context(|| format!("renaming into {}", path.display()))?;
    Ok(())
}

fn sidecar(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".meta");
    PathBuf::from(s)
}

fn render_kv(kv: &BTreeMap<&str, String>) -> String {
    kv.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
}

fn parse_kv(text: &str) -> BTreeMap<String, String> {
    text.lines()
        .filter_map(|l| l.split_once('='))
        .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
        .collect()
}

fn trace_name(path: &Path) -> String {
    path.file_stem().map_or_else(|| "trace".into(), |s| s.to_string_lossy().into_owned())
}

fn read_trace(path: &Path, geo: &BlockGeometry) -> Result<(Trace, Vec<u8>)> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    let trace = parse_trace(BufReader::new(bytes.as_slice()), &trace_name(path), geo)?;
    Ok((trace, bytes))
}

/// Reads labels and checks, via the sidecar written by `label`, that they
/// were computed from these trace bytes under this cache configuration.
fn read_labels(path: &Path, trace_bytes: &[u8], cache: &CacheConfig) -> Result<Vec<LabeledInsertion>> {
    let meta_path = sidecar(path);
    let meta = parse_kv(
        &fs::read_to_string(&meta_path)
            .with_context(|| format!("reading label sidecar {}", meta_path.display()))?,
    );
    let want = sha256_hex(trace_bytes);
    match meta.get("trace_sha256") {
        Some(d) if *d == want => {}
        Some(d) => bail!("labels {} were computed from a different trace (digest {d}, trace is {want})", path.display()),
        None => bail!("label sidecar {} has no trace_sha256", meta_path.display()),
    }
    for (k, v) in [
        ("num_sets", cache.num_sets.to_string()),
        ("associativity", cache.associativity.to_string()),
        ("block_size", cache.geometry.block_size_bytes.to_string()),
    ] {
        if meta.get(k) != Some(&v) {
            bail!(
                "labels {} were computed with {k} = {}, config has {v}",
                path.display(),
                meta.get(k).map_or("?", String::as_str)
            );
        }
    }
    let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    Ok(read_labels_csv(BufReader::new(file))?)
}

fn cmd_gen(a: &GenArgs) -> Result<()> {
    let need = |name: &str, v: Option<usize>| v.ok_or_else(|| usage(format!("--{name} is required for this kind")));
    let mut params: BTreeMap<&str, String> = BTreeMap::new();
    let workload = match a.kind {
        GenKind::Loop => Workload::Loop {
            working_set: a.working_set.ok_or_else(|| usage("--working-set is required for loop"))?,
            length: need("length", a.length)?,
        },
        GenKind::Stream => Workload::Stream {
            length: need("length", a.length)?,
        },
        GenKind::Stride => Workload::Stride {
            stride: a.stride.ok_or_else(|| usage("--stride is required for stride"))?,
            length: need("length", a.length)?,
        },
        GenKind::Mixed => Workload::Mixed {
            working_set: a.working_set.ok_or_else(|| usage("--working-set is required for mixed"))?,
            length: need("length", a.length)?,
            stream_fraction: a
                .stream_fraction
                .ok_or_else(|| usage("--stream-fraction is required for mixed"))?,
        },
        GenKind::Coupled => Workload::Coupled {
            phases: need("phases", a.phases)?,
            phase_len: need("phase-len", a.phase_len)?,
        },
    };
    match &workload {
        Workload::Loop { working_set, length } => {
            params.insert("working_set", working_set.to_string());
            params.insert("length", length.to_string());
        }
        Workload::Stream { length } => {
            params.insert("length", length.to_string());
        }
        Workload::Stride { stride, length } => {
            params.insert("stride", stride.to_string());
            params.insert("length", length.to_string());
        }
        Workload::Mixed { working_set, length, stream_fraction } => {
            params.insert("working_set", working_set.to_string());
            params.insert("length", length.to_string());
            params.insert("stream_fraction", stream_fraction.to_string());
        }
        Workload::Coupled { phases, phase_len } => {
            params.insert("phases", phases.to_string());
            params.insert("phase_len", phase_len.to_string());
        }
    }
    let geo = BlockGeometry::new(a.block_size, a.page_size)?;
    let trace = gen_synthetic(&workload, &geo, a.seed)?;
    let mut buf = Vec::new();
    write_trace(&trace, &mut buf)?;
    params.insert("kind", workload.kind().name().to_string());
    params.insert("seed", a.seed.to_string());
    params.insert("block_size", a.block_size.to_string());
    params.insert("page_size", a.page_size.to_string());
    params.insert("accesses", trace.len().to_string());
    write_atomic(&a.output, &buf)?;
    write_atomic(&sidecar(&a.output), render_kv(&params).as_bytes())?;
    println!("wrote {} accesses to {}", trace.len(), a.output.display());
    Ok(())
}

fn cmd_label(a: &LabelArgs) -> Result<()> {
    let cfg = a.config.load()?;
    let cache = cfg.cache_config()?;
    let (trace, bytes) = read_trace(&a.trace, &cache.geometry)?;
    let result = belady_simulate(&trace, &cache);
    let mut buf = Vec::new();
    write_labels_csv(&result.insertions, &mut buf)?;
    let friendly = result.friendly_fraction();
    let mut meta = BTreeMap::new();
    meta.insert("trace_sha256", sha256_hex(&bytes));
    meta.insert("num_sets", cache.num_sets.to_string());
    meta.insert("associativity", cache.associativity.to_string());
    meta.insert("block_size", cache.geometry.block_size_bytes.to_string());
    meta.insert("page_size", cache.geometry.page_size_bytes.to_string());
    meta.insert("hits", result.hits.to_string());
    meta.insert("insertions", result.insertions.len().to_string());
    write_atomic(&a.output, &buf)?;
    write_atomic(&sidecar(&a.output), render_kv(&meta).as_bytes())?;
    println!("hits: {}", result.hits);
    println!("insertions: {}", result.insertions.len());
    println!("friendly: {:.2}%", 100.0 * friendly);
    println!(
        "averse: {:.2}%",
        if result.insertions.is_empty() { 0.0 } else { 100.0 * (1.0 - friendly) }
    );
    Ok(())
}

fn cmd_simulate(a: &SimulateArgs) -> Result<()> {
    let cfg = a.config.load()?;
    let cache = cfg.cache_config()?;
    let (trace, bytes) = read_trace(&a.trace, &cache.geometry)?;
    let mut policy: Box<dyn ReplacementPolicy> = match a.policy {
        PolicyArg::Lru => Box::new(Lru),
        PolicyArg::Mru => Box::new(Mru),
        PolicyArg::Oracle => {
            let path = a.labels.as_ref().ok_or_else(|| usage("--policy oracle needs --labels"))?;
            let labels = read_labels(path, &bytes, &cache)?;
            Box::new(ModelPolicy::new(OraclePredictor::new(&labels), &cache))
        }
        PolicyArg::Model => {
            let path = a
                .checkpoint
                .as_ref()
                .ok_or_else(|| usage("--policy model needs --checkpoint"))?;
            let ckpt = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
            Box::new(model_replacement_policy(&ckpt, &cache)?)
        }
    };
    let degree = cfg.log_prefetch_degree.max(1);
    let mut stride;
    let mut next;
    let prefetcher: Option<&mut dyn Prefetcher> = match a.prefetcher {
        PrefetcherArg::None => None,
        PrefetcherArg::Stride => {
            stride = StridePrefetcher::new(degree);
            Some(&mut stride)
        }
        PrefetcherArg::NextLine => {
            next = NextLinePrefetcher { degree };
            Some(&mut next)
        }
    };
    let r = simulate(&trace, &cache, policy.as_mut(), prefetcher, &SimOptions::default())?;
    if let Some(out) = &a.output {
        let mut buf = Vec::new();
        write_events_csv(&r.events, &mut buf)?;
        write_atomic(out, &buf)?;
    }
    let total = r.demand_hits + r.demand_misses;
    println!("demand hits: {}", r.demand_hits);
    println!("demand misses: {}", r.demand_misses);
    println!(
        "hit rate: {:.2}%",
        if total == 0 { 0.0 } else { 100.0 * r.demand_hits as f64 / total as f64 }
    );
    if r.prefetch_issued > 0 {
        println!("prefetches issued: {}", r.prefetch_issued);
        println!("useful prefetch ratio: {:.4}", useful_prefetch_ratio(&r));
    }
    Ok(())
}

fn cmd_train(a: &TrainArgs) -> Result<()> {
    let mut cfg = a.config.load()?;
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if a.finetune {
        cfg.finetune = true;
    }
    let cache = cfg.cache_config()?;
    let (trace, bytes) = read_trace(&a.trace, &cache.geometry)?;
    let labels = read_labels(&a.labels, &bytes, &cache)?;
    let mode = Mode::from(a.mode);
    let ds = prepare_dataset(&trace_name(&a.trace), &trace, &labels, &cfg)?;
    let outcome = train_model(mode, &ds, &cfg, cfg.seed)?;
    let digest = cfg.digest();
    let report = evaluate_accuracy(&outcome.model, &ds, cfg.seed, &digest)?;

    let dir = a.out_dir.join(format!("{}-s{}", &digest[..12], cfg.seed));
    write_atomic(&dir.join("config.txt"), cfg.render().as_bytes())?;
    for (stem, bytes) in save_model(&outcome.model, &ds, &cfg, cfg.seed) {
        write_atomic(&dir.join(format!("{stem}.ckpt")), &bytes)?;
    }
    write_atomic(&dir.join(format!("{}_metrics.csv", mode.as_str())), metrics_csv(&outcome.history).as_bytes())?;
    if !outcome.pf_history.is_empty() {
        write_atomic(&dir.join("baseline_pf_metrics.csv"), metrics_csv(&outcome.pf_history).as_bytes())?;
    }
    if !outcome.pretrain_curve.is_empty() {
        write_atomic(&dir.join("pretrain_loss.csv"), loss_curve_csv(&outcome.pretrain_curve).as_bytes())?;
    }
    write_atomic(&dir.join(format!("{}_report.csv", mode.as_str())), reports_csv(std::slice::from_ref(&report)).as_bytes())?;

    println!("run directory: {}", dir.display());
    println!("best epoch: {}", outcome.best_epoch);
    if let Some(gap) = outcome.cosine_gap {
        println!("held-out cosine gap: {gap:.4}");
    }
    println!("test accuracy: {:.4}", report.accuracy);
    Ok(())
}

fn cmd_eval(a: &EvalArgs) -> Result<()> {
    let ckpt = fs::read(&a.checkpoint).with_context(|| format!("reading {}", a.checkpoint.display()))?;
    let loaded = load_model(&ckpt)?;
    let mut cfg = a.config.load()?;
    cfg.history = loaded.history;
    cfg.num_sets = loaded.num_sets;
    cfg.block_size = loaded.geometry.block_size_bytes;
    cfg.page_size = loaded.geometry.page_size_bytes;
    let cache = cfg.cache_config()?;
    let (trace, bytes) = read_trace(&a.trace, &cache.geometry)?;
    let labels = read_labels(&a.labels, &bytes, &cache)?;
    let ds = prepare_dataset_with_vocabs(&trace_name(&a.trace), &trace, &labels, &cfg, Some(loaded.vocabs.clone()))?;
    let seed = loaded.meta.get("seed").and_then(|s| s.parse().ok()).unwrap_or(cfg.seed);
    let digest = loaded.meta.get("config_digest").cloned().unwrap_or_else(|| cfg.digest());
    let report = evaluate_accuracy(&loaded.model, &ds, seed, &digest)?;
    write_atomic(&a.output, reports_csv(std::slice::from_ref(&report)).as_bytes())?;
    println!("test accuracy: {:.4}", report.accuracy);
    Ok(())
}

fn cmd_report(a: &ReportArgs) -> Result<()> {
    let mut reports = Vec::new();
    for p in &a.reports {
        let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
        reports.extend(parse_reports_csv(&text).with_context(|| format!("in {}", p.display()))?);
    }
    let table = comparison_table(&reports)?;
    let md = table.to_markdown();
    write_atomic(&a.output, md.as_bytes())?;
    let csv = a.csv.clone().unwrap_or_else(|| a.output.with_extension("csv"));
    write_atomic(&csv, table.to_csv().as_bytes())?;
    print!("{md}");
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::Gen(a) => cmd_gen(a),
        Command::Label(a) => cmd_label(a),
        Command::Simulate(a) => cmd_simulate(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Report(a) => cmd_report(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(2) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<UsageError>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
