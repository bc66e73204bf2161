use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::Value;

use decodeprobe::blackbox::{record, remote_connect, replay, serve, Endpoint, RemoteConfig, RemoteEndpoint};
use decodeprobe::distmatch::{analytic_record, best_match, observe, KnownDistributionDB};
use decodeprobe::harness::tables::{model_tables, system_for, Perturbation};
use decodeprobe::harness::{
    attack, run_discrimination_eval, run_k_eval, run_p_eval, AttackConfig, EvalReport, ExperimentKind, ExperimentPlan,
};
use decodeprobe::prompts::{catalog, find, PromptSpec, RenderedPrompt};
use decodeprobe::{DecodingStrategy, Error, Metric, Result, Truncation};

#[derive(Parser)]
#[command(name = "decodeprobe", version, about = "Identify top-k / top-p decoding behind a text endpoint")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Evaluate the k estimator on simulated top-k systems.
    EvalK(EvalArgs),
    /// Evaluate the p estimator on simulated top-p systems.
    EvalP {
        #[command(flatten)]
        eval: EvalArgs,
        /// Total variation between the known distributions and the truth.
        #[arg(long)]
        known_tv: Option<f64>,
        /// Direction of the perturbation: random or flatten.
        #[arg(long, value_parser = parse_perturbation)]
        perturbation: Option<Perturbation>,
    },
    /// Evaluate the top-k / top-p classifier.
    EvalClassify(EvalArgs),
    /// Attack an endpoint: classify its decoding and estimate the parameter.
    Attack(AttackArgs),
    /// Manage the known-distribution database.
    Db {
        #[command(subcommand)]
        command: DbCommand,
    },
    /// Serve a simulated system over the wire protocol.
    ServeSim(ServeArgs),
}

#[derive(Args)]
struct EvalArgs {
    /// JSON object overriding plan and estimator fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    n_systems: Option<usize>,
    /// Output directory for the CSV and JSON files.
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

#[derive(Args)]
struct EndpointArgs {
    /// Base URL of the endpoint.
    #[arg(long, env = "DECODEPROBE_ENDPOINT")]
    endpoint: Option<String>,
    /// Bearer token sent with every request.
    #[arg(long, env = "DECODEPROBE_TOKEN", hide_env_values = true)]
    token: Option<String>,
    /// Minimum spacing between requests, in milliseconds.
    #[arg(long, default_value_t = 0)]
    min_interval_ms: u64,
}

impl EndpointArgs {
    fn connect(&self) -> Result<RemoteEndpoint> {
        let url = self.endpoint.clone().ok_or_else(|| Error::InvalidParameter("--endpoint is required".into()))?;
        let mut cfg = RemoteConfig::new(url);
        cfg.bearer_token = self.token.clone();
        cfg.min_interval = std::time::Duration::from_millis(self.min_interval_ms);
        remote_connect(cfg)
    }
}

#[derive(Args)]
struct AttackArgs {
    #[command(flatten)]
    endpoint: EndpointArgs,
    /// Known-distribution database (needed for top-p endpoints).
    #[arg(long)]
    db: Option<PathBuf>,
    /// JSON object overriding attack and estimator fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seed for exemplar rendering.
    #[arg(long)]
    seed: Option<u64>,
    /// Append every response to this JSONL cache.
    #[arg(long, conflicts_with = "replay")]
    record: Option<PathBuf>,
    /// Answer from a JSONL cache instead of the endpoint.
    #[arg(long)]
    replay: Option<PathBuf>,
    /// Write the JSON report here.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Print the JSON report instead of the text summary.
    #[arg(long)]
    json: bool,
}

#[derive(Subcommand)]
enum DbCommand {
    /// Add records for a reference model, by sampling or from /logprobs.
    Ingest {
        #[arg(long)]
        db: PathBuf,
        #[arg(long)]
        model: String,
        #[arg(long = "prompt", default_values = ["months", "dates"])]
        prompts: Vec<String>,
        #[command(flatten)]
        endpoint: EndpointArgs,
        /// Samples per prompt when ingesting empirically.
        #[arg(long, default_value_t = 10000)]
        n: usize,
        /// Use the endpoint's full probabilities instead of sampling.
        #[arg(long)]
        logprobs: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// List records.
    List {
        #[arg(long)]
        db: PathBuf,
    },
    /// Find the record closest to an endpoint's samples for one prompt.
    Match {
        #[arg(long)]
        db: PathBuf,
        #[arg(long)]
        prompt: String,
        #[command(flatten)]
        endpoint: EndpointArgs,
        #[arg(long, default_value_t = 3000)]
        n: usize,
        #[arg(long, default_value = "total_variation")]
        metric: Metric,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum StrategyKind {
    Argmax,
    TopK,
    TopP,
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long, default_value = "127.0.0.1:8080")]
    addr: String,
    /// Port on 127.0.0.1; overrides --addr. 0 picks a free port.
    #[arg(long)]
    port: Option<u16>,
    #[arg(long, value_enum, default_value = "top-p")]
    strategy: StrategyKind,
    #[arg(long, default_value_t = 40)]
    k: usize,
    #[arg(long, default_value_t = 0.9)]
    p: f64,
    #[arg(long, default_value_t = 1.0)]
    temperature: f64,
    /// Seed of the synthetic model's tables (its identity).
    #[arg(long, default_value_t = 0)]
    table_seed: u64,
    /// Seed of the sampling stream.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let specs = catalog()?;
    match cli.command {
        Command::EvalK(args) => {
            let plan = eval_plan(ExperimentKind::K, &args, None)?;
            let report = run_k_eval(&plan, &specs)?;
            finish_eval(&report, &args.out, "eval_k")
        }
        Command::EvalP { eval, known_tv, perturbation } => {
            let mut plan = eval_plan(ExperimentKind::P, &eval, known_tv)?;
            if let Some(kind) = perturbation {
                plan.perturbation = kind;
            }
            let report = run_p_eval(&plan, &specs)?;
            finish_eval(&report, &eval.out, "eval_p")
        }
        Command::EvalClassify(args) => {
            let plan = eval_plan(ExperimentKind::Classify, &args, None)?;
            let report = run_discrimination_eval(&plan, &specs)?;
            let (csv, json) = report.write(&args.out, "eval_classify")?;
            println!("{:<8} {:>8} {:>6} {:>6} {:>6} {:>6}", "strategy", "param", "top_k", "top_p", "indet", "acc");
            for s in &report.summary.settings {
                let acc = s.accuracy.map_or("-".to_string(), |a| format!("{a:.3}"));
                println!(
                    "{:<8} {:>8} {:>6} {:>6} {:>6} {:>6}",
                    s.strategy, s.param, s.top_k, s.top_p, s.indeterminate, acc
                );
            }
            if let Some(a) = report.summary.accuracy {
                println!("accuracy: {a:.4}");
            }
            println!("wrote {} and {}", csv.display(), json.display());
            Ok(())
        }
        Command::Attack(args) => run_attack(args, &specs),
        Command::Db { command } => run_db(command, &specs),
        Command::ServeSim(args) => run_serve(args, &specs),
    }
}

fn parse_perturbation(s: &str) -> std::result::Result<Perturbation, String> {
    serde_json::from_value(Value::String(s.to_string())).map_err(|_| format!("unknown perturbation {s:?}"))
}

fn read_json(path: &Path) -> Result<Value> {
    Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
}

fn eval_plan(kind: ExperimentKind, args: &EvalArgs, known_tv: Option<f64>) -> Result<ExperimentPlan> {
    let mut plan = ExperimentPlan::for_kind(kind);
    if let Some(path) = &args.config {
        plan = plan.overlay(&read_json(path)?)?;
    }
    if let Some(seed) = args.seed {
        plan.seed = seed;
    }
    if let Some(n) = args.n_systems {
        plan.n_systems = n;
    }
    if let Some(tv) = known_tv {
        plan.known_tv = tv;
    }
    plan.validate()?;
    Ok(plan)
}

fn finish_eval(report: &EvalReport, out: &Path, stem: &str) -> Result<()> {
    let (csv, json) = report.write(out, stem)?;
    let print = |label: &str, a: &decodeprobe::harness::Aggregates| {
        println!(
            "{label}: n={} exact={:.4} within±{}={:.4} mae={:.4} rmse={:.4} max_samples={}",
            a.n, a.exact_accuracy, a.tolerance, a.acc_within_tolerance, a.mae, a.rmse, a.max_samples
        );
    };
    print("all", report.aggregates());
    if let (Some(floor), Some(a)) = (report.summary.floor, &report.summary.above_floor) {
        print(&format!("p > {floor:.4}"), a);
    }
    println!("wrote {} and {}", csv.display(), json.display());
    Ok(())
}

fn run_attack(args: AttackArgs, specs: &[PromptSpec]) -> Result<()> {
    let mut cfg = AttackConfig::default();
    if let Some(path) = &args.config {
        cfg = serde_json::from_value(read_json(path)?)?;
    }
    if let Some(seed) = args.seed {
        cfg.render_seed = seed;
    }
    let db = match &args.db {
        Some(path) => KnownDistributionDB::load(path)?,
        None => KnownDistributionDB::new(),
    };
    let mut endpoint: Box<dyn Endpoint> = match (&args.replay, &args.record) {
        (Some(path), _) => Box::new(replay(path)?),
        (None, Some(path)) => Box::new(record(args.endpoint.connect()?, path)?),
        (None, None) => Box::new(args.endpoint.connect()?),
    };
    let report = attack(&mut endpoint, specs, &db, &cfg)?;
    let json = report.to_json()?;
    if let Some(out) = &args.out {
        fs::write(out, &json)?;
    }
    let text = if args.json { json } else { report.render_text() };
    std::io::stdout().write_all(text.as_bytes())?;
    Ok(())
}

fn run_db(command: DbCommand, specs: &[PromptSpec]) -> Result<()> {
    match command {
        DbCommand::Ingest { db: path, model, prompts, endpoint, n, logprobs, seed } => {
            let mut db = KnownDistributionDB::load_or_default(&path)?;
            let mut remote = endpoint.connect()?;
            for (i, id) in prompts.iter().enumerate() {
                let spec = find(specs, id)?;
                let prompt = RenderedPrompt::new(spec, seed.wrapping_add(i as u64))?;
                if logprobs {
                    let probs = remote.logprobs(&prompt.text, None)?;
                    db.upsert(analytic_record(&model, spec, &probs)?)?;
                } else {
                    db.ingest(&mut remote, &prompt, n, &model)?;
                }
                println!("ingested {model}/{id}");
            }
            db.save(&path)
        }
        DbCommand::List { db } => {
            let db = KnownDistributionDB::load(&db)?;
            println!("{:<20} {:<12} {:<10} {:>8} {:>8}", "model", "prompt", "source", "samples", "support");
            for r in &db.records {
                let samples = r.sample_count.map_or("-".to_string(), |n| n.to_string());
                let source = serde_json::to_value(r.provenance)?;
                println!(
                    "{:<20} {:<12} {:<10} {:>8} {:>8}",
                    r.model_id,
                    r.prompt_id,
                    source.as_str().unwrap_or("?"),
                    samples,
                    r.dist.len()
                );
            }
            Ok(())
        }
        DbCommand::Match { db, prompt, endpoint, n, metric, seed } => {
            let db = KnownDistributionDB::load(&db)?;
            let spec = find(specs, &prompt)?;
            let rendered = RenderedPrompt::new(spec, seed)?;
            let mut remote = endpoint.connect()?;
            let (_, empirical) = observe(&mut remote, &rendered, n)?;
            let m = best_match(&empirical.dist, &db, &prompt, metric)?;
            println!("{}", serde_json::to_string_pretty(&m)?);
            Ok(())
        }
    }
}

fn run_serve(args: ServeArgs, specs: &[PromptSpec]) -> Result<()> {
    let truncation = match args.strategy {
        StrategyKind::Argmax => Truncation::Argmax,
        StrategyKind::TopK => Truncation::TopK { k: args.k },
        StrategyKind::TopP => Truncation::TopP { p: args.p },
    };
    let strategy = DecodingStrategy::new(truncation, args.temperature)?;
    let all: Vec<&PromptSpec> = specs.iter().collect();
    let tables = model_tables(&all, args.table_seed)?;
    let sim = system_for(&all, &tables, strategy, args.seed)?;
    let addr = args.port.map_or(args.addr, |port| format!("127.0.0.1:{port}"));
    let handle = serve(&addr, sim)?;
    println!("serving {strategy} on {}", handle.url());
    std::io::stdout().flush()?;
    handle.join();
    Ok(())
}
