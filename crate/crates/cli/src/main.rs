//! `lsd` — reproducible runs of the demonstration-selection framework:
//! synthetic data generation, index building, DQN training, baseline
//! evaluation, and selection analysis, all driven by one TOML config.
//!
//! Exit codes: 0 success, 1 config/usage error, 2 data error, 3 scorer
//! unreachable.

mod config;

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::{RunConfig, ScorerChoice};
use lsd_core::agent::{self, Agent, AgentError};
use lsd_core::env::{generate_synthetic, Scorer, SyntheticKind, SyntheticScorer};
use lsd_core::eval::{
    self, evaluate_policy, EvalSetup, Policy, QueryRecord, SplitPlan, Summary,
};
use lsd_core::index::{IndexConfig, IvfPqIndex};
use lsd_core::mllm::{MllmClient, ServiceScorer, StubBehavior, StubServer};
use lsd_core::qnet::QNet;
use lsd_core::store::{EmbeddingStore, Pool};

#[derive(Parser)]
#[command(name = "lsd", version, about = "Learned in-context demonstration selection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Run configuration file (defaults apply when omitted).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set agent.train_steps=50`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<RunConfig, CliError> {
        RunConfig::load(self.config.as_deref(), &self.set).map_err(CliError::Config)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic embedding store with labels.
    GenData {
        /// `objective` (deterministic labels) or `subjective` (noisy labels).
        #[arg(long)]
        kind: String,
        /// Number of rows (≥ 100).
        #[arg(long)]
        n: usize,
        /// Embedding dimension (≥ 8).
        #[arg(long)]
        dim: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        /// Output store path (a JSON manifest lands next to it).
        #[arg(long)]
        out: PathBuf,
    },
    /// Build the retrieval index over the demonstration pool and save it.
    BuildIndex {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Train the selection agent.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Shorthand for `--set agent.train_steps=N`.
        #[arg(long)]
        steps: Option<u64>,
    },
    /// Evaluate selection policies on the held-out queries.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Checkpoint for the learned policy (default `<run_dir>/final.ckpt`).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Comma-separated policies (default from config).
        #[arg(long, value_delimiter = ',')]
        policies: Vec<Policy>,
        /// Comma-separated K values (default from config).
        #[arg(long = "k", value_delimiter = ',')]
        k_list: Vec<usize>,
    },
    /// Aggregate set metrics and the order-permutation test from eval output.
    Analyze {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Results directory (default `<run_dir>` from the config).
        #[arg(long)]
        results: Option<PathBuf>,
    },
    /// Run the stub scoring endpoint until interrupted.
    ServeStub {
        #[arg(long, default_value_t = 8085)]
        port: u16,
        /// `echo` (first demo label), `garbage`, or `constant`.
        #[arg(long, default_value = "echo")]
        behavior: String,
        /// Reply text for `--behavior constant`.
        #[arg(long)]
        text: Option<String>,
    },
}

/// Failure classes with their process exit codes.
enum CliError {
    /// Bad flags or config (exit 1).
    Config(String),
    /// Missing/invalid data artifacts (exit 2).
    Data(String),
    /// Scorer endpoint unreachable or failing persistently (exit 3).
    Scorer(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 1,
            CliError::Data(_) => 2,
            CliError::Scorer(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Config(m) | CliError::Data(m) | CliError::Scorer(m) => m,
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help/version requests are successes; everything else is a
            // usage error (exit 1 — code 2 is reserved for data problems).
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.exit_code())
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::GenData { kind, n, dim, seed, out } => cmd_gen_data(&kind, n, dim, seed, &out),
        Command::BuildIndex { cfg } => cmd_build_index(&cfg.load()?),
        Command::Train { cfg, steps } => {
            let mut config = cfg.load()?;
            if let Some(steps) = steps {
                config.agent.train_steps = steps;
            }
            cmd_train(&config)
        }
        Command::Eval { cfg, checkpoint, policies, k_list } => {
            cmd_eval(&cfg.load()?, checkpoint.as_deref(), &policies, &k_list)
        }
        Command::Analyze { cfg, results } => cmd_analyze(&cfg.load()?, results.as_deref()),
        Command::ServeStub { port, behavior, text } => cmd_serve_stub(port, &behavior, text),
    }
}

// ---------------------------------------------------------------------------
// Shared plumbing
// ---------------------------------------------------------------------------

fn load_store(config: &RunConfig) -> Result<EmbeddingStore, CliError> {
    EmbeddingStore::read(&config.paths.store)
        .map_err(|e| CliError::Data(format!("store {}: {e}", config.paths.store.display())))
}

fn make_split(config: &RunConfig, store: &EmbeddingStore) -> Result<(SplitPlan, Pool), CliError> {
    let split = eval::split_dataset(store, config.split.seed, config.split.n_max, config.split.n_eval)
        .map_err(|e| CliError::Data(e.to_string()))?;
    let pool = Pool::new(split.pool_ids.clone());
    Ok((split, pool))
}

fn build_index(
    config: &RunConfig,
    store: &EmbeddingStore,
    pool: &Pool,
) -> Result<IvfPqIndex, CliError> {
    let mut index = if config.index.exact {
        IvfPqIndex::exact(store.dim())
    } else {
        let train_rows: Vec<f32> =
            pool.ids().iter().flat_map(|&id| store.vector(id).iter().copied()).collect();
        IvfPqIndex::train(
            IndexConfig {
                dim: store.dim(),
                nlist: config.index.nlist,
                m: config.index.m,
                nbits: config.index.nbits,
                seed: config.index.seed,
            },
            &train_rows,
        )
        .map_err(|e| CliError::Data(format!("index build: {e}")))?
    };
    for &id in pool.ids() {
        index.add(id, store.vector(id)).map_err(|e| CliError::Data(format!("index add: {e}")))?;
    }
    Ok(index)
}

/// Load the saved index if present, otherwise build it from the pool.
fn load_or_build_index(
    config: &RunConfig,
    store: &EmbeddingStore,
    pool: &Pool,
) -> Result<IvfPqIndex, CliError> {
    if config.paths.index.exists() {
        let index = IvfPqIndex::load(&config.paths.index)
            .map_err(|e| CliError::Data(format!("index {}: {e}", config.paths.index.display())))?;
        if index.config().dim != store.dim() {
            return Err(CliError::Data(format!(
                "index dimension {} does not match store dimension {}",
                index.config().dim,
                store.dim()
            )));
        }
        Ok(index)
    } else {
        build_index(config, store, pool)
    }
}

/// The built scorer plus whatever must stay alive behind it.
enum ScorerHandle {
    Synthetic(SyntheticScorer),
    Service(ServiceScorer),
    Stub(ServiceScorer, #[allow(dead_code)] StubServer),
}

impl ScorerHandle {
    fn as_scorer(&self) -> &dyn Scorer {
        match self {
            ScorerHandle::Synthetic(s) => s,
            ScorerHandle::Service(s) => s,
            ScorerHandle::Stub(s, _) => s,
        }
    }
}

fn make_scorer(
    config: &RunConfig,
    store: &EmbeddingStore,
    pool: &Pool,
) -> Result<ScorerHandle, CliError> {
    match config.scorer.choice {
        ScorerChoice::Synthetic => {
            Ok(ScorerHandle::Synthetic(SyntheticScorer::new(config.scorer.beta, store, pool)))
        }
        ScorerChoice::Service => {
            let client = MllmClient::new(config.scorer.service.clone())
                .map_err(|e| CliError::Config(e.to_string()))?;
            let scorer = ServiceScorer::new(client, config.task.clone())
                .map_err(|e| CliError::Config(e.to_string()))?;
            Ok(ScorerHandle::Service(scorer))
        }
        ScorerChoice::Stub => {
            let stub = StubServer::spawn(StubBehavior::EchoFirstLabel)
                .map_err(|e| CliError::Scorer(format!("cannot start stub: {e}")))?;
            let mut service = config.scorer.service.clone();
            service.endpoint = stub.endpoint().to_string();
            let client =
                MllmClient::new(service).map_err(|e| CliError::Config(e.to_string()))?;
            let scorer = ServiceScorer::new(client, config.task.clone())
                .map_err(|e| CliError::Config(e.to_string()))?;
            Ok(ScorerHandle::Stub(scorer, stub))
        }
    }
}

/// Exclusive ownership of a run directory; the lock file disappears when the
/// guard drops.
struct RunDirLock {
    path: PathBuf,
}

impl RunDirLock {
    fn acquire(run_dir: &Path) -> Result<Self, CliError> {
        std::fs::create_dir_all(run_dir)
            .map_err(|e| CliError::Data(format!("run dir {}: {e}", run_dir.display())))?;
        let path = run_dir.join(".lock");
        match std::fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(RunDirLock { path }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(CliError::Config(
                format!("run dir {} is locked by another process (remove {} if stale)",
                    run_dir.display(), path.display()),
            )),
            Err(e) => Err(CliError::Data(format!("lock {}: {e}", path.display()))),
        }
    }
}

impl Drop for RunDirLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}

fn create_output(path: &Path) -> Result<BufWriter<File>, CliError> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| CliError::Data(format!("cannot write {}: {e}", path.display())))
}

// ---------------------------------------------------------------------------
// gen-data
// ---------------------------------------------------------------------------

fn cmd_gen_data(kind: &str, n: usize, dim: usize, seed: u64, out: &Path) -> Result<(), CliError> {
    let kind = match kind {
        "objective" => SyntheticKind::Objective,
        "subjective" => SyntheticKind::Subjective,
        other => {
            return Err(CliError::Config(format!(
                "unknown kind {other:?} (objective|subjective)"
            )))
        }
    };
    if n < 100 {
        return Err(CliError::Config(format!("n must be at least 100, got {n}")));
    }
    if dim < 8 {
        return Err(CliError::Config(format!("dim must be at least 8, got {dim}")));
    }
    let (store, task) = generate_synthetic(kind, n, dim, seed)
        .map_err(|e| CliError::Data(format!("generation failed: {e}")))?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)
            .map_err(|e| CliError::Data(format!("cannot create {}: {e}", parent.display())))?;
    }
    store.write(out).map_err(|e| CliError::Data(format!("write {}: {e}", out.display())))?;
    println!(
        "wrote {} rows × {} dims (task {}, labels {}..{}) to {}",
        store.len(),
        store.dim(),
        task.name,
        task.label_lo,
        task.label_hi,
        out.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// build-index
// ---------------------------------------------------------------------------

fn cmd_build_index(config: &RunConfig) -> Result<(), CliError> {
    let store = load_store(config)?;
    let (_, pool) = make_split(config, &store)?;
    let index = build_index(config, &store, &pool)?;
    if let Some(parent) = config.paths.index.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)
            .map_err(|e| CliError::Data(format!("cannot create {}: {e}", parent.display())))?;
    }
    index
        .save(&config.paths.index)
        .map_err(|e| CliError::Data(format!("save {}: {e}", config.paths.index.display())))?;
    let mode = if config.index.exact {
        "exact".to_string()
    } else {
        format!("nlist={} m={} nbits={}", config.index.nlist, config.index.m, config.index.nbits)
    };
    println!(
        "indexed {} pool vectors ({mode}) into {}",
        pool.len(),
        config.paths.index.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

fn cmd_train(config: &RunConfig) -> Result<(), CliError> {
    let store = load_store(config)?;
    if config.qnet.dim != store.dim() {
        return Err(CliError::Config(format!(
            "qnet.dim = {} but the store is {}-dimensional",
            config.qnet.dim,
            store.dim()
        )));
    }
    let (split, pool) = make_split(config, &store)?;
    let index = load_or_build_index(config, &store, &pool)?;
    let scorer = make_scorer(config, &store, &pool)?;
    let _lock = RunDirLock::acquire(&config.paths.run_dir)?;

    let mut agent = Agent::new(config.qnet.clone(), config.agent.clone())
        .map_err(|e| CliError::Config(e.to_string()))?;
    let mut metrics = create_output(&config.paths.run_dir.join("metrics.csv"))?;
    let checkpoint_path = config.paths.run_dir.join("checkpoint.ckpt");

    let summary = agent::train(
        &mut agent,
        &store,
        &index,
        &pool,
        &config.task,
        scorer.as_scorer(),
        &split.query_ids,
        agent::TrainOptions {
            metrics: Some(&mut metrics),
            checkpoint_every: config.run.checkpoint_every,
            checkpoint_path: Some(&checkpoint_path),
        },
    )
    .map_err(|e| match e {
        AgentError::ScorerUnavailable { .. } => CliError::Scorer(e.to_string()),
        other => CliError::Data(format!("training failed: {other}")),
    })?;
    metrics.flush().map_err(|e| CliError::Data(format!("metrics: {e}")))?;

    let final_path = config.paths.run_dir.join("final.ckpt");
    agent
        .save_checkpoint(&final_path)
        .map_err(|e| CliError::Data(format!("checkpoint: {e}")))?;
    let summary_json =
        serde_json::to_string_pretty(&summary).expect("train summary serializes");
    std::fs::write(config.paths.run_dir.join("train_summary.json"), summary_json)
        .map_err(|e| CliError::Data(format!("summary: {e}")))?;
    std::fs::write(config.paths.run_dir.join("run_config.toml"), config.to_toml())
        .map_err(|e| CliError::Data(format!("config snapshot: {e}")))?;

    println!(
        "trained {} steps over {} episodes ({} env steps, ε → {:.3}); checkpoint at {}",
        summary.train_steps,
        summary.episodes,
        summary.env_steps,
        summary.final_epsilon,
        final_path.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

fn cmd_eval(
    config: &RunConfig,
    checkpoint: Option<&Path>,
    policies: &[Policy],
    k_list: &[usize],
) -> Result<(), CliError> {
    let policies: Vec<Policy> =
        if policies.is_empty() { config.eval.policies.clone() } else { policies.to_vec() };
    let k_list: Vec<usize> =
        if k_list.is_empty() { config.eval.k_list.clone() } else { k_list.to_vec() };
    if k_list.iter().any(|&k| k == 0) {
        return Err(CliError::Config("K values must be positive (zero-shot is a policy)".into()));
    }

    let store = load_store(config)?;
    let (split, pool) = make_split(config, &store)?;
    let scorer = make_scorer(config, &store, &pool)?;

    // The learned policy needs its checkpoint and the retrieval index.
    let wants_lsd = policies.contains(&Policy::Lsd);
    let (net, index): (Option<QNet>, Option<IvfPqIndex>) = if wants_lsd {
        if let Some(&k) = k_list.iter().find(|&&k| k > config.qnet.k_max) {
            return Err(CliError::Config(format!(
                "K = {k} exceeds qnet.k_max = {}",
                config.qnet.k_max
            )));
        }
        let path = checkpoint
            .map(Path::to_path_buf)
            .unwrap_or_else(|| config.paths.run_dir.join("final.ckpt"));
        let agent = Agent::load_checkpoint(&path)
            .map_err(|e| CliError::Data(format!("checkpoint {}: {e}", path.display())))?;
        (Some(agent.online), Some(load_or_build_index(config, &store, &pool)?))
    } else {
        (None, None)
    };

    let setup = EvalSetup {
        store: &store,
        pool: &pool,
        task: &config.task,
        scorer: scorer.as_scorer(),
        seed: config.eval.seed,
        policy_net: net.as_ref(),
        index: index.as_ref(),
        agent_config: Some(&config.agent),
    };

    let mut all_records: Vec<QueryRecord> = Vec::new();
    let mut summaries: Vec<Summary> = Vec::new();
    for &policy in &policies {
        let ks: &[usize] = if policy == Policy::ZeroShot { &[0] } else { &k_list };
        for &k in ks {
            let outcome = evaluate_policy(&setup, policy, k, &split.eval_query_ids)
                .map_err(|e| CliError::Data(e.to_string()))?;
            if outcome.records.is_empty() && !split.eval_query_ids.is_empty() {
                return Err(CliError::Scorer(format!(
                    "every query failed for {} at K={k}",
                    policy.name()
                )));
            }
            println!(
                "{:9} K={:<2} MAE {:.4} ({} queries, {} failures)",
                policy.name(),
                k,
                outcome.mae,
                outcome.records.len(),
                outcome.failures
            );
            summaries.push(Summary::from_outcome(
                &outcome,
                config.eval.bootstrap_resamples,
                config.eval.seed,
            ));
            all_records.extend(outcome.records);
        }
    }

    std::fs::create_dir_all(&config.paths.run_dir)
        .map_err(|e| CliError::Data(format!("run dir: {e}")))?;
    let mut records_out = create_output(&config.paths.run_dir.join("records.csv"))?;
    eval::write_records_csv(&mut records_out, &all_records)
        .map_err(|e| CliError::Data(format!("records: {e}")))?;
    let mut selections_out = create_output(&config.paths.run_dir.join("selections.csv"))?;
    eval::write_selections_csv(&mut selections_out, &all_records)
        .map_err(|e| CliError::Data(format!("selections: {e}")))?;
    eval::write_summary_json(&config.paths.run_dir.join("summary.json"), &summaries)
        .map_err(|e| CliError::Data(format!("summary: {e}")))?;
    println!("results written to {}", config.paths.run_dir.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// analyze
// ---------------------------------------------------------------------------

/// Selections of one policy × K group, keyed per query.
type SelectionGroups = BTreeMap<(String, usize), BTreeMap<u32, Vec<u32>>>;

fn read_selections(path: &Path) -> Result<SelectionGroups, CliError> {
    let file = File::open(path)
        .map_err(|e| CliError::Data(format!("missing eval output {}: {e}", path.display())))?;
    let mut reader = csv::Reader::from_reader(file);
    let mut groups: SelectionGroups = BTreeMap::new();
    for row in reader.records() {
        let row = row.map_err(|e| CliError::Data(format!("selections parse: {e}")))?;
        let parse = |i: usize| -> Result<u64, CliError> {
            row.get(i)
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| CliError::Data(format!("bad selections row: {row:?}")))
        };
        let query_id = parse(0)? as u32;
        let policy = row.get(1).unwrap_or_default().to_string();
        let k = parse(2)? as usize;
        let demo = parse(4)? as u32;
        groups.entry((policy, k)).or_default().entry(query_id).or_default().push(demo);
    }
    if groups.is_empty() {
        return Err(CliError::Data(format!("{} contains no selections", path.display())));
    }
    Ok(groups)
}

fn cmd_analyze(config: &RunConfig, results: Option<&Path>) -> Result<(), CliError> {
    let results = results.unwrap_or(&config.paths.run_dir);
    let groups = read_selections(&results.join("selections.csv"))?;
    let store = load_store(config)?;
    let (_, pool) = make_split(config, &store)?;
    let scorer = make_scorer(config, &store, &pool)?;

    // Per policy × K: mean set metrics over queries.
    let mut metrics_out = create_output(&results.join("set_metrics.csv"))?;
    writeln!(
        metrics_out,
        "policy,K,queries,demo_query_label_mae,pairwise_label_mae,demo_query_feat_sim,pairwise_feat_sim"
    )
    .map_err(|e| CliError::Data(e.to_string()))?;
    for ((policy, k), per_query) in &groups {
        let mut sums = [0.0f64; 4];
        let mut pair_count = 0usize;
        for (&query_id, demos) in per_query {
            let m = eval::set_analysis(&store, query_id, demos);
            sums[0] += m.demo_query_label_mae;
            sums[2] += m.demo_query_feat_sim;
            if let (Some(pl), Some(pf)) = (m.pairwise_label_mae, m.pairwise_feat_sim) {
                sums[1] += pl;
                sums[3] += pf;
                pair_count += 1;
            }
        }
        let n = per_query.len() as f64;
        let pairwise = |sum: f64| {
            if pair_count > 0 { format!("{:.6}", sum / pair_count as f64) } else { String::new() }
        };
        writeln!(
            metrics_out,
            "{},{},{},{:.6},{},{:.6},{}",
            policy,
            k,
            per_query.len(),
            sums[0] / n,
            pairwise(sums[1]),
            sums[2] / n,
            pairwise(sums[3])
        )
        .map_err(|e| CliError::Data(e.to_string()))?;
    }
    metrics_out.flush().map_err(|e| CliError::Data(e.to_string()))?;

    // Order-permutation test per policy × K (needs at least two demos).
    let mut perm_out = create_output(&results.join("permutation.csv"))?;
    writeln!(perm_out, "policy,K,queries,trials,learned_order_mae,shuffled_mae")
        .map_err(|e| CliError::Data(e.to_string()))?;
    for ((policy, k), per_query) in &groups {
        if *k < 2 {
            continue;
        }
        let records: Vec<QueryRecord> = per_query
            .iter()
            .map(|(&query_id, demos)| QueryRecord {
                query_id,
                policy: policy.parse().unwrap_or(Policy::Random),
                k: demos.len(),
                pred: 0.0, // unused by the permutation test
                truth: store.label(query_id),
                abs_err: 0.0,
                demos: demos.clone(),
            })
            .collect();
        let (learned, shuffled) = eval::permutation_test(
            &store,
            scorer.as_scorer(),
            &records,
            config.eval.permutation_trials,
            config.eval.seed,
        );
        writeln!(
            perm_out,
            "{},{},{},{},{:.6},{:.6}",
            policy,
            k,
            records.len(),
            config.eval.permutation_trials,
            learned,
            shuffled
        )
        .map_err(|e| CliError::Data(e.to_string()))?;
    }
    perm_out.flush().map_err(|e| CliError::Data(e.to_string()))?;
    println!("analysis written to {}", results.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// serve-stub
// ---------------------------------------------------------------------------

fn cmd_serve_stub(port: u16, behavior: &str, text: Option<String>) -> Result<(), CliError> {
    let behavior = match behavior {
        "echo" => StubBehavior::EchoFirstLabel,
        "garbage" => StubBehavior::Garbage,
        "constant" => StubBehavior::Constant(text.ok_or_else(|| {
            CliError::Config("--behavior constant requires --text".to_string())
        })?),
        other => {
            return Err(CliError::Config(format!(
                "unknown behavior {other:?} (echo|garbage|constant)"
            )))
        }
    };
    let server = StubServer::spawn_on(&format!("127.0.0.1:{port}"), behavior)
        .map_err(|e| CliError::Data(format!("cannot bind port {port}: {e}")))?;
    println!("stub listening on {}", server.endpoint());
    loop {
        std::thread::sleep(std::time::Duration::from_secs(3600));
    }
}
