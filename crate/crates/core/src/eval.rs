//! Baseline selection policies, MAE evaluation, and analysis metrics.
//!
//! A dataset is split once per run (cap to `N_MAX`, seeded shuffle, 80/20
//! pool/query partition, eval sample of at most `N_EVAL` queries); every
//! policy is then scored on the same eval queries. Per-query records are
//! always kept so the demonstration-set analyses can be re-derived without
//! re-scoring anything.

use std::io::Write as IoWrite;
use std::path::Path;

use rand::seq::index::sample as sample_indices;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::agent::{self, AgentConfig, AgentError};
use crate::env::{Scorer, TaskSpec};
use crate::index::{self, IvfPqIndex};
use crate::qnet::QNet;
use crate::store::{EmbeddingStore, Pool};

/// Dataset cap applied before splitting.
pub const N_MAX: usize = 25_000;
/// Maximum number of evaluation queries.
pub const N_EVAL: usize = 1_000;

#[derive(Debug)]
pub enum EvalError {
    /// Dataset too small to split.
    TooSmall { needed: usize, got: usize },
    /// The learned policy was requested without a network/index.
    MissingCheckpoint,
    Agent(AgentError),
    Io(std::io::Error),
}

impl std::fmt::Display for EvalError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            EvalError::TooSmall { needed, got } => {
                write!(f, "dataset has {got} rows, need at least {needed} to split")
            }
            EvalError::MissingCheckpoint => {
                write!(f, "the learned policy needs a trained network and an index")
            }
            EvalError::Agent(e) => write!(f, "policy failure: {e}"),
            EvalError::Io(e) => write!(f, "i/o error: {e}"),
        }
    }
}

impl std::error::Error for EvalError {}

impl From<AgentError> for EvalError {
    fn from(e: AgentError) -> Self {
        EvalError::Agent(e)
    }
}

impl From<std::io::Error> for EvalError {
    fn from(e: std::io::Error) -> Self {
        EvalError::Io(e)
    }
}

// ---------------------------------------------------------------------------
// Dataset splitting
// ---------------------------------------------------------------------------

/// A reproducible pool/query partition of one store.
#[derive(Debug, Clone, Serialize)]
pub struct SplitPlan {
    /// Demonstration pool (~80%), ascending ids.
    pub pool_ids: Vec<u32>,
    /// Query partition (~20%), in shuffled order.
    pub query_ids: Vec<u32>,
    /// The evaluation sample: the first `≤ n_eval` entries of `query_ids`.
    pub eval_query_ids: Vec<u32>,
    pub seed: u64,
    pub n_max: usize,
    pub n_eval: usize,
}

/// Cap the dataset to `n_max` rows, shuffle, and split 80/20 into
/// demonstration pool and queries; the eval sample is the first `n_eval`
/// queries of the shuffled remainder (a uniform subsample).
pub fn split_dataset(
    store: &EmbeddingStore,
    seed: u64,
    n_max: usize,
    n_eval: usize,
) -> Result<SplitPlan, EvalError> {
    let n = store.len();
    if n < 10 {
        return Err(EvalError::TooSmall { needed: 10, got: n });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ids: Vec<u32> = (0..n as u32).collect();
    ids.shuffle(&mut rng);
    ids.truncate(n_max.min(n));

    let pool_len = (ids.len() * 4) / 5;
    let mut pool_ids = ids[..pool_len].to_vec();
    pool_ids.sort_unstable();
    let query_ids = ids[pool_len..].to_vec();
    let eval_query_ids = query_ids[..query_ids.len().min(n_eval)].to_vec();
    Ok(SplitPlan { pool_ids, query_ids, eval_query_ids, seed, n_max, n_eval })
}

// ---------------------------------------------------------------------------
// Baseline selection policies
// ---------------------------------------------------------------------------

/// Exact top-K pool entries by inner product with the query (unit vectors,
/// so this is cosine similarity), descending, ties broken by ascending id.
pub fn knn_select(store: &EmbeddingStore, pool: &Pool, query_id: u32, k: usize) -> Vec<u32> {
    index::exact_search_in(store, pool.ids(), store.vector(query_id), k, &[query_id])
        .into_iter()
        .map(|h| h.id)
        .collect()
}

/// Uniform sample of `k` pool entries without replacement, query excluded.
pub fn random_select(pool: &Pool, query_id: u32, k: usize, rng: &mut ChaCha8Rng) -> Vec<u32> {
    let valid: Vec<u32> = pool.ids().iter().copied().filter(|&id| id != query_id).collect();
    assert!(k <= valid.len(), "cannot draw {k} demos from a pool of {}", valid.len());
    sample_indices(rng, valid.len(), k).iter().map(|i| valid[i]).collect()
}

// ---------------------------------------------------------------------------
// Policy evaluation
// ---------------------------------------------------------------------------

/// Demonstration selection policies under comparison.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Policy {
    /// The trained greedy (ε = 0) selection episode.
    Lsd,
    /// Nearest neighbours by embedding similarity.
    Knn,
    /// Uniform random demonstrations.
    Random,
    /// No demonstrations at all.
    ZeroShot,
}

impl Policy {
    pub fn name(self) -> &'static str {
        match self {
            Policy::Lsd => "lsd",
            Policy::Knn => "knn",
            Policy::Random => "random",
            Policy::ZeroShot => "zero_shot",
        }
    }
}

impl std::str::FromStr for Policy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "lsd" => Ok(Policy::Lsd),
            "knn" => Ok(Policy::Knn),
            "random" => Ok(Policy::Random),
            "zero_shot" => Ok(Policy::ZeroShot),
            other => Err(format!("unknown policy {other:?} (lsd|knn|random|zero_shot)")),
        }
    }
}

/// One scored evaluation query.
#[derive(Debug, Clone, Serialize)]
pub struct QueryRecord {
    pub query_id: u32,
    pub policy: Policy,
    pub k: usize,
    pub pred: f32,
    pub truth: f32,
    pub abs_err: f64,
    /// Selected demonstrations in selection order (empty for zero-shot).
    #[serde(skip)]
    pub demos: Vec<u32>,
}

/// Aggregate result of one policy × K evaluation.
#[derive(Debug, Clone)]
pub struct EvalOutcome {
    pub policy: Policy,
    pub k: usize,
    pub mae: f64,
    /// Queries whose scorer or rollout failed (excluded from the MAE).
    pub failures: usize,
    pub records: Vec<QueryRecord>,
}

/// Everything a policy evaluation needs. The network, index, and agent
/// config are only required for [`Policy::Lsd`].
pub struct EvalSetup<'a> {
    pub store: &'a EmbeddingStore,
    pub pool: &'a Pool,
    pub task: &'a TaskSpec,
    pub scorer: &'a dyn Scorer,
    pub seed: u64,
    pub policy_net: Option<&'a QNet>,
    pub index: Option<&'a IvfPqIndex>,
    pub agent_config: Option<&'a AgentConfig>,
}

/// Mix the run seed with a query id so per-query randomness is independent
/// of evaluation order and thread scheduling (splitmix64 finalizer).
fn query_seed(seed: u64, query_id: u32) -> u64 {
    let mut z = seed ^ ((query_id as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Score one policy at one K over the given queries. Parallel over queries;
/// per-query RNG streams are derived from `(seed, query_id)`, so results are
/// bit-reproducible regardless of thread count.
pub fn evaluate_policy(
    setup: &EvalSetup<'_>,
    policy: Policy,
    k: usize,
    query_ids: &[u32],
) -> Result<EvalOutcome, EvalError> {
    if policy == Policy::Lsd
        && (setup.policy_net.is_none() || setup.index.is_none() || setup.agent_config.is_none())
    {
        return Err(EvalError::MissingCheckpoint);
    }
    // The rollout's episode length comes from the task spec; pin it to K.
    let rollout_task = TaskSpec { shots: k.max(1), ..setup.task.clone() };

    let per_query: Vec<Result<QueryRecord, ()>> = query_ids
        .par_iter()
        .map(|&query_id| {
            let mut rng = ChaCha8Rng::seed_from_u64(query_seed(setup.seed, query_id));
            let demos = match policy {
                Policy::ZeroShot => Vec::new(),
                Policy::Knn => knn_select(setup.store, setup.pool, query_id, k),
                Policy::Random => random_select(setup.pool, query_id, k, &mut rng),
                Policy::Lsd => agent::greedy_rollout(
                    setup.policy_net.unwrap(),
                    setup.store,
                    setup.index.unwrap(),
                    setup.pool,
                    &rollout_task,
                    setup.scorer,
                    query_id,
                    setup.agent_config.unwrap(),
                )
                .map_err(|_| ())?,
            };
            let pred = setup.scorer.predict(setup.store, query_id, &demos).ok_or(())?;
            let truth = setup.store.label(query_id);
            Ok(QueryRecord {
                query_id,
                policy,
                k: demos.len(),
                pred,
                truth,
                abs_err: (pred as f64 - truth as f64).abs(),
                demos,
            })
        })
        .collect();

    let mut records = Vec::with_capacity(per_query.len());
    let mut failures = 0usize;
    for result in per_query {
        match result {
            Ok(record) => records.push(record),
            Err(()) => failures += 1,
        }
    }
    let mae = if records.is_empty() {
        f64::NAN
    } else {
        records.iter().map(|r| r.abs_err).sum::<f64>() / records.len() as f64
    };
    Ok(EvalOutcome { policy, k, mae, failures, records })
}

// ---------------------------------------------------------------------------
// Demonstration-set analysis
// ---------------------------------------------------------------------------

/// Label/feature statistics of one demonstration set relative to its query.
/// Pairwise fields are undefined for a single demo.
#[derive(Debug, Clone, Serialize)]
pub struct SetMetrics {
    pub demo_query_label_mae: f64,
    pub pairwise_label_mae: Option<f64>,
    pub demo_query_feat_sim: f64,
    pub pairwise_feat_sim: Option<f64>,
}

pub fn set_analysis(store: &EmbeddingStore, query_id: u32, demos: &[u32]) -> SetMetrics {
    assert!(!demos.is_empty(), "set analysis needs at least one demo");
    let y_q = store.label(query_id) as f64;
    let e_q = store.vector(query_id);

    let n = demos.len() as f64;
    let mut label_mae = 0.0f64;
    let mut feat_sim = 0.0f64;
    for &d in demos {
        label_mae += (store.label(d) as f64 - y_q).abs();
        feat_sim += crate::math::dot(e_q, store.vector(d));
    }

    let (mut pair_mae, mut pair_sim, mut pairs) = (0.0f64, 0.0f64, 0usize);
    for (i, &a) in demos.iter().enumerate() {
        for &b in &demos[i + 1..] {
            pair_mae += (store.label(a) as f64 - store.label(b) as f64).abs();
            pair_sim += crate::math::dot(store.vector(a), store.vector(b));
            pairs += 1;
        }
    }
    SetMetrics {
        demo_query_label_mae: label_mae / n,
        pairwise_label_mae: (pairs > 0).then(|| pair_mae / pairs as f64),
        demo_query_feat_sim: feat_sim / n,
        pairwise_feat_sim: (pairs > 0).then(|| pair_sim / pairs as f64),
    }
}

// ---------------------------------------------------------------------------
// Order-permutation test
// ---------------------------------------------------------------------------

/// Re-score each query's selected set as-is and under `trials` random
/// shuffles of the same demonstrations; returns
/// `(learned_order_mae, shuffled_mae)`. Records with fewer than two demos
/// are skipped (order is meaningless there).
pub fn permutation_test(
    store: &EmbeddingStore,
    scorer: &dyn Scorer,
    records: &[QueryRecord],
    trials: u32,
    seed: u64,
) -> (f64, f64) {
    assert!(trials > 0);
    let per_query: Vec<Option<(f64, f64)>> = records
        .par_iter()
        .map(|record| {
            if record.demos.len() < 2 {
                return None;
            }
            let truth = store.label(record.query_id) as f64;
            let learned = scorer.predict(store, record.query_id, &record.demos)? as f64;
            let mut rng = ChaCha8Rng::seed_from_u64(query_seed(seed, record.query_id));
            let mut shuffled_err = 0.0f64;
            let mut order = record.demos.clone();
            for _ in 0..trials {
                order.shuffle(&mut rng);
                let pred = scorer.predict(store, record.query_id, &order)? as f64;
                shuffled_err += (pred - truth).abs();
            }
            Some(((learned - truth).abs(), shuffled_err / trials as f64))
        })
        .collect();

    let usable: Vec<(f64, f64)> = per_query.into_iter().flatten().collect();
    let n = usable.len().max(1) as f64;
    let learned = usable.iter().map(|p| p.0).sum::<f64>() / n;
    let shuffled = usable.iter().map(|p| p.1).sum::<f64>() / n;
    (learned, shuffled)
}

// ---------------------------------------------------------------------------
// Uncertainty and persistence
// ---------------------------------------------------------------------------

/// Percentile bootstrap 95% CI of the mean (seeded, `resamples` draws).
pub fn bootstrap_ci(values: &[f64], resamples: usize, seed: u64) -> (f64, f64) {
    assert!(!values.is_empty() && resamples > 0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = values.len();
    let mut means: Vec<f64> = (0..resamples)
        .map(|_| {
            let mut sum = 0.0;
            for _ in 0..n {
                sum += values[rand::Rng::gen_range(&mut rng, 0..n)];
            }
            sum / n as f64
        })
        .collect();
    means.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let lo = ((resamples as f64) * 0.025).floor() as usize;
    let hi = (((resamples as f64) * 0.975).ceil() as usize).min(resamples) - 1;
    (means[lo], means[hi])
}

/// JSON summary entry for one policy × K evaluation.
#[derive(Debug, Clone, Serialize)]
pub struct Summary {
    pub policy: Policy,
    pub k: usize,
    pub mae: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
    pub queries: usize,
    pub failures: usize,
}

impl Summary {
    /// Build from an outcome, bootstrapping the CI from its per-query errors.
    pub fn from_outcome(outcome: &EvalOutcome, resamples: usize, seed: u64) -> Self {
        let errors: Vec<f64> = outcome.records.iter().map(|r| r.abs_err).collect();
        let (ci_lo, ci_hi) = if errors.is_empty() {
            (f64::NAN, f64::NAN)
        } else {
            bootstrap_ci(&errors, resamples, seed)
        };
        Summary {
            policy: outcome.policy,
            k: outcome.k,
            mae: outcome.mae,
            ci_lo,
            ci_hi,
            queries: outcome.records.len(),
            failures: outcome.failures,
        }
    }
}

/// `query_id,policy,K,pred,truth,abs_err` rows.
pub fn write_records_csv(out: &mut dyn IoWrite, records: &[QueryRecord]) -> std::io::Result<()> {
    let mut w = csv::WriterBuilder::new().from_writer(out);
    w.write_record(["query_id", "policy", "K", "pred", "truth", "abs_err"])?;
    for r in records {
        w.write_record([
            r.query_id.to_string(),
            r.policy.name().to_string(),
            r.k.to_string(),
            r.pred.to_string(),
            r.truth.to_string(),
            r.abs_err.to_string(),
        ])?;
    }
    w.flush()
}

/// `query_id,policy,K,rank,demo_id` rows — the selections behind each record.
pub fn write_selections_csv(out: &mut dyn IoWrite, records: &[QueryRecord]) -> std::io::Result<()> {
    let mut w = csv::WriterBuilder::new().from_writer(out);
    w.write_record(["query_id", "policy", "K", "rank", "demo_id"])?;
    for r in records {
        for (rank, demo) in r.demos.iter().enumerate() {
            w.write_record([
                r.query_id.to_string(),
                r.policy.name().to_string(),
                r.k.to_string(),
                rank.to_string(),
                demo.to_string(),
            ])?;
        }
    }
    w.flush()
}

pub fn write_summary_json(path: &Path, summaries: &[Summary]) -> std::io::Result<()> {
    let json = serde_json::to_string_pretty(summaries).expect("summaries serialize");
    std::fs::write(path, json)
}
