//! The demonstration-selection environment.
//!
//! An episode fixes one query. The state is the set of demonstrations chosen
//! so far (initialized with the query's exact nearest neighbor as an anchor),
//! actions are store ids from the pool, and the reward for adding a
//! demonstration is the *change* in the downstream scorer's accuracy:
//!
//! `r_t = (S_{t+1} − S_t) / λ`, with `S = −multiplier · |prediction − truth|`.
//!
//! Invalid actions (ids outside the pool, repeats, or the query itself) end
//! the episode with a fixed penalty. The scorer is abstract: tests and
//! desk-scale training use the deterministic in-process surrogate below,
//! while real runs score prompts against a multimodal model service.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::index;
use crate::math;
use crate::store::{EmbeddingStore, Manifest, Pool, StoreError};

#[derive(Debug)]
pub enum EnvError {
    /// The pool has no candidate left to serve as the anchor.
    EmptyPool,
    /// The scorer returned no prediction (service failure or unparseable
    /// output).
    ScorerFailure,
    /// `step` was called on a finished episode.
    EpisodeDone,
    /// The query id lies outside the store.
    BadQuery(u32),
    Store(StoreError),
}

impl std::fmt::Display for EnvError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            EnvError::EmptyPool => write!(f, "demonstration pool is empty"),
            EnvError::ScorerFailure => write!(f, "scorer failed to produce a prediction"),
            EnvError::EpisodeDone => write!(f, "episode is already finished"),
            EnvError::BadQuery(id) => write!(f, "query id {id} is outside the store"),
            EnvError::Store(e) => write!(f, "store error: {e}"),
        }
    }
}

impl std::error::Error for EnvError {}

/// Label scale of a task; fixes the error multiplier in the score
/// `S = −multiplier · |prediction − truth|` so that different label ranges
/// produce comparable reward magnitudes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreKind {
    /// Integer labels on 0–100 (multiplier 1).
    Age,
    /// Continuous labels on 0–10 (multiplier 10).
    ZeroToTen,
    /// Continuous labels on 0–5 (multiplier 20).
    ZeroToFive,
}

impl ScoreKind {
    pub fn multiplier(self) -> f64 {
        match self {
            ScoreKind::Age => 1.0,
            ScoreKind::ZeroToTen => 10.0,
            ScoreKind::ZeroToFive => 20.0,
        }
    }
}

/// Everything the environment needs to know about a task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskSpec {
    /// Prompt-template key: `age`, `aesthetic`, `beauty`, or `quality`.
    pub name: String,
    pub kind: ScoreKind,
    pub label_lo: f32,
    pub label_hi: f32,
    /// Reward scale λ in `r = ΔS / λ`.
    pub lambda: f64,
    /// Demonstrations per episode (anchor included).
    pub shots: usize,
    /// Reward for an invalid action (which also ends the episode).
    pub invalid_penalty: f64,
}

impl TaskSpec {
    pub fn age_default() -> Self {
        TaskSpec {
            name: "age".into(),
            kind: ScoreKind::Age,
            label_lo: 0.0,
            label_hi: 100.0,
            lambda: 10.0,
            shots: 4,
            invalid_penalty: -0.5,
        }
    }
}

impl Default for TaskSpec {
    fn default() -> Self {
        TaskSpec::age_default()
    }
}

/// Negative scaled absolute error of a prediction.
pub fn task_score(kind: ScoreKind, prediction: f32, truth: f32) -> f64 {
    -kind.multiplier() * (prediction as f64 - truth as f64).abs()
}

/// A downstream model that predicts the query label from demonstrations.
/// `None` signals failure (unreachable service, unparseable reply).
pub trait Scorer: Send + Sync {
    fn predict(&self, store: &EmbeddingStore, query_id: u32, demos: &[u32]) -> Option<f32>;
}

/// The RL state: one query and the demonstrations selected so far, in
/// selection order.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeState {
    pub query_id: u32,
    pub selected: Vec<u32>,
}

impl EpisodeState {
    pub fn t(&self) -> usize {
        self.selected.len()
    }
}

/// A running episode: the state plus the scorer accuracy of the current set.
#[derive(Debug, Clone)]
pub struct Episode {
    pub state: EpisodeState,
    /// `S_t` for the current demonstration set.
    pub score: f64,
    pub done: bool,
}

/// Start an episode: the anchor demonstration is the query's exact nearest
/// neighbor in the pool, and `S_1` is the scorer accuracy with it alone.
pub fn reset(
    store: &EmbeddingStore,
    pool: &Pool,
    task: &TaskSpec,
    scorer: &dyn Scorer,
    query_id: u32,
) -> Result<Episode, EnvError> {
    if query_id as usize >= store.len() {
        return Err(EnvError::BadQuery(query_id));
    }
    let anchor = index::exact_search_in(store, pool.ids(), store.vector(query_id), 1, &[query_id]);
    let anchor = anchor.first().ok_or(EnvError::EmptyPool)?.id;
    let selected = vec![anchor];
    let prediction =
        scorer.predict(store, query_id, &selected).ok_or(EnvError::ScorerFailure)?;
    let score = task_score(task.kind, prediction, store.label(query_id));
    let done = selected.len() >= task.shots;
    Ok(Episode { state: EpisodeState { query_id, selected }, score, done })
}

/// Result of one environment transition.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOutcome {
    pub reward: f64,
    pub done: bool,
}

/// Apply an action. Valid actions extend the demonstration set and earn the
/// scaled score change; invalid ones earn the penalty and end the episode
/// with the state unchanged.
pub fn step(
    episode: &mut Episode,
    store: &EmbeddingStore,
    pool: &Pool,
    task: &TaskSpec,
    scorer: &dyn Scorer,
    action: u32,
) -> Result<StepOutcome, EnvError> {
    if episode.done {
        return Err(EnvError::EpisodeDone);
    }
    let invalid = !pool.contains(action)
        || action == episode.state.query_id
        || episode.state.selected.contains(&action);
    if invalid {
        episode.done = true;
        return Ok(StepOutcome { reward: task.invalid_penalty, done: true });
    }

    let mut candidate_set = episode.state.selected.clone();
    candidate_set.push(action);
    let prediction = scorer
        .predict(store, episode.state.query_id, &candidate_set)
        .ok_or(EnvError::ScorerFailure)?;
    let next_score = task_score(task.kind, prediction, store.label(episode.state.query_id));
    let reward = (next_score - episode.score) / task.lambda;

    episode.state.selected = candidate_set;
    episode.score = next_score;
    episode.done = episode.state.selected.len() >= task.shots;
    Ok(StepOutcome { reward, done: episode.done })
}

// ---------------------------------------------------------------------------
// Synthetic in-context scorer
// ---------------------------------------------------------------------------

/// Deterministic surrogate for in-context learning: the prediction is a
/// similarity-weighted vote over the demonstration labels,
/// `ŷ = Σ_i softmax(β · e_q·e_i) · y_i`.
///
/// Demonstrations are folded in ascending id order, so the prediction is
/// exactly invariant to the order they were selected in — like a set-based
/// scorer, and unlike [`PositionBiasedScorer`].
pub fn synthetic_icl_predict(
    store: &EmbeddingStore,
    query_id: u32,
    demos: &[u32],
    beta: f64,
) -> Option<f32> {
    if demos.is_empty() {
        return None;
    }
    let mut order: Vec<u32> = demos.to_vec();
    order.sort_unstable();
    let q = store.vector(query_id);
    let logits: Vec<f64> = order.iter().map(|&d| beta * math::dot(q, store.vector(d))).collect();
    let weights = math::softmax_f64(&logits);
    let pred: f64 = weights.iter().zip(&order).map(|(&w, &d)| w * store.label(d) as f64).sum();
    Some(pred as f32)
}

/// [`Scorer`] wrapper around [`synthetic_icl_predict`] with a zero-shot
/// fallback (the mean pool label — the best constant guess without
/// demonstrations).
pub struct SyntheticScorer {
    pub beta: f64,
    fallback: f32,
}

impl SyntheticScorer {
    pub fn new(beta: f64, store: &EmbeddingStore, pool: &Pool) -> Self {
        let sum: f64 = pool.ids().iter().map(|&id| store.label(id) as f64).sum();
        let fallback = (sum / pool.len().max(1) as f64) as f32;
        SyntheticScorer { beta, fallback }
    }
}

impl Scorer for SyntheticScorer {
    fn predict(&self, store: &EmbeddingStore, query_id: u32, demos: &[u32]) -> Option<f32> {
        if demos.is_empty() {
            return Some(self.fallback);
        }
        synthetic_icl_predict(store, query_id, demos, self.beta)
    }
}

/// Order-*sensitive* surrogate: like the synthetic scorer but demonstrations
/// later in the prompt get geometrically more weight (`recency_bias^position`
/// from the front). Used to exercise order-sensitivity analyses; a real
/// language model is mildly order-sensitive in the same way.
pub struct PositionBiasedScorer {
    pub beta: f64,
    /// Per-position weight ratio > 1 favors later demonstrations.
    pub recency_bias: f64,
}

impl Scorer for PositionBiasedScorer {
    fn predict(&self, store: &EmbeddingStore, query_id: u32, demos: &[u32]) -> Option<f32> {
        if demos.is_empty() {
            return None;
        }
        let q = store.vector(query_id);
        let logits: Vec<f64> = demos
            .iter()
            .enumerate()
            .map(|(pos, &d)| {
                self.beta * math::dot(q, store.vector(d)) + (pos as f64) * self.recency_bias.ln()
            })
            .collect();
        let weights = math::softmax_f64(&logits);
        let pred: f64 = weights.iter().zip(demos).map(|(&w, &d)| w * store.label(d) as f64).sum();
        Some(pred as f32)
    }
}

// ---------------------------------------------------------------------------
// Synthetic dataset generators
// ---------------------------------------------------------------------------

/// Which synthetic dataset to generate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SyntheticKind {
    /// Age-like: labels are a deterministic nonlinear function of the
    /// embedding's position on a 2-D latent manifold (0–100 scale).
    Objective,
    /// Aesthetic-like: labels are noisy prototype similarity (0–10 scale).
    Subjective,
}

/// Generate a synthetic store and its matching task. Embeddings live near a
/// low-dimensional manifold plus isotropic noise, mirroring the structure of
/// real encoder embeddings; labels are tied to the manifold coordinates so
/// that retrieval quality translates into scorer accuracy.
pub fn generate_synthetic(
    kind: SyntheticKind,
    n: usize,
    dim: usize,
    seed: u64,
) -> Result<(EmbeddingStore, TaskSpec), StoreError> {
    assert!(dim >= 4, "synthetic generator needs dim >= 4");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // Three random orthonormal directions via Gram-Schmidt: a cap axis plus
    // two latent directions. Embeddings are normalize(axis + z1·b1 + z2·b2 +
    // noise), i.e. a spherical-cap patch that is a diffeomorphic image of the
    // 2-D latent square — the constant axis component keeps both latent
    // coordinates alive after normalization (without it the radius collapses
    // and the patch degenerates to a circle). Cosine similarity between two
    // embeddings is then a smooth, monotone function of their latent
    // distance, which is the geometry that makes nearest-neighbour retrieval
    // meaningful for the downstream scorer.
    let mut basis: Vec<Vec<f64>> = Vec::new();
    while basis.len() < 3 {
        let mut v: Vec<f64> = (0..dim).map(|_| math::normal(&mut rng)).collect();
        for b in &basis {
            let proj = math::dot_f64(&v, b);
            for (vi, bi) in v.iter_mut().zip(b) {
                *vi -= proj * bi;
            }
        }
        let norm = math::dot_f64(&v, &v).sqrt();
        if norm > 1e-6 {
            for vi in &mut v {
                *vi /= norm;
            }
            basis.push(v);
        }
    }

    let noise_sigma = 0.05;
    let mut rows = vec![0.0f32; n * dim];
    let mut labels = vec![0.0f32; n];
    for i in 0..n {
        let z1: f64 = rng.gen_range(-1.0..1.0);
        let z2: f64 = rng.gen_range(-1.0..1.0);
        let row = &mut rows[i * dim..(i + 1) * dim];
        // Noise per coordinate scaled so the full noise vector has expected
        // norm `noise_sigma`, independent of dimension.
        let coord_std = noise_sigma / (dim as f64).sqrt();
        let mut raw = vec![0.0f64; dim];
        for (j, r) in raw.iter_mut().enumerate() {
            *r = basis[0][j]
                + z1 * basis[1][j]
                + z2 * basis[2][j]
                + coord_std * math::normal(&mut rng);
        }
        let norm = math::dot_f64(&raw, &raw).sqrt().max(1e-9);
        for (dst, r) in row.iter_mut().zip(&raw) {
            *dst = (r / norm) as f32;
        }
        labels[i] = match kind {
            SyntheticKind::Objective => {
                // Two-scale label field over the latent: a gentle trend plus
                // a fast oscillation whose quarter-wavelength matches the
                // nearest-neighbour spacing at desk-scale densities (N in the
                // low thousands). The oscillation decorrelates between a
                // point and its neighbours, so a single demonstration carries
                // oscillation-sized error while averaging several nearby
                // demonstrations cancels it — this is what makes demo
                // diversity reduce the scorer's bias. The trend makes far
                // demonstrations expensive, so random selection stays well
                // behind neighbour selection at any vote temperature.
                let trend = 6.5 * z1 + 4.0 * (1.7 * z2).sin();
                let osc = 4.5 * (61.0 * z1 + 0.9).sin() * (53.0 * z2 - 0.4).cos();
                let y = 50.0 + trend + osc;
                y.clamp(0.0, 100.0) as f32
            }
            SyntheticKind::Subjective => {
                // Noisy monotone function of similarity to a fixed prototype
                // direction (the first latent axis).
                let p1 = math::dot_f64(&raw, &basis[1]) / norm;
                let y = 5.0 + 4.0 * p1 + 0.4 * math::normal(&mut rng);
                y.clamp(0.0, 10.0) as f32
            }
        };
    }

    let (task, manifest) = match kind {
        SyntheticKind::Objective => {
            let task = TaskSpec::age_default();
            let manifest = Manifest {
                task: task.name.clone(),
                label_lo: 0.0,
                label_hi: 100.0,
                source: format!("synthetic objective generator, seed {seed}"),
                image_paths: None,
            };
            (task, manifest)
        }
        SyntheticKind::Subjective => {
            let task = TaskSpec {
                name: "aesthetic".into(),
                kind: ScoreKind::ZeroToTen,
                label_lo: 0.0,
                label_hi: 10.0,
                lambda: 10.0,
                shots: 4,
                invalid_penalty: -0.5,
            };
            let manifest = Manifest {
                task: task.name.clone(),
                label_lo: 0.0,
                label_hi: 10.0,
                source: format!("synthetic subjective generator, seed {seed}"),
                image_paths: None,
            };
            (task, manifest)
        }
    };
    let store = EmbeddingStore::from_rows(dim, rows, labels, manifest)?;
    Ok((store, task))
}
