//! Deep Q-learning over the retrieval action space.
//!
//! The agent never enumerates the full action set. To act, it encodes the
//! state, asks the index for the `candidates` entries with the highest
//! advantage `a_s · e_i`, and picks ε-greedily within that set. Training is
//! standard DQN machinery — uniform replay, Huber loss on the Bellman
//! residual, Adam with global-norm gradient clipping, and Polyak-averaged
//! target network — except that both the online Q-values and the bootstrap
//! `max_{a'} Q(s', a')` are computed over retrieved candidate sets.

use std::io::Write as IoWrite;
use std::path::Path;

use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::env::{self, EnvError, EpisodeState, Scorer, TaskSpec};
use crate::index::{Hit, IndexError, IvfPqIndex};
use crate::math::{self, AdamState};
use crate::qnet::{self, polyak_update, Forward, Grads, QNet, QNetConfig, QNetError};
use crate::store::{EmbeddingStore, Pool};

#[derive(Debug)]
pub enum AgentError {
    /// Not enough stored transitions to draw a batch.
    BufferTooSmall { needed: usize, got: usize },
    /// Retrieval returned nothing (everything excluded or index empty).
    NoCandidates,
    /// Too many consecutive scorer failures to make progress.
    ScorerUnavailable { consecutive: u32 },
    Env(EnvError),
    Index(IndexError),
    QNet(QNetError),
    Math(math::MathError),
    Io(std::io::Error),
}

impl std::fmt::Display for AgentError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            AgentError::BufferTooSmall { needed, got } => {
                write!(f, "replay buffer holds {got} transitions, need {needed}")
            }
            AgentError::NoCandidates => write!(f, "candidate retrieval returned no valid action"),
            AgentError::ScorerUnavailable { consecutive } => {
                write!(f, "scorer failed {consecutive} episodes in a row; giving up")
            }
            AgentError::Env(e) => write!(f, "environment error: {e}"),
            AgentError::Index(e) => write!(f, "index error: {e}"),
            AgentError::QNet(e) => write!(f, "network error: {e}"),
            AgentError::Math(e) => write!(f, "math error: {e}"),
            AgentError::Io(e) => write!(f, "i/o error: {e}"),
        }
    }
}

impl std::error::Error for AgentError {}

impl From<EnvError> for AgentError {
    fn from(e: EnvError) -> Self {
        AgentError::Env(e)
    }
}

impl From<IndexError> for AgentError {
    fn from(e: IndexError) -> Self {
        AgentError::Index(e)
    }
}

impl From<QNetError> for AgentError {
    fn from(e: QNetError) -> Self {
        AgentError::QNet(e)
    }
}

impl From<math::MathError> for AgentError {
    fn from(e: math::MathError) -> Self {
        AgentError::Math(e)
    }
}

impl From<std::io::Error> for AgentError {
    fn from(e: std::io::Error) -> Self {
        AgentError::Io(e)
    }
}

/// DQN hyperparameters. Defaults follow the reference setting: γ 0.99,
/// Adam at 5e-6, batch 32, 50k replay capacity, τ 0.005, 200 retrieved
/// candidates per decision, ε annealed 0.9 → 0.05.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AgentConfig {
    pub gamma: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub buffer_capacity: usize,
    pub tau: f64,
    /// Candidates retrieved per decision (the advantage-mean reference set).
    pub candidates: usize,
    /// Inverted lists probed per retrieval.
    pub nprobe: usize,
    pub eps_start: f64,
    pub eps_end: f64,
    /// Env-step scale of the exponential ε anneal.
    pub eps_decay_steps: u64,
    pub train_steps: u64,
    /// Transitions collected before optimization begins.
    pub warmup_transitions: usize,
    pub grad_clip_norm: f64,
    pub seed: u64,
}

impl Default for AgentConfig {
    fn default() -> Self {
        AgentConfig {
            gamma: 0.99,
            lr: 5e-6,
            batch_size: 32,
            buffer_capacity: 50_000,
            tau: 0.005,
            candidates: 200,
            nprobe: 10,
            eps_start: 0.9,
            eps_end: 0.05,
            eps_decay_steps: 100_000,
            train_steps: 16_000,
            warmup_transitions: 1_000,
            grad_clip_norm: 1.0,
            seed: 1,
        }
    }
}

/// Exponential exploration schedule:
/// `ε(t) = eps_end + (eps_start − eps_end) · exp(−5t / eps_decay_steps)`.
pub fn epsilon_at(config: &AgentConfig, env_step: u64) -> f64 {
    config.eps_end
        + (config.eps_start - config.eps_end)
            * (-5.0 * env_step as f64 / config.eps_decay_steps as f64).exp()
}

/// One stored interaction.
#[derive(Debug, Clone)]
pub struct Transition {
    pub state: EpisodeState,
    pub action: u32,
    pub reward: f64,
    pub next_state: EpisodeState,
    pub done: bool,
}

/// Fixed-capacity FIFO replay buffer with uniform sampling.
#[derive(Debug)]
pub struct ReplayBuffer {
    items: Vec<Transition>,
    capacity: usize,
    next: usize,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0);
        ReplayBuffer { items: Vec::with_capacity(capacity.min(4096)), capacity, next: 0 }
    }

    pub fn push(&mut self, t: Transition) {
        if self.items.len() < self.capacity {
            self.items.push(t);
        } else {
            self.items[self.next] = t;
        }
        self.next = (self.next + 1) % self.capacity;
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Uniform sample without replacement.
    pub fn sample(&self, batch: usize, rng: &mut ChaCha8Rng) -> Result<Vec<&Transition>, AgentError> {
        if self.items.len() < batch {
            return Err(AgentError::BufferTooSmall { needed: batch, got: self.items.len() });
        }
        Ok(sample_indices(rng, self.items.len(), batch).iter().map(|i| &self.items[i]).collect())
    }
}

/// Outcome of one ε-greedy decision.
#[derive(Debug, Clone)]
pub struct ActionChoice {
    pub action: u32,
    /// False when this step explored.
    pub greedy: bool,
    /// The retrieved candidate set (scores are advantages `a_s · e`).
    pub candidates: Vec<Hit>,
}

fn to_f32(x: &[f64]) -> Vec<f32> {
    x.iter().map(|&v| v as f32).collect()
}

fn demo_vectors<'s>(store: &'s EmbeddingStore, state: &EpisodeState) -> Vec<&'s [f32]> {
    state.selected.iter().map(|&id| store.vector(id)).collect()
}

fn exclusions(state: &EpisodeState) -> Vec<u32> {
    let mut ex = state.selected.clone();
    ex.push(state.query_id);
    ex
}

/// Encode the state and retrieve the advantage-ranked candidate set.
fn retrieve(
    net: &QNet,
    store: &EmbeddingStore,
    index: &IvfPqIndex,
    state: &EpisodeState,
    candidates: usize,
    nprobe: usize,
    train: bool,
    rng: &mut ChaCha8Rng,
) -> Result<(Forward, Vec<Hit>), AgentError> {
    let demos = demo_vectors(store, state);
    let fwd = net.forward(store.vector(state.query_id), &demos, train, rng)?;
    let query = to_f32(&fwd.a_s);
    let hits = index.search(&query, candidates, nprobe, &exclusions(state))?;
    Ok((fwd, hits))
}

/// ε-greedy action over the retrieved candidates. With probability ε a
/// uniform candidate is taken; otherwise the advantage argmax (which is the
/// Q argmax — V and the mean shift all candidates equally).
pub fn select_action(
    net: &QNet,
    store: &EmbeddingStore,
    index: &IvfPqIndex,
    state: &EpisodeState,
    epsilon: f64,
    config: &AgentConfig,
    rng: &mut ChaCha8Rng,
) -> Result<ActionChoice, AgentError> {
    let (_, hits) =
        retrieve(net, store, index, state, config.candidates, config.nprobe, false, rng)?;
    if hits.is_empty() {
        return Err(AgentError::NoCandidates);
    }
    let explore = rng.gen::<f64>() < epsilon;
    let action = if explore { hits[rng.gen_range(0..hits.len())].id } else { hits[0].id };
    Ok(ActionChoice { action, greedy: !explore, candidates: hits })
}

/// Bellman target `y = r + γ (1 − done) max_{a'} Q(s', a'; θ⁻)`, with the
/// max taken over the target network's retrieved candidates.
pub fn compute_target(
    target_net: &QNet,
    store: &EmbeddingStore,
    index: &IvfPqIndex,
    t: &Transition,
    config: &AgentConfig,
    rng: &mut ChaCha8Rng,
) -> Result<f64, AgentError> {
    if t.done {
        return Ok(t.reward);
    }
    let (fwd, hits) = retrieve(
        target_net,
        store,
        index,
        &t.next_state,
        config.candidates,
        config.nprobe,
        false,
        rng,
    )?;
    if hits.is_empty() {
        // Nothing left to select; bootstrap from the state value alone.
        return Ok(t.reward + config.gamma * fwd.v);
    }
    let embeds: Vec<&[f32]> = hits.iter().map(|h| store.vector(h.id)).collect();
    let qs = qnet::q_values(fwd.v, &fwd.a_s, &embeds)?;
    let max_q = qs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok(t.reward + config.gamma * max_q)
}

/// One gradient step on a batch with precomputed targets: Huber loss on the
/// Bellman residual, mean over the batch, global-norm clip, Adam. Returns
/// `(mean loss, pre-clip gradient norm)`.
pub fn optimize_batch(
    online: &mut QNet,
    opt: &mut [AdamState],
    store: &EmbeddingStore,
    index: &IvfPqIndex,
    batch: &[&Transition],
    targets: &[f64],
    config: &AgentConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(f64, f64), AgentError> {
    assert_eq!(batch.len(), targets.len());
    let scale = 1.0 / batch.len() as f64;
    let mut grads = Grads::zeros_like(online);
    let mut loss_sum = 0.0f64;
    let train = online.config.dropout > 0.0;

    for (t, &y) in batch.iter().zip(targets) {
        let (fwd, hits) = retrieve(
            online,
            store,
            index,
            &t.state,
            config.candidates,
            config.nprobe,
            train,
            rng,
        )?;
        if hits.is_empty() {
            return Err(AgentError::NoCandidates);
        }
        // Q(s, a) = V + a_s·e_a − mean over the candidate set.
        let e_a = store.vector(t.action);
        let adv_a: f64 = e_a.iter().zip(&fwd.a_s).map(|(&x, &a)| x as f64 * a).sum();
        let mut mean_adv = 0.0f64;
        let mut mean_embed = vec![0.0f64; store.dim()];
        for h in &hits {
            let e = store.vector(h.id);
            mean_adv += e.iter().zip(&fwd.a_s).map(|(&x, &a)| x as f64 * a).sum::<f64>();
            for (m, &x) in mean_embed.iter_mut().zip(e) {
                *m += x as f64;
            }
        }
        let n = hits.len() as f64;
        mean_adv /= n;
        for m in &mut mean_embed {
            *m /= n;
        }

        let q = fwd.v + adv_a - mean_adv;
        let residual = q - y;
        loss_sum += math::huber_f64(residual);

        // ∂L/∂q, then ∂q/∂V = 1 and ∂q/∂a_s = e_a − mean(e).
        let d_q = math::huber_grad(residual) * scale;
        let d_a: Vec<f64> =
            e_a.iter().zip(&mean_embed).map(|(&x, &m)| d_q * (x as f64 - m)).collect();
        online.backward(&fwd, d_q, &d_a, &mut grads);
    }

    let pre_clip = grads.clip_global_norm(config.grad_clip_norm);
    for (slot, ((_, tensor), state)) in
        online.named_tensors_mut().into_iter().zip(opt.iter_mut()).enumerate()
    {
        math::adam_step(&mut tensor.data, &grads.slots[slot], state, config.lr)?;
    }
    Ok((loss_sum * scale, pre_clip))
}

/// The networks, optimizer, replay buffer, and step counters of one run.
pub struct Agent {
    pub config: AgentConfig,
    pub online: QNet,
    pub target: QNet,
    pub opt: Vec<AdamState>,
    pub buffer: ReplayBuffer,
    pub rng: ChaCha8Rng,
    pub env_steps: u64,
    pub train_steps_done: u64,
    pub episodes: u64,
}

impl Agent {
    pub fn new(qnet_config: QNetConfig, config: AgentConfig) -> Result<Self, AgentError> {
        let online = QNet::init(qnet_config, config.seed)?;
        let target = online.clone();
        let opt = online.named_tensors().iter().map(|(_, t)| AdamState::new(t.len())).collect();
        let buffer = ReplayBuffer::new(config.buffer_capacity);
        let rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed);
        Ok(Agent {
            config,
            online,
            target,
            opt,
            buffer,
            rng,
            env_steps: 0,
            train_steps_done: 0,
            episodes: 0,
        })
    }

    pub fn epsilon(&self) -> f64 {
        epsilon_at(&self.config, self.env_steps)
    }

    /// Sample a batch, compute targets with the frozen network, take one
    /// optimizer step, then soft-update the target network.
    pub fn train_step(
        &mut self,
        store: &EmbeddingStore,
        index: &IvfPqIndex,
    ) -> Result<(f64, f64), AgentError> {
        let batch = self.buffer.sample(self.config.batch_size, &mut self.rng)?;
        let mut targets = Vec::with_capacity(batch.len());
        for t in &batch {
            targets.push(compute_target(&self.target, store, index, t, &self.config, &mut self.rng)?);
        }
        // `sample` borrows the buffer immutably; clone out the transitions
        // so the optimizer can borrow the agent's RNG mutably.
        let owned: Vec<Transition> = batch.into_iter().cloned().collect();
        let refs: Vec<&Transition> = owned.iter().collect();
        let out = optimize_batch(
            &mut self.online,
            &mut self.opt,
            store,
            index,
            &refs,
            &targets,
            &self.config,
            &mut self.rng,
        )?;
        polyak_update(&mut self.target, &self.online, self.config.tau);
        self.train_steps_done += 1;
        Ok(out)
    }

    /// Persist networks, Adam moments, counters, and the RNG stream
    /// position; [`Agent::load_checkpoint`] resumes bit-exactly.
    pub fn save_checkpoint(&self, path: &Path) -> Result<(), AgentError> {
        let mut tensors: Vec<(String, &crate::math::Tensor)> = Vec::new();
        for (name, t) in self.online.named_tensors() {
            tensors.push((format!("online.{name}"), t));
        }
        for (name, t) in self.target.named_tensors() {
            tensors.push((format!("target.{name}"), t));
        }
        // Adam moments as tensors, aligned with the online net's order.
        let moment_tensors: Vec<(String, crate::math::Tensor)> = self
            .online
            .named_tensors()
            .iter()
            .zip(&self.opt)
            .flat_map(|((name, t), st)| {
                [
                    (
                        format!("adam.{name}.m"),
                        crate::math::Tensor { shape: t.shape.clone(), data: st.m.clone() },
                    ),
                    (
                        format!("adam.{name}.v"),
                        crate::math::Tensor { shape: t.shape.clone(), data: st.v.clone() },
                    ),
                ]
            })
            .collect();
        for (name, t) in &moment_tensors {
            tensors.push((name.clone(), t));
        }
        let meta = serde_json::json!({
            "qnet_config": self.online.config,
            "agent_config": self.config,
            "env_steps": self.env_steps,
            "train_steps": self.train_steps_done,
            "episodes": self.episodes,
            "adam_t": self.opt.first().map(|s| s.t).unwrap_or(0),
            "rng_seed": self.config.seed ^ 0x5eed,
            "rng_word_pos": self.rng.get_word_pos().to_string(),
        });
        qnet::save_tensor_file(path, &meta, &tensors)?;
        Ok(())
    }

    pub fn load_checkpoint(path: &Path) -> Result<Self, AgentError> {
        let (meta, tensors) = qnet::load_tensor_file(path)?;
        let parse = |detail: &str| QNetError::Checkpoint { detail: detail.to_string() };
        let qnet_config: QNetConfig = serde_json::from_value(meta["qnet_config"].clone())
            .map_err(|e| parse(&format!("qnet_config: {e}")))?;
        let agent_config: AgentConfig = serde_json::from_value(meta["agent_config"].clone())
            .map_err(|e| parse(&format!("agent_config: {e}")))?;

        let pick = |prefix: &str| -> Vec<(String, crate::math::Tensor)> {
            tensors
                .iter()
                .filter(|(n, _)| n.starts_with(prefix))
                .map(|(n, t)| (n[prefix.len()..].to_string(), t.clone()))
                .collect()
        };
        let online = QNet::from_named_tensors(qnet_config.clone(), &pick("online."))?;
        let target = QNet::from_named_tensors(qnet_config, &pick("target."))?;

        let adam_t = meta["adam_t"].as_u64().unwrap_or(0);
        let mut opt = Vec::new();
        for (name, t) in online.named_tensors() {
            let m = tensors
                .iter()
                .find(|(n, _)| n == &format!("adam.{name}.m"))
                .ok_or_else(|| parse(&format!("missing adam.{name}.m")))?;
            let v = tensors
                .iter()
                .find(|(n, _)| n == &format!("adam.{name}.v"))
                .ok_or_else(|| parse(&format!("missing adam.{name}.v")))?;
            let mut st = AdamState::new(t.len());
            st.m.copy_from_slice(&m.1.data);
            st.v.copy_from_slice(&v.1.data);
            st.t = adam_t;
            opt.push(st);
        }

        let mut rng =
            ChaCha8Rng::seed_from_u64(meta["rng_seed"].as_u64().ok_or_else(|| parse("rng_seed"))?);
        let pos: u128 = meta["rng_word_pos"]
            .as_str()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| parse("rng_word_pos"))?;
        rng.set_word_pos(pos);

        let buffer = ReplayBuffer::new(agent_config.buffer_capacity);
        Ok(Agent {
            env_steps: meta["env_steps"].as_u64().unwrap_or(0),
            train_steps_done: meta["train_steps"].as_u64().unwrap_or(0),
            episodes: meta["episodes"].as_u64().unwrap_or(0),
            config: agent_config,
            online,
            target,
            opt,
            buffer,
            rng,
        })
    }
}

/// One metrics row streamed during training.
#[derive(Debug, Clone, Serialize)]
pub struct TrainRow {
    pub train_step: u64,
    pub env_step: u64,
    pub episode: u64,
    pub epsilon: f64,
    pub loss: f64,
    pub grad_norm: f64,
    /// Exponential moving average (0.99) of finished-episode total reward.
    pub episode_reward_ema: f64,
}

/// Callbacks and cadence for [`train`].
pub struct TrainOptions<'a> {
    /// Write one CSV row per optimizer step here (header included).
    pub metrics: Option<&'a mut dyn IoWrite>,
    /// Checkpoint every this many optimizer steps (0 disables).
    pub checkpoint_every: u64,
    pub checkpoint_path: Option<&'a Path>,
}

impl Default for TrainOptions<'_> {
    fn default() -> Self {
        TrainOptions { metrics: None, checkpoint_every: 0, checkpoint_path: None }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct TrainSummary {
    pub episodes: u64,
    pub env_steps: u64,
    pub train_steps: u64,
    pub scorer_failures: u64,
    pub final_epsilon: f64,
    pub episode_reward_ema: f64,
}

/// Run episodes against the environment, interleaving one optimizer step per
/// environment step once `warmup_transitions` have been collected, until
/// `train_steps` optimizer steps have been taken.
///
/// Queries are drawn uniformly from `query_ids`. Episodes whose scorer fails
/// are dropped (counted in the summary); fifty consecutive failures abort.
pub fn train(
    agent: &mut Agent,
    store: &EmbeddingStore,
    index: &IvfPqIndex,
    pool: &Pool,
    task: &TaskSpec,
    scorer: &dyn Scorer,
    query_ids: &[u32],
    mut options: TrainOptions<'_>,
) -> Result<TrainSummary, AgentError> {
    assert!(!query_ids.is_empty(), "training requires at least one query");
    let mut csv = options.metrics.take().map(|w| csv::WriterBuilder::new().from_writer(w));

    let mut reward_ema = 0.0f64;
    let mut ema_initialized = false;
    let mut scorer_failures = 0u64;
    let mut consecutive_failures = 0u32;

    'outer: while agent.train_steps_done < agent.config.train_steps {
        let query = query_ids[agent.rng.gen_range(0..query_ids.len())];
        let mut episode = match env::reset(store, pool, task, scorer, query) {
            Ok(ep) => ep,
            Err(EnvError::ScorerFailure) => {
                scorer_failures += 1;
                consecutive_failures += 1;
                if consecutive_failures >= 50 {
                    return Err(AgentError::ScorerUnavailable { consecutive: consecutive_failures });
                }
                continue;
            }
            Err(e) => return Err(e.into()),
        };
        consecutive_failures = 0;
        agent.episodes += 1;
        let mut episode_reward = 0.0f64;

        while !episode.done {
            let epsilon = agent.epsilon();
            let choice = select_action(
                &agent.online,
                store,
                index,
                &episode.state,
                epsilon,
                &agent.config,
                &mut agent.rng,
            )?;
            let state_before = episode.state.clone();
            let outcome = match env::step(&mut episode, store, pool, task, scorer, choice.action) {
                Ok(out) => out,
                Err(EnvError::ScorerFailure) => {
                    scorer_failures += 1;
                    break; // drop the episode, keep collected transitions
                }
                Err(e) => return Err(e.into()),
            };
            episode_reward += outcome.reward;
            agent.buffer.push(Transition {
                state: state_before,
                action: choice.action,
                reward: outcome.reward,
                next_state: episode.state.clone(),
                done: outcome.done,
            });
            agent.env_steps += 1;

            if agent.buffer.len() >= agent.config.warmup_transitions.max(agent.config.batch_size)
                && agent.train_steps_done < agent.config.train_steps
            {
                let (loss, grad_norm) = agent.train_step(store, index)?;
                if let Some(w) = csv.as_mut() {
                    w.serialize(TrainRow {
                        train_step: agent.train_steps_done,
                        env_step: agent.env_steps,
                        episode: agent.episodes,
                        epsilon,
                        loss,
                        grad_norm,
                        episode_reward_ema: reward_ema,
                    })
                    .map_err(|e| AgentError::Io(std::io::Error::other(e)))?;
                }
                if options.checkpoint_every > 0
                    && agent.train_steps_done % options.checkpoint_every == 0
                {
                    if let Some(path) = options.checkpoint_path {
                        agent.save_checkpoint(path)?;
                    }
                }
                if agent.train_steps_done >= agent.config.train_steps {
                    // Training budget exhausted; stop mid-episode.
                    break 'outer;
                }
            }
        }

        if ema_initialized {
            reward_ema = 0.99 * reward_ema + 0.01 * episode_reward;
        } else {
            reward_ema = episode_reward;
            ema_initialized = true;
        }
    }

    if let Some(mut w) = csv {
        w.flush()?;
    }
    Ok(TrainSummary {
        episodes: agent.episodes,
        env_steps: agent.env_steps,
        train_steps: agent.train_steps_done,
        scorer_failures,
        final_epsilon: agent.epsilon(),
        episode_reward_ema: reward_ema,
    })
}

/// Greedy (ε = 0) rollout of a trained policy for one query; returns the
/// selected demonstration ids in selection order (anchor first).
pub fn greedy_rollout(
    net: &QNet,
    store: &EmbeddingStore,
    index: &IvfPqIndex,
    pool: &Pool,
    task: &TaskSpec,
    scorer: &dyn Scorer,
    query_id: u32,
    config: &AgentConfig,
) -> Result<Vec<u32>, AgentError> {
    let mut episode = env::reset(store, pool, task, scorer, query_id)?;
    let mut rng = ChaCha8Rng::seed_from_u64(0); // unused at ε = 0
    while !episode.done {
        let choice =
            select_action(net, store, index, &episode.state, 0.0, config, &mut rng)?;
        env::step(&mut episode, store, pool, task, scorer, choice.action)?;
    }
    Ok(episode.state.selected)
}
