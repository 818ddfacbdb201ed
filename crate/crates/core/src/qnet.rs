//! Dueling Q-network over a retrieval action space.
//!
//! The state — a query embedding plus the demonstrations selected so far —
//! is encoded by a small transformer. The default encoder is query-centric:
//! the query is the single target token and the demonstrations (plus learned
//! positional encodings) form the memory of a norm-first cross-attention
//! stack. The `Concat` mode is the ablation that instead runs unmasked
//! self-attention over `[query; demonstrations]` and reads the state at the
//! query position.
//!
//! The dueling heads emit a scalar state value `V(s)` and a unit-norm
//! advantage query `a_s`; a candidate's advantage is the inner product
//! `a_s · e_i`, so Q-values over any candidate set come from one forward
//! pass plus one dot product per candidate:
//!
//! `Q(s, a_i) = V(s) + a_s·e_i − mean_j(a_s·e_j)`.
//!
//! Parameters live in `f32`; activations and gradients are carried in `f64`
//! so the backward pass stays finite-difference clean. The backward pass is
//! hand-written and verified against central differences in the tests.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::math::{self, LayerNormCache, Tensor};

const MAGIC: &[u8; 8] = b"LSDQNET1";
const INIT_STD: f32 = 0.02;

#[derive(Debug)]
pub enum QNetError {
    Config { detail: String },
    /// More demonstrations than the network has positional encodings for.
    TooManyDemos { max: usize, got: usize },
    DimMismatch { expected: usize, got: usize },
    /// The advantage projection collapsed to (numerically) zero and cannot
    /// be normalized.
    ZeroAdvantage,
    /// Q-values were requested over an empty candidate set.
    EmptyCandidates,
    Io(std::io::Error),
    BadMagic,
    Truncated,
    /// Malformed checkpoint header or tensor table.
    Checkpoint { detail: String },
}

impl std::fmt::Display for QNetError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            QNetError::Config { detail } => write!(f, "invalid network config: {detail}"),
            QNetError::TooManyDemos { max, got } => {
                write!(f, "{got} demonstrations exceed the positional table ({max})")
            }
            QNetError::DimMismatch { expected, got } => {
                write!(f, "embedding dimension {got} does not match network dimension {expected}")
            }
            QNetError::ZeroAdvantage => write!(f, "advantage projection is a zero vector"),
            QNetError::EmptyCandidates => write!(f, "candidate set is empty"),
            QNetError::Io(e) => write!(f, "checkpoint i/o error: {e}"),
            QNetError::BadMagic => write!(f, "not a checkpoint file (bad magic)"),
            QNetError::Truncated => write!(f, "checkpoint file is truncated"),
            QNetError::Checkpoint { detail } => write!(f, "malformed checkpoint: {detail}"),
        }
    }
}

impl std::error::Error for QNetError {}

impl From<std::io::Error> for QNetError {
    fn from(e: std::io::Error) -> Self {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            QNetError::Truncated
        } else {
            QNetError::Io(e)
        }
    }
}

/// How the state encoder consumes query and demonstrations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderMode {
    /// Query as the sole target token, demonstrations as cross-attention
    /// memory (the default).
    QueryCentric,
    /// Unmasked self-attention over `[query; demonstrations]`; the state is
    /// read at the query position (ablation).
    Concat,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QNetConfig {
    /// Embedding dimension of the store and of every hidden vector.
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    /// Maximum demonstrations per state (size of the positional table).
    pub k_max: usize,
    /// Dropout rate on attention probabilities and on the FFN block output.
    pub dropout: f64,
    pub encoder_mode: EncoderMode,
    /// Whether a final LayerNorm is applied to the encoder output before
    /// the heads (norm-first stacks conventionally do this; kept togglable
    /// so its effect can be measured).
    pub final_layer_norm: bool,
}

impl Default for QNetConfig {
    /// Reference setting: 2 layers, 4 heads over 768-d embeddings with a
    /// 4×D feedforward, up to 16 demonstration slots, dropout 0.1.
    fn default() -> Self {
        QNetConfig {
            dim: 768,
            layers: 2,
            heads: 4,
            ffn_dim: 3072,
            k_max: 16,
            dropout: 0.1,
            encoder_mode: EncoderMode::QueryCentric,
            final_layer_norm: true,
        }
    }
}

impl QNetConfig {
    pub fn validate(&self) -> Result<(), QNetError> {
        if self.dim == 0 || self.layers == 0 || self.heads == 0 || self.ffn_dim == 0 {
            return Err(QNetError::Config {
                detail: "dim, layers, heads and ffn_dim must be positive".into(),
            });
        }
        if self.dim % self.heads != 0 {
            return Err(QNetError::Config {
                detail: format!("heads {} must divide dim {}", self.heads, self.dim),
            });
        }
        if self.k_max == 0 {
            return Err(QNetError::Config { detail: "k_max must be positive".into() });
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(QNetError::Config {
                detail: format!("dropout {} must lie in [0, 1)", self.dropout),
            });
        }
        Ok(())
    }

    fn head_dim(&self) -> usize {
        self.dim / self.heads
    }
}

/// Weights of one transformer layer.
#[derive(Debug, Clone)]
pub struct LayerParams {
    pub w_q: Tensor,
    pub w_k: Tensor,
    pub w_v: Tensor,
    pub w_o: Tensor,
    pub ln1_gain: Tensor,
    pub ln1_bias: Tensor,
    pub ffn_w1: Tensor,
    pub ffn_b1: Tensor,
    pub ffn_w2: Tensor,
    pub ffn_b2: Tensor,
    pub ln2_gain: Tensor,
    pub ln2_bias: Tensor,
}

/// The full parameter set: encoder stack, positional table, dueling heads.
#[derive(Debug, Clone)]
pub struct QNet {
    pub config: QNetConfig,
    pub layers: Vec<LayerParams>,
    /// Learned positional encodings for demonstration slots, `k_max × dim`.
    pub pos: Tensor,
    pub final_ln_gain: Tensor,
    pub final_ln_bias: Tensor,
    /// Value head: `V = w_v · c_s + b_v`.
    pub value_w: Tensor,
    pub value_b: Tensor,
    /// Advantage head: `a_s = normalize(adv_w · c_s + adv_b)`.
    pub adv_w: Tensor,
    pub adv_b: Tensor,
}

impl QNet {
    /// Fresh network: weights `N(0, 0.02)`, biases zero, LayerNorm gains one.
    pub fn init(config: QNetConfig, seed: u64) -> Result<Self, QNetError> {
        config.validate()?;
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.dim;
        let f = config.ffn_dim;
        let layers = (0..config.layers)
            .map(|_| LayerParams {
                w_q: Tensor::randn(&[d, d], INIT_STD, &mut rng),
                w_k: Tensor::randn(&[d, d], INIT_STD, &mut rng),
                w_v: Tensor::randn(&[d, d], INIT_STD, &mut rng),
                w_o: Tensor::randn(&[d, d], INIT_STD, &mut rng),
                ln1_gain: Tensor::filled(&[d], 1.0),
                ln1_bias: Tensor::zeros(&[d]),
                ffn_w1: Tensor::randn(&[f, d], INIT_STD, &mut rng),
                ffn_b1: Tensor::zeros(&[f]),
                ffn_w2: Tensor::randn(&[d, f], INIT_STD, &mut rng),
                ffn_b2: Tensor::zeros(&[d]),
                ln2_gain: Tensor::filled(&[d], 1.0),
                ln2_bias: Tensor::zeros(&[d]),
            })
            .collect();
        Ok(QNet {
            pos: Tensor::randn(&[config.k_max, d], INIT_STD, &mut rng),
            final_ln_gain: Tensor::filled(&[d], 1.0),
            final_ln_bias: Tensor::zeros(&[d]),
            value_w: Tensor::randn(&[d], INIT_STD, &mut rng),
            value_b: Tensor::zeros(&[1]),
            // Identity, not random: candidate retrieval is keyed by a_s, so a
            // random projection here would make the initial candidate sets
            // (and therefore the replay data) unrelated to the query — a
            // self-reinforcing blind spot the agent cannot explore its way
            // out of. Starting at a_s ≈ c_s ≈ e_q keeps early retrieval
            // query-anchored.
            adv_w: Tensor::eye(d),
            adv_b: Tensor::zeros(&[d]),
            layers,
            config,
        })
    }

    /// All tensors in a stable order (used for gradients, Adam slots,
    /// soft updates, and checkpoints).
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            out.push((format!("layers.{i}.w_q"), &l.w_q));
            out.push((format!("layers.{i}.w_k"), &l.w_k));
            out.push((format!("layers.{i}.w_v"), &l.w_v));
            out.push((format!("layers.{i}.w_o"), &l.w_o));
            out.push((format!("layers.{i}.ln1_gain"), &l.ln1_gain));
            out.push((format!("layers.{i}.ln1_bias"), &l.ln1_bias));
            out.push((format!("layers.{i}.ffn_w1"), &l.ffn_w1));
            out.push((format!("layers.{i}.ffn_b1"), &l.ffn_b1));
            out.push((format!("layers.{i}.ffn_w2"), &l.ffn_w2));
            out.push((format!("layers.{i}.ffn_b2"), &l.ffn_b2));
            out.push((format!("layers.{i}.ln2_gain"), &l.ln2_gain));
            out.push((format!("layers.{i}.ln2_bias"), &l.ln2_bias));
        }
        out.push(("pos".into(), &self.pos));
        out.push(("final_ln_gain".into(), &self.final_ln_gain));
        out.push(("final_ln_bias".into(), &self.final_ln_bias));
        out.push(("value_w".into(), &self.value_w));
        out.push(("value_b".into(), &self.value_b));
        out.push(("adv_w".into(), &self.adv_w));
        out.push(("adv_b".into(), &self.adv_b));
        out
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out: Vec<(String, &mut Tensor)> = Vec::new();
        for (i, l) in self.layers.iter_mut().enumerate() {
            out.push((format!("layers.{i}.w_q"), &mut l.w_q));
            out.push((format!("layers.{i}.w_k"), &mut l.w_k));
            out.push((format!("layers.{i}.w_v"), &mut l.w_v));
            out.push((format!("layers.{i}.w_o"), &mut l.w_o));
            out.push((format!("layers.{i}.ln1_gain"), &mut l.ln1_gain));
            out.push((format!("layers.{i}.ln1_bias"), &mut l.ln1_bias));
            out.push((format!("layers.{i}.ffn_w1"), &mut l.ffn_w1));
            out.push((format!("layers.{i}.ffn_b1"), &mut l.ffn_b1));
            out.push((format!("layers.{i}.ffn_w2"), &mut l.ffn_w2));
            out.push((format!("layers.{i}.ffn_b2"), &mut l.ffn_b2));
            out.push((format!("layers.{i}.ln2_gain"), &mut l.ln2_gain));
            out.push((format!("layers.{i}.ln2_bias"), &mut l.ln2_bias));
        }
        out.push(("pos".into(), &mut self.pos));
        out.push(("final_ln_gain".into(), &mut self.final_ln_gain));
        out.push(("final_ln_bias".into(), &mut self.final_ln_bias));
        out.push(("value_w".into(), &mut self.value_w));
        out.push(("value_b".into(), &mut self.value_b));
        out.push(("adv_w".into(), &mut self.adv_w));
        out.push(("adv_b".into(), &mut self.adv_b));
        out
    }
}

/// Gradient buffers parallel to [`QNet::named_tensors`], in `f64`.
#[derive(Debug, Clone)]
pub struct Grads {
    pub slots: Vec<Vec<f64>>,
}

impl Grads {
    pub fn zeros_like(net: &QNet) -> Self {
        Grads { slots: net.named_tensors().iter().map(|(_, t)| vec![0.0; t.len()]).collect() }
    }

    pub fn zero(&mut self) {
        for s in &mut self.slots {
            s.fill(0.0);
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.slots.iter().flat_map(|s| s.iter()).map(|g| g * g).sum::<f64>().sqrt()
    }

    /// Scale all gradients so the global norm does not exceed `max_norm`.
    /// Returns the pre-clip norm.
    pub fn clip_global_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.global_norm();
        if norm > max_norm && norm > 0.0 {
            let scale = max_norm / norm;
            for s in &mut self.slots {
                for g in s.iter_mut() {
                    *g *= scale;
                }
            }
        }
        norm
    }
}

/// Soft update `target ← tau · online + (1 − tau) · target`.
pub fn polyak_update(target: &mut QNet, online: &QNet, tau: f64) {
    let src = online.named_tensors();
    for ((_, dst), (_, s)) in target.named_tensors_mut().into_iter().zip(src) {
        debug_assert_eq!(dst.len(), s.len());
        for (d, &o) in dst.data.iter_mut().zip(&s.data) {
            *d = (tau * o as f64 + (1.0 - tau) * *d as f64) as f32;
        }
    }
}

// ---------------------------------------------------------------------------
// Forward pass
// ---------------------------------------------------------------------------

/// Per-layer activations cached for the backward pass (query-centric mode:
/// one target token, `t` memory tokens).
#[derive(Debug, Clone)]
struct QcLayerTrace {
    ln1: LayerNormCache,
    n1: Vec<f64>,
    q: Vec<f64>,
    k: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    /// Softmax probabilities per head (`heads × t`).
    probs: Vec<Vec<f64>>,
    /// Dropout scale factors on attention probabilities (0 or 1/(1−p)).
    attn_scale: Vec<Vec<f64>>,
    z: Vec<f64>,
    ln2: LayerNormCache,
    n2: Vec<f64>,
    u: Vec<f64>,
    g: Vec<f64>,
    /// Dropout scale factors on the FFN block output.
    ffn_scale: Vec<f64>,
}

/// Per-layer activations in concat (self-attention) mode: every field of
/// the query-centric trace, per token.
#[derive(Debug, Clone)]
struct CatLayerTrace {
    ln1: Vec<LayerNormCache>,
    n1: Vec<Vec<f64>>,
    q: Vec<Vec<f64>>,
    k: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    /// `heads × tokens × tokens` softmax rows.
    probs: Vec<Vec<Vec<f64>>>,
    attn_scale: Vec<Vec<Vec<f64>>>,
    z: Vec<Vec<f64>>,
    ln2: Vec<LayerNormCache>,
    n2: Vec<Vec<f64>>,
    u: Vec<Vec<f64>>,
    g: Vec<Vec<f64>>,
    ffn_scale: Vec<Vec<f64>>,
}

#[derive(Debug, Clone)]
enum TraceBody {
    Qc { memory: Vec<Vec<f64>>, layers: Vec<QcLayerTrace> },
    Cat { layers: Vec<CatLayerTrace> },
}

/// Everything [`QNet::backward`] needs: cached activations, the state
/// encoding, and the head outputs.
#[derive(Debug, Clone)]
pub struct Forward {
    t: usize,
    body: TraceBody,
    final_ln: Option<LayerNormCache>,
    /// State encoding `c_s` (post final LayerNorm when enabled).
    pub c_s: Vec<f64>,
    /// State value `V(s)`.
    pub v: f64,
    /// Unit advantage query `a_s`.
    pub a_s: Vec<f64>,
    /// Norm of the advantage projection before unit-normalization.
    adv_norm: f64,
}

impl QNet {
    /// Encode the state and evaluate both dueling heads.
    ///
    /// `demos` are the embeddings of the selected demonstrations, in
    /// selection order. With `train` set, dropout is sampled from `rng`
    /// (the same generator state reproduces the same masks).
    pub fn forward(
        &self,
        e_q: &[f32],
        demos: &[&[f32]],
        train: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Forward, QNetError> {
        let d = self.config.dim;
        if e_q.len() != d {
            return Err(QNetError::DimMismatch { expected: d, got: e_q.len() });
        }
        for demo in demos {
            if demo.len() != d {
                return Err(QNetError::DimMismatch { expected: d, got: demo.len() });
            }
        }
        if demos.len() > self.config.k_max {
            return Err(QNetError::TooManyDemos { max: self.config.k_max, got: demos.len() });
        }

        let (body, x_top) = match self.config.encoder_mode {
            EncoderMode::QueryCentric => self.forward_qc(e_q, demos, train, rng),
            EncoderMode::Concat => self.forward_cat(e_q, demos, train, rng),
        };

        let (c_s, final_ln) = if self.config.final_layer_norm {
            let gain: Vec<f64> = self.final_ln_gain.data.iter().map(|&v| v as f64).collect();
            let bias: Vec<f64> = self.final_ln_bias.data.iter().map(|&v| v as f64).collect();
            let (y, cache) = math::layer_norm_fwd(&x_top, &gain, &bias);
            (y, Some(cache))
        } else {
            (x_top, None)
        };

        // Dueling heads.
        let v = math::dot_f64(&to_f64(&self.value_w.data), &c_s) + self.value_b.data[0] as f64;
        let mut pre = to_f64(&self.adv_b.data);
        math::mat_vec_accum(&self.adv_w, &c_s, &mut pre);
        let (a_s, adv_norm) = math::l2_normalize_f64(&pre).map_err(|_| QNetError::ZeroAdvantage)?;

        Ok(Forward { t: demos.len(), body, final_ln, c_s, v, a_s, adv_norm })
    }

    /// Query-centric encoder: `e_q` is the single target token; memory rows
    /// are `demo_i + pos_i`, shared by every layer.
    fn forward_qc(
        &self,
        e_q: &[f32],
        demos: &[&[f32]],
        train: bool,
        rng: &mut ChaCha8Rng,
    ) -> (TraceBody, Vec<f64>) {
        let d = self.config.dim;
        let t = demos.len();
        let memory: Vec<Vec<f64>> = demos
            .iter()
            .enumerate()
            .map(|(i, demo)| {
                demo.iter()
                    .zip(self.pos.row(i))
                    .map(|(&e, &p)| e as f64 + p as f64)
                    .collect()
            })
            .collect();

        let mut x = to_f64(e_q);
        let mut layers = Vec::with_capacity(self.config.layers);
        for lp in &self.layers {
            let (n1, ln1) = layer_norm_params(&x, &lp.ln1_gain, &lp.ln1_bias);

            let q = math::mat_vec(&lp.w_q, &n1);
            let k: Vec<Vec<f64>> = memory.iter().map(|m| math::mat_vec(&lp.w_k, m)).collect();
            let v: Vec<Vec<f64>> = memory.iter().map(|m| math::mat_vec(&lp.w_v, m)).collect();

            // Attention per head; with no memory the block contributes
            // nothing and the residual passes through.
            let heads = self.config.heads;
            let dk = self.config.head_dim();
            let scale = 1.0 / (dk as f64).sqrt();
            let mut probs = Vec::with_capacity(heads);
            let mut attn_scale = Vec::with_capacity(heads);
            let mut z = vec![0.0; d];
            if t > 0 {
                for h in 0..heads {
                    let span = h * dk..(h + 1) * dk;
                    let logits: Vec<f64> = (0..t)
                        .map(|i| math::dot_f64(&q[span.clone()], &k[i][span.clone()]) * scale)
                        .collect();
                    let p = math::softmax_f64(&logits);
                    let mask = dropout_mask(t, self.config.dropout, train, rng);
                    for i in 0..t {
                        let w = p[i] * mask[i];
                        for (zj, vj) in z[span.clone()].iter_mut().zip(&v[i][span.clone()]) {
                            *zj += w * vj;
                        }
                    }
                    probs.push(p);
                    attn_scale.push(mask);
                }
            }
            let mut attn_out = vec![0.0; d];
            if t > 0 {
                attn_out = math::mat_vec(&lp.w_o, &z);
            }
            let x_mid: Vec<f64> = x.iter().zip(&attn_out).map(|(a, b)| a + b).collect();

            let (n2, ln2) = layer_norm_params(&x_mid, &lp.ln2_gain, &lp.ln2_bias);
            let mut u = to_f64(&lp.ffn_b1.data);
            math::mat_vec_accum(&lp.ffn_w1, &n2, &mut u);
            let g: Vec<f64> = u.iter().map(|&ui| math::gelu_f64(ui)).collect();
            let mut fout = to_f64(&lp.ffn_b2.data);
            math::mat_vec_accum(&lp.ffn_w2, &g, &mut fout);
            let ffn_scale = dropout_mask(d, self.config.dropout, train, rng);
            let x_out: Vec<f64> = x_mid
                .iter()
                .zip(fout.iter().zip(&ffn_scale))
                .map(|(xm, (f, s))| xm + f * s)
                .collect();

            layers.push(QcLayerTrace {
                ln1,
                n1,
                q,
                k,
                v,
                probs,
                attn_scale,
                z,
                ln2,
                n2,
                u,
                g,
                ffn_scale,
            });
            x = x_out;
        }
        (TraceBody::Qc { memory, layers }, x)
    }

    /// Concat encoder: unmasked self-attention over `[e_q; demos + pos]`.
    fn forward_cat(
        &self,
        e_q: &[f32],
        demos: &[&[f32]],
        train: bool,
        rng: &mut ChaCha8Rng,
    ) -> (TraceBody, Vec<f64>) {
        let d = self.config.dim;
        let tokens = demos.len() + 1;
        let mut xs: Vec<Vec<f64>> = Vec::with_capacity(tokens);
        xs.push(to_f64(e_q));
        for (i, demo) in demos.iter().enumerate() {
            xs.push(
                demo.iter()
                    .zip(self.pos.row(i))
                    .map(|(&e, &p)| e as f64 + p as f64)
                    .collect(),
            );
        }

        let mut layers = Vec::with_capacity(self.config.layers);
        for lp in &self.layers {
            let x_in = xs.clone();
            let mut ln1 = Vec::with_capacity(tokens);
            let mut n1 = Vec::with_capacity(tokens);
            for x in &xs {
                let (n, c) = layer_norm_params(x, &lp.ln1_gain, &lp.ln1_bias);
                n1.push(n);
                ln1.push(c);
            }
            let q: Vec<Vec<f64>> = n1.iter().map(|n| math::mat_vec(&lp.w_q, n)).collect();
            let k: Vec<Vec<f64>> = n1.iter().map(|n| math::mat_vec(&lp.w_k, n)).collect();
            let v: Vec<Vec<f64>> = n1.iter().map(|n| math::mat_vec(&lp.w_v, n)).collect();

            let heads = self.config.heads;
            let dk = self.config.head_dim();
            let scale = 1.0 / (dk as f64).sqrt();
            let mut probs = vec![Vec::with_capacity(tokens); heads];
            let mut attn_scale = vec![Vec::with_capacity(tokens); heads];
            let mut z = vec![vec![0.0; d]; tokens];
            for h in 0..heads {
                let span = h * dk..(h + 1) * dk;
                for j in 0..tokens {
                    let logits: Vec<f64> = (0..tokens)
                        .map(|i| math::dot_f64(&q[j][span.clone()], &k[i][span.clone()]) * scale)
                        .collect();
                    let p = math::softmax_f64(&logits);
                    let mask = dropout_mask(tokens, self.config.dropout, train, rng);
                    for i in 0..tokens {
                        let w = p[i] * mask[i];
                        for (zj, vj) in z[j][span.clone()].iter_mut().zip(&v[i][span.clone()]) {
                            *zj += w * vj;
                        }
                    }
                    probs[h].push(p);
                    attn_scale[h].push(mask);
                }
            }
            let x_mid: Vec<Vec<f64>> = (0..tokens)
                .map(|j| {
                    let o = math::mat_vec(&lp.w_o, &z[j]);
                    x_in[j].iter().zip(&o).map(|(a, b)| a + b).collect()
                })
                .collect();

            let mut ln2 = Vec::with_capacity(tokens);
            let mut n2 = Vec::with_capacity(tokens);
            let mut u = Vec::with_capacity(tokens);
            let mut g = Vec::with_capacity(tokens);
            let mut ffn_scale = Vec::with_capacity(tokens);
            let mut x_out = Vec::with_capacity(tokens);
            for xm in &x_mid {
                let (n, c) = layer_norm_params(xm, &lp.ln2_gain, &lp.ln2_bias);
                let mut uu = to_f64(&lp.ffn_b1.data);
                math::mat_vec_accum(&lp.ffn_w1, &n, &mut uu);
                let gg: Vec<f64> = uu.iter().map(|&ui| math::gelu_f64(ui)).collect();
                let mut fout = to_f64(&lp.ffn_b2.data);
                math::mat_vec_accum(&lp.ffn_w2, &gg, &mut fout);
                let mask = dropout_mask(d, self.config.dropout, train, rng);
                let xo: Vec<f64> =
                    xm.iter().zip(fout.iter().zip(&mask)).map(|(x, (f, s))| x + f * s).collect();
                ln2.push(c);
                n2.push(n);
                u.push(uu);
                g.push(gg);
                ffn_scale.push(mask);
                x_out.push(xo);
            }

            layers.push(CatLayerTrace {
                ln1,
                n1,
                q,
                k,
                v,
                probs,
                attn_scale,
                z,
                ln2,
                n2,
                u,
                g,
                ffn_scale,
            });
            xs = x_out;
        }
        let top = xs[0].clone();
        (TraceBody::Cat { layers }, top)
    }

    /// Accumulate gradients of a scalar loss into `grads`, given the loss
    /// gradient with respect to `V` and to the unit advantage query `a_s`.
    pub fn backward(&self, fwd: &Forward, d_v: f64, d_a: &[f64], grads: &mut Grads) {
        let names = self.named_tensors();
        let slot =
            |name: &str| -> usize { names.iter().position(|(n, _)| n == name).expect("tensor") };

        // Heads.
        let d_pre = math::l2_normalize_bwd(&fwd.a_s, fwd.adv_norm, d_a);
        let mut d_c = vec![0.0; self.config.dim];
        math::accum_outer(&mut grads.slots[slot("adv_w")], &d_pre, &fwd.c_s);
        math::add_assign(&mut grads.slots[slot("adv_b")], &d_pre);
        math::mat_tvec_accum(&self.adv_w, &d_pre, &mut d_c);
        for (i, g) in grads.slots[slot("value_w")].iter_mut().enumerate() {
            *g += d_v * fwd.c_s[i];
        }
        grads.slots[slot("value_b")][0] += d_v;
        for (dc, &w) in d_c.iter_mut().zip(&self.value_w.data) {
            *dc += d_v * w as f64;
        }

        // Final LayerNorm (when enabled).
        let d_top = if let Some(cache) = &fwd.final_ln {
            let gain = to_f64(&self.final_ln_gain.data);
            let (gi, bi) = (slot("final_ln_gain"), slot("final_ln_bias"));
            let mut d_gain = std::mem::take(&mut grads.slots[gi]);
            let mut d_bias = std::mem::take(&mut grads.slots[bi]);
            let d_x = math::layer_norm_bwd(cache, &gain, &d_c, &mut d_gain, &mut d_bias);
            grads.slots[gi] = d_gain;
            grads.slots[bi] = d_bias;
            d_x
        } else {
            d_c
        };

        match &fwd.body {
            TraceBody::Qc { memory, layers } => {
                self.backward_qc(memory, layers, d_top, grads, &slot)
            }
            TraceBody::Cat { layers } => self.backward_cat(fwd.t, layers, d_top, grads, &slot),
        }
    }

    fn backward_qc(
        &self,
        memory: &[Vec<f64>],
        layers: &[QcLayerTrace],
        d_top: Vec<f64>,
        grads: &mut Grads,
        slot: &dyn Fn(&str) -> usize,
    ) {
        let d = self.config.dim;
        let t = memory.len();
        let heads = self.config.heads;
        let dk = self.config.head_dim();
        let scale = 1.0 / (dk as f64).sqrt();

        let mut d_x = d_top;
        let mut d_memory = vec![vec![0.0; d]; t];

        for (li, (lp, tr)) in self.layers.iter().zip(layers).enumerate().rev() {
            let pfx = format!("layers.{li}.");
            let g = |suffix: &str| slot(&format!("{pfx}{suffix}"));

            // FFN block: x_out = x_mid + dropout(W2 gelu(W1 n2 + b1) + b2).
            let d_f: Vec<f64> = d_x.iter().zip(&tr.ffn_scale).map(|(dx, s)| dx * s).collect();
            math::accum_outer(&mut grads.slots[g("ffn_w2")], &d_f, &tr.g);
            math::add_assign(&mut grads.slots[g("ffn_b2")], &d_f);
            let d_g = math::mat_tvec(&lp.ffn_w2, &d_f);
            let d_u: Vec<f64> =
                d_g.iter().zip(&tr.u).map(|(dg, &ui)| dg * math::gelu_grad(ui)).collect();
            math::accum_outer(&mut grads.slots[g("ffn_w1")], &d_u, &tr.n2);
            math::add_assign(&mut grads.slots[g("ffn_b1")], &d_u);
            let d_n2 = math::mat_tvec(&lp.ffn_w1, &d_u);

            let mut d_x_mid = d_x.clone();
            {
                let gain = to_f64(&lp.ln2_gain.data);
                let (gi, bi) = (g("ln2_gain"), g("ln2_bias"));
                let mut dg2 = std::mem::take(&mut grads.slots[gi]);
                let mut db2 = std::mem::take(&mut grads.slots[bi]);
                let dx2 = math::layer_norm_bwd(&tr.ln2, &gain, &d_n2, &mut dg2, &mut db2);
                grads.slots[gi] = dg2;
                grads.slots[bi] = db2;
                math::add_assign(&mut d_x_mid, &dx2);
            }

            // Attention block: x_mid = x_in + W_o z (skipped when t = 0).
            let mut d_x_in = d_x_mid.clone();
            if t > 0 {
                let d_o = &d_x_mid;
                math::accum_outer(&mut grads.slots[g("w_o")], d_o, &tr.z);
                let d_z = math::mat_tvec(&lp.w_o, d_o);

                let mut d_q = vec![0.0; d];
                let mut d_k = vec![vec![0.0; d]; t];
                let mut d_v = vec![vec![0.0; d]; t];
                for h in 0..heads {
                    let span = h * dk..(h + 1) * dk;
                    let p = &tr.probs[h];
                    let mask = &tr.attn_scale[h];
                    let mut d_p = vec![0.0; t];
                    for i in 0..t {
                        let dzv = math::dot_f64(&d_z[span.clone()], &tr.v[i][span.clone()]);
                        d_p[i] = dzv * mask[i];
                        let w = p[i] * mask[i];
                        for (dv, dz) in d_v[i][span.clone()].iter_mut().zip(&d_z[span.clone()]) {
                            *dv += w * dz;
                        }
                    }
                    let d_logits = math::softmax_bwd(p, &d_p);
                    for i in 0..t {
                        let dl = d_logits[i] * scale;
                        for ((dq, kk), (dki, qq)) in d_q[span.clone()]
                            .iter_mut()
                            .zip(&tr.k[i][span.clone()])
                            .zip(d_k[i][span.clone()].iter_mut().zip(&tr.q[span.clone()]))
                        {
                            *dq += dl * kk;
                            *dki += dl * qq;
                        }
                    }
                }

                math::accum_outer(&mut grads.slots[g("w_q")], &d_q, &tr.n1);
                let d_n1 = math::mat_tvec(&lp.w_q, &d_q);
                for i in 0..t {
                    math::accum_outer(&mut grads.slots[g("w_k")], &d_k[i], &memory[i]);
                    math::mat_tvec_accum(&lp.w_k, &d_k[i], &mut d_memory[i]);
                    math::accum_outer(&mut grads.slots[g("w_v")], &d_v[i], &memory[i]);
                    math::mat_tvec_accum(&lp.w_v, &d_v[i], &mut d_memory[i]);
                }

                let gain = to_f64(&lp.ln1_gain.data);
                let (gi, bi) = (g("ln1_gain"), g("ln1_bias"));
                let mut dg1 = std::mem::take(&mut grads.slots[gi]);
                let mut db1 = std::mem::take(&mut grads.slots[bi]);
                let dx1 = math::layer_norm_bwd(&tr.ln1, &gain, &d_n1, &mut dg1, &mut db1);
                grads.slots[gi] = dg1;
                grads.slots[bi] = db1;
                math::add_assign(&mut d_x_in, &dx1);
            }

            d_x = d_x_in;
        }

        // Memory rows are demo + pos; only the positional table is learned.
        let pos_slot = slot("pos");
        for (i, dm) in d_memory.iter().enumerate() {
            let row = &mut grads.slots[pos_slot][i * d..(i + 1) * d];
            for (dst, src) in row.iter_mut().zip(dm) {
                *dst += src;
            }
        }
    }

    fn backward_cat(
        &self,
        t: usize,
        layers: &[CatLayerTrace],
        d_top: Vec<f64>,
        grads: &mut Grads,
        slot: &dyn Fn(&str) -> usize,
    ) {
        let d = self.config.dim;
        let tokens = t + 1;
        let heads = self.config.heads;
        let dk = self.config.head_dim();
        let scale = 1.0 / (dk as f64).sqrt();

        // Only the query token feeds the heads; other tokens pick up
        // gradient through attention as we walk down the stack.
        let mut d_xs = vec![vec![0.0; d]; tokens];
        d_xs[0] = d_top;

        for (li, (lp, tr)) in self.layers.iter().zip(layers).enumerate().rev() {
            let pfx = format!("layers.{li}.");
            let g = |suffix: &str| slot(&format!("{pfx}{suffix}"));

            // FFN per token.
            let mut d_x_mid: Vec<Vec<f64>> = d_xs.clone();
            for j in 0..tokens {
                let d_f: Vec<f64> =
                    d_xs[j].iter().zip(&tr.ffn_scale[j]).map(|(dx, s)| dx * s).collect();
                math::accum_outer(&mut grads.slots[g("ffn_w2")], &d_f, &tr.g[j]);
                math::add_assign(&mut grads.slots[g("ffn_b2")], &d_f);
                let d_g = math::mat_tvec(&lp.ffn_w2, &d_f);
                let d_u: Vec<f64> =
                    d_g.iter().zip(&tr.u[j]).map(|(dg, &ui)| dg * math::gelu_grad(ui)).collect();
                math::accum_outer(&mut grads.slots[g("ffn_w1")], &d_u, &tr.n2[j]);
                math::add_assign(&mut grads.slots[g("ffn_b1")], &d_u);
                let d_n2 = math::mat_tvec(&lp.ffn_w1, &d_u);

                let gain = to_f64(&lp.ln2_gain.data);
                let (gi, bi) = (g("ln2_gain"), g("ln2_bias"));
                let mut dg2 = std::mem::take(&mut grads.slots[gi]);
                let mut db2 = std::mem::take(&mut grads.slots[bi]);
                let dx2 = math::layer_norm_bwd(&tr.ln2[j], &gain, &d_n2, &mut dg2, &mut db2);
                grads.slots[gi] = dg2;
                grads.slots[bi] = db2;
                math::add_assign(&mut d_x_mid[j], &dx2);
            }

            // Self-attention block.
            let mut d_x_in = d_x_mid.clone();
            let mut d_q = vec![vec![0.0; d]; tokens];
            let mut d_k = vec![vec![0.0; d]; tokens];
            let mut d_v = vec![vec![0.0; d]; tokens];
            let mut d_z: Vec<Vec<f64>> = Vec::with_capacity(tokens);
            for j in 0..tokens {
                let d_o = &d_x_mid[j];
                math::accum_outer(&mut grads.slots[g("w_o")], d_o, &tr.z[j]);
                d_z.push(math::mat_tvec(&lp.w_o, d_o));
            }
            for h in 0..heads {
                let span = h * dk..(h + 1) * dk;
                for j in 0..tokens {
                    let p = &tr.probs[h][j];
                    let mask = &tr.attn_scale[h][j];
                    let mut d_p = vec![0.0; tokens];
                    for i in 0..tokens {
                        let dzv = math::dot_f64(&d_z[j][span.clone()], &tr.v[i][span.clone()]);
                        d_p[i] = dzv * mask[i];
                        let w = p[i] * mask[i];
                        for (dv, dz) in
                            d_v[i][span.clone()].iter_mut().zip(&d_z[j][span.clone()])
                        {
                            *dv += w * dz;
                        }
                    }
                    let d_logits = math::softmax_bwd(p, &d_p);
                    for i in 0..tokens {
                        let dl = d_logits[i] * scale;
                        for ((dq, kk), (dki, qq)) in d_q[j][span.clone()]
                            .iter_mut()
                            .zip(&tr.k[i][span.clone()])
                            .zip(d_k[i][span.clone()].iter_mut().zip(&tr.q[j][span.clone()]))
                        {
                            *dq += dl * kk;
                            *dki += dl * qq;
                        }
                    }
                }
            }
            for j in 0..tokens {
                math::accum_outer(&mut grads.slots[g("w_q")], &d_q[j], &tr.n1[j]);
                math::accum_outer(&mut grads.slots[g("w_k")], &d_k[j], &tr.n1[j]);
                math::accum_outer(&mut grads.slots[g("w_v")], &d_v[j], &tr.n1[j]);
                let mut d_n1 = math::mat_tvec(&lp.w_q, &d_q[j]);
                math::mat_tvec_accum(&lp.w_k, &d_k[j], &mut d_n1);
                math::mat_tvec_accum(&lp.w_v, &d_v[j], &mut d_n1);

                let gain = to_f64(&lp.ln1_gain.data);
                let (gi, bi) = (g("ln1_gain"), g("ln1_bias"));
                let mut dg1 = std::mem::take(&mut grads.slots[gi]);
                let mut db1 = std::mem::take(&mut grads.slots[bi]);
                let dx1 = math::layer_norm_bwd(&tr.ln1[j], &gain, &d_n1, &mut dg1, &mut db1);
                grads.slots[gi] = dg1;
                grads.slots[bi] = db1;
                math::add_assign(&mut d_x_in[j], &dx1);
            }

            d_xs = d_x_in;
        }

        // Token 0 is the raw query; tokens 1.. are demo + pos.
        let pos_slot = slot("pos");
        for j in 1..tokens {
            let row = &mut grads.slots[pos_slot][(j - 1) * d..j * d];
            for (dst, src) in row.iter_mut().zip(&d_xs[j]) {
                *dst += src;
            }
        }
    }
}

/// Q-values for a candidate set from one encoded state:
/// `Q_i = V + a_s·e_i − mean_j(a_s·e_j)`.
pub fn q_values(v: f64, a_s: &[f64], candidates: &[&[f32]]) -> Result<Vec<f64>, QNetError> {
    if candidates.is_empty() {
        return Err(QNetError::EmptyCandidates);
    }
    let adv: Vec<f64> = candidates
        .iter()
        .map(|e| e.iter().zip(a_s).map(|(&x, &a)| x as f64 * a).sum())
        .collect();
    let mean = adv.iter().sum::<f64>() / adv.len() as f64;
    Ok(adv.into_iter().map(|a| v + a - mean).collect())
}

fn to_f64(x: &[f32]) -> Vec<f64> {
    x.iter().map(|&v| v as f64).collect()
}

fn layer_norm_params(x: &[f64], gain: &Tensor, bias: &Tensor) -> (Vec<f64>, LayerNormCache) {
    math::layer_norm_fwd(x, &to_f64(&gain.data), &to_f64(&bias.data))
}

/// Inverted-dropout scale factors: 0 with probability `rate`, else
/// `1/(1 − rate)`. All ones in eval mode.
fn dropout_mask(len: usize, rate: f64, train: bool, rng: &mut ChaCha8Rng) -> Vec<f64> {
    if !train || rate == 0.0 {
        return vec![1.0; len];
    }
    let keep = 1.0 / (1.0 - rate);
    (0..len).map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep }).collect()
}

// ---------------------------------------------------------------------------
// Checkpoint container: JSON header + named f32 tensor blob
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    /// Offset into the blob, in f32 elements.
    offset: u64,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct FileHeader {
    /// Caller-owned metadata (configs, step counters, seeds).
    meta: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

/// Write named tensors with a JSON metadata header. The layout is
/// `magic | u32 header length | header JSON | little-endian f32 blob`.
pub fn save_tensor_file(
    path: &Path,
    meta: &serde_json::Value,
    tensors: &[(String, &Tensor)],
) -> Result<(), QNetError> {
    let mut entries = Vec::with_capacity(tensors.len());
    let mut offset = 0u64;
    for (name, t) in tensors {
        entries.push(TensorEntry { name: name.clone(), offset, shape: t.shape.clone() });
        offset += t.len() as u64;
    }
    let header = FileHeader { meta: meta.clone(), tensors: entries };
    let header_bytes = serde_json::to_vec(&header)
        .map_err(|e| QNetError::Checkpoint { detail: e.to_string() })?;

    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&(header_bytes.len() as u32).to_le_bytes())?;
    w.write_all(&header_bytes)?;
    for (_, t) in tensors {
        for v in &t.data {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Read back a file written by [`save_tensor_file`].
pub fn load_tensor_file(path: &Path) -> Result<(serde_json::Value, Vec<(String, Tensor)>), QNetError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(QNetError::BadMagic);
    }
    let mut len4 = [0u8; 4];
    r.read_exact(&mut len4)?;
    let mut header_bytes = vec![0u8; u32::from_le_bytes(len4) as usize];
    r.read_exact(&mut header_bytes)?;
    let header: FileHeader = serde_json::from_slice(&header_bytes)
        .map_err(|e| QNetError::Checkpoint { detail: e.to_string() })?;

    let mut blob = Vec::new();
    r.read_to_end(&mut blob)?;
    let floats: Vec<f32> =
        blob.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();

    let mut tensors = Vec::with_capacity(header.tensors.len());
    for e in header.tensors {
        let len: usize = e.shape.iter().product();
        let start = e.offset as usize;
        let end = start + len;
        if end > floats.len() {
            return Err(QNetError::Checkpoint {
                detail: format!("tensor {} spans past the end of the blob", e.name),
            });
        }
        tensors.push((e.name, Tensor { shape: e.shape, data: floats[start..end].to_vec() }));
    }
    Ok((header.meta, tensors))
}

impl QNet {
    /// Rebuild a network from named tensors (e.g. a loaded checkpoint).
    pub fn from_named_tensors(
        config: QNetConfig,
        tensors: &[(String, Tensor)],
    ) -> Result<Self, QNetError> {
        let mut net = QNet::init(config, 0)?;
        let expected = net.named_tensors().len();
        let mut filled = 0usize;
        for (name, dst) in net.named_tensors_mut() {
            let src = tensors
                .iter()
                .find(|(n, _)| *n == name)
                .ok_or_else(|| QNetError::Checkpoint { detail: format!("missing tensor {name}") })?;
            if src.1.shape != dst.shape {
                return Err(QNetError::Checkpoint {
                    detail: format!(
                        "tensor {name} has shape {:?}, expected {:?}",
                        src.1.shape, dst.shape
                    ),
                });
            }
            dst.data.copy_from_slice(&src.1.data);
            filled += 1;
        }
        debug_assert_eq!(filled, expected);
        Ok(net)
    }
}
