//! Learned demonstration selection for in-context learning.
//!
//! An agent selects K demonstrations per query from a dataset-scale candidate
//! pool. The action space is the embedding store itself: a dueling Q-network
//! emits a state value and a unit "advantage query" vector whose inner product
//! with a candidate embedding is that candidate's advantage. Candidates are
//! retrieved with an IVF-PQ index (or an exact fallback), the environment
//! rewards the per-step change in a downstream scorer's accuracy, and a
//! baseline/evaluation harness measures the learned policy against kNN,
//! random, and zero-shot selection.

pub mod agent;
pub mod env;
pub mod eval;
pub mod index;
pub mod math;
pub mod mllm;
pub mod qnet;
pub mod store;

pub use store::EmbeddingStore;
