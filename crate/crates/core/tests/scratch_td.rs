//! TEMPORARY: minimal TD sanity. One-step episodes, reward proportional to
//! sim(query, pick) — exactly representable by the advantage head. Delete me.

use lsd_core::agent::{self, Agent, AgentConfig};
use lsd_core::env::{generate_synthetic, Scorer, SyntheticKind};
use lsd_core::eval::split_dataset;
use lsd_core::index::{exact_search, IvfPqIndex};
use lsd_core::math;
use lsd_core::qnet::{EncoderMode, QNetConfig};
use lsd_core::store::{EmbeddingStore, Pool};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// predict = y_q + 10·(1 − sim(q, last demo)) so the episode score is
/// −10·(1 − sim): maximized by the most similar pick.
struct SimScorer;

impl Scorer for SimScorer {
    fn predict(&self, store: &EmbeddingStore, query_id: u32, demos: &[u32]) -> Option<f32> {
        let last = *demos.last()?;
        let sim = math::dot(store.vector(query_id), store.vector(last)) as f64;
        Some(store.label(query_id) + (10.0 * (1.0 - sim)) as f32)
    }
}

#[test]
fn one_step_td() {
    let (store, mut task) = generate_synthetic(SyntheticKind::Objective, 2000, 32, 7).unwrap();
    task.shots = 3; // two decisions: the first transition bootstraps.
    let split = split_dataset(&store, 13, usize::MAX, 1000).unwrap();
    let pool = Pool::new(split.pool_ids.clone());
    let mut index = IvfPqIndex::exact(store.dim());
    for &id in pool.ids() {
        index.add(id, store.vector(id)).unwrap();
    }
    let train_queries: Vec<u32> = split.query_ids[200..].to_vec();
    let probe: Vec<u32> = split.query_ids[..50].to_vec();
    let scorer = SimScorer;

    let qnet_config = QNetConfig {
        dim: store.dim(),
        layers: 2,
        heads: 4,
        ffn_dim: 128,
        k_max: 8,
        dropout: 0.0,
        encoder_mode: EncoderMode::QueryCentric,
        final_layer_norm: true,
    };
    let agent_config = AgentConfig {
        lr: 3e-4,
        tau: 0.01,
        train_steps: 0,
        eps_decay_steps: 2500,
        ..AgentConfig::default()
    };
    let mut agent = Agent::new(qnet_config, agent_config.clone()).unwrap();

    // Probe: fraction of queries where the greedy pick after the anchor is
    // the true 2nd-nearest (the optimum), plus mean sim regret.
    let watch = |agent: &Agent| -> (f64, f64, f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (mut hit, mut regret, mut cos_sum) = (0usize, 0.0f64, 0.0f64);
        for &q in &probe {
            let anchor = exact_search(&store, store.vector(q), 2000, &[q])
                .into_iter()
                .find(|h| pool.contains(h.id))
                .unwrap()
                .id;
            let fwd = agent
                .online
                .forward(store.vector(q), &[store.vector(anchor)], false, &mut rng)
                .unwrap();
            let a32: Vec<f32> = fwd.a_s.iter().map(|&x| x as f32).collect();
            cos_sum += math::dot(&a32, store.vector(q)) as f64;
            let picks = index.search(&a32, 1, 1, &[q, anchor]).unwrap();
            let best = exact_search(&store, store.vector(q), 2000, &[q, anchor])
                .into_iter()
                .find(|h| pool.contains(h.id))
                .unwrap();
            let got_sim =
                math::dot(store.vector(q), store.vector(picks[0].id)) as f64;
            if picks[0].id == best.id {
                hit += 1;
            }
            regret += best.score as f64 - got_sim;
        }
        (hit as f64 / probe.len() as f64, regret / probe.len() as f64, cos_sum / probe.len() as f64)
    };

    let (h0, r0, c0) = watch(&agent);
    eprintln!("step     0: top1-agree {h0:.2}  sim-regret {r0:.4}  cos {c0:.3}");
    for stage in 1..=8u64 {
        agent.config.train_steps = stage * 250;
        agent::train(
            &mut agent,
            &store,
            &index,
            &pool,
            &task,
            &scorer,
            &train_queries,
            agent::TrainOptions::default(),
        )
        .unwrap();
        let (h, r, c) = watch(&agent);
        eprintln!(
            "step {:>5}: top1-agree {h:.2}  sim-regret {r:.4}  cos {c:.3}",
            agent.config.train_steps
        );
    }
}
