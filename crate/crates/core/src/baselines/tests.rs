// SPDX-License-Identifier: MIT OR Apache-2.0

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::metrics::circuit_kl;
use crate::model::{Activation, ModelConfig, NodeId};

fn pairs(n: usize, vocab: usize, len: usize, seed: u64) -> Vec<ExamplePair> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let clean: Vec<u32> = (0..len).map(|_| rng.random_range(0..vocab as u32)).collect();
            let corrupted: Vec<u32> = (0..len).map(|_| rng.random_range(0..vocab as u32)).collect();
            ExamplePair {
                clean_text: String::new(),
                corrupted_text: String::new(),
                clean_tokens: clean,
                corrupted_tokens: corrupted,
                answer: String::new(),
                answer_id: 1,
                misleading_id: Some(2),
                answer_position: len - 1,
                template_id: 0,
                year: None,
            }
        })
        .collect()
}

fn tiny() -> DisentangledTransformer {
    DisentangledTransformer::random(ModelConfig::toy(1, 1, 8, 6, 4), 21).unwrap()
}

/// Linear everywhere: no layer norm, uniform attention, and a ReLU whose
/// bias keeps it in its identity region.
fn linear_model() -> DisentangledTransformer {
    let cfg = ModelConfig {
        layer_norm: false,
        activation: Activation::Relu,
        ..ModelConfig::toy(1, 2, 8, 6, 5)
    };
    let mut m = DisentangledTransformer::random(cfg, 4).unwrap();
    for l in &mut m.layers {
        for h in &mut l.heads {
            h.w_q = Tensor::zeros(h.w_q.shape());
            h.w_k = Tensor::zeros(h.w_k.shape());
        }
        l.b_in = Tensor::full(l.b_in.shape(), 100.0);
    }
    m
}

#[test]
fn order_visits_every_edge_once_from_the_logits() {
    let g = tiny().graph();
    let order = acdc_order(&g);
    let mut sorted = order.clone();
    sorted.sort_unstable();
    assert_eq!(sorted, (0..g.n_edges()).collect::<Vec<_>>());
    assert_eq!(g.edges()[order[0]].dst, crate::model::Reader::Logits);
}

#[test]
fn threshold_extremes() {
    let m = tiny();
    let ps = pairs(6, 6, 4, 1);
    let all = acdc(&m, &ps, f64::INFINITY, AblationMode::Interchange).unwrap();
    assert_eq!(all.circuit.n_kept(), 0);
    let none = acdc(&m, &ps, 0.0, AblationMode::Interchange).unwrap();
    for s in &none.steps {
        assert_eq!(s.removed, s.delta_kl < 0.0);
    }
    // Identical clean and corrupted inputs make every effect exactly zero,
    // and zero is not below a zero threshold.
    let same: Vec<ExamplePair> = ps
        .iter()
        .map(|p| ExamplePair {
            corrupted_tokens: p.clean_tokens.clone(),
            ..p.clone()
        })
        .collect();
    let kept = acdc(&m, &same, 0.0, AblationMode::Interchange).unwrap();
    assert_eq!(kept.circuit.n_kept(), m.graph().n_edges());
    assert!(acdc(&m, &ps, -1.0, AblationMode::Interchange).is_err());
    assert!(matches!(
        acdc(&m, &[], 0.1, AblationMode::Interchange),
        Err(Error::Dataset(_))
    ));
}

/// Step-by-step re-execution of the greedy definition with the uncached
/// evaluator and an independently derived visiting order.
fn greedy_oracle(m: &DisentangledTransformer, ps: &[ExamplePair], tau: f64) -> Circuit {
    let g = m.graph();
    let mut order: Vec<usize> = (0..g.n_edges()).collect();
    order.sort_by_key(|&e| (std::cmp::Reverse(g.topo_rank(NodeId::Reader(g.edges()[e].dst))), e));
    let mut c = Circuit::full(&g);
    for e in order {
        let before = circuit_kl(m, &c, ps, AblationMode::Interchange).unwrap();
        let mut mask = c.edge_mask().to_vec();
        mask[e] = false;
        let cand = Circuit::from_mask(&g, mask).unwrap();
        let after = circuit_kl(m, &cand, ps, AblationMode::Interchange).unwrap();
        if after - before < tau {
            c = cand;
        }
    }
    c
}

#[test]
fn matches_brute_force_greedy_on_eight_edges() {
    let m = tiny();
    assert_eq!(m.graph().n_edges(), 8);
    let ps = pairs(10, 6, 4, 2);
    let base = acdc(&m, &ps, 0.0, AblationMode::Interchange).unwrap();
    let mut deltas: Vec<f64> = base.steps.iter().map(|s| s.delta_kl.abs()).collect();
    deltas.sort_by(f64::total_cmp);
    let mut distinct = std::collections::BTreeSet::new();
    for tau in [0.0, deltas[2], deltas[5], 1.0] {
        let got = acdc(&m, &ps, tau, AblationMode::Interchange).unwrap();
        assert_eq!(
            got.circuit.edge_mask(),
            greedy_oracle(&m, &ps, tau).edge_mask(),
            "tau {tau}"
        );
        assert!((got.kl - circuit_kl(&m, &got.circuit, &ps, AblationMode::Interchange).unwrap()).abs() < 1e-9);
        distinct.insert(got.circuit.n_kept());
    }
    assert!(distinct.len() >= 2, "thresholds too coarse: {distinct:?}");
}

#[test]
fn acdc_is_deterministic() {
    let m = tiny();
    let ps = pairs(8, 6, 4, 3);
    let a = acdc(&m, &ps, 0.01, AblationMode::Interchange).unwrap();
    let b = acdc(&m, &ps, 0.01, AblationMode::Interchange).unwrap();
    assert_eq!(a, b);
}

#[test]
fn identical_inputs_score_zero() {
    let m = tiny();
    let ps: Vec<ExamplePair> = pairs(4, 6, 4, 4)
        .into_iter()
        .map(|p| ExamplePair {
            corrupted_tokens: p.clean_tokens.clone(),
            ..p
        })
        .collect();
    let t = eap_scores(&m, &ps, &EapOptions::default()).unwrap();
    assert!(t.scores.iter().all(|&s| s == 0.0));
}

#[test]
fn one_backward_per_example() {
    let m = tiny();
    let ps = pairs(7, 6, 4, 5);
    let t = eap_scores(&m, &ps, &EapOptions::default()).unwrap();
    assert_eq!(t.backward_passes, 7);
    assert_eq!(t.n_examples, 7);
    assert!(t.scores.iter().all(|s| s.is_finite() && *s >= 0.0));
    assert!(t.scores.iter().any(|&s| s > 0.0));
}

#[test]
fn linear_model_scores_are_exact_patching_effects() {
    let m = linear_model();
    let g = m.graph();
    let ps = pairs(3, 6, 5, 6);
    for point in [EapPoint::Clean, EapPoint::Corrupted] {
        let opts = EapOptions {
            metric: EapMetric::LogitDiff,
            point,
            double_precision: true,
            ..EapOptions::default()
        };
        for p in &ps {
            let t = eap_scores(&m, std::slice::from_ref(p), &opts).unwrap();
            let ones = vec![1.0; g.n_edges()];
            let base = eap_metric_at(&m, p, &ones, &opts).unwrap();
            for e in 0..g.n_edges() {
                let mut z = ones.clone();
                z[e] = 0.0;
                let exact = eap_metric_at(&m, p, &z, &opts).unwrap() - base;
                assert!(
                    (t.signed[e] - exact).abs() < 1e-5,
                    "{point:?} edge {e}: {} vs {exact}",
                    t.signed[e]
                );

                // Same effect from the hard-mask circuit pass in single precision.
                let cache = m
                    .ablation_cache(
                        std::slice::from_ref(&p.clean_tokens),
                        std::slice::from_ref(&p.corrupted_tokens),
                        AblationMode::Interchange,
                    )
                    .unwrap();
                let ld = |c: &Circuit| {
                    let l = m
                        .circuit_forward_cached(std::slice::from_ref(&p.clean_tokens), &cache, c)
                        .unwrap();
                    let v = l.shape()[2];
                    let row = &l.data()[p.answer_position * v..(p.answer_position + 1) * v];
                    f64::from(row[1] - row[2])
                };
                let hard = ld(&Circuit::full(&g).without_edge(e)) - ld(&Circuit::full(&g));
                assert!((hard - exact).abs() < 1e-3 * (1.0 + exact.abs()));
            }
        }
    }
}

#[test]
fn first_order_error_is_quadratic() {
    let m = DisentangledTransformer::random(ModelConfig::toy(2, 2, 8, 6, 5), 8).unwrap();
    let g = m.graph();
    let p = &pairs(1, 6, 5, 9)[0];
    let opts = EapOptions {
        metric: EapMetric::LogitDiff,
        point: EapPoint::Clean,
        double_precision: true,
        ..EapOptions::default()
    };
    let t = eap_scores(&m, std::slice::from_ref(p), &opts).unwrap();
    let ones = vec![1.0; g.n_edges()];
    let base = eap_metric_at(&m, p, &ones, &opts).unwrap();
    let err = |e: usize, d: f64| {
        let mut z = ones.clone();
        z[e] = 1.0 - d;
        (eap_metric_at(&m, p, &z, &opts).unwrap() - base - d * t.signed[e]).abs()
    };
    // Edges into the logits act linearly; check nonlinear ones with a clear signal.
    let mut checked = 0;
    for e in 0..g.n_edges() {
        let (big, small) = (err(e, 1e-3), err(e, 1e-4));
        if big < 1e-9 || t.signed[e].abs() < 1e-3 {
            continue;
        }
        let ratio = big / small;
        assert!((100.0 / 3.0..=300.0).contains(&ratio), "edge {e}: ratio {ratio}");
        checked += 1;
    }
    assert!(checked >= 5, "only {checked} edges checked");
}

#[test]
fn top_k_examples() {
    let m = DisentangledTransformer::random(ModelConfig::toy(1, 1, 8, 6, 4), 1).unwrap();
    let g = m.graph();
    let mut t = EdgeScoreTable {
        model_hash: g.model_hash().to_string(),
        scores: vec![0.0; g.n_edges()],
        signed: vec![0.0; g.n_edges()],
        n_examples: 1,
        backward_passes: 1,
    };
    t.scores[..3].copy_from_slice(&[3.0, 1.0, 2.0]);
    assert_eq!(eap_top_k(&g, &t, 2).unwrap().kept_edge_indices(), vec![0, 2]);
    assert_eq!(eap_top_k(&g, &t, 0).unwrap().n_kept(), 0);
    assert_eq!(eap_top_k(&g, &t, g.n_edges()).unwrap().n_kept(), g.n_edges());
    // Ties go to the lower index.
    assert_eq!(eap_top_k(&g, &t, 4).unwrap().kept_edge_indices(), vec![0, 1, 2, 3]);
    assert!(eap_top_k(&g, &t, g.n_edges() + 1).is_err());
    let csv = t.to_csv(&g);
    assert!(csv.starts_with("edge_id,src,dst,score\n0,embed,"));
    assert_eq!(csv.lines().count(), g.n_edges() + 1);
}
