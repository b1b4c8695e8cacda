// SPDX-License-Identifier: MIT OR Apache-2.0

use edgeprune::masks::{
    deterministic_gate, discretize, DensityPool, DiscretizeOptions, HardConcreteConfig, MaskParams,
};
use edgeprune::metrics::{kendall_tau_b, kl_divergence};
use edgeprune::model::{Circuit, ComputationalGraph, ModelConfig, NodeId};
use proptest::prelude::*;

fn graph(layers: usize, heads: usize) -> ComputationalGraph {
    ComputationalGraph::new(&ModelConfig::toy(layers, heads, 4 * heads, 5, 4))
}

proptest! {
    #[test]
    fn edges_respect_topological_order(layers in 1usize..4, heads in 1usize..4) {
        let g = graph(layers, heads);
        for e in g.edges() {
            prop_assert!(g.topo_rank(NodeId::Writer(e.src)) < g.topo_rank(NodeId::Reader(e.dst)));
        }
    }

    #[test]
    fn deterministic_gate_is_monotone(a in -20.0f32..20.0, b in -20.0f32..20.0) {
        let cfg = HardConcreteConfig::default();
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        prop_assert!(deterministic_gate(lo, &cfg) <= deterministic_gate(hi, &cfg));
    }

    #[test]
    fn discretized_density_tracks_the_edge_mean(alphas in prop::collection::vec(-8.0f32..8.0, 1..64)) {
        let g = graph(2, 2);
        let cfg = HardConcreteConfig::default();
        let mut p = MaskParams::uniform(&g, 10.0);
        for (i, a) in p.edge_log_alpha.iter_mut().enumerate() {
            *a = alphas[i % alphas.len()];
        }
        let d = discretize(&p, &g, &cfg, &DiscretizeOptions { pool: DensityPool::EdgesOnly, ..Default::default() }).unwrap();
        let n = g.n_edges() as f64;
        let mean = p.effective_gates(&g, &cfg).iter().map(|&z| f64::from(z)).sum::<f64>() / n;
        prop_assert!((d.circuit.n_kept() as f64 / n - mean).abs() <= 1.0 / n);
        prop_assert!(d.threshold.is_finite());
    }

    #[test]
    fn circuits_survive_json(bits in prop::collection::vec(any::<bool>(), 1..200)) {
        let g = graph(2, 3);
        let mask: Vec<bool> = (0..g.n_edges()).map(|e| bits[e % bits.len()]).collect();
        let c = Circuit::from_mask(&g, mask).unwrap();
        prop_assert_eq!(Circuit::from_json(&g, &c.to_json(&g)).unwrap(), c);
    }

    #[test]
    fn kendall_tau_is_bounded_and_symmetric(x in prop::collection::vec(-5.0f64..5.0, 2..20), seed in any::<u64>()) {
        let y: Vec<f64> = x.iter().enumerate().map(|(i, v)| v * ((seed >> (i % 64)) & 1) as f64 - i as f64).collect();
        let t = kendall_tau_b(&x, &y);
        prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&t));
        prop_assert!((t - kendall_tau_b(&y, &x)).abs() < 1e-12);
    }

    #[test]
    fn kl_is_nonnegative(raw in prop::collection::vec((0.01f64..1.0, 0.01f64..1.0), 2..10)) {
        let (sp, sq): (f64, f64) = raw.iter().fold((0.0, 0.0), |(a, b), (p, q)| (a + p, b + q));
        let p: Vec<f64> = raw.iter().map(|(v, _)| v / sp).collect();
        let q: Vec<f64> = raw.iter().map(|(_, v)| v / sq).collect();
        prop_assert!(kl_divergence(&p, &q).unwrap().value >= -1e-12);
    }
}
