// SPDX-License-Identifier: MIT OR Apache-2.0

//! Hard-concrete gates over edges and nodes.
//!
//! A gate with parameter `log_alpha` and uniform noise `u` is
//!
//! ```text
//! s = sigmoid(temperature_inv · ln(u / (1 − u)) + log_alpha)
//! z = clamp(s · (hi − lo) + lo, 0, 1)
//! ```
//!
//! The stretch past `[0, 1]` followed by the clamp puts finite probability
//! mass on exactly 0 and exactly 1. The evaluation-time gate is the
//! noise-free `u = 1/2` case.
//!
//! The effective mask of an edge is its own gate times the gate of its
//! source node.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{sigmoid, Element, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::model::{Circuit, ComputationalGraph};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HardConcreteConfig {
    /// Multiplier on the logistic noise (`1/β`).
    pub temperature_inv: f32,
    pub stretch_lo: f32,
    pub stretch_hi: f32,
    /// Noise is drawn from `Uniform(eps, 1 − eps)`.
    pub eps: f32,
}

impl Default for HardConcreteConfig {
    fn default() -> Self {
        Self {
            temperature_inv: 2.0 / 3.0,
            stretch_lo: -0.1,
            stretch_hi: 1.1,
            eps: 1e-6,
        }
    }
}

impl HardConcreteConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.stretch_lo < 0.0
            && self.stretch_hi > 1.0
            && self.eps > 0.0
            && self.eps < 0.5
            && self.temperature_inv > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid hard-concrete config {self:?}")))
        }
    }

    fn stretch(&self, s: f32) -> f32 {
        (s * (self.stretch_hi - self.stretch_lo) + self.stretch_lo).clamp(0.0, 1.0)
    }

    /// `log_alpha` whose noise-free gate equals `gate` (for `gate` in (0, 1)).
    pub fn log_alpha_for_gate(&self, gate: f32) -> f32 {
        let s = (gate - self.stretch_lo) / (self.stretch_hi - self.stretch_lo);
        (s / (1.0 - s)).ln()
    }

    /// Draws `u ~ Uniform(eps, 1 − eps)`.
    pub fn draw_u<R: Rng>(&self, rng: &mut R) -> f32 {
        rng.random_range(self.eps..1.0 - self.eps)
    }

    /// `temperature_inv · ln(u / (1 − u))`, the additive noise inside the sigmoid.
    pub fn noise(&self, u: f32) -> f32 {
        self.temperature_inv * (u / (1.0 - u)).ln()
    }
}

/// Learnable gate parameters, index-aligned with the graph's edges and writers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskParams {
    pub edge_log_alpha: Vec<f32>,
    pub node_log_alpha: Vec<f32>,
}

impl MaskParams {
    /// Initial gate value; training starts from (almost) the full model.
    pub const INIT_GATE: f32 = 0.999;

    pub fn init(graph: &ComputationalGraph, cfg: &HardConcreteConfig) -> Self {
        let la = cfg.log_alpha_for_gate(Self::INIT_GATE);
        Self {
            edge_log_alpha: vec![la; graph.n_edges()],
            node_log_alpha: vec![la; graph.n_writers()],
        }
    }

    pub fn uniform(graph: &ComputationalGraph, log_alpha: f32) -> Self {
        Self {
            edge_log_alpha: vec![log_alpha; graph.n_edges()],
            node_log_alpha: vec![log_alpha; graph.n_writers()],
        }
    }

    pub fn check(&self, graph: &ComputationalGraph) -> Result<()> {
        if self.edge_log_alpha.len() != graph.n_edges() || self.node_log_alpha.len() != graph.n_writers() {
            return Err(Error::ModelMismatch(format!(
                "mask params sized {}/{}, graph has {} edges and {} writers",
                self.edge_log_alpha.len(),
                self.node_log_alpha.len(),
                graph.n_edges(),
                graph.n_writers()
            )));
        }
        if !self
            .edge_log_alpha
            .iter()
            .chain(&self.node_log_alpha)
            .all(|v| v.is_finite())
        {
            return Err(Error::Config("non-finite log alpha".into()));
        }
        Ok(())
    }

    pub fn edge_gates(&self, cfg: &HardConcreteConfig) -> Vec<f32> {
        self.edge_log_alpha
            .iter()
            .map(|&la| deterministic_gate(la, cfg))
            .collect()
    }

    pub fn node_gates(&self, cfg: &HardConcreteConfig) -> Vec<f32> {
        self.node_log_alpha
            .iter()
            .map(|&la| deterministic_gate(la, cfg))
            .collect()
    }

    /// Deterministic effective edge masks.
    pub fn effective_gates(&self, graph: &ComputationalGraph, cfg: &HardConcreteConfig) -> Vec<f32> {
        let nodes = self.node_gates(cfg);
        self.edge_gates(cfg)
            .into_iter()
            .enumerate()
            .map(|(e, z)| effective_edge_mask(z, nodes[graph.edge_src(e)]))
            .collect()
    }
}

/// Stochastic gate for noise sample `u ∈ (eps, 1 − eps)`.
pub fn sample_gate(log_alpha: f32, u: f32, cfg: &HardConcreteConfig) -> f32 {
    cfg.stretch(sigmoid(cfg.noise(u) + log_alpha))
}

/// Noise-free gate (`u = 1/2`).
pub fn deterministic_gate(log_alpha: f32, cfg: &HardConcreteConfig) -> f32 {
    cfg.stretch(sigmoid(log_alpha))
}

pub fn effective_edge_mask(z_edge: f32, z_src_node: f32) -> f32 {
    z_edge * z_src_node
}

/// `P(z = 0)` under the stretched, clamped concrete distribution.
///
/// `z = 0` iff `s ≤ −lo/(hi − lo)`, and solving for the logistic noise gives
/// `sigmoid((ln(−lo/hi) − log_alpha) / temperature_inv)`.
pub fn gate_closed_probability(log_alpha: f32, cfg: &HardConcreteConfig) -> f64 {
    let lo = f64::from(cfg.stretch_lo);
    let hi = f64::from(cfg.stretch_hi);
    let x = ((-lo / hi).ln() - f64::from(log_alpha)) / f64::from(cfg.temperature_inv);
    1.0 / (1.0 + (-x).exp())
}

/// Gates on the tape: `log_alpha` is `(n,)`; `noise` holds the additive
/// logistic noise per entry, or `None` for the deterministic gate.
pub(crate) fn gates_on<T: Element>(
    tape: &mut Tape<T>,
    log_alpha: Var,
    noise: Option<&[f32]>,
    cfg: &HardConcreteConfig,
) -> Result<Var> {
    let x = match noise {
        Some(n) => {
            let c = tape.constant(Tensor::from_vec(n.iter().map(|&v| T::from_f32(v)).collect()));
            tape.add(log_alpha, c)?
        }
        None => log_alpha,
    };
    let s = tape.sigmoid(x);
    let st = tape.affine(
        s,
        T::from_f32(cfg.stretch_hi - cfg.stretch_lo),
        T::from_f32(cfg.stretch_lo),
    );
    Ok(tape.clamp01(st))
}

/// Effective masks `z_edge ⊙ z_node[src]` on the tape.
pub(crate) fn effective_on<T: Element>(
    tape: &mut Tape<T>,
    graph: &ComputationalGraph,
    z_edge: Var,
    z_node: Var,
) -> Result<Var> {
    let n = graph.n_writers();
    let col = tape.reshape(z_node, &[n, 1])?;
    let per_edge = tape.gather_rows(col, graph.edge_srcs())?;
    let per_edge = tape.reshape(per_edge, &[graph.n_edges()])?;
    tape.mul(z_edge, per_edge)
}

/// Which gate values set the target density during discretization.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DensityPool {
    /// Mean over every edge and node gate.
    #[default]
    EdgesAndNodes,
    /// Mean over edge gates only.
    EdgesOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiscretizeOptions {
    pub pool: DensityPool,
    /// Keep exactly the edges whose effective gate is at least this value.
    pub threshold: Option<f32>,
    /// Keep `round(density · |E|)` edges instead of using the mean gate value.
    pub target_density: Option<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Discretized {
    pub circuit: Circuit,
    /// Threshold applied to the effective edge gates.
    pub threshold: f32,
    /// Density the threshold was searched for.
    pub target_density: f32,
}

/// Rounds mask parameters to a circuit.
///
/// The target density defaults to the mean deterministic gate value. A
/// threshold is then bisected so that the fraction of effective edge gates
/// at or above it matches that density; gates tied at the threshold are kept
/// in canonical edge order. Nodes whose gate clears the same threshold are
/// kept.
pub fn discretize(
    params: &MaskParams,
    graph: &ComputationalGraph,
    cfg: &HardConcreteConfig,
    opts: &DiscretizeOptions,
) -> Result<Discretized> {
    params.check(graph)?;
    let nodes = params.node_gates(cfg);
    let eff = params.effective_gates(graph, cfg);
    let n_edges = eff.len();

    if let Some(t) = opts.threshold {
        let edges: Vec<bool> = eff.iter().map(|&z| z >= t).collect();
        let kept_nodes = nodes.iter().map(|&z| z >= t).collect();
        let density = edges.iter().filter(|&&k| k).count() as f32 / n_edges.max(1) as f32;
        return Ok(Discretized {
            circuit: Circuit::from_masks(graph, edges, kept_nodes)?,
            threshold: t,
            target_density: density,
        });
    }

    let density = match opts.target_density {
        Some(d) => d.clamp(0.0, 1.0),
        None => match opts.pool {
            DensityPool::EdgesAndNodes => {
                let total: f64 = eff.iter().chain(&nodes).map(|&v| f64::from(v)).sum();
                (total / (n_edges + nodes.len()) as f64) as f32
            }
            DensityPool::EdgesOnly => (eff.iter().map(|&v| f64::from(v)).sum::<f64>() / n_edges.max(1) as f64) as f32,
        },
    };
    let k = ((density as f64) * n_edges as f64).round() as usize;
    let count_at = |t: f32| eff.iter().filter(|&&z| z >= t).count();

    // count_at(lo) >= k > count_at(hi) throughout.
    let (mut lo, mut hi) = (0.0f32, 1.0f32 + 1e-6);
    if k == 0 {
        lo = hi;
    } else {
        for _ in 0..64 {
            let mid = 0.5 * (lo + hi);
            if mid <= lo || mid >= hi {
                break;
            }
            if count_at(mid) >= k {
                lo = mid;
            } else {
                hi = mid;
            }
        }
    }
    let mut edges: Vec<bool> = eff.iter().map(|&z| z >= hi).collect();
    let mut kept = edges.iter().filter(|&&x| x).count();
    for (e, &z) in eff.iter().enumerate() {
        if kept >= k {
            break;
        }
        if !edges[e] && z >= lo {
            edges[e] = true;
            kept += 1;
        }
    }
    let kept_nodes = nodes.iter().map(|&z| z >= lo).collect();
    Ok(Discretized {
        circuit: Circuit::from_masks(graph, edges, kept_nodes)?,
        threshold: lo,
        target_density: density,
    })
}
