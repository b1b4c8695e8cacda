// SPDX-License-Identifier: MIT OR Apache-2.0

//! Baseline circuit-discovery methods: greedy edge ablation (ACDC) and
//! edge attribution patching (EAP).

use serde::{Deserialize, Serialize};

use crate::autograd::{Element, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::metrics::KlProbe;
use crate::model::{AblationMode, ActivationCache, Circuit, ComputationalGraph, DisentangledTransformer, EdgeMask};
use crate::pruner::KlPositions;
use crate::tasks::ExamplePair;

// ----------------------------------------------------------------------
// ACDC
// ----------------------------------------------------------------------

/// One edge visited by [`acdc`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AcdcStep {
    pub edge_index: usize,
    /// `KL(full ‖ current − e) − KL(full ‖ current)`.
    pub delta_kl: f64,
    pub removed: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AcdcOutcome {
    pub circuit: Circuit,
    pub steps: Vec<AcdcStep>,
    /// KL of the returned circuit.
    pub kl: f64,
}

/// Order in which ACDC visits edges: readers from the logits backwards,
/// each reader's incoming edges in canonical order.
pub fn acdc_order(graph: &ComputationalGraph) -> Vec<usize> {
    (0..graph.readers().len())
        .rev()
        .flat_map(|r| graph.reader_edges(r))
        .collect()
}

/// Greedy edge removal: starting from the full graph, every edge whose
/// removal raises the mean answer-position KL by less than `tau` is removed,
/// and the baseline KL is recomputed after each removal.
pub fn acdc(
    model: &DisentangledTransformer,
    pairs: &[ExamplePair],
    tau: f64,
    mode: AblationMode,
) -> Result<AcdcOutcome> {
    if tau.is_nan() || tau < 0.0 {
        return Err(Error::Config(format!("threshold must be non-negative, got {tau}")));
    }
    let probe = KlProbe::new(model, pairs, mode)?;
    let graph = model.graph();
    let mut circuit = Circuit::full(&graph);
    let mut current = probe.kl(model, &circuit)?;
    let mut steps = Vec::with_capacity(graph.n_edges());
    for e in acdc_order(&graph) {
        let candidate = circuit.without_edge(e);
        let kl = probe.kl(model, &candidate)?;
        let delta_kl = kl - current;
        let removed = delta_kl < tau;
        if removed {
            circuit = candidate;
            current = kl;
        }
        steps.push(AcdcStep {
            edge_index: e,
            delta_kl,
            removed,
        });
    }
    // Nodes are derived from the surviving edges.
    Ok(AcdcOutcome {
        circuit: Circuit::from_mask(&graph, circuit.edge_mask().to_vec())?,
        steps,
        kl: current,
    })
}

// ----------------------------------------------------------------------
// EAP
// ----------------------------------------------------------------------

/// Quantity whose edge sensitivities EAP estimates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EapMetric {
    /// KL of the model's distribution from the full model's.
    #[default]
    Kl,
    /// `logit[answer] − logit[misleading]` at the answer position.
    LogitDiff,
}

/// Where the gradient is taken.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EapPoint {
    /// Every edge kept. The KL metric has a zero gradient here.
    Clean,
    /// The model's own forward pass on the corrupted input (interchange
    /// ablation only).
    #[default]
    Corrupted,
}

/// How per-example, per-position contributions become one score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScoreAggregation {
    /// Sum over positions, absolute value per example, mean over examples.
    #[default]
    AbsPerExample,
    /// Mean of the signed per-example sums, then absolute value.
    AbsOfMean,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EapOptions {
    pub metric: EapMetric,
    pub point: EapPoint,
    pub positions: KlPositions,
    pub aggregation: ScoreAggregation,
    pub ablation_mode: AblationMode,
    /// Run the gradient pass in `f64`.
    pub double_precision: bool,
}

impl Default for EapOptions {
    fn default() -> Self {
        Self {
            metric: EapMetric::Kl,
            point: EapPoint::Corrupted,
            positions: KlPositions::Answer,
            aggregation: ScoreAggregation::AbsPerExample,
            ablation_mode: AblationMode::Interchange,
            double_precision: false,
        }
    }
}

/// One importance score per edge, in canonical edge order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EdgeScoreTable {
    pub model_hash: String,
    pub scores: Vec<f32>,
    /// Mean over examples of `Σ (ỹ_w − y_w) · ∂L/∂in_r`, the first-order
    /// change of the metric when the edge is ablated.
    pub signed: Vec<f64>,
    pub n_examples: usize,
    /// Backward sweeps spent, one per example.
    pub backward_passes: usize,
}

impl EdgeScoreTable {
    pub const CSV_HEADER: &'static str = "edge_id,src,dst,score";

    pub fn to_csv(&self, graph: &ComputationalGraph) -> String {
        let mut out = String::from(Self::CSV_HEADER);
        out.push('\n');
        for (i, (e, s)) in graph.edges().iter().zip(&self.scores).enumerate() {
            out.push_str(&format!("{i},{},{},{s}\n", e.src, e.dst));
        }
        out
    }
}

/// The `k` highest-scoring edges; equal scores go to the lower edge index.
pub fn eap_top_k(graph: &ComputationalGraph, table: &EdgeScoreTable, k: usize) -> Result<Circuit> {
    if table.scores.len() != graph.n_edges() || table.model_hash != graph.model_hash() {
        return Err(Error::ModelMismatch("score table belongs to another graph".into()));
    }
    if k > graph.n_edges() {
        return Err(Error::Input(format!("k = {k} exceeds {} edges", graph.n_edges())));
    }
    let mut order: Vec<usize> = (0..graph.n_edges()).collect();
    order.sort_by(|&a, &b| table.scores[b].total_cmp(&table.scores[a]));
    let mut mask = vec![false; graph.n_edges()];
    for &e in &order[..k] {
        mask[e] = true;
    }
    Circuit::from_mask(graph, mask)
}

/// Edge attribution patching: one forward and one backward pass per example.
pub fn eap_scores(model: &DisentangledTransformer, pairs: &[ExamplePair], opts: &EapOptions) -> Result<EdgeScoreTable> {
    if pairs.is_empty() {
        return Err(Error::Dataset("no examples to score".into()));
    }
    if opts.point == EapPoint::Corrupted && opts.ablation_mode == AblationMode::Zero {
        return Err(Error::Config(
            "zero ablation has no corrupted run; use the clean point".into(),
        ));
    }
    let graph = model.graph();
    let e = graph.n_edges();
    let mut abs_sum = vec![0.0f64; e];
    let mut signed_sum = vec![0.0f64; e];
    let mut backward_passes = 0;
    for p in pairs {
        let (signed, calls) = if opts.double_precision {
            example_scores::<f64>(model, &graph, p, opts)?
        } else {
            example_scores::<f32>(model, &graph, p, opts)?
        };
        backward_passes += calls;
        for i in 0..e {
            signed_sum[i] += signed[i];
            abs_sum[i] += signed[i].abs();
        }
    }
    let n = pairs.len() as f64;
    let signed: Vec<f64> = signed_sum.iter().map(|s| s / n).collect();
    let scores = match opts.aggregation {
        ScoreAggregation::AbsPerExample => abs_sum.iter().map(|s| (s / n) as f32).collect(),
        ScoreAggregation::AbsOfMean => signed.iter().map(|s| s.abs() as f32).collect(),
    };
    Ok(EdgeScoreTable {
        model_hash: graph.model_hash().to_string(),
        scores,
        signed,
        n_examples: pairs.len(),
        backward_passes,
    })
}

/// The metric `L` of one example at soft edge mask `z`, in `f64`.
///
/// This is the function whose derivative EAP linearizes; exact patching of
/// edge `e` is `metric_at(1 − 1ₑ) − metric_at(1)`.
pub fn eap_metric_at(model: &DisentangledTransformer, pair: &ExamplePair, z: &[f64], opts: &EapOptions) -> Result<f64> {
    let graph = model.graph();
    let ablated = ablated_cache(model, pair, opts.ablation_mode)?;
    let full = model.logits(std::slice::from_ref(&pair.clean_tokens))?;
    let mut tape = Tape::<f64>::new();
    let w = model.bind(&mut tape, false);
    let zv = tape.constant(Tensor::from_vec(z.to_vec()));
    let pass = model.forward_disentangled_on(
        &mut tape,
        &w,
        &graph,
        std::slice::from_ref(&pair.clean_tokens),
        &ablated,
        EdgeMask::Soft(zv),
    )?;
    let l = metric_on(&mut tape, pass.logits, &full, pair, opts)?;
    Ok(tape.value(l).item())
}

fn ablated_cache(model: &DisentangledTransformer, pair: &ExamplePair, mode: AblationMode) -> Result<ActivationCache> {
    model.ablation_cache(
        std::slice::from_ref(&pair.clean_tokens),
        std::slice::from_ref(&pair.corrupted_tokens),
        mode,
    )
}

/// Signed per-edge scores of one example and the backward sweeps used.
fn example_scores<T: Element>(
    model: &DisentangledTransformer,
    graph: &ComputationalGraph,
    pair: &ExamplePair,
    opts: &EapOptions,
) -> Result<(Vec<f64>, usize)> {
    let tokens = std::slice::from_ref(&pair.clean_tokens);
    let ablated = ablated_cache(model, pair, opts.ablation_mode)?;
    let (full, _) = model.forward(tokens)?;

    let mut tape = Tape::<T>::new();
    let w = model.bind(&mut tape, false);
    // Clean writer outputs at the working precision.
    let (_, clean_writers) = model.forward_standard_on(&mut tape, &w, tokens)?;
    let run_on = match opts.point {
        EapPoint::Clean => tokens,
        EapPoint::Corrupted => std::slice::from_ref(&pair.corrupted_tokens),
    };
    // All-ones mask: the pass is an ordinary forward pass whose reader
    // inputs are exposed on the tape.
    let z = tape.param(Tensor::full(&[graph.n_edges()], T::one()));
    let pass = model.forward_disentangled_on(&mut tape, &w, graph, run_on, &ablated, EdgeMask::Soft(z))?;
    let l = metric_on(&mut tape, pass.logits, &full, pair, opts)?;
    tape.backward(l)?;

    let mut signed = vec![0.0f64; graph.n_edges()];
    for (r, &input) in pass.reader_inputs.iter().enumerate() {
        let Some(g) = tape.grad(input) else { continue };
        for e in graph.reader_edges(r) {
            let src = graph.edge_src(e);
            let y = tape.value(clean_writers[src]).data();
            let yt = ablated.writers[src].data();
            signed[e] = g
                .iter()
                .zip(y.iter().zip(yt))
                .map(|(&g, (&y, &yt))| g.to_f64() * (f64::from(yt) - y.to_f64()))
                .sum();
        }
    }
    Ok((signed, tape.backward_calls()))
}

/// Logit rows of batch row 0 at the scored positions, `(n, V)`.
fn scored_rows<T: Element>(tape: &mut Tape<T>, logits: Var, pair: &ExamplePair, positions: KlPositions) -> Result<Var> {
    let shape = tape.shape(logits).to_vec();
    let (s, v) = (shape[1], shape[2]);
    match positions {
        KlPositions::All => tape.reshape(logits, &[s, v]),
        KlPositions::Answer => {
            let row = tape.slice(logits, 1, pair.answer_position, pair.answer_position + 1)?;
            tape.reshape(row, &[1, v])
        }
    }
}

fn metric_on<T: Element>(
    tape: &mut Tape<T>,
    logits: Var,
    full: &Tensor,
    pair: &ExamplePair,
    opts: &EapOptions,
) -> Result<Var> {
    let v = full.shape()[2];
    match opts.metric {
        EapMetric::Kl => {
            let rows = scored_rows(tape, logits, pair, opts.positions)?;
            let n = tape.shape(rows)[0];
            let first = match opts.positions {
                KlPositions::All => 0,
                KlPositions::Answer => pair.answer_position,
            };
            // Full-model distribution p and its negative entropy Σ p log p.
            let mut p = Vec::with_capacity(n * v);
            let mut neg_entropy = 0.0f64;
            for i in 0..n {
                let off = (first + i) * v;
                let lp = crate::metrics::log_softmax(&full.data()[off..off + v]);
                for &l in &lp {
                    let pi = l.exp();
                    if pi > 0.0 {
                        neg_entropy += pi * l;
                    }
                    p.push(T::from_f64(pi));
                }
            }
            let lq = tape.log_softmax(rows)?;
            let pv = tape.constant(Tensor::new(vec![n, v], p)?);
            let cross = tape.mul(lq, pv)?;
            let cross = tape.sum(cross);
            let inv = T::from_f64(1.0 / n as f64);
            Ok(tape.affine(cross, -inv, T::from_f64(neg_entropy / n as f64)))
        }
        EapMetric::LogitDiff => {
            let rows = scored_rows(tape, logits, pair, KlPositions::Answer)?;
            let mut sel = vec![T::zero(); v];
            sel[pair.answer_id as usize] = T::one();
            if let Some(m) = pair.misleading_id {
                sel[m as usize] = sel[m as usize] - T::one();
            }
            let sel = tape.constant(Tensor::new(vec![1, v], sel)?);
            let picked = tape.mul(rows, sel)?;
            Ok(tape.sum(picked))
        }
    }
}

#[cfg(test)]
mod tests;
