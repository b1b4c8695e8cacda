// SPDX-License-Identifier: MIT OR Apache-2.0

//! Faithfulness and task-performance metrics.
//!
//! Distribution arithmetic is done in `f64`. Logits come in as `f32` rows
//! of length `vocab_size`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{AblationMode, ActivationCache, Circuit, DisentangledTransformer};
use crate::tasks::{ExamplePair, TaskData, TaskKind};

/// Value reported in place of an infinite KL divergence.
pub const KL_CAP: f64 = 1e6;

/// KL divergence of `p` from `q`; `capped` marks a clamped infinity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Kl {
    pub value: f64,
    pub capped: bool,
}

/// `Σ p log(p/q)` with `0 · log 0 = 0`.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> Result<Kl> {
    if p.len() != q.len() {
        return Err(Error::Input(format!(
            "distributions have different supports ({} vs {})",
            p.len(),
            q.len()
        )));
    }
    let mut total = 0.0f64;
    for (&pi, &qi) in p.iter().zip(q) {
        if pi <= 0.0 {
            continue;
        }
        if qi <= 0.0 {
            return Ok(Kl {
                value: KL_CAP,
                capped: true,
            });
        }
        total += pi * (pi / qi).ln();
    }
    // Rounding can leave a tiny negative value when p ≈ q.
    Ok(Kl {
        value: total.clamp(0.0, KL_CAP),
        capped: total >= KL_CAP,
    })
}

pub fn log_softmax(logits: &[f32]) -> Vec<f64> {
    let max = logits.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(f64::from(x)));
    let lse = max + logits.iter().map(|&x| (f64::from(x) - max).exp()).sum::<f64>().ln();
    logits.iter().map(|&x| f64::from(x) - lse).collect()
}

pub fn softmax(logits: &[f32]) -> Vec<f64> {
    log_softmax(logits).into_iter().map(f64::exp).collect()
}

/// KL between the softmax distributions of two logit rows, computed from
/// log-probabilities so it never overflows to infinity for finite logits.
pub fn kl_from_logits(model: &[f32], circuit: &[f32]) -> f64 {
    let lp = log_softmax(model);
    let lq = log_softmax(circuit);
    lp.iter()
        .zip(&lq)
        .map(|(&a, &b)| a.exp() * (a - b))
        .sum::<f64>()
        .max(0.0)
}

/// `log P(correct) − log P(misleading)`.
pub fn logit_diff(logits: &[f32], answer_id: u32, misleading_id: u32) -> f32 {
    let lp = log_softmax(logits);
    (lp[answer_id as usize] - lp[misleading_id as usize]) as f32
}

/// Softmax restricted to `ids` (e.g. the hundred two-digit year tokens),
/// returned in the order of `ids`.
pub fn restricted_probs(logits: &[f32], ids: &[u32]) -> Vec<f64> {
    let sub: Vec<f32> = ids.iter().map(|&i| logits[i as usize]).collect();
    softmax(&sub)
}

fn mass(probs: &[f64], lo: i64, hi: i64) -> f64 {
    let lo = lo.max(0);
    let hi = hi.min(probs.len() as i64 - 1);
    if lo > hi {
        return 0.0;
    }
    probs[lo as usize..=hi as usize].iter().sum()
}

/// `P(yy+1 ..= 99) − P(00 ..= yy−1)` over a distribution on the hundred
/// two-digit tokens.
pub fn prob_diff_gt(probs: &[f64], yy: u32) -> f32 {
    let yy = i64::from(yy);
    (mass(probs, yy + 1, 99) - mass(probs, 0, yy - 1)) as f32
}

/// `P(yy+1 ..= yy+10) − P(yy−10 ..= yy−1)`, windows clipped to `00..=99`.
pub fn prob_diff_10(probs: &[f64], yy: u32) -> f32 {
    let yy = i64::from(yy);
    (mass(probs, yy + 1, yy + 10) - mass(probs, yy - 10, yy - 1)) as f32
}

/// Kendall's tau-b between two score vectors over the same items.
///
/// Returns 0 when either side is constant (tau-b is undefined there).
pub fn kendall_tau_b(x: &[f64], y: &[f64]) -> f64 {
    assert_eq!(x.len(), y.len(), "kendall_tau_b needs paired samples");
    let n = x.len();
    let (mut concordant, mut discordant) = (0i64, 0i64);
    let (mut ties_x, mut ties_y) = (0i64, 0i64);
    for i in 0..n {
        for j in i + 1..n {
            let dx = (x[i] - x[j]).partial_cmp(&0.0).map_or(0, |o| o as i64);
            let dy = (y[i] - y[j]).partial_cmp(&0.0).map_or(0, |o| o as i64);
            match (dx, dy) {
                (0, 0) => {
                    ties_x += 1;
                    ties_y += 1;
                }
                (0, _) => ties_x += 1,
                (_, 0) => ties_y += 1,
                _ if dx == dy => concordant += 1,
                _ => discordant += 1,
            }
        }
    }
    let pairs = (n * n.saturating_sub(1) / 2) as i64;
    let denom = (((pairs - ties_x) as f64) * ((pairs - ties_y) as f64)).sqrt();
    if denom == 0.0 {
        0.0
    } else {
        (concordant - discordant) as f64 / denom
    }
}

/// Tau-b between model and circuit rankings of the restricted tokens.
pub fn kendall_tau_gt(model_logits: &[f32], circuit_logits: &[f32], ids: &[u32]) -> f64 {
    let a: Vec<f64> = ids.iter().map(|&i| f64::from(model_logits[i as usize])).collect();
    let b: Vec<f64> = ids.iter().map(|&i| f64::from(circuit_logits[i as usize])).collect();
    kendall_tau_b(&a, &b)
}

/// Average ranks (1-based), ties sharing the mean rank.
fn ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut out = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            out[k] = r;
        }
        i = j + 1;
    }
    out
}

fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (&a, &b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        0.0
    } else {
        sxy / (sxx * syy).sqrt()
    }
}

/// Spearman rank correlation (Pearson correlation of average ranks).
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    assert_eq!(x.len(), y.len(), "spearman needs paired samples");
    if x.len() < 2 {
        return 0.0;
    }
    pearson(&ranks(x), &ranks(y))
}

/// Index of the largest entry; the first one wins ties.
pub fn argmax(row: &[f32]) -> u32 {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best as u32
}

/// Fraction of positions where `a` and `b` agree.
pub fn exact_match(a: &[u32], b: &[u32]) -> Result<f32> {
    if a.len() != b.len() {
        return Err(Error::Input(format!(
            "prediction lists differ in length ({} vs {})",
            a.len(),
            b.len()
        )));
    }
    if a.is_empty() {
        return Ok(0.0);
    }
    Ok(a.iter().zip(b).filter(|(x, y)| x == y).count() as f32 / a.len() as f32)
}

/// Fraction of predictions equal to the gold references.
pub fn accuracy(predictions: &[u32], references: &[u32]) -> Result<f32> {
    exact_match(predictions, references)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub kl: f64,
    pub exact_match: f32,
    pub accuracy: f32,
    pub logit_diff: f32,
    pub prob_diff: f32,
    pub prob_diff_10: f32,
    pub kendall_tau: f64,
    pub sparsity: f32,
    pub n_examples: usize,
}

impl EvalReport {
    pub const CSV_HEADER: &'static str =
        "kl,exact_match,accuracy,logit_diff,prob_diff,prob_diff_10,kendall_tau,sparsity,n_examples";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.kl,
            self.exact_match,
            self.accuracy,
            self.logit_diff,
            self.prob_diff,
            self.prob_diff_10,
            self.kendall_tau,
            self.sparsity,
            self.n_examples
        )
    }
}

/// Answer-position logit rows of the full model and of a circuit.
pub struct AnswerLogits {
    pub model: Vec<Vec<f32>>,
    pub circuit: Vec<Vec<f32>>,
}

pub(crate) fn rows_at(logits: &crate::autograd::Tensor, positions: &[usize]) -> Vec<Vec<f32>> {
    let (s, v) = (logits.shape()[1], logits.shape()[2]);
    positions
        .iter()
        .enumerate()
        .map(|(b, &p)| logits.data()[(b * s + p) * v..(b * s + p + 1) * v].to_vec())
        .collect()
}

/// Examples are run in chunks that share a sequence length.
const EVAL_CHUNK: usize = 64;

pub(crate) fn chunks(pairs: &[ExamplePair]) -> Vec<&[ExamplePair]> {
    let mut out = Vec::new();
    let mut start = 0;
    for i in 1..=pairs.len() {
        let boundary = i == pairs.len()
            || i - start == EVAL_CHUNK
            || pairs[i].clean_tokens.len() != pairs[start].clean_tokens.len();
        if boundary {
            out.push(&pairs[start..i]);
            start = i;
        }
    }
    out
}

/// Runs the full model and `circuit` on every example.
pub fn answer_logits(
    model: &DisentangledTransformer,
    circuit: &Circuit,
    pairs: &[ExamplePair],
    mode: AblationMode,
) -> Result<AnswerLogits> {
    if pairs.is_empty() {
        return Err(Error::Dataset("no examples to evaluate".into()));
    }
    let mut out = AnswerLogits {
        model: Vec::with_capacity(pairs.len()),
        circuit: Vec::with_capacity(pairs.len()),
    };
    for chunk in chunks(pairs) {
        let clean: Vec<Vec<u32>> = chunk.iter().map(|p| p.clean_tokens.clone()).collect();
        let corrupted: Vec<Vec<u32>> = chunk.iter().map(|p| p.corrupted_tokens.clone()).collect();
        let positions: Vec<usize> = chunk.iter().map(|p| p.answer_position).collect();
        let (full, _) = model.forward(&clean)?;
        let circ = model.circuit_forward(&clean, &corrupted, circuit, mode)?;
        out.model.extend(rows_at(&full, &positions));
        out.circuit.extend(rows_at(&circ, &positions));
    }
    Ok(out)
}

/// Mean answer-position KL of `circuit` from the full model.
pub fn circuit_kl(
    model: &DisentangledTransformer,
    circuit: &Circuit,
    pairs: &[ExamplePair],
    mode: AblationMode,
) -> Result<f64> {
    let l = answer_logits(model, circuit, pairs, mode)?;
    Ok(l.model
        .iter()
        .zip(&l.circuit)
        .map(|(a, b)| kl_from_logits(a, b))
        .sum::<f64>()
        / l.model.len() as f64)
}

/// Answer-position KL of many circuits against one dataset, with the
/// full-model log-probabilities and ablation caches computed once.
pub(crate) struct KlProbe {
    chunks: Vec<ProbeChunk>,
    n: usize,
}

struct ProbeChunk {
    tokens: Vec<Vec<u32>>,
    ablated: ActivationCache,
    positions: Vec<usize>,
    full: Vec<Vec<f32>>,
}

impl KlProbe {
    pub fn new(model: &DisentangledTransformer, pairs: &[ExamplePair], mode: AblationMode) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::Dataset("no examples to evaluate".into()));
        }
        let chunks = chunks(pairs)
            .into_iter()
            .map(|chunk| {
                let tokens: Vec<Vec<u32>> = chunk.iter().map(|p| p.clean_tokens.clone()).collect();
                let corrupted: Vec<Vec<u32>> = chunk.iter().map(|p| p.corrupted_tokens.clone()).collect();
                let positions: Vec<usize> = chunk.iter().map(|p| p.answer_position).collect();
                let ablated = model.ablation_cache(&tokens, &corrupted, mode)?;
                let full = rows_at(&model.logits(&tokens)?, &positions);
                Ok(ProbeChunk {
                    tokens,
                    ablated,
                    positions,
                    full,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { chunks, n: pairs.len() })
    }

    pub fn kl(&self, model: &DisentangledTransformer, circuit: &Circuit) -> Result<f64> {
        let mut total = 0.0;
        for c in &self.chunks {
            let out = model.circuit_forward_cached(&c.tokens, &c.ablated, circuit)?;
            for (a, b) in c.full.iter().zip(rows_at(&out, &c.positions)) {
                total += kl_from_logits(a, &b);
            }
        }
        Ok(total / self.n as f64)
    }
}

/// Full evaluation of `circuit` on `data`'s examples `pairs`.
///
/// Task metrics that do not apply to the task are reported as 0.
pub fn evaluate(
    model: &DisentangledTransformer,
    circuit: &Circuit,
    data: &TaskData,
    pairs: &[ExamplePair],
    mode: AblationMode,
) -> Result<EvalReport> {
    let l = answer_logits(model, circuit, pairs, mode)?;
    let n = pairs.len();
    let kl = l
        .model
        .iter()
        .zip(&l.circuit)
        .map(|(a, b)| kl_from_logits(a, b))
        .sum::<f64>()
        / n as f64;
    let model_pred: Vec<u32> = l.model.iter().map(|r| argmax(r)).collect();
    let circuit_pred: Vec<u32> = l.circuit.iter().map(|r| argmax(r)).collect();
    let mut report = EvalReport {
        kl,
        exact_match: exact_match(&model_pred, &circuit_pred)?,
        accuracy: 0.0,
        logit_diff: 0.0,
        prob_diff: 0.0,
        prob_diff_10: 0.0,
        kendall_tau: 0.0,
        sparsity: circuit.sparsity(),
        n_examples: n,
    };
    if data.kind == TaskKind::GreaterThan {
        let ids = data.vocab.year_ids()?;
        let (mut correct, mut pd, mut pd10, mut tau) = (0usize, 0.0f64, 0.0f64, 0.0f64);
        for ((m, c), p) in l.model.iter().zip(&l.circuit).zip(pairs) {
            let yy = p.year.ok_or_else(|| Error::Dataset("example without a year".into()))?;
            let probs = restricted_probs(c, &ids);
            let best = probs
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1))
                .map_or(0, |(i, _)| i);
            correct += usize::from(best as u32 > yy);
            pd += f64::from(prob_diff_gt(&probs, yy));
            pd10 += f64::from(prob_diff_10(&probs, yy));
            tau += kendall_tau_gt(m, c, &ids);
        }
        // Restricted exact match: same argmax among the year tokens.
        let restrict = |rows: &[Vec<f32>]| -> Vec<u32> {
            rows.iter()
                .map(|r| argmax(&ids.iter().map(|&i| r[i as usize]).collect::<Vec<_>>()))
                .collect()
        };
        report.exact_match = exact_match(&restrict(&l.model), &restrict(&l.circuit))?;
        report.accuracy = correct as f32 / n as f32;
        report.prob_diff = (pd / n as f64) as f32;
        report.prob_diff_10 = (pd10 / n as f64) as f32;
        report.kendall_tau = tau / n as f64;
    } else {
        let gold: Vec<u32> = pairs.iter().map(|p| p.answer_id).collect();
        report.accuracy = accuracy(&circuit_pred, &gold)?;
        let with_mis: Vec<(usize, u32)> = pairs
            .iter()
            .enumerate()
            .filter_map(|(i, p)| p.misleading_id.map(|m| (i, m)))
            .collect();
        if !with_mis.is_empty() {
            report.logit_diff = with_mis
                .iter()
                .map(|&(i, m)| logit_diff(&l.circuit[i], pairs[i].answer_id, m))
                .sum::<f32>()
                / with_mis.len() as f32;
        }
    }
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EdgeFaithfulnessRecord {
    pub edge_index: usize,
    pub src: String,
    pub dst: String,
    /// KL of the model with `edge` removed.
    pub m_e: f64,
    /// KL of the circuit with `edge` removed.
    pub c_e: f64,
}

/// For every probe edge `e`: `KL(M ‖ M∖{e})` and `KL(M ‖ C∖{e})` under
/// interchange ablation, averaged over `pairs`.
pub fn edge_faithfulness(
    model: &DisentangledTransformer,
    circuit: &Circuit,
    pairs: &[ExamplePair],
    probe_edges: &[usize],
) -> Result<Vec<EdgeFaithfulnessRecord>> {
    let graph = model.graph();
    circuit.check(&graph)?;
    let full = Circuit::full(&graph);
    let probe = KlProbe::new(model, pairs, AblationMode::Interchange)?;
    probe_edges
        .iter()
        .map(|&e| {
            if !circuit.contains(e) {
                return Err(Error::Input(format!(
                    "probe edge {} is not in the circuit",
                    graph.edges()[e]
                )));
            }
            let edge = graph.edges()[e];
            Ok(EdgeFaithfulnessRecord {
                edge_index: e,
                src: edge.src.to_string(),
                dst: edge.dst.to_string(),
                m_e: probe.kl(model, &full.without_edge(e))?,
                c_e: probe.kl(model, &circuit.without_edge(e))?,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::seq::SliceRandom;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn kl_examples() {
        let p = [0.2, 0.3, 0.5];
        assert_eq!(kl_divergence(&p, &p).unwrap().value, 0.0);
        let k = kl_divergence(&[1.0, 0.0], &[0.5, 0.5]).unwrap();
        assert!((k.value - 2f64.ln()).abs() < 1e-12);
        let inf = kl_divergence(&[0.5, 0.5], &[1.0, 0.0]).unwrap();
        assert!(inf.capped && inf.value == KL_CAP);
        assert!(kl_divergence(&[1.0], &[0.5, 0.5]).is_err());
    }

    #[test]
    fn coin_flip_reference_is_log_two() {
        // A model certain of one of two names against a circuit that guesses.
        let k = kl_from_logits(&[30.0, -30.0], &[0.0, 0.0]);
        assert!((k - 0.69).abs() < 0.01);
    }

    #[test]
    fn logit_diff_examples() {
        assert_eq!(logit_diff(&[0.0; 5], 1, 3), 0.0);
        let l = [0.9f32.ln(), 0.1f32.ln()];
        assert!((logit_diff(&l, 0, 1) - 9f32.ln()).abs() < 1e-5);
        assert_eq!(logit_diff(&l, 0, 1), -logit_diff(&l, 1, 0));
    }

    #[test]
    fn prob_diff_examples() {
        let mut spike = vec![0.0; 100];
        spike[99] = 1.0;
        assert_eq!(prob_diff_gt(&spike, 50), 1.0);
        assert_eq!(prob_diff_10(&spike, 50), 0.0);
        let uniform = vec![0.01; 100];
        assert!((prob_diff_gt(&uniform, 50) + 0.01).abs() < 1e-6);
        // Clipped windows at the boundaries.
        assert!((prob_diff_10(&uniform, 2) - 0.08).abs() < 1e-6);
    }

    #[test]
    fn restricted_probs_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let logits: Vec<f32> = (0..150).map(|_| rng.random_range(-5.0..5.0)).collect();
        let ids: Vec<u32> = (20..120).collect();
        let s: f64 = restricted_probs(&logits, &ids).iter().sum();
        assert!((s - 1.0).abs() < 1e-6);
    }

    /// Tau-b as the correlation of pairwise sign vectors.
    fn tau_oracle(x: &[f64], y: &[f64]) -> f64 {
        let mut sx = Vec::new();
        let mut sy = Vec::new();
        for i in 0..x.len() {
            for j in 0..x.len() {
                if i != j {
                    sx.push((x[i] - x[j]).signum() * f64::from(u8::from(x[i] != x[j])));
                    sy.push((y[i] - y[j]).signum() * f64::from(u8::from(y[i] != y[j])));
                }
            }
        }
        let dot: f64 = sx.iter().zip(&sy).map(|(a, b)| a * b).sum();
        let nx: f64 = sx.iter().map(|a| a * a).sum();
        let ny: f64 = sy.iter().map(|a| a * a).sum();
        dot / (nx * ny).sqrt()
    }

    #[test]
    fn kendall_tau_examples_and_oracle() {
        let x: Vec<f64> = (0..100).map(f64::from).collect();
        let rev: Vec<f64> = x.iter().rev().copied().collect();
        assert_eq!(kendall_tau_b(&x, &x), 1.0);
        assert_eq!(kendall_tau_b(&x, &rev), -1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            // Small integer ranges force ties.
            let a: Vec<f64> = (0..30).map(|_| f64::from(rng.random_range(0..8))).collect();
            let mut b = a.clone();
            b.shuffle(&mut rng);
            for v in b.iter_mut().take(10) {
                *v = f64::from(rng.random_range(0..8));
            }
            assert!((kendall_tau_b(&a, &b) - tau_oracle(&a, &b)).abs() < 1e-12);
        }
    }

    #[test]
    fn spearman_examples() {
        let x = [1.0, 2.0, 3.0, 4.0];
        assert!((spearman(&x, &[10.0, 20.0, 30.0, 40.0]) - 1.0).abs() < 1e-12);
        assert!((spearman(&x, &[4.0, 3.0, 2.0, 1.0]) + 1.0).abs() < 1e-12);
        assert_eq!(ranks(&[5.0, 1.0, 5.0]), vec![2.5, 1.0, 2.5]);
    }

    #[test]
    fn exact_match_and_accuracy() {
        assert_eq!(exact_match(&[1, 2, 3], &[1, 2, 3]).unwrap(), 1.0);
        assert_eq!(exact_match(&[1, 2], &[3, 4]).unwrap(), 0.0);
        assert!(exact_match(&[1], &[1, 2]).is_err());
        // The circuit copies a wrong model: EM 1, accuracy 0.
        let model = [7, 7];
        let circuit = [7, 7];
        assert_eq!(exact_match(&model, &circuit).unwrap(), 1.0);
        assert_eq!(accuracy(&circuit, &[1, 2]).unwrap(), 0.0);
    }
}
