// SPDX-License-Identifier: MIT OR Apache-2.0

//! Hand-weighted transformers for two small sequence programs, with the
//! exact set of edges each one uses.
//!
//! Every feature lives in its own residual dimension and is written by
//! exactly one component, so the ground-truth circuit reproduces the full
//! model bit for bit under zero ablation and every other edge carries
//! nothing a reader looks at.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Tensor;
use crate::error::{Error, Result};
use crate::masks::DensityPool;
use crate::metrics::argmax;
use crate::model::{
    save_model, AblationMode, Activation, Circuit, ComputationalGraph, DisentangledTransformer, Edge, ModelConfig,
    Reader, Stream, Writer,
};
use crate::pruner::{KlPositions, PruneConfig, PruneLoss};
use crate::tasks::{ExamplePair, Vocab};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Program {
    /// Running fraction of `x` tokens.
    Xproportion,
    /// The input read back to front.
    Reverse,
}

impl Program {
    pub const ALL: [Program; 2] = [Program::Xproportion, Program::Reverse];

    pub fn build(self) -> CompiledModel {
        match self {
            Program::Xproportion => build_xproportion(),
            Program::Reverse => build_reverse(),
        }
    }
}

impl fmt::Display for Program {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Program::Xproportion => "xproportion",
            Program::Reverse => "reverse",
        })
    }
}

impl FromStr for Program {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "xproportion" => Ok(Program::Xproportion),
            "reverse" => Ok(Program::Reverse),
            _ => Err(Error::Config(format!("unknown program `{s}`"))),
        }
    }
}

/// Output of a program on one input, one entry per input symbol.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum ProgramOutput {
    Numeric(Vec<f32>),
    /// Vocabulary ids.
    Tokens(Vec<u32>),
}

impl ProgramOutput {
    /// Equal tokens, or numbers within `tol`.
    pub fn agrees(&self, other: &ProgramOutput, tol: f32) -> bool {
        match (self, other) {
            (Self::Numeric(a), Self::Numeric(b)) => {
                a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
            }
            (Self::Tokens(a), Self::Tokens(b)) => a == b,
            _ => false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct CompiledModel {
    pub program: Program,
    pub model: DisentangledTransformer,
    pub vocab: Vocab,
    /// Input symbols, excluding the special tokens.
    pub alphabet: Vec<String>,
    pub ground_truth: Circuit,
    pub ablation_mode: AblationMode,
}

impl CompiledModel {
    /// Longest input, excluding the leading BOS.
    pub fn max_len(&self) -> usize {
        self.model.config.max_seq - 1
    }

    /// BOS followed by the ids of `symbols`.
    pub fn encode(&self, symbols: &[&str]) -> Result<Vec<u32>> {
        if symbols.is_empty() || symbols.len() > self.max_len() {
            return Err(Error::Input(format!("input length must be 1..={}", self.max_len())));
        }
        let mut out = vec![self.vocab.bos()];
        for s in symbols {
            if !self.alphabet.iter().any(|a| a == s) {
                return Err(Error::Input(format!("`{s}` is not in the alphabet")));
            }
            out.push(self.vocab.id(s)?);
        }
        Ok(out)
    }

    fn check_input(&self, tokens: &[u32]) -> Result<()> {
        let ok = tokens.len() >= 2
            && tokens.len() <= self.model.config.max_seq
            && tokens[0] == self.vocab.bos()
            && tokens[1..]
                .iter()
                .all(|&t| t > self.vocab.bos() && (t as usize) < self.vocab.len());
        if ok {
            Ok(())
        } else {
            Err(Error::Input(
                "expected BOS followed by 1..=max_len alphabet tokens".into(),
            ))
        }
    }

    /// Reference implementation of the program. `tokens` starts with BOS.
    pub fn oracle(&self, tokens: &[u32]) -> Result<ProgramOutput> {
        self.check_input(tokens)?;
        let body = &tokens[1..];
        Ok(match self.program {
            Program::Xproportion => {
                let x = self.vocab.id("x")?;
                let mut count = 0;
                ProgramOutput::Numeric(
                    body.iter()
                        .enumerate()
                        .map(|(i, &t)| {
                            count += usize::from(t == x);
                            count as f32 / (i + 1) as f32
                        })
                        .collect(),
                )
            }
            Program::Reverse => ProgramOutput::Tokens(body.iter().rev().copied().collect()),
        })
    }

    /// Reads the program output for batch row `row` out of `(B, S, V)` logits.
    pub fn decode(&self, logits: &Tensor, row: usize) -> ProgramOutput {
        let (s, v) = (logits.shape()[1], logits.shape()[2]);
        let at = |p: usize| &logits.data()[(row * s + p) * v..(row * s + p + 1) * v];
        match self.program {
            Program::Xproportion => ProgramOutput::Numeric((1..s).map(|p| at(p)[0]).collect()),
            Program::Reverse => ProgramOutput::Tokens((1..s).map(|p| argmax(at(p))).collect()),
        }
    }

    /// Full-model output.
    pub fn run(&self, tokens: &[u32]) -> Result<ProgramOutput> {
        self.check_input(tokens)?;
        Ok(self.decode(&self.model.logits(&[tokens.to_vec()])?, 0))
    }

    /// Output of `circuit` under the fixture's ablation mode.
    pub fn run_circuit(&self, tokens: &[u32], circuit: &Circuit) -> Result<ProgramOutput> {
        self.check_input(tokens)?;
        let t = [tokens.to_vec()];
        Ok(self.decode(&self.model.circuit_forward(&t, &t, circuit, self.ablation_mode)?, 0))
    }

    /// Uniformly random input of `len` symbols, BOS included.
    pub fn random_input<R: Rng>(&self, len: usize, rng: &mut R) -> Result<Vec<u32>> {
        let syms: Vec<&str> = (0..len)
            .map(|_| self.alphabet[rng.random_range(0..self.alphabet.len())].as_str())
            .collect();
        self.encode(&syms)
    }

    /// Every input with `1..=max_len` symbols, shortest first.
    pub fn all_inputs(&self, max_len: usize) -> Result<Vec<Vec<u32>>> {
        let mut out = Vec::new();
        let mut layer: Vec<Vec<&str>> = vec![vec![]];
        for _ in 0..max_len.min(self.max_len()) {
            layer = layer
                .iter()
                .flat_map(|p| {
                    self.alphabet.iter().map(move |a| {
                        let mut q = p.clone();
                        q.push(a.as_str());
                        q
                    })
                })
                .collect();
            for s in &layer {
                out.push(self.encode(s)?);
            }
        }
        Ok(out)
    }

    /// Random inputs wrapped as pruning examples. The corrupted side equals
    /// the clean side since removed edges read zeros.
    pub fn dataset(&self, n: usize, lengths: std::ops::RangeInclusive<usize>, seed: u64) -> Result<Vec<ExamplePair>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (lo, hi) = (*lengths.start(), *lengths.end());
        if lo == 0 || hi > self.max_len() || lo > hi {
            return Err(Error::Input(format!("lengths must lie in 1..={}", self.max_len())));
        }
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            let len = rng.random_range(lo..=hi);
            let tokens = self.random_input(len, &mut rng)?;
            let text = self.vocab.decode(&tokens)?;
            out.push(ExamplePair {
                clean_text: text.clone(),
                corrupted_text: text,
                corrupted_tokens: tokens.clone(),
                answer: String::new(),
                answer_id: 0,
                misleading_id: None,
                answer_position: tokens.len() - 1,
                template_id: 0,
                year: None,
                clean_tokens: tokens,
            });
        }
        Ok(out)
    }

    /// Pruning settings for this fixture: zero ablation, every position
    /// compared, squared error for the numeric program.
    pub fn prune_config(&self) -> PruneConfig {
        let base = PruneConfig::compiled();
        PruneConfig {
            loss: match self.program {
                Program::Xproportion => PruneLoss::Mse,
                Program::Reverse => PruneLoss::Kl,
            },
            kl_positions: KlPositions::All,
            ablation_mode: self.ablation_mode,
            discretize: crate::masks::DiscretizeOptions {
                pool: DensityPool::EdgesOnly,
                ..base.discretize
            },
            ..base
        }
    }

    /// Writes `model.json` and `ground_truth.json` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        save_model(&self.model, &dir.join("model.json"))?;
        std::fs::write(
            dir.join("ground_truth.json"),
            self.ground_truth.to_json(&self.model.graph()),
        )?;
        Ok(())
    }
}

fn set(t: &mut Tensor, row: usize, col: usize, v: f32) {
    let cols = t.shape()[1];
    t.data_mut()[row * cols + col] = v;
}

fn ground_truth(graph: &ComputationalGraph, edges: &[(Writer, Reader)]) -> Circuit {
    let kept: Vec<Edge> = edges.iter().map(|&(src, dst)| Edge { src, dst }).collect();
    Circuit::from_edges(graph, &kept).expect("ground-truth edges exist in the graph")
}

fn head(layer: usize, stream: Stream) -> Reader {
    Reader::Head { layer, head: 0, stream }
}

// Residual layout of `xproportion`.
const XP_IS_X: usize = 5;
const XP_FRAC: usize = 6;
/// Key scale that sends BOS's attention weight below e^-40.
const XP_KEY: f32 = 40.0;

/// Two layers: the first MLP marks `x` tokens; a second-layer head averages
/// the mark over every non-BOS position so far. Output is logit 0.
pub fn build_xproportion() -> CompiledModel {
    let vocab = Vocab::new(["a", "b", "x"]);
    let cfg = ModelConfig {
        n_layers: 2,
        n_heads: 1,
        d_model: 8,
        d_head: 8,
        d_mlp: 4,
        vocab_size: vocab.len(),
        max_seq: 16,
        layer_norm: false,
        activation: Activation::Relu,
        causal: true,
    };
    let mut m = DisentangledTransformer::zeros(cfg).expect("valid config");
    // Token one-hot in dims 0..5.
    for t in 0..vocab.len() {
        set(&mut m.embed, t, t, 1.0);
    }
    let x = vocab.id("x").expect("x in vocab") as usize;
    // m0: is_x = relu(onehot_x).
    set(&mut m.layers[0].w_in, x, 0, 1.0);
    set(&mut m.layers[0].w_out, 0, XP_IS_X, 1.0);
    // a1.h0: constant query, key marks non-BOS tokens, value is is_x.
    let scale = (m.config.d_head as f32).sqrt();
    let h = &mut m.layers[1].heads[0];
    h.b_q.data_mut()[0] = 1.0;
    for t in ["a", "b", "x"] {
        set(&mut h.w_k, vocab.id(t).expect("in vocab") as usize, 0, XP_KEY * scale);
    }
    set(&mut h.w_v, XP_IS_X, 0, 1.0);
    set(&mut h.w_o, 0, XP_FRAC, 1.0);
    set(&mut m.unembed, XP_FRAC, 0, 1.0);

    let graph = m.graph();
    let gt = ground_truth(
        &graph,
        &[
            (Writer::Embed, Reader::Mlp { layer: 0 }),
            (Writer::Embed, head(1, Stream::K)),
            (Writer::Mlp { layer: 0 }, head(1, Stream::V)),
            (Writer::Head { layer: 1, head: 0 }, Reader::Logits),
        ],
    );
    CompiledModel {
        program: Program::Xproportion,
        model: m,
        vocab,
        alphabet: ["a", "b", "x"].map(String::from).to_vec(),
        ground_truth: gt,
        ablation_mode: AblationMode::Zero,
    }
}

// Residual layout of `reverse`. Dims 0..5 hold the token one-hot.
const RV_POS: usize = 5;
const RV_POS_SQ: usize = 6;
const RV_INV_LEN: usize = 7;
const RV_LEN_PLUS_ONE: usize = 8;
const RV_TARGET: usize = 9;
const RV_OUT: usize = 10;
/// Score gap between the matching key and its neighbours.
const RV_MATCH: f32 = 30.0;
const RV_LOGIT: f32 = 10.0;

/// Three layers, bidirectional attention.
///
/// * a0.h0 attends uniformly and reads the BOS mark: `1 / (n + 1)`.
/// * m0 inverts that with a piecewise-linear fit through the reachable
///   lengths: `n + 1`.
/// * m1 subtracts the position: the index to copy from, `n + 1 − p`.
/// * a2.h0 scores key `j` by `−(j − target)²` up to a per-query constant and
///   copies that position's token.
pub fn build_reverse() -> CompiledModel {
    let vocab = Vocab::new(["1", "2", "3"]);
    let max_len = 5;
    let cfg = ModelConfig {
        n_layers: 3,
        n_heads: 1,
        d_model: 16,
        d_head: 16,
        d_mlp: 8,
        vocab_size: vocab.len(),
        max_seq: max_len + 1,
        layer_norm: false,
        activation: Activation::Relu,
        causal: false,
    };
    let v = vocab.len();
    let mut m = DisentangledTransformer::zeros(cfg).expect("valid config");
    for t in 0..v {
        set(&mut m.embed, t, t, 1.0);
    }
    for p in 0..=max_len {
        set(&mut m.pos_embed, p, RV_POS, p as f32);
        set(&mut m.pos_embed, p, RV_POS_SQ, (p * p) as f32);
    }

    // a0.h0: uniform attention over the BOS mark.
    let bos = vocab.bos() as usize;
    let h = &mut m.layers[0].heads[0];
    set(&mut h.w_v, bos, 0, 1.0);
    set(&mut h.w_o, 0, RV_INV_LEN, 1.0);

    // m0: n + 1 = 1 / inv_len through the points x = 1/(n+1), n = 1..=max_len.
    let mut pts: Vec<(f64, f64)> = (1..=max_len).map(|n| (1.0 / (n + 1) as f64, (n + 1) as f64)).collect();
    pts.sort_by(|a, b| a.0.total_cmp(&b.0));
    let l0 = &mut m.layers[0];
    l0.b_out.data_mut()[RV_LEN_PLUS_ONE] = pts[0].1 as f32;
    let mut prev_slope = 0.0;
    for k in 0..pts.len() - 1 {
        let slope = (pts[k + 1].1 - pts[k].1) / (pts[k + 1].0 - pts[k].0);
        set(&mut l0.w_in, RV_INV_LEN, k, 1.0);
        l0.b_in.data_mut()[k] = -pts[k].0 as f32;
        set(&mut l0.w_out, k, RV_LEN_PLUS_ONE, (slope - prev_slope) as f32);
        prev_slope = slope;
    }

    // m1: target = relu(n + 1 − p).
    let l1 = &mut m.layers[1];
    set(&mut l1.w_in, RV_LEN_PLUS_ONE, 0, 1.0);
    set(&mut l1.w_in, RV_POS, 0, -1.0);
    set(&mut l1.w_out, 0, RV_TARGET, 1.0);

    // a2.h0: q = (target, 1), k = c·(2j, −j²), so q·k = c·(2jt − j²).
    let c = RV_MATCH * (m.config.d_head as f32).sqrt();
    let h = &mut m.layers[2].heads[0];
    set(&mut h.w_q, RV_TARGET, 0, 1.0);
    h.b_q.data_mut()[1] = 1.0;
    set(&mut h.w_k, RV_POS, 0, 2.0 * c);
    set(&mut h.w_k, RV_POS_SQ, 1, -c);
    for t in 0..v {
        set(&mut h.w_v, t, t, 1.0);
        set(&mut h.w_o, t, RV_OUT + t, 1.0);
    }
    for t in 0..v {
        set(&mut m.unembed, RV_OUT + t, t, RV_LOGIT);
    }

    let graph = m.graph();
    let gt = ground_truth(
        &graph,
        &[
            (Writer::Embed, head(0, Stream::V)),
            (Writer::Head { layer: 0, head: 0 }, Reader::Mlp { layer: 0 }),
            (Writer::Embed, Reader::Mlp { layer: 1 }),
            (Writer::Mlp { layer: 0 }, Reader::Mlp { layer: 1 }),
            (Writer::Embed, head(2, Stream::K)),
            (Writer::Embed, head(2, Stream::V)),
            (Writer::Mlp { layer: 1 }, head(2, Stream::Q)),
            (Writer::Head { layer: 2, head: 0 }, Reader::Logits),
        ],
    );
    CompiledModel {
        program: Program::Reverse,
        model: m,
        vocab,
        alphabet: ["1", "2", "3"].map(String::from).to_vec(),
        ground_truth: gt,
        ablation_mode: AblationMode::Zero,
    }
}

#[cfg(test)]
mod tests;
