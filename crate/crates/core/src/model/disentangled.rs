// SPDX-License-Identifier: MIT OR Apache-2.0

//! Forward pass over a disentangled residual stream.
//!
//! Instead of one running residual sum, every writer's output is kept and
//! each reader aggregates its own mixture
//!
//! ```text
//! input(r) = Σ_w  z(w→r) · y_w  +  (1 − z(w→r)) · ỹ_w
//! ```
//!
//! where `y_w` is the writer's output in this pass (recomputed from masked
//! inputs upstream) and `ỹ_w` its output on the corrupted input, taken from
//! a cache. With every mask at one this is the ordinary forward pass; with
//! every mask at zero it is the corrupted forward pass.

use serde::{Deserialize, Serialize};

use crate::autograd::{Element, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::model::graph::{Circuit, ComputationalGraph};
use crate::model::transformer::{ActivationCache, BoundWeights, DisentangledTransformer};

/// What a removed edge contributes in place of the clean activation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AblationMode {
    /// Activation from the corrupted counterpart example.
    #[default]
    Interchange,
    /// Zeros.
    Zero,
}

/// Per-edge mask supplied to the disentangled pass, in canonical edge order.
#[derive(Debug, Clone, Copy)]
pub enum EdgeMask<'a> {
    /// Effective mask values on the tape, shape `(E,)`.
    Soft(Var),
    /// Kept / removed. A removed edge reads only the ablated activation.
    Hard(&'a [bool]),
}

pub(crate) struct DisentangledPass {
    pub logits: Var,
    pub writers: Vec<Var>,
    /// Aggregated input of every reader, `(batch, seq, d_model)`, in reader order.
    pub reader_inputs: Vec<Var>,
    /// Edges through which a clean activation was read (hard masks only).
    pub clean_reads: Vec<usize>,
}

impl DisentangledTransformer {
    fn check_cache(&self, graph: &ComputationalGraph, cache: &ActivationCache, b: usize, s: usize) -> Result<()> {
        let want = [b, s, self.config.d_model];
        if cache.len() != graph.n_writers() {
            return Err(Error::ModelMismatch(format!(
                "cache holds {} writers, model has {}",
                cache.len(),
                graph.n_writers()
            )));
        }
        if let Some(t) = cache.writers.iter().find(|t| t.shape() != want) {
            return Err(Error::ModelMismatch(format!(
                "cache entry has shape {:?}, expected {want:?}",
                t.shape()
            )));
        }
        Ok(())
    }

    pub(crate) fn forward_disentangled_on<T: Element>(
        &self,
        tape: &mut Tape<T>,
        w: &BoundWeights,
        graph: &ComputationalGraph,
        tokens: &[Vec<u32>],
        corrupted: &ActivationCache,
        mask: EdgeMask<'_>,
    ) -> Result<DisentangledPass> {
        let (b, s) = self.check_tokens(tokens)?;
        self.check_cache(graph, corrupted, b, s)?;
        match mask {
            EdgeMask::Soft(v) if tape.shape(v) != [graph.n_edges()] => {
                return Err(Error::ModelMismatch(format!(
                    "mask shape {:?}, graph has {} edges",
                    tape.shape(v),
                    graph.n_edges()
                )))
            }
            EdgeMask::Hard(m) if m.len() != graph.n_edges() => {
                return Err(Error::ModelMismatch(format!(
                    "mask has {} entries, graph has {} edges",
                    m.len(),
                    graph.n_edges()
                )))
            }
            _ => {}
        }
        let d = self.config.d_model;
        let n = b * s * d;
        let (n_layers, n_heads) = (self.config.n_layers, self.config.n_heads);
        let n_writers = graph.n_writers();

        let mut agg = Aggregator::new(tape, graph, corrupted, mask, [b, s, d])?;
        let mut writers: Vec<Var> = Vec::with_capacity(n_writers);
        let mut reader_inputs: Vec<Var> = Vec::with_capacity(graph.readers().len());

        let y0 = self.embed_writer(tape, w, tokens)?;
        agg.push_writer(tape, y0, n)?;
        writers.push(y0);

        for layer in 0..n_layers {
            let first_reader = layer * (3 * n_heads + 1);
            let ins = agg.aggregate(tape, first_reader, 3 * n_heads)?;
            reader_inputs.extend_from_slice(&ins);
            let mut outs = Vec::with_capacity(n_heads);
            for head in 0..n_heads {
                let i = 3 * head;
                outs.push(self.head(tape, w, layer, head, [ins[i], ins[i + 1], ins[i + 2]])?);
            }
            for y in outs {
                agg.push_writer(tape, y, n)?;
                writers.push(y);
            }
            let mlp_in = agg.aggregate(tape, first_reader + 3 * n_heads, 1)?[0];
            reader_inputs.push(mlp_in);
            let y = self.mlp(tape, w, layer, mlp_in)?;
            agg.push_writer(tape, y, n)?;
            writers.push(y);
        }
        let final_in = agg.aggregate(tape, n_layers * (3 * n_heads + 1), 1)?[0];
        reader_inputs.push(final_in);
        let logits = self.unembed(tape, w, final_in)?;
        Ok(DisentangledPass {
            logits,
            writers,
            reader_inputs,
            clean_reads: agg.clean_reads,
        })
    }

    /// Disentangled forward pass with fixed effective edge-mask values.
    ///
    /// `edge_mask` is index-aligned with [`ComputationalGraph::edges`]; the
    /// returned cache holds the clean-side writer outputs of this pass.
    pub fn forward_disentangled(
        &self,
        tokens: &[Vec<u32>],
        corrupted: &ActivationCache,
        edge_mask: &[f32],
    ) -> Result<(Tensor, ActivationCache)> {
        let graph = self.graph();
        let mut tape = Tape::<f32>::new();
        let w = self.bind(&mut tape, false);
        let z = tape.constant(Tensor::from_vec(edge_mask.to_vec()));
        let pass = self.forward_disentangled_on(&mut tape, &w, &graph, tokens, corrupted, EdgeMask::Soft(z))?;
        let cache = ActivationCache {
            writers: pass.writers.iter().map(|&v| tape.value(v).clone()).collect(),
        };
        Ok((tape.value(pass.logits).clone(), cache))
    }

    /// Disentangled pass on `tape` with caller-owned parameter variables
    /// (in [`DisentangledTransformer::tensors`] order) and a mask variable
    /// `z` of shape `(|E|,)`. Returns `(B, S, V)` logits.
    pub fn forward_disentangled_with<T: Element>(
        &self,
        tape: &mut Tape<T>,
        params: &[Var],
        tokens: &[Vec<u32>],
        corrupted: &ActivationCache,
        z: Var,
    ) -> Result<Var> {
        let graph = self.graph();
        let w = self.bind_vars(tape, params)?;
        Ok(self
            .forward_disentangled_on(tape, &w, &graph, tokens, corrupted, EdgeMask::Soft(z))?
            .logits)
    }

    /// Cache of ablated activations for `mode`.
    pub fn ablation_cache(
        &self,
        tokens: &[Vec<u32>],
        corrupted_tokens: &[Vec<u32>],
        mode: AblationMode,
    ) -> Result<ActivationCache> {
        let (b, s) = self.check_tokens(tokens)?;
        match mode {
            AblationMode::Interchange => {
                if self.check_tokens(corrupted_tokens)? != (b, s) {
                    return Err(Error::Input("clean and corrupted batches differ in shape".into()));
                }
                Ok(self.forward(corrupted_tokens)?.1)
            }
            AblationMode::Zero => Ok(ActivationCache::zeros(
                self.graph().n_writers(),
                &[b, s, self.config.d_model],
            )),
        }
    }

    /// Runs `circuit`: kept edges read clean activations, removed edges read
    /// the ablated ones.
    pub fn circuit_forward(
        &self,
        tokens: &[Vec<u32>],
        corrupted_tokens: &[Vec<u32>],
        circuit: &Circuit,
        mode: AblationMode,
    ) -> Result<Tensor> {
        let cache = self.ablation_cache(tokens, corrupted_tokens, mode)?;
        self.circuit_forward_cached(tokens, &cache, circuit)
    }

    /// [`Self::circuit_forward`] with a precomputed ablation cache.
    pub fn circuit_forward_cached(
        &self,
        tokens: &[Vec<u32>],
        ablated: &ActivationCache,
        circuit: &Circuit,
    ) -> Result<Tensor> {
        Ok(self.circuit_forward_traced(tokens, ablated, circuit)?.0)
    }

    /// Like [`Self::circuit_forward_cached`], additionally returning every edge
    /// index through which a clean activation was read.
    pub fn circuit_forward_traced(
        &self,
        tokens: &[Vec<u32>],
        ablated: &ActivationCache,
        circuit: &Circuit,
    ) -> Result<(Tensor, Vec<usize>)> {
        let graph = self.graph();
        circuit.check(&graph)?;
        let mut tape = Tape::<f32>::new();
        let w = self.bind(&mut tape, false);
        let pass = self.forward_disentangled_on(
            &mut tape,
            &w,
            &graph,
            tokens,
            ablated,
            EdgeMask::Hard(circuit.edge_mask()),
        )?;
        Ok((tape.value(pass.logits).clone(), pass.clean_reads))
    }
}

/// Builds reader inputs from the writers produced so far.
struct Aggregator<'a> {
    graph: &'a ComputationalGraph,
    mask: EdgeMask<'a>,
    shape: [usize; 3],
    /// Writer outputs flattened to `(1, N)`.
    clean_rows: Vec<Var>,
    clean_full: Vec<Var>,
    /// All corrupted writers stacked `(W, N)` (soft masks).
    corrupted_stack: Option<Var>,
    /// Corrupted writers one by one, `(B, S, d)` (hard masks).
    corrupted_each: Vec<Var>,
    clean_reads: Vec<usize>,
}

impl<'a> Aggregator<'a> {
    fn new<T: Element>(
        tape: &mut Tape<T>,
        graph: &'a ComputationalGraph,
        corrupted: &ActivationCache,
        mask: EdgeMask<'a>,
        shape: [usize; 3],
    ) -> Result<Self> {
        let n: usize = shape.iter().product();
        let (mut corrupted_stack, mut corrupted_each) = (None, Vec::new());
        match mask {
            EdgeMask::Soft(_) => {
                let mut data = Vec::with_capacity(graph.n_writers() * n);
                for t in &corrupted.writers {
                    data.extend(t.data().iter().map(|&v| T::from_f32(v)));
                }
                corrupted_stack = Some(tape.constant(Tensor::new(vec![graph.n_writers(), n], data)?));
            }
            EdgeMask::Hard(_) => {
                corrupted_each = corrupted.writers.iter().map(|t| tape.constant(t.cast::<T>())).collect();
            }
        }
        Ok(Self {
            graph,
            mask,
            shape,
            clean_rows: Vec::new(),
            clean_full: Vec::new(),
            corrupted_stack,
            corrupted_each,
            clean_reads: Vec::new(),
        })
    }

    fn push_writer<T: Element>(&mut self, tape: &mut Tape<T>, y: Var, n: usize) -> Result<()> {
        if matches!(self.mask, EdgeMask::Soft(_)) {
            self.clean_rows.push(tape.reshape(y, &[1, n])?);
        }
        self.clean_full.push(y);
        Ok(())
    }

    /// Inputs of `count` consecutive readers that all see the same writers.
    fn aggregate<T: Element>(&mut self, tape: &mut Tape<T>, first: usize, count: usize) -> Result<Vec<Var>> {
        let k = self.clean_full.len();
        let start = self.graph.reader_edges(first).start;
        debug_assert_eq!(self.graph.reader_edges(first).len(), k);
        match self.mask {
            EdgeMask::Soft(z) => {
                let zs = tape.slice(z, 0, start, start + count * k)?;
                let zs = tape.reshape(zs, &[count, k])?;
                let keep = if k == 1 {
                    self.clean_rows[0]
                } else {
                    tape.concat(&self.clean_rows, 0)?
                };
                let stack = self.corrupted_stack.expect("soft mask has a stack");
                let abl = tape.slice(stack, 0, 0, k)?;
                let clean = tape.matmul(zs, keep)?;
                let zc = tape.affine(zs, -T::one(), T::one());
                let corrupt = tape.matmul(zc, abl)?;
                let mixed = tape.add(clean, corrupt)?;
                (0..count)
                    .map(|i| {
                        let row = if count == 1 {
                            mixed
                        } else {
                            tape.slice(mixed, 0, i, i + 1)?
                        };
                        tape.reshape(row, &self.shape)
                    })
                    .collect()
            }
            EdgeMask::Hard(kept) => {
                let mut out = Vec::with_capacity(count);
                for i in 0..count {
                    let base = start + i * k;
                    let mut acc: Option<Var> = None;
                    for wi in 0..k {
                        let term = if kept[base + wi] {
                            self.clean_reads.push(base + wi);
                            self.clean_full[wi]
                        } else {
                            self.corrupted_each[wi]
                        };
                        acc = Some(match acc {
                            None => term,
                            Some(a) => tape.add(a, term)?,
                        });
                    }
                    out.push(acc.expect("every reader has at least one edge"));
                }
                Ok(out)
            }
        }
    }
}
