// SPDX-License-Identifier: MIT OR Apache-2.0

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autograd::{Element, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::model::config::{Activation, ModelConfig};
use crate::model::graph::{ComputationalGraph, Writer};

pub(crate) const LN_EPS: f64 = 1e-5;
const MASKED_SCORE: f64 = -1e9;

#[derive(Debug, Clone, PartialEq)]
pub struct HeadWeights {
    pub w_q: Tensor,
    pub b_q: Tensor,
    pub w_k: Tensor,
    pub b_k: Tensor,
    pub w_v: Tensor,
    pub b_v: Tensor,
    pub w_o: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub ln1_g: Tensor,
    pub ln1_b: Tensor,
    pub heads: Vec<HeadWeights>,
    pub ln2_g: Tensor,
    pub ln2_b: Tensor,
    pub w_in: Tensor,
    pub b_in: Tensor,
    pub w_out: Tensor,
    pub b_out: Tensor,
}

/// Decoder-only transformer whose writer outputs are kept separately, so it
/// can run both the ordinary residual-stream forward pass and the
/// mask-interpolated disentangled one.
///
/// Every attention head owns its output projection and there is no shared
/// attention output bias, so each head is a self-contained writer.
#[derive(Debug, Clone, PartialEq)]
pub struct DisentangledTransformer {
    pub config: ModelConfig,
    /// Token embedding, `(vocab, d_model)`.
    pub embed: Tensor,
    /// Learned positions, `(max_seq, d_model)`; folded into the embed writer.
    pub pos_embed: Tensor,
    pub layers: Vec<LayerWeights>,
    pub lnf_g: Tensor,
    pub lnf_b: Tensor,
    /// `(d_model, vocab)`.
    pub unembed: Tensor,
}

/// Writer activations of one forward pass, `(batch, seq, d_model)` each,
/// indexed like [`ComputationalGraph::writers`].
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationCache {
    pub writers: Vec<Tensor>,
}

impl ActivationCache {
    pub fn zeros_like(other: &ActivationCache) -> Self {
        Self {
            writers: other.writers.iter().map(|t| Tensor::zeros(t.shape())).collect(),
        }
    }

    pub fn zeros(n_writers: usize, shape: &[usize]) -> Self {
        Self {
            writers: (0..n_writers).map(|_| Tensor::zeros(shape)).collect(),
        }
    }

    pub fn get(&self, graph: &ComputationalGraph, w: Writer) -> Option<&Tensor> {
        graph.writer_index(w).map(|i| &self.writers[i])
    }

    pub fn len(&self) -> usize {
        self.writers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.writers.is_empty()
    }

    /// Selects batch rows, keeping the `(batch, seq, d)` layout.
    pub fn select(&self, rows: &[usize]) -> Self {
        Self {
            writers: self
                .writers
                .iter()
                .map(|t| {
                    let s = t.shape();
                    let per = s[1] * s[2];
                    let mut data = Vec::with_capacity(rows.len() * per);
                    for &r in rows {
                        data.extend_from_slice(&t.data()[r * per..(r + 1) * per]);
                    }
                    Tensor::new(vec![rows.len(), s[1], s[2]], data).expect("rows in range")
                })
                .collect(),
        }
    }

    /// Concatenates single- or multi-row caches along the batch axis.
    pub fn stack(parts: &[&ActivationCache]) -> Result<Self> {
        let Some(first) = parts.first() else {
            return Err(Error::Dataset("no caches to stack".into()));
        };
        let mut writers = Vec::with_capacity(first.writers.len());
        for w in 0..first.writers.len() {
            let s = first.writers[w].shape().to_vec();
            let mut data = Vec::new();
            let mut rows = 0;
            for p in parts {
                let t = &p.writers[w];
                if t.shape()[1..] != s[1..] {
                    return Err(Error::ModelMismatch("cache shapes differ".into()));
                }
                rows += t.shape()[0];
                data.extend_from_slice(t.data());
            }
            writers.push(Tensor::new(vec![rows, s[1], s[2]], data)?);
        }
        Ok(Self { writers })
    }
}

pub(crate) struct BoundHead {
    pub w_q: Var,
    pub b_q: Var,
    pub w_k: Var,
    pub b_k: Var,
    pub w_v: Var,
    pub b_v: Var,
    pub w_o: Var,
}

pub(crate) struct BoundLayer {
    pub ln1: (Var, Var),
    pub heads: Vec<BoundHead>,
    pub ln2: (Var, Var),
    pub w_in: Var,
    pub b_in: Var,
    pub w_out: Var,
    pub b_out: Var,
}

/// Model weights recorded on a tape.
pub(crate) struct BoundWeights {
    pub embed: Var,
    pub pos: Var,
    pub layers: Vec<BoundLayer>,
    pub lnf: (Var, Var),
    pub unembed: Var,
    /// Same order as [`DisentangledTransformer::tensors`].
    pub all: Vec<Var>,
}

fn normal(shape: &[usize], std: f32, rng: &mut ChaCha8Rng) -> Tensor {
    let dist = Normal::new(0.0f32, std).expect("positive std");
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| dist.sample(rng)).collect()).expect("shape product matches")
}

impl DisentangledTransformer {
    /// All-zero weights with unit layer-norm gains.
    pub fn zeros(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let (d, dh, dm) = (config.d_model, config.d_head, config.d_mlp);
        let layers = (0..config.n_layers)
            .map(|_| LayerWeights {
                ln1_g: Tensor::full(&[d], 1.0),
                ln1_b: Tensor::zeros(&[d]),
                heads: (0..config.n_heads)
                    .map(|_| HeadWeights {
                        w_q: Tensor::zeros(&[d, dh]),
                        b_q: Tensor::zeros(&[dh]),
                        w_k: Tensor::zeros(&[d, dh]),
                        b_k: Tensor::zeros(&[dh]),
                        w_v: Tensor::zeros(&[d, dh]),
                        b_v: Tensor::zeros(&[dh]),
                        w_o: Tensor::zeros(&[dh, d]),
                    })
                    .collect(),
                ln2_g: Tensor::full(&[d], 1.0),
                ln2_b: Tensor::zeros(&[d]),
                w_in: Tensor::zeros(&[d, dm]),
                b_in: Tensor::zeros(&[dm]),
                w_out: Tensor::zeros(&[dm, d]),
                b_out: Tensor::zeros(&[d]),
            })
            .collect();
        Ok(Self {
            embed: Tensor::zeros(&[config.vocab_size, d]),
            pos_embed: Tensor::zeros(&[config.max_seq, d]),
            layers,
            lnf_g: Tensor::full(&[d], 1.0),
            lnf_b: Tensor::zeros(&[d]),
            unembed: Tensor::zeros(&[d, config.vocab_size]),
            config,
        })
    }

    /// Gaussian initialization, deterministic in `seed`.
    pub fn random(config: ModelConfig, seed: u64) -> Result<Self> {
        let mut m = Self::zeros(config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = m.config.d_model as f32;
        let std = 1.0 / d.sqrt();
        let out_std = std / (2.0 * m.config.n_layers as f32).sqrt();
        m.embed = normal(m.embed.shape(), 1.0, &mut rng);
        m.pos_embed = normal(m.pos_embed.shape(), 0.5, &mut rng);
        for layer in &mut m.layers {
            for h in &mut layer.heads {
                h.w_q = normal(h.w_q.shape(), std, &mut rng);
                h.w_k = normal(h.w_k.shape(), std, &mut rng);
                h.w_v = normal(h.w_v.shape(), std, &mut rng);
                h.w_o = normal(h.w_o.shape(), out_std, &mut rng);
            }
            layer.w_in = normal(layer.w_in.shape(), std, &mut rng);
            layer.w_out = normal(
                layer.w_out.shape(),
                out_std / (m.config.d_mlp as f32 / d).sqrt(),
                &mut rng,
            );
        }
        m.unembed = normal(m.unembed.shape(), std, &mut rng);
        Ok(m)
    }

    pub fn graph(&self) -> ComputationalGraph {
        ComputationalGraph::new(&self.config)
    }

    /// Every weight tensor with a stable name, in a fixed order.
    pub fn tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![
            ("embed".to_string(), &self.embed),
            ("pos_embed".to_string(), &self.pos_embed),
        ];
        for (l, layer) in self.layers.iter().enumerate() {
            out.push((format!("l{l}.ln1_g"), &layer.ln1_g));
            out.push((format!("l{l}.ln1_b"), &layer.ln1_b));
            for (h, hw) in layer.heads.iter().enumerate() {
                out.push((format!("l{l}.h{h}.w_q"), &hw.w_q));
                out.push((format!("l{l}.h{h}.b_q"), &hw.b_q));
                out.push((format!("l{l}.h{h}.w_k"), &hw.w_k));
                out.push((format!("l{l}.h{h}.b_k"), &hw.b_k));
                out.push((format!("l{l}.h{h}.w_v"), &hw.w_v));
                out.push((format!("l{l}.h{h}.b_v"), &hw.b_v));
                out.push((format!("l{l}.h{h}.w_o"), &hw.w_o));
            }
            out.push((format!("l{l}.ln2_g"), &layer.ln2_g));
            out.push((format!("l{l}.ln2_b"), &layer.ln2_b));
            out.push((format!("l{l}.w_in"), &layer.w_in));
            out.push((format!("l{l}.b_in"), &layer.b_in));
            out.push((format!("l{l}.w_out"), &layer.w_out));
            out.push((format!("l{l}.b_out"), &layer.b_out));
        }
        out.push(("lnf_g".to_string(), &self.lnf_g));
        out.push(("lnf_b".to_string(), &self.lnf_b));
        out.push(("unembed".to_string(), &self.unembed));
        out
    }

    /// Mutable counterpart of [`Self::tensors`], same order.
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.embed, &mut self.pos_embed];
        for layer in &mut self.layers {
            out.push(&mut layer.ln1_g);
            out.push(&mut layer.ln1_b);
            for hw in &mut layer.heads {
                out.push(&mut hw.w_q);
                out.push(&mut hw.b_q);
                out.push(&mut hw.w_k);
                out.push(&mut hw.b_k);
                out.push(&mut hw.w_v);
                out.push(&mut hw.b_v);
                out.push(&mut hw.w_o);
            }
            out.push(&mut layer.ln2_g);
            out.push(&mut layer.ln2_b);
            out.push(&mut layer.w_in);
            out.push(&mut layer.b_in);
            out.push(&mut layer.w_out);
            out.push(&mut layer.b_out);
        }
        out.push(&mut self.lnf_g);
        out.push(&mut self.lnf_b);
        out.push(&mut self.unembed);
        out
    }

    pub fn n_params(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    pub(crate) fn bind<T: Element>(&self, tape: &mut Tape<T>, trainable: bool) -> BoundWeights {
        let vars = self
            .tensors()
            .into_iter()
            .map(|(_, t)| {
                let c = t.cast::<T>();
                if trainable {
                    tape.param(c)
                } else {
                    tape.constant(c)
                }
            })
            .collect();
        self.bound_from(vars)
    }

    /// Parameter variables already on `tape`, in [`Self::tensors`] order.
    pub(crate) fn bind_vars<T: Element>(&self, tape: &Tape<T>, vars: &[Var]) -> Result<BoundWeights> {
        let tensors = self.tensors();
        if vars.len() != tensors.len() {
            return Err(Error::ModelMismatch(format!(
                "{} parameter variables for {} tensors",
                vars.len(),
                tensors.len()
            )));
        }
        for ((name, t), &v) in tensors.iter().zip(vars) {
            if tape.shape(v) != t.shape() {
                return Err(Error::ModelMismatch(format!(
                    "{name}: expected shape {:?}, got {:?}",
                    t.shape(),
                    tape.shape(v)
                )));
            }
        }
        Ok(self.bound_from(vars.to_vec()))
    }

    fn bound_from(&self, all: Vec<Var>) -> BoundWeights {
        let mut it = all.iter().copied();
        let mut next = || it.next().expect("one variable per tensor");
        let embed = next();
        let pos = next();
        let mut layers = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let ln1 = (next(), next());
            let heads = layer
                .heads
                .iter()
                .map(|_| BoundHead {
                    w_q: next(),
                    b_q: next(),
                    w_k: next(),
                    b_k: next(),
                    w_v: next(),
                    b_v: next(),
                    w_o: next(),
                })
                .collect();
            layers.push(BoundLayer {
                ln1,
                heads,
                ln2: (next(), next()),
                w_in: next(),
                b_in: next(),
                w_out: next(),
                b_out: next(),
            });
        }
        let lnf = (next(), next());
        let unembed = next();
        BoundWeights {
            embed,
            pos,
            layers,
            lnf,
            unembed,
            all,
        }
    }

    /// Standard forward pass recorded on `tape` with caller-owned parameter
    /// variables (in [`Self::tensors`] order). Returns `(B, S, V)` logits.
    pub fn forward_with<T: Element>(&self, tape: &mut Tape<T>, params: &[Var], tokens: &[Vec<u32>]) -> Result<Var> {
        let w = self.bind_vars(tape, params)?;
        Ok(self.forward_standard_on(tape, &w, tokens)?.0)
    }

    /// Checks a batch of equal-length token sequences; returns `(batch, seq)`.
    pub fn check_tokens(&self, tokens: &[Vec<u32>]) -> Result<(usize, usize)> {
        let Some(first) = tokens.first() else {
            return Err(Error::Input("empty batch".into()));
        };
        let seq = first.len();
        if seq == 0 || seq > self.config.max_seq {
            return Err(Error::Input(format!(
                "sequence length {seq} outside 1..={}",
                self.config.max_seq
            )));
        }
        for t in tokens {
            if t.len() != seq {
                return Err(Error::Input("ragged batch".into()));
            }
            if let Some(&bad) = t.iter().find(|&&id| id as usize >= self.config.vocab_size) {
                return Err(Error::Input(format!(
                    "token id {bad} >= vocab size {}",
                    self.config.vocab_size
                )));
            }
        }
        Ok((tokens.len(), seq))
    }

    // ------------------------------------------------------------------
    // Building blocks shared by both forward passes
    // ------------------------------------------------------------------

    pub(crate) fn embed_writer<T: Element>(
        &self,
        tape: &mut Tape<T>,
        w: &BoundWeights,
        tokens: &[Vec<u32>],
    ) -> Result<Var> {
        let (b, s) = self.check_tokens(tokens)?;
        let ids: Vec<usize> = tokens.iter().flatten().map(|&t| t as usize).collect();
        let tok = tape.embedding(w.embed, &ids)?;
        let pos_ids: Vec<usize> = (0..s).collect();
        let pos = tape.embedding(w.pos, &pos_ids)?;
        let y = tape.reshape(tok, &[b, s, self.config.d_model])?;
        tape.add(y, pos)
    }

    fn norm<T: Element>(&self, tape: &mut Tape<T>, x: Var, (g, b): (Var, Var)) -> Result<Var> {
        if !self.config.layer_norm {
            return Ok(x);
        }
        let n = tape.layer_norm(x, T::from_f64(LN_EPS))?;
        let n = tape.mul(n, g)?;
        tape.add(n, b)
    }

    /// One head given its three (already aggregated) reader inputs.
    pub(crate) fn head<T: Element>(
        &self,
        tape: &mut Tape<T>,
        w: &BoundWeights,
        layer: usize,
        head: usize,
        inputs: [Var; 3],
    ) -> Result<Var> {
        let lw = &w.layers[layer];
        let hw = &lw.heads[head];
        let [xq, xk, xv] = inputs;
        let s = tape.shape(xq)[1];
        let xq = self.norm(tape, xq, lw.ln1)?;
        let xk = self.norm(tape, xk, lw.ln1)?;
        let xv = self.norm(tape, xv, lw.ln1)?;
        let q = tape.matmul(xq, hw.w_q)?;
        let q = tape.add(q, hw.b_q)?;
        let k = tape.matmul(xk, hw.w_k)?;
        let k = tape.add(k, hw.b_k)?;
        let v = tape.matmul(xv, hw.w_v)?;
        let v = tape.add(v, hw.b_v)?;
        let kt = tape.transpose_last2(k)?;
        let scores = tape.batch_matmul(q, kt)?;
        let scale = T::one() / T::from_f64(self.config.d_head as f64).sqrt();
        let mut scores = tape.scale(scores, scale);
        if self.config.causal {
            let mut mask = Tensor::<T>::zeros(&[s, s]);
            for i in 0..s {
                for j in i + 1..s {
                    mask.data_mut()[i * s + j] = T::from_f64(MASKED_SCORE);
                }
            }
            let mask = tape.constant(mask);
            scores = tape.add(scores, mask)?;
        }
        let attn = tape.softmax(scores)?;
        let z = tape.batch_matmul(attn, v)?;
        tape.matmul(z, hw.w_o)
    }

    pub(crate) fn mlp<T: Element>(&self, tape: &mut Tape<T>, w: &BoundWeights, layer: usize, x: Var) -> Result<Var> {
        let lw = &w.layers[layer];
        let x = self.norm(tape, x, lw.ln2)?;
        let h = tape.matmul(x, lw.w_in)?;
        let h = tape.add(h, lw.b_in)?;
        let h = match self.config.activation {
            Activation::Gelu => tape.gelu(h),
            Activation::Relu => tape.relu(h),
        };
        let o = tape.matmul(h, lw.w_out)?;
        tape.add(o, lw.b_out)
    }

    pub(crate) fn unembed<T: Element>(&self, tape: &mut Tape<T>, w: &BoundWeights, x: Var) -> Result<Var> {
        let x = self.norm(tape, x, w.lnf)?;
        tape.matmul(x, w.unembed)
    }

    /// Ordinary residual-stream forward pass: `h ← h + y` after every writer.
    ///
    /// Returns logits `(batch, seq, vocab)` and every writer's output.
    pub(crate) fn forward_standard_on<T: Element>(
        &self,
        tape: &mut Tape<T>,
        w: &BoundWeights,
        tokens: &[Vec<u32>],
    ) -> Result<(Var, Vec<Var>)> {
        let mut writers = Vec::with_capacity(1 + self.config.n_layers * (self.config.n_heads + 1));
        let mut resid = self.embed_writer(tape, w, tokens)?;
        writers.push(resid);
        for layer in 0..self.config.n_layers {
            let attn_in = resid;
            for head in 0..self.config.n_heads {
                let y = self.head(tape, w, layer, head, [attn_in; 3])?;
                writers.push(y);
                resid = tape.add(resid, y)?;
            }
            let y = self.mlp(tape, w, layer, resid)?;
            writers.push(y);
            resid = tape.add(resid, y)?;
        }
        let logits = self.unembed(tape, w, resid)?;
        Ok((logits, writers))
    }

    /// Standard forward pass on a batch of equal-length sequences.
    pub fn forward(&self, tokens: &[Vec<u32>]) -> Result<(Tensor, ActivationCache)> {
        let mut tape = Tape::<f32>::new();
        let w = self.bind(&mut tape, false);
        let (logits, writers) = self.forward_standard_on(&mut tape, &w, tokens)?;
        let cache = ActivationCache {
            writers: writers.iter().map(|&v| tape.value(v).clone()).collect(),
        };
        Ok((tape.value(logits).clone(), cache))
    }

    /// Logits only.
    pub fn logits(&self, tokens: &[Vec<u32>]) -> Result<Tensor> {
        Ok(self.forward(tokens)?.0)
    }
}
