// SPDX-License-Identifier: MIT OR Apache-2.0

//! Computational graph of a transformer and circuits as edge subsets.
//!
//! Writers produce activations that are added to the residual stream
//! (the embedding, every attention head, every MLP). Readers consume an
//! aggregate of earlier writers: the query, key and value inputs of each head
//! are separate readers, as are each MLP input and the final logits.
//!
//! Edges are enumerated reader-major in topological order, and within a
//! reader by writer index. Writer indices are themselves topological, so the
//! incoming edges of any reader are a contiguous run starting at writer 0.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::config::ModelConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Writer {
    Embed,
    Head { layer: usize, head: usize },
    Mlp { layer: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Stream {
    Q,
    K,
    V,
}

impl Stream {
    pub const ALL: [Stream; 3] = [Stream::Q, Stream::K, Stream::V];

    pub fn index(self) -> usize {
        match self {
            Stream::Q => 0,
            Stream::K => 1,
            Stream::V => 2,
        }
    }

    fn suffix(self) -> &'static str {
        match self {
            Stream::Q => "q",
            Stream::K => "k",
            Stream::V => "v",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Reader {
    Head { layer: usize, head: usize, stream: Stream },
    Mlp { layer: usize },
    Logits,
}

/// Either side of the graph. Writers and readers live in disjoint namespaces.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum NodeId {
    Writer(Writer),
    Reader(Reader),
}

impl fmt::Display for Writer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Writer::Embed => write!(f, "embed"),
            Writer::Head { layer, head } => write!(f, "a{layer}.h{head}"),
            Writer::Mlp { layer } => write!(f, "m{layer}"),
        }
    }
}

impl fmt::Display for Reader {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Reader::Head { layer, head, stream } => write!(f, "a{layer}.h{head}.{}", stream.suffix()),
            Reader::Mlp { layer } => write!(f, "m{layer}"),
            Reader::Logits => write!(f, "logits"),
        }
    }
}

fn parse_layer_head(s: &str) -> Option<(usize, usize)> {
    let rest = s.strip_prefix('a')?;
    let (l, h) = rest.split_once(".h")?;
    Some((l.parse().ok()?, h.parse().ok()?))
}

impl FromStr for Writer {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Format(format!("bad writer name `{s}`"));
        if s == "embed" {
            return Ok(Writer::Embed);
        }
        if let Some(l) = s.strip_prefix('m') {
            return Ok(Writer::Mlp {
                layer: l.parse().map_err(|_| bad())?,
            });
        }
        let (layer, head) = parse_layer_head(s).ok_or_else(bad)?;
        Ok(Writer::Head { layer, head })
    }
}

impl FromStr for Reader {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Format(format!("bad reader name `{s}`"));
        if s == "logits" {
            return Ok(Reader::Logits);
        }
        if let Some(l) = s.strip_prefix('m') {
            return Ok(Reader::Mlp {
                layer: l.parse().map_err(|_| bad())?,
            });
        }
        let (lh, st) = s.rsplit_once('.').ok_or_else(bad)?;
        let stream = match st {
            "q" => Stream::Q,
            "k" => Stream::K,
            "v" => Stream::V,
            _ => return Err(bad()),
        };
        let (layer, head) = parse_layer_head(lh).ok_or_else(bad)?;
        Ok(Reader::Head { layer, head, stream })
    }
}

/// A directed writer → reader dependency.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Edge {
    pub src: Writer,
    pub dst: Reader,
}

impl fmt::Display for Edge {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}->{}", self.src, self.dst)
    }
}

/// Enumerated nodes and edges of one architecture.
#[derive(Debug, Clone, PartialEq)]
pub struct ComputationalGraph {
    n_layers: usize,
    n_heads: usize,
    model_hash: String,
    writers: Vec<Writer>,
    readers: Vec<Reader>,
    /// First edge index of each reader, plus a trailing total.
    reader_offsets: Vec<usize>,
    edges: Vec<Edge>,
    edge_src: Vec<usize>,
    edge_dst: Vec<usize>,
}

impl ComputationalGraph {
    pub fn new(config: &ModelConfig) -> Self {
        let (l_count, h_count) = (config.n_layers, config.n_heads);
        let mut writers = vec![Writer::Embed];
        let mut readers = Vec::new();
        for layer in 0..l_count {
            for head in 0..h_count {
                for stream in Stream::ALL {
                    readers.push(Reader::Head { layer, head, stream });
                }
            }
            readers.push(Reader::Mlp { layer });
            for head in 0..h_count {
                writers.push(Writer::Head { layer, head });
            }
            writers.push(Writer::Mlp { layer });
        }
        readers.push(Reader::Logits);

        let mut reader_offsets = Vec::with_capacity(readers.len() + 1);
        let mut edges = Vec::new();
        let mut edge_src = Vec::new();
        let mut edge_dst = Vec::new();
        for (ri, &r) in readers.iter().enumerate() {
            reader_offsets.push(edges.len());
            for (wi, &w) in writers[..Self::writers_before(h_count, r, writers.len())]
                .iter()
                .enumerate()
            {
                edges.push(Edge { src: w, dst: r });
                edge_src.push(wi);
                edge_dst.push(ri);
            }
        }
        reader_offsets.push(edges.len());
        Self {
            n_layers: l_count,
            n_heads: h_count,
            model_hash: config.hash(),
            writers,
            readers,
            reader_offsets,
            edges,
            edge_src,
            edge_dst,
        }
    }

    fn writers_before(n_heads: usize, r: Reader, n_writers: usize) -> usize {
        match r {
            Reader::Head { layer, .. } => 1 + layer * (n_heads + 1),
            Reader::Mlp { layer } => 1 + layer * (n_heads + 1) + n_heads,
            Reader::Logits => n_writers,
        }
    }

    pub fn n_layers(&self) -> usize {
        self.n_layers
    }

    pub fn n_heads(&self) -> usize {
        self.n_heads
    }

    pub fn model_hash(&self) -> &str {
        &self.model_hash
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn n_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn writers(&self) -> &[Writer] {
        &self.writers
    }

    pub fn readers(&self) -> &[Reader] {
        &self.readers
    }

    pub fn n_writers(&self) -> usize {
        self.writers.len()
    }

    /// Writer index of the source of edge `e`.
    pub fn edge_src(&self, e: usize) -> usize {
        self.edge_src[e]
    }

    /// Reader index of the destination of edge `e`.
    pub fn edge_dst(&self, e: usize) -> usize {
        self.edge_dst[e]
    }

    pub fn edge_srcs(&self) -> &[usize] {
        &self.edge_src
    }

    /// Edge index range feeding reader `r`.
    pub fn reader_edges(&self, r: usize) -> std::ops::Range<usize> {
        self.reader_offsets[r]..self.reader_offsets[r + 1]
    }

    pub fn writer_index(&self, w: Writer) -> Option<usize> {
        let h = self.n_heads;
        let idx = match w {
            Writer::Embed => 0,
            Writer::Head { layer, head } if head < h => 1 + layer * (h + 1) + head,
            Writer::Mlp { layer } => 1 + layer * (h + 1) + h,
            Writer::Head { .. } => return None,
        };
        (idx < self.writers.len() && self.writers[idx] == w).then_some(idx)
    }

    pub fn reader_index(&self, r: Reader) -> Option<usize> {
        let h = self.n_heads;
        let idx = match r {
            Reader::Head { layer, head, stream } if head < h => layer * (3 * h + 1) + 3 * head + stream.index(),
            Reader::Mlp { layer } => layer * (3 * h + 1) + 3 * h,
            Reader::Logits => self.n_layers * (3 * h + 1),
            Reader::Head { .. } => return None,
        };
        (idx < self.readers.len() && self.readers[idx] == r).then_some(idx)
    }

    pub fn edge_index(&self, e: &Edge) -> Option<usize> {
        let r = self.reader_index(e.dst)?;
        let w = self.writer_index(e.src)?;
        let range = self.reader_edges(r);
        (w < range.len()).then_some(range.start + w)
    }

    /// Position in the global topological order shared by writers and readers.
    pub fn topo_rank(&self, n: NodeId) -> usize {
        let h = self.n_heads;
        let block = 4 * h + 2;
        match n {
            NodeId::Writer(Writer::Embed) => 0,
            NodeId::Reader(Reader::Head { layer, head, stream }) => 1 + layer * block + 3 * head + stream.index(),
            NodeId::Writer(Writer::Head { layer, head }) => 1 + layer * block + 3 * h + head,
            NodeId::Reader(Reader::Mlp { layer }) => 1 + layer * block + 4 * h,
            NodeId::Writer(Writer::Mlp { layer }) => 1 + layer * block + 4 * h + 1,
            NodeId::Reader(Reader::Logits) => 1 + self.n_layers * block,
        }
    }
}

/// A kept-edge / kept-node subset of a [`ComputationalGraph`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Circuit {
    model_hash: String,
    edges: Vec<bool>,
    nodes: Vec<bool>,
}

/// On-disk circuit layout.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CircuitFile {
    pub model_config_hash: String,
    pub kept_nodes: Vec<String>,
    pub kept_edges: Vec<[String; 2]>,
    pub sparsity: f32,
}

impl Circuit {
    pub fn full(graph: &ComputationalGraph) -> Self {
        Self {
            model_hash: graph.model_hash.clone(),
            edges: vec![true; graph.n_edges()],
            nodes: vec![true; graph.n_writers()],
        }
    }

    pub fn empty(graph: &ComputationalGraph) -> Self {
        Self {
            model_hash: graph.model_hash.clone(),
            edges: vec![false; graph.n_edges()],
            nodes: vec![false; graph.n_writers()],
        }
    }

    /// Circuit from a per-edge keep mask; a node is kept iff it sources a
    /// kept edge.
    pub fn from_mask(graph: &ComputationalGraph, edges: Vec<bool>) -> Result<Self> {
        if edges.len() != graph.n_edges() {
            return Err(Error::ModelMismatch(format!(
                "edge mask has {} entries, graph has {}",
                edges.len(),
                graph.n_edges()
            )));
        }
        let mut nodes = vec![false; graph.n_writers()];
        for (e, &k) in edges.iter().enumerate() {
            if k {
                nodes[graph.edge_src(e)] = true;
            }
        }
        Ok(Self {
            model_hash: graph.model_hash.clone(),
            edges,
            nodes,
        })
    }

    pub fn from_masks(graph: &ComputationalGraph, edges: Vec<bool>, nodes: Vec<bool>) -> Result<Self> {
        if edges.len() != graph.n_edges() || nodes.len() != graph.n_writers() {
            return Err(Error::ModelMismatch("mask lengths do not match graph".into()));
        }
        Ok(Self {
            model_hash: graph.model_hash.clone(),
            edges,
            nodes,
        })
    }

    pub fn from_edges(graph: &ComputationalGraph, kept: &[Edge]) -> Result<Self> {
        let mut mask = vec![false; graph.n_edges()];
        for e in kept {
            let i = graph
                .edge_index(e)
                .ok_or_else(|| Error::ModelMismatch(format!("edge {e} not in graph")))?;
            mask[i] = true;
        }
        Self::from_mask(graph, mask)
    }

    pub fn model_hash(&self) -> &str {
        &self.model_hash
    }

    pub fn edge_mask(&self) -> &[bool] {
        &self.edges
    }

    pub fn node_mask(&self) -> &[bool] {
        &self.nodes
    }

    pub fn contains(&self, edge_index: usize) -> bool {
        self.edges[edge_index]
    }

    pub fn n_kept(&self) -> usize {
        self.edges.iter().filter(|&&k| k).count()
    }

    pub fn n_edges_total(&self) -> usize {
        self.edges.len()
    }

    pub fn kept_edge_indices(&self) -> Vec<usize> {
        (0..self.edges.len()).filter(|&i| self.edges[i]).collect()
    }

    pub fn kept_edges(&self, graph: &ComputationalGraph) -> Vec<Edge> {
        self.kept_edge_indices().into_iter().map(|i| graph.edges()[i]).collect()
    }

    /// `1 − |kept| / |E|`.
    pub fn sparsity(&self) -> f32 {
        if self.edges.is_empty() {
            return 0.0;
        }
        1.0 - self.n_kept() as f32 / self.edges.len() as f32
    }

    /// Edge removed, nodes untouched.
    pub fn without_edge(&self, e: usize) -> Self {
        let mut c = self.clone();
        c.edges[e] = false;
        c
    }

    pub fn check(&self, graph: &ComputationalGraph) -> Result<()> {
        if self.model_hash != graph.model_hash || self.edges.len() != graph.n_edges() {
            return Err(Error::ModelMismatch(format!(
                "circuit for model {} used with model {}",
                self.model_hash, graph.model_hash
            )));
        }
        Ok(())
    }

    /// Intersection with overlap statistics.
    ///
    /// Returns the common circuit, `|a∩b| / min(|a|,|b|)` and
    /// `|a∩b| / (|a||b|/|E|)`, the intersection size relative to two
    /// independent random circuits of the same sizes.
    pub fn intersection(&self, other: &Circuit) -> Result<(Circuit, f32, f32)> {
        if self.model_hash != other.model_hash || self.edges.len() != other.edges.len() {
            return Err(Error::ModelMismatch(
                "cannot intersect circuits of different models".into(),
            ));
        }
        let edges: Vec<bool> = self.edges.iter().zip(&other.edges).map(|(&a, &b)| a && b).collect();
        let nodes = self.nodes.iter().zip(&other.nodes).map(|(&a, &b)| a && b).collect();
        let inter = edges.iter().filter(|&&k| k).count() as f32;
        let (na, nb) = (self.n_kept() as f32, other.n_kept() as f32);
        let total = self.edges.len() as f32;
        let overlap = if na.min(nb) > 0.0 { inter / na.min(nb) } else { 0.0 };
        let expected = na * nb / total;
        let chance = if expected > 0.0 { inter / expected } else { 0.0 };
        Ok((
            Circuit {
                model_hash: self.model_hash.clone(),
                edges,
                nodes,
            },
            overlap,
            chance,
        ))
    }

    pub fn to_file(&self, graph: &ComputationalGraph) -> CircuitFile {
        CircuitFile {
            model_config_hash: self.model_hash.clone(),
            kept_nodes: graph
                .writers()
                .iter()
                .zip(&self.nodes)
                .filter(|(_, &k)| k)
                .map(|(w, _)| w.to_string())
                .collect(),
            kept_edges: self
                .kept_edges(graph)
                .iter()
                .map(|e| [e.src.to_string(), e.dst.to_string()])
                .collect(),
            sparsity: self.sparsity(),
        }
    }

    pub fn from_file(graph: &ComputationalGraph, file: &CircuitFile) -> Result<Self> {
        if file.model_config_hash != graph.model_hash {
            return Err(Error::ModelMismatch(format!(
                "circuit file is for model {}, expected {}",
                file.model_config_hash, graph.model_hash
            )));
        }
        let mut edges = vec![false; graph.n_edges()];
        for [s, d] in &file.kept_edges {
            let e = Edge {
                src: s.parse()?,
                dst: d.parse()?,
            };
            let i = graph
                .edge_index(&e)
                .ok_or_else(|| Error::Format(format!("edge {e} not in graph")))?;
            edges[i] = true;
        }
        let mut nodes = vec![false; graph.n_writers()];
        for n in &file.kept_nodes {
            let w: Writer = n.parse()?;
            let i = graph
                .writer_index(w)
                .ok_or_else(|| Error::Format(format!("node {n} not in graph")))?;
            nodes[i] = true;
        }
        Self::from_masks(graph, edges, nodes)
    }

    pub fn to_json(&self, graph: &ComputationalGraph) -> String {
        serde_json::to_string_pretty(&self.to_file(graph)).expect("circuit serializes")
    }

    pub fn from_json(graph: &ComputationalGraph, json: &str) -> Result<Self> {
        let file: CircuitFile = serde_json::from_str(json)?;
        Self::from_file(graph, &file)
    }
}
