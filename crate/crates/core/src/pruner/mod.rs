// SPDX-License-Identifier: MIT OR Apache-2.0

//! Edge Pruning: learn hard-concrete masks over the edges of a frozen model
//! so that the masked model matches the full model under a scheduled
//! sparsity constraint, then round the masks to a circuit.
//!
//! Per step the loss is
//!
//! ```text
//! L = D(full ‖ masked) + λ1 (t − s) + λ2 (t − s)²   [+ node term]
//! ```
//!
//! minimized over the log alphas and maximized over the multipliers.

mod config;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{adam_step, AdamConfig, AdamState, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::masks::{discretize, effective_on, gates_on, MaskParams};
use crate::model::{Circuit, ComputationalGraph, DisentangledTransformer, EdgeMask};
use crate::tasks::ExamplePair;

pub use config::{target_schedule, KlPositions, PruneConfig, PruneLoss, SparsityEstimate};

/// `s = 1 − mean(z)`.
pub fn sparsity(z: &[f32]) -> Result<f32> {
    if z.is_empty() {
        return Err(Error::Input("sparsity of an empty gate set".into()));
    }
    Ok(1.0 - (z.iter().map(|&v| f64::from(v)).sum::<f64>() / z.len() as f64) as f32)
}

/// `λ1 (t − s) + λ2 (t − s)²`.
pub fn lagrangian_penalty(s: f32, t: f32, lambda1: f32, lambda2: f32) -> f32 {
    let d = t - s;
    lambda1 * d + lambda2 * d * d
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LagrangianState {
    pub lambda1_edge: f32,
    pub lambda2_edge: f32,
    pub lambda1_node: f32,
    pub lambda2_node: f32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneRecord {
    pub step: usize,
    pub loss: f64,
    pub edge_sparsity: f32,
    pub node_sparsity: f32,
    pub target_edge: f32,
    pub target_node: f32,
    pub lambda1_edge: f32,
    pub lambda2_edge: f32,
    pub lambda1_node: f32,
    pub lambda2_node: f32,
}

/// One record per optimization step.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct PruneLog {
    pub records: Vec<PruneRecord>,
}

impl PruneLog {
    pub const CSV_HEADER: &'static str = "step,loss,edge_sparsity,node_sparsity,target_edge,target_node,lambda1_edge,lambda2_edge,lambda1_node,lambda2_node";

    pub fn to_csv(&self) -> String {
        let mut out = String::from(Self::CSV_HEADER);
        out.push('\n');
        for r in &self.records {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{}",
                r.step,
                r.loss,
                r.edge_sparsity,
                r.node_sparsity,
                r.target_edge,
                r.target_node,
                r.lambda1_edge,
                r.lambda2_edge,
                r.lambda1_node,
                r.lambda2_node
            );
        }
        out
    }

    pub fn last(&self) -> Option<&PruneRecord> {
        self.records.last()
    }
}

pub const CHECKPOINT_FORMAT: &str = "edgeprune-masks";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneCheckpoint {
    pub format: String,
    pub model_config_hash: String,
    pub config: PruneConfig,
    pub step: usize,
    pub lagrangian: LagrangianState,
    pub params: MaskParams,
}

impl PruneCheckpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let c: Self = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        if c.format != CHECKPOINT_FORMAT {
            return Err(Error::Format(format!("not a mask checkpoint: `{}`", c.format)));
        }
        Ok(c)
    }
}

#[derive(Debug, Clone)]
pub struct PruneOutcome {
    pub params: MaskParams,
    pub circuit: Circuit,
    /// Threshold applied to the effective gates by discretization.
    pub threshold: f32,
    pub target_density: f32,
    pub lagrangian: LagrangianState,
    pub log: PruneLog,
}

/// Runs Edge Pruning on `pairs` without writing checkpoints.
pub fn prune(model: &DisentangledTransformer, pairs: &[ExamplePair], cfg: &PruneConfig) -> Result<PruneOutcome> {
    prune_with_checkpoints(model, pairs, cfg, None)
}

/// Shape-checked batch of examples.
struct Batch {
    clean: Vec<Vec<u32>>,
    corrupted: Vec<Vec<u32>>,
    positions: Vec<usize>,
}

/// Splits a batch into runs of equal sequence length, in first-seen order.
fn by_length<'a>(pairs: &[&'a ExamplePair]) -> Vec<Vec<&'a ExamplePair>> {
    let mut groups: Vec<Vec<&ExamplePair>> = Vec::new();
    for &p in pairs {
        match groups
            .iter_mut()
            .find(|g| g[0].clean_tokens.len() == p.clean_tokens.len())
        {
            Some(g) => g.push(p),
            None => groups.push(vec![p]),
        }
    }
    groups
}

fn make_batch(pairs: &[&ExamplePair]) -> Result<Batch> {
    let len = pairs[0].clean_tokens.len();
    if pairs.iter().any(|p| p.clean_tokens.len() != len) {
        return Err(Error::Dataset("examples in a batch differ in length".into()));
    }
    Ok(Batch {
        clean: pairs.iter().map(|p| p.clean_tokens.clone()).collect(),
        corrupted: pairs.iter().map(|p| p.corrupted_tokens.clone()).collect(),
        positions: pairs.iter().map(|p| p.answer_position).collect(),
    })
}

/// Output rows `(R, V)` compared by the loss, selected from `(B, S, V)` logits.
fn loss_rows(tape: &mut Tape<f32>, logits: Var, batch: &Batch, positions: KlPositions) -> Result<Var> {
    let shape = tape.shape(logits).to_vec();
    let (b, s, v) = (shape[0], shape[1], shape[2]);
    let flat = tape.reshape(logits, &[b * s, v])?;
    match positions {
        KlPositions::All => Ok(flat),
        KlPositions::Answer => {
            let rows: Vec<usize> = batch.positions.iter().enumerate().map(|(i, &p)| i * s + p).collect();
            tape.gather_rows(flat, &rows)
        }
    }
}

fn select_rows(logits: &Tensor, batch: &Batch, positions: KlPositions) -> Vec<f32> {
    let (s, v) = (logits.shape()[1], logits.shape()[2]);
    match positions {
        KlPositions::All => logits.data().to_vec(),
        KlPositions::Answer => batch
            .positions
            .iter()
            .enumerate()
            .flat_map(|(i, &p)| logits.data()[(i * s + p) * v..(i * s + p + 1) * v].iter().copied())
            .collect(),
    }
}

/// Divergence of the masked outputs `rows` from the full-model outputs.
fn divergence(tape: &mut Tape<f32>, rows: Var, full: &[f32], v: usize, loss: PruneLoss) -> Result<Var> {
    let r = full.len() / v;
    match loss {
        PruneLoss::Kl => {
            let mut p = Vec::with_capacity(full.len());
            let mut neg_entropy = 0.0f64;
            for row in full.chunks(v) {
                let lp = crate::metrics::log_softmax(row);
                neg_entropy += lp.iter().map(|&l| l.exp() * l).sum::<f64>();
                p.extend(lp.iter().map(|&l| l.exp() as f32));
            }
            let lq = tape.log_softmax(rows)?;
            let pc = tape.constant(Tensor::new(vec![r, v], p)?);
            let cross = tape.mul(pc, lq)?;
            let cross = tape.sum(cross);
            Ok(tape.affine(cross, -1.0 / r as f32, (neg_entropy / r as f64) as f32))
        }
        PruneLoss::Mse => {
            let target = tape.constant(Tensor::new(vec![r, v], full.to_vec())?);
            let d = tape.sub(rows, target)?;
            let sq = tape.mul(d, d)?;
            let total = tape.sum(sq);
            Ok(tape.scale(total, 1.0 / r as f32))
        }
    }
}

/// `λ1 (t − s) + λ2 (t − s)²` on the tape; `s_var` is a scalar.
fn penalty_on(tape: &mut Tape<f32>, s_var: Var, t: f32, l1: Var, l2: Var) -> Result<Var> {
    let d = tape.affine(s_var, -1.0, t);
    let a = tape.mul(l1, d)?;
    let d2 = tape.mul(d, d)?;
    let b = tape.mul(l2, d2)?;
    tape.add(a, b)
}

fn noise(cfg: &PruneConfig, n: usize, rng: &mut ChaCha8Rng) -> Vec<f32> {
    (0..n)
        .map(|_| cfg.hard_concrete.noise(cfg.hard_concrete.draw_u(rng)))
        .collect()
}

/// Edge Pruning with optional checkpoints every `cfg.checkpoint_every`
/// steps, written as `masks_step{N}.json` under `checkpoint_dir`.
pub fn prune_with_checkpoints(
    model: &DisentangledTransformer,
    pairs: &[ExamplePair],
    cfg: &PruneConfig,
    checkpoint_dir: Option<&Path>,
) -> Result<PruneOutcome> {
    cfg.validate()?;
    if pairs.is_empty() {
        return Err(Error::Dataset("pruning needs at least one example".into()));
    }
    pairs.iter().try_for_each(ExamplePair::check)?;
    let graph: ComputationalGraph = model.graph();
    let hc = cfg.hard_concrete;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = MaskParams::init(&graph, &hc);
    let mut edge_la = Tensor::from_vec(params.edge_log_alpha.clone());
    let mut node_la = Tensor::from_vec(params.node_log_alpha.clone());
    let mut lam1 = Tensor::from_vec(vec![0.0f32; 2]);
    let mut lam2 = Tensor::from_vec(vec![0.0f32; 2]);
    let (mut st_alpha, mut st_l1, mut st_l2) = (AdamState::new(), AdamState::new(), AdamState::new());
    let adam_alpha = AdamConfig::with_lr(cfg.lr_log_alpha);
    let adam_lambda = AdamConfig::with_lr(cfg.lr_lambda);
    let mut log = PruneLog::default();
    let mut last_checkpoint: Option<PathBuf> = None;

    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0usize;
    let batch_size = cfg.batch_size.min(pairs.len());

    for step in 0..cfg.steps {
        // Sampling without replacement within an epoch.
        if cursor + batch_size > order.len() {
            order = (0..pairs.len()).collect();
            order.shuffle(&mut rng);
            cursor = 0;
        }
        let chosen: Vec<&ExamplePair> = order[cursor..cursor + batch_size].iter().map(|&i| &pairs[i]).collect();
        cursor += batch_size;
        let groups = by_length(&chosen);

        let mut tape = Tape::<f32>::new();
        let w = model.bind(&mut tape, false);
        let la_e = tape.param(edge_la.clone());
        let la_n = tape.param(node_la.clone());
        let l1 = tape.param(lam1.clone());
        let l2 = tape.param(lam2.clone());
        let ne = noise(cfg, graph.n_edges(), &mut rng);
        let nn = noise(cfg, graph.n_writers(), &mut rng);
        let z_e = gates_on(&mut tape, la_e, Some(&ne), &hc)?;
        let z_n = gates_on(&mut tape, la_n, Some(&nn), &hc)?;
        let eff = effective_on(&mut tape, &graph, z_e, z_n)?;

        // Same mask sample for every length group; the divergence is the
        // mean over all compared rows.
        let mut parts = Vec::with_capacity(groups.len());
        for group in &groups {
            let batch = make_batch(group)?;
            let (full_logits, _) = model.forward(&batch.clean)?;
            let full_rows = select_rows(&full_logits, &batch, cfg.kl_positions);
            let ablated = model.ablation_cache(&batch.clean, &batch.corrupted, cfg.ablation_mode)?;
            let pass =
                model.forward_disentangled_on(&mut tape, &w, &graph, &batch.clean, &ablated, EdgeMask::Soft(eff))?;
            let rows = loss_rows(&mut tape, pass.logits, &batch, cfg.kl_positions)?;
            let n_rows = full_rows.len() / model.config.vocab_size;
            parts.push((
                divergence(&mut tape, rows, &full_rows, model.config.vocab_size, cfg.loss)?,
                n_rows,
            ));
        }
        let total_rows: usize = parts.iter().map(|p| p.1).sum();
        let mut div = tape.scale(parts[0].0, parts[0].1 as f32 / total_rows as f32);
        for &(d, n) in &parts[1..] {
            let d = tape.scale(d, n as f32 / total_rows as f32);
            div = tape.add(div, d)?;
        }

        let (eff_s, node_s) = match cfg.sparsity_estimate {
            SparsityEstimate::Sampled => (eff, z_n),
            SparsityEstimate::Deterministic => {
                let ze = gates_on(&mut tape, la_e, None, &hc)?;
                let zn = gates_on(&mut tape, la_n, None, &hc)?;
                (effective_on(&mut tape, &graph, ze, zn)?, zn)
            }
        };
        let mean_e = tape.mean(eff_s);
        let s_edge = tape.affine(mean_e, -1.0, 1.0);
        let mean_n = tape.mean(node_s);
        let s_node = tape.affine(mean_n, -1.0, 1.0);
        let t_edge = cfg.target_at(step, cfg.target_edge_sparsity);
        let t_node = cfg.target_at(step, cfg.target_node_sparsity);
        let l1e = tape.slice(l1, 0, 0, 1)?;
        let l2e = tape.slice(l2, 0, 0, 1)?;
        let mut total = div;
        let pen_e = penalty_on(&mut tape, s_edge, t_edge, l1e, l2e)?;
        let pen_e = tape.reshape(pen_e, &[])?;
        total = tape.add(total, pen_e)?;
        if cfg.use_node_lagrangian {
            let l1n = tape.slice(l1, 0, 1, 2)?;
            let l2n = tape.slice(l2, 0, 1, 2)?;
            let pen_n = penalty_on(&mut tape, s_node, t_node, l1n, l2n)?;
            let pen_n = tape.reshape(pen_n, &[])?;
            total = tape.add(total, pen_n)?;
        }

        let div_value = f64::from(tape.value(div).item());
        if !div_value.is_finite() || !tape.value(total).item().is_finite() {
            return Err(Error::Diverged { step, last_checkpoint });
        }
        log.records.push(PruneRecord {
            step,
            loss: div_value.max(0.0),
            edge_sparsity: tape.value(s_edge).item(),
            node_sparsity: tape.value(s_node).item(),
            target_edge: t_edge,
            target_node: t_node,
            lambda1_edge: lam1.data()[0],
            lambda2_edge: lam2.data()[0],
            lambda1_node: lam1.data()[1],
            lambda2_node: lam2.data()[1],
        });

        tape.backward(total)?;
        for (t, v) in [
            (&mut edge_la, la_e),
            (&mut node_la, la_n),
            (&mut lam1, l1),
            (&mut lam2, l2),
        ] {
            t.zero_grad();
            tape.accumulate_into(v, t)?;
        }
        let warm = if cfg.lr_warmup_steps == 0 {
            1.0
        } else {
            ((step + 1) as f32 / cfg.lr_warmup_steps as f32).min(1.0)
        };
        adam_step(
            &mut [&mut edge_la, &mut node_la],
            &adam_alpha,
            &mut st_alpha,
            warm,
            false,
        )?;
        if !cfg.fix_lambda1 {
            adam_step(&mut [&mut lam1], &adam_lambda, &mut st_l1, 1.0, true)?;
        }
        adam_step(&mut [&mut lam2], &adam_lambda, &mut st_l2, 1.0, true)?;

        if cfg.checkpoint_every > 0 && (step + 1) % cfg.checkpoint_every == 0 {
            if let Some(dir) = checkpoint_dir {
                params.edge_log_alpha = edge_la.data().to_vec();
                params.node_log_alpha = node_la.data().to_vec();
                let path = dir.join(format!("masks_step{}.json", step + 1));
                checkpoint(cfg, &graph, step + 1, &lam1, &lam2, &params).save(&path)?;
                last_checkpoint = Some(path);
            }
        }
    }

    params.edge_log_alpha = edge_la.into_data();
    params.node_log_alpha = node_la.into_data();
    if !params
        .edge_log_alpha
        .iter()
        .chain(&params.node_log_alpha)
        .all(|v| v.is_finite())
    {
        return Err(Error::Diverged {
            step: cfg.steps,
            last_checkpoint,
        });
    }
    let lagrangian = lambda_state(&lam1, &lam2);
    if let Some(dir) = checkpoint_dir {
        checkpoint(cfg, &graph, cfg.steps, &lam1, &lam2, &params).save(&dir.join("masks_final.json"))?;
    }
    let d = discretize(&params, &graph, &hc, &cfg.discretize)?;
    Ok(PruneOutcome {
        params,
        circuit: d.circuit,
        threshold: d.threshold,
        target_density: d.target_density,
        lagrangian,
        log,
    })
}

fn lambda_state(l1: &Tensor, l2: &Tensor) -> LagrangianState {
    LagrangianState {
        lambda1_edge: l1.data()[0],
        lambda2_edge: l2.data()[0],
        lambda1_node: l1.data()[1],
        lambda2_node: l2.data()[1],
    }
}

fn checkpoint(
    cfg: &PruneConfig,
    graph: &ComputationalGraph,
    step: usize,
    l1: &Tensor,
    l2: &Tensor,
    params: &MaskParams,
) -> PruneCheckpoint {
    PruneCheckpoint {
        format: CHECKPOINT_FORMAT.to_string(),
        model_config_hash: graph.model_hash().to_string(),
        config: cfg.clone(),
        step,
        lagrangian: lambda_state(l1, l2),
        params: params.clone(),
    }
}
