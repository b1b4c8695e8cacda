// SPDX-License-Identifier: MIT OR Apache-2.0

//! Training a small transformer on a task so there is a competent model to
//! prune.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{adam_step, AdamConfig, AdamState, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::metrics::argmax;
use crate::model::{DisentangledTransformer, ModelConfig};
use crate::tasks::{ExamplePair, TaskData, TaskKind};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub max_steps: usize,
    pub min_steps: usize,
    pub batch_size: usize,
    pub lr: f32,
    pub lr_warmup_steps: usize,
    pub eval_every: usize,
    /// Validation accuracy at which training stops.
    pub accuracy_bar: f32,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            max_steps: 5000,
            min_steps: 0,
            batch_size: 32,
            lr: 3e-3,
            lr_warmup_steps: 100,
            eval_every: 100,
            accuracy_bar: 0.95,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub steps: usize,
    pub validation_accuracy: f32,
    /// Training loss per step.
    pub losses: Vec<f32>,
}

/// Fraction of `pairs` the model answers correctly at the answer position.
///
/// Greater-than counts a prediction as correct when the argmax over the
/// hundred two-digit tokens is later than the start year.
pub fn task_accuracy(model: &DisentangledTransformer, data: &TaskData, pairs: &[ExamplePair]) -> Result<f32> {
    if pairs.is_empty() {
        return Err(Error::Dataset("no examples".into()));
    }
    let year_ids = if data.kind == TaskKind::GreaterThan {
        Some(data.vocab.year_ids()?)
    } else {
        None
    };
    let mut correct = 0usize;
    for chunk in pairs.chunks(64) {
        let tokens: Vec<Vec<u32>> = chunk.iter().map(|p| p.clean_tokens.clone()).collect();
        let logits = model.logits(&tokens)?;
        let (s, v) = (logits.shape()[1], logits.shape()[2]);
        for (b, p) in chunk.iter().enumerate() {
            let off = (b * s + p.answer_position) * v;
            let row = &logits.data()[off..off + v];
            correct += usize::from(match &year_ids {
                Some(ids) => {
                    let sub: Vec<f32> = ids.iter().map(|&i| row[i as usize]).collect();
                    argmax(&sub) > p.year.unwrap_or(99)
                }
                None => argmax(row) == p.answer_id,
            });
        }
    }
    Ok(correct as f32 / pairs.len() as f32)
}

/// Target distribution over the vocabulary for one example.
fn target_row(data: &TaskData, p: &ExamplePair, year_ids: Option<&[u32]>, out: &mut [f32]) {
    match (year_ids, p.year) {
        (Some(ids), Some(yy)) => {
            let valid = &ids[yy as usize + 1..];
            let w = 1.0 / valid.len() as f32;
            for &i in valid {
                out[i as usize] = w;
            }
        }
        _ => out[p.answer_id as usize] = 1.0,
    }
    debug_assert!(data.vocab.len() == out.len());
}

/// Log-softmax of the logits at `position` for every batch row, `(B, V)`.
pub(crate) fn answer_log_probs(tape: &mut Tape<f32>, logits: Var, position: usize) -> Result<Var> {
    let shape = tape.shape(logits).to_vec();
    let at = tape.slice(logits, 1, position, position + 1)?;
    let at = tape.reshape(at, &[shape[0], shape[2]])?;
    tape.log_softmax(at)
}

/// Trains a fresh model by cross-entropy at the answer position.
///
/// Batches are drawn from the task's product space, skipping every
/// combination in the validation and test splits. Training stops once
/// validation accuracy reaches the bar (and `min_steps` have run).
pub fn train_toy_lm(
    data: &TaskData,
    model_cfg: ModelConfig,
    cfg: &TrainConfig,
) -> Result<(DisentangledTransformer, TrainReport)> {
    if model_cfg.vocab_size != data.vocab.len() {
        return Err(Error::Config(format!(
            "model vocabulary {} does not match task vocabulary {}",
            model_cfg.vocab_size,
            data.vocab.len()
        )));
    }
    if cfg.batch_size == 0 || cfg.eval_every == 0 {
        return Err(Error::Config("batch size and eval interval must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = DisentangledTransformer::random(model_cfg, rng.random())?;
    let held_out = data.held_out();
    let combos = data.spec.combo_count();
    if combos <= held_out.len() {
        return Err(Error::Dataset("no combinations left for training".into()));
    }
    let year_ids = if data.kind == TaskKind::GreaterThan {
        Some(data.vocab.year_ids()?)
    } else {
        None
    };
    let adam = AdamConfig::with_lr(cfg.lr);
    let mut state = AdamState::new();
    let mut losses = Vec::new();
    let mut best = 0.0f32;
    let v = data.vocab.len();

    for step in 1..=cfg.max_steps {
        let mut batch = Vec::with_capacity(cfg.batch_size);
        while batch.len() < cfg.batch_size {
            let idx = rng.random_range(0..combos);
            let p = data.spec.example(&data.vocab, idx, &mut rng)?;
            if !held_out.contains(&p.clean_tokens) {
                batch.push(p);
            }
        }
        let pos = batch[0].answer_position;
        if batch.iter().any(|p| p.answer_position != pos) {
            return Err(Error::Dataset("answer positions differ within a batch".into()));
        }
        let tokens: Vec<Vec<u32>> = batch.iter().map(|p| p.clean_tokens.clone()).collect();
        let mut target = vec![0.0f32; batch.len() * v];
        for (b, p) in batch.iter().enumerate() {
            target_row(data, p, year_ids.as_deref(), &mut target[b * v..(b + 1) * v]);
        }

        let mut tape = Tape::<f32>::new();
        let w = model.bind(&mut tape, true);
        let (logits, _) = model.forward_standard_on(&mut tape, &w, &tokens)?;
        let lp = answer_log_probs(&mut tape, logits, pos)?;
        let t = tape.constant(Tensor::new(vec![batch.len(), v], target)?);
        let prod = tape.mul(lp, t)?;
        let total = tape.sum(prod);
        let loss = tape.scale(total, -1.0 / batch.len() as f32);
        let loss_value = tape.value(loss).item();
        if !loss_value.is_finite() {
            return Err(Error::Diverged {
                step,
                last_checkpoint: None,
            });
        }
        losses.push(loss_value);
        tape.backward(loss)?;

        let mut params = model.tensors_mut();
        for (p, &var) in params.iter_mut().zip(&w.all) {
            p.zero_grad();
            tape.accumulate_into(var, p)?;
        }
        let warm = if cfg.lr_warmup_steps == 0 {
            1.0
        } else {
            (step as f32 / cfg.lr_warmup_steps as f32).min(1.0)
        };
        adam_step(&mut params, &adam, &mut state, warm, false)?;
        params.iter_mut().for_each(|p| p.zero_grad());

        if step % cfg.eval_every == 0 || step == cfg.max_steps {
            let acc = task_accuracy(&model, data, &data.validation)?;
            best = best.max(acc);
            if acc >= cfg.accuracy_bar && step >= cfg.min_steps {
                return Ok((
                    model,
                    TrainReport {
                        steps: step,
                        validation_accuracy: acc,
                        losses,
                    },
                ));
            }
        }
    }
    Err(Error::TrainingBar {
        best_accuracy: best,
        bar: cfg.accuracy_bar,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tasks::{gen_boolean, Splits};

    #[test]
    fn loss_is_finite_and_falls_early() {
        let data = gen_boolean(
            Splits {
                train: 20,
                validation: 20,
                test: 20,
            },
            0,
        )
        .unwrap();
        let cfg = ModelConfig::toy(1, 2, 16, data.vocab.len(), 12);
        let tc = TrainConfig {
            max_steps: 100,
            accuracy_bar: 2.0,
            eval_every: 100,
            ..TrainConfig::default()
        };
        let err = train_toy_lm(&data, cfg.clone(), &tc).unwrap_err();
        assert!(matches!(err, Error::TrainingBar { bar, .. } if bar == 2.0));
        let (_, rep) = train_toy_lm(
            &data,
            cfg,
            &TrainConfig {
                accuracy_bar: 0.0,
                ..tc
            },
        )
        .unwrap();
        let mean = |xs: &[f32]| xs.iter().sum::<f32>() / xs.len() as f32;
        assert!(rep.losses.iter().all(|l| l.is_finite()));
        assert!(mean(&rep.losses[80..]) < mean(&rep.losses[..20]));
    }

    #[test]
    fn reports_losses_when_bar_is_met() {
        let data = gen_boolean(
            Splits {
                train: 20,
                validation: 20,
                test: 20,
            },
            0,
        )
        .unwrap();
        let cfg = ModelConfig::toy(1, 2, 16, data.vocab.len(), 12);
        let tc = TrainConfig {
            max_steps: 100,
            accuracy_bar: 0.0,
            eval_every: 10,
            ..TrainConfig::default()
        };
        let (m, rep) = train_toy_lm(&data, cfg, &tc).unwrap();
        assert_eq!(rep.steps, 10);
        assert_eq!(rep.losses.len(), 10);
        assert!(rep.losses.iter().all(|l| l.is_finite()));
        assert!(m.tensors().iter().all(|(_, t)| t.grad().is_none()));
    }
}
