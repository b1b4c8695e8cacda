// SPDX-License-Identifier: MIT OR Apache-2.0

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::masks::{DiscretizeOptions, HardConcreteConfig};
use crate::model::AblationMode;

/// Sequence positions at which the training KL is measured.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KlPositions {
    #[default]
    All,
    /// Only each example's answer position.
    Answer,
}

/// Divergence between full-model and masked-model outputs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PruneLoss {
    /// KL(full ‖ masked) of the next-token distributions.
    #[default]
    Kl,
    /// Mean squared error between raw outputs, for models whose output
    /// is a number rather than a distribution.
    Mse,
}

/// Which gate values the sparsity `s` in the Lagrangian is computed from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SparsityEstimate {
    /// The gates sampled this step.
    #[default]
    Sampled,
    /// Noise-free gates.
    Deterministic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PruneConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr_log_alpha: f32,
    pub lr_lambda: f32,
    pub target_edge_sparsity: f32,
    pub target_node_sparsity: f32,
    pub sparsity_warmup_steps: usize,
    pub lr_warmup_steps: usize,
    pub use_node_lagrangian: bool,
    /// Keep the linear multipliers at zero.
    pub fix_lambda1: bool,
    /// 0 disables checkpointing.
    pub checkpoint_every: usize,
    pub seed: u64,
    pub ablation_mode: AblationMode,
    pub kl_positions: KlPositions,
    pub loss: PruneLoss,
    pub sparsity_estimate: SparsityEstimate,
    pub hard_concrete: HardConcreteConfig,
    pub discretize: DiscretizeOptions,
}

impl Default for PruneConfig {
    fn default() -> Self {
        Self {
            steps: 500,
            batch_size: 32,
            lr_log_alpha: 0.1,
            lr_lambda: 0.1,
            target_edge_sparsity: 0.9,
            target_node_sparsity: 0.0,
            sparsity_warmup_steps: 300,
            lr_warmup_steps: 0,
            use_node_lagrangian: false,
            fix_lambda1: false,
            checkpoint_every: 0,
            seed: 0,
            ablation_mode: AblationMode::Interchange,
            kl_positions: KlPositions::All,
            loss: PruneLoss::Kl,
            sparsity_estimate: SparsityEstimate::Sampled,
            hard_concrete: HardConcreteConfig::default(),
            discretize: DiscretizeOptions::default(),
        }
    }
}

impl PruneConfig {
    /// Settings used for GPT-2 Small in the original experiments.
    pub fn gpt2() -> Self {
        Self {
            steps: 3000,
            sparsity_warmup_steps: 2500,
            batch_size: 32,
            lr_log_alpha: 0.8,
            lr_lambda: 0.8,
            use_node_lagrangian: true,
            ..Self::default()
        }
    }

    /// Compiled-model recovery: zero ablation, no linear multiplier,
    /// threshold chosen from edge gates only. The target sits above 1 so
    /// the penalty never stops pushing; the small multiplier rate keeps it
    /// weaker than the fit term on edges that matter.
    pub fn compiled() -> Self {
        Self {
            steps: 1500,
            batch_size: 32,
            lr_log_alpha: 0.05,
            lr_lambda: 1e-4,
            target_edge_sparsity: 1.05,
            sparsity_warmup_steps: 750,
            lr_warmup_steps: 50,
            fix_lambda1: true,
            ablation_mode: AblationMode::Zero,
            discretize: DiscretizeOptions {
                pool: crate::masks::DensityPool::EdgesOnly,
                ..DiscretizeOptions::default()
            },
            ..Self::default()
        }
    }

    /// Toy IOI: answer-position KL, interchange ablation, threshold chosen
    /// from edge gates only.
    pub fn toy_ioi() -> Self {
        Self {
            steps: 1000,
            batch_size: 32,
            lr_log_alpha: 0.1,
            lr_lambda: 0.1,
            target_edge_sparsity: 0.9,
            sparsity_warmup_steps: 500,
            kl_positions: KlPositions::Answer,
            discretize: DiscretizeOptions {
                pool: crate::masks::DensityPool::EdgesOnly,
                ..DiscretizeOptions::default()
            },
            ..Self::default()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "default" => Ok(Self::default()),
            "gpt2" => Ok(Self::gpt2()),
            "compiled" | "tracr" => Ok(Self::compiled()),
            "toy-ioi" => Ok(Self::toy_ioi()),
            _ => Err(Error::Config(format!("unknown preset `{name}`"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.hard_concrete.validate()?;
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.steps == 0 || self.batch_size == 0 {
            return bad("steps and batch size must be positive");
        }
        if self.sparsity_warmup_steps > self.steps || self.lr_warmup_steps > self.steps {
            return bad("warmup cannot exceed the number of steps");
        }
        let finite = [
            self.lr_log_alpha,
            self.lr_lambda,
            self.target_edge_sparsity,
            self.target_node_sparsity,
        ];
        if finite.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return bad("learning rates and targets must be finite and non-negative");
        }
        Ok(())
    }

    /// Target sparsity at `step`: linear ramp from 0 over the warmup.
    pub fn target_at(&self, step: usize, target: f32) -> f32 {
        target_schedule(step, target, self.sparsity_warmup_steps)
    }
}

/// `t_final · min(1, step / warmup)`; no warmup means the final target
/// from the start.
pub fn target_schedule(step: usize, t_final: f32, warmup: usize) -> f32 {
    if warmup == 0 {
        t_final
    } else {
        t_final * (step as f32 / warmup as f32).min(1.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_examples() {
        assert_eq!(target_schedule(0, 0.9, 100), 0.0);
        assert_eq!(target_schedule(100, 0.9, 100), 0.9);
        assert!((target_schedule(50, 0.9, 100) - 0.45).abs() < 1e-7);
        assert_eq!(target_schedule(400, 0.9, 100), 0.9);
        assert_eq!(target_schedule(0, 0.9, 0), 0.9);
    }

    #[test]
    fn gpt2_preset_values() {
        let c = PruneConfig::gpt2();
        assert_eq!((c.steps, c.sparsity_warmup_steps, c.batch_size), (3000, 2500, 32));
        assert_eq!(c.lr_log_alpha, 0.8);
        c.validate().unwrap();
    }

    #[test]
    fn validation_rejects_long_warmup() {
        let c = PruneConfig {
            sparsity_warmup_steps: 10,
            steps: 5,
            ..PruneConfig::default()
        };
        assert!(c.validate().is_err());
        assert!(PruneConfig::preset("nope").is_err());
    }
}
