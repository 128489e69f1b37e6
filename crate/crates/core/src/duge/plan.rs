use serde::{Deserialize, Serialize};

use crate::condition::Condition;
use crate::error::{CoreError, Result};

/// Shape of the λ_1 / λ_2 ramp over one step's iterations.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scheduler {
    /// λ_1 = 1 − i/(N−1), λ_2 = i/(N−1).
    Linear,
    /// λ_1 = (1 + cos(π·i/(N−1)))/2, λ_2 = 1 − λ_1.
    Cosine,
}

/// Which loss terms the unlearning objective keeps.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Objective {
    /// λ_1·L_U + λ_2·L_pr + λ_3·R_pr with the scheduled λ_1, λ_2.
    Full,
    /// L_U alone (λ_1 ≡ 1).
    UnlearnOnly,
    /// L_U + λ_3·R_pr (λ_1 ≡ 1, no memory term).
    UnlearnPenalty,
}

/// Parameters updated during an unlearning step; the rest stay frozen.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Trainable {
    All,
    CrossAttention,
    /// The condition-embedding table alone.
    Embedding,
    /// Cross-attention projections plus the condition-embedding table.
    Conditioning,
}

impl Trainable {
    pub fn selects(self, name: &str) -> bool {
        match self {
            Trainable::All => true,
            Trainable::CrossAttention => crate::diffusion::DenoiserModel::is_cross_attention_param(name),
            Trainable::Embedding => name == "cond.emb",
            Trainable::Conditioning => {
                name == "cond.emb" || crate::diffusion::DenoiserModel::is_cross_attention_param(name)
            }
        }
    }
}

/// Explicit target → replacement pairing for the naive baseline.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Replacement {
    pub target: Condition,
    pub replacement: Condition,
}

/// Ordered concepts to forget plus the knobs of every unlearning step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecrementalPlan {
    /// Class ids removed one per step, in order.
    pub concepts: Vec<Condition>,
    /// Iterations N per step.
    pub iterations: usize,
    /// Images generated by φ for each target concept.
    pub exemplars: usize,
    pub exemplar_batch: usize,
    /// Memory bank size m.
    #[serde(alias = "m")]
    pub memory: usize,
    pub memory_batch: usize,
    pub lambda3: f64,
    /// Draws averaged at the initial parameters to fix the L_U and L_pr
    /// normalizers.
    pub norm_draws: usize,
    pub scheduler: Scheduler,
    pub objective: Objective,
    pub trainable: Trainable,
    pub lr: f64,
    /// Learning rate of the naive baseline, which fine-tunes every parameter.
    pub naive_lr: f64,
    /// Guidance used when φ generates exemplars and memory samples.
    pub generation_guidance: f64,
    /// Selects the plan's stream within the unlearning stage: exemplars, memory,
    /// iteration draws and naive replacements.
    pub seed: u64,
    /// Naive baseline pairings; targets missing here get a seeded random choice.
    pub replacements: Vec<Replacement>,
}

impl Default for DecrementalPlan {
    fn default() -> Self {
        Self {
            concepts: vec![Condition::class(1), Condition::class(2), Condition::class(3)],
            iterations: 200,
            exemplars: 16,
            exemplar_batch: 16,
            memory: 50,
            memory_batch: 8,
            lambda3: 0.01,
            norm_draws: 16,
            scheduler: Scheduler::Linear,
            objective: Objective::Full,
            trainable: Trainable::Embedding,
            lr: 3e-2,
            naive_lr: 1e-3,
            generation_guidance: 2.0,
            seed: 7,
            replacements: Vec::new(),
        }
    }
}

impl DecrementalPlan {
    pub fn steps(&self) -> usize {
        self.concepts.len()
    }

    pub fn contains(&self, c: Condition) -> bool {
        self.concepts.contains(&c)
    }

    /// Classes `1..=num_classes` outside the plan, in id order.
    pub fn retained(&self, num_classes: usize) -> Vec<Condition> {
        (1..=num_classes as u32)
            .map(Condition::class)
            .filter(|c| !self.contains(*c))
            .collect()
    }

    pub fn validate(&self, num_classes: usize) -> Result<()> {
        for (i, c) in self.concepts.iter().enumerate() {
            if c.is_null() {
                return Err(CoreError::Config(
                    "the NULL condition cannot be unlearned".into(),
                ));
            }
            if c.id() as usize > num_classes {
                return Err(CoreError::Config(format!(
                    "concept {c} outside the {num_classes} model classes"
                )));
            }
            if self.concepts[..i].contains(c) {
                return Err(CoreError::Config(format!("concept {c} listed twice")));
            }
        }
        let positive = [
            ("iterations", self.iterations),
            ("exemplars", self.exemplars),
            ("exemplar_batch", self.exemplar_batch),
            ("memory", self.memory),
            ("memory_batch", self.memory_batch),
            ("norm_draws", self.norm_draws),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(CoreError::Config(format!("plan.{name} must be at least 1")));
        }
        if !(self.lambda3 >= 0.0 && self.lambda3.is_finite()) {
            return Err(CoreError::Config("plan.lambda3 must be non-negative".into()));
        }
        for (name, lr) in [("lr", self.lr), ("naive_lr", self.naive_lr)] {
            if !(lr > 0.0 && lr.is_finite()) {
                return Err(CoreError::Config(format!("plan.{name} must be positive")));
            }
        }
        if self.retained(num_classes).is_empty() {
            return Err(CoreError::Plan(format!(
                "every one of the {num_classes} classes is scheduled for removal; \
                 no class is left for the memory bank"
            )));
        }
        for r in &self.replacements {
            if r.replacement == r.target || r.replacement.is_null() || self.contains(r.replacement)
            {
                return Err(CoreError::Config(format!(
                    "replacement {} for {} must be a class outside the decremental set",
                    r.replacement, r.target
                )));
            }
            if r.replacement.id() as usize > num_classes {
                return Err(CoreError::Config(format!(
                    "replacement {} outside the {num_classes} model classes",
                    r.replacement
                )));
            }
        }
        Ok(())
    }
}
