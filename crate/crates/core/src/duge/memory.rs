use super::plan::DecrementalPlan;
use crate::condition::Condition;
use crate::diffusion::{generate, DenoiserModel, NoiseSchedule, SamplerConfig};
use crate::error::{CoreError, Result};
use duge_tensor::{ParamStore, Rng, Tensor};

/// Source-model samples paired with conditions outside the decremental set.
/// Images are in model space `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct MemoryBank {
    images: Tensor,
    conditions: Vec<Condition>,
}

impl MemoryBank {
    /// Checks every condition against the full plan.
    pub fn new(images: Tensor, conditions: Vec<Condition>, plan: &DecrementalPlan) -> Result<Self> {
        if images.shape().first() != Some(&conditions.len()) {
            return Err(CoreError::Config(format!(
                "memory images {:?} for {} conditions",
                images.shape(),
                conditions.len()
            )));
        }
        if let Some(c) = conditions.iter().find(|&&c| c.is_null() || plan.contains(c)) {
            return Err(CoreError::Plan(format!(
                "memory condition {c} is NULL or scheduled for removal"
            )));
        }
        Ok(Self { images, conditions })
    }

    pub fn len(&self) -> usize {
        self.conditions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.conditions.is_empty()
    }

    pub fn images(&self) -> &Tensor {
        &self.images
    }

    pub fn conditions(&self) -> &[Condition] {
        &self.conditions
    }

    pub fn batch(&self, idx: &[usize]) -> (Tensor, Vec<Condition>) {
        (
            gather_rows(&self.images, idx),
            idx.iter().map(|&i| self.conditions[i]).collect(),
        )
    }

    pub fn to_store(&self) -> Result<ParamStore> {
        let mut s = ParamStore::new();
        s.insert("images", self.images.clone())?;
        s.insert(
            "conditions",
            Tensor::new(
                &[self.len()],
                self.conditions.iter().map(|c| c.id() as f64).collect(),
            )?,
        )?;
        Ok(s)
    }
}

pub(crate) fn gather_rows(t: &Tensor, idx: &[usize]) -> Tensor {
    let per: usize = t.shape()[1..].iter().product();
    let mut data = Vec::with_capacity(idx.len() * per);
    for &i in idx {
        data.extend_from_slice(&t.data()[i * per..(i + 1) * per]);
    }
    let mut shape = t.shape().to_vec();
    shape[0] = idx.len();
    Tensor::new(&shape, data).expect("gather shape")
}

fn clamp_model_space(t: Tensor) -> Tensor {
    t.map(|v| v.clamp(-1.0, 1.0))
}

/// `plan.memory` samples from `source`, conditions round-robin over the classes
/// outside the plan.
pub fn build_memory(
    source: &DenoiserModel,
    plan: &DecrementalPlan,
    schedule: &NoiseSchedule,
    sampler: &SamplerConfig,
    rng: &Rng,
) -> Result<MemoryBank> {
    let eligible = plan.retained(source.config.num_classes);
    if eligible.is_empty() {
        return Err(CoreError::Plan(
            "every class is scheduled for removal; the memory bank cannot be built".into(),
        ));
    }
    let conds: Vec<Condition> = (0..plan.memory).map(|i| eligible[i % eligible.len()]).collect();
    let cfg = SamplerConfig {
        guidance: plan.generation_guidance,
        ..sampler.clone()
    };
    let images = clamp_model_space(generate(source, &conds, schedule, &cfg, rng, 0)?);
    MemoryBank::new(images, conds, plan)
}

/// `plan.exemplars` images of `target` generated by the frozen model.
pub fn generate_exemplars(
    frozen: &DenoiserModel,
    target: Condition,
    plan: &DecrementalPlan,
    schedule: &NoiseSchedule,
    sampler: &SamplerConfig,
    rng: &Rng,
) -> Result<Tensor> {
    let cfg = SamplerConfig {
        guidance: plan.generation_guidance,
        ..sampler.clone()
    };
    let conds = vec![target; plan.exemplars];
    Ok(clamp_model_space(generate(frozen, &conds, schedule, &cfg, rng, 0)?))
}
