use super::classifier::Classifier;
use super::erosion::{accuracy_row, AccuracyMatrix, ErosionRecord, ErosionReference};
use crate::condition::Condition;
use crate::diffusion::{DenoiserModel, NoiseSchedule, SamplerConfig};
use crate::error::{CoreError, Result};
use duge_tensor::Rng;

/// Everything needed to score a model against the source: the validated
/// classifier, the sampler settings, and the source model's cached accuracy
/// row and erosion features.
#[derive(Clone, Debug)]
pub struct Evaluator {
    pub classifier: Classifier,
    pub classes: Vec<Condition>,
    pub n: usize,
    pub schedule: NoiseSchedule,
    pub sampler: SamplerConfig,
    pub baseline: Vec<f64>,
    reference: ErosionReference,
    accuracy_root: Rng,
}

impl Evaluator {
    /// `classes` are scored for accuracy; `erosion_conditions` (which must be
    /// disjoint from `excluded`) feed FID/KID.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        source: &DenoiserModel,
        classifier: Classifier,
        classes: Vec<Condition>,
        erosion_conditions: &[Condition],
        excluded: &[Condition],
        n: usize,
        schedule: NoiseSchedule,
        sampler: SamplerConfig,
        rng: &Rng,
    ) -> Result<Self> {
        if let Some(c) = erosion_conditions.iter().find(|c| excluded.contains(c)) {
            return Err(CoreError::Precondition(format!(
                "evaluation condition {c} belongs to the decremental set"
            )));
        }
        let accuracy_root = rng.split_named("accuracy");
        let baseline = accuracy_row(
            source,
            &classes,
            n,
            &classifier,
            &schedule,
            &sampler,
            &accuracy_root,
        )?;
        let reference = ErosionReference::new(
            source,
            erosion_conditions,
            n,
            &classifier,
            &schedule,
            &sampler,
            &rng.split_named("erosion"),
        )?;
        Ok(Self {
            classifier,
            classes,
            n,
            schedule,
            sampler,
            baseline,
            reference,
            accuracy_root,
        })
    }

    pub fn erosion_conditions(&self) -> &[Condition] {
        &self.reference.conditions
    }

    pub fn accuracy(&self, model: &DenoiserModel) -> Result<Vec<f64>> {
        accuracy_row(
            model,
            &self.classes,
            self.n,
            &self.classifier,
            &self.schedule,
            &self.sampler,
            &self.accuracy_root,
        )
    }

    pub fn erosion(&self, model: &DenoiserModel, step: usize) -> Result<ErosionRecord> {
        self.reference
            .compare(model, step, &self.classifier, &self.schedule, &self.sampler)
    }

    /// Matrix holding just the source row.
    pub fn matrix(&self) -> AccuracyMatrix {
        AccuracyMatrix {
            classes: self.classes.clone(),
            rows: vec![self.baseline.clone()],
        }
    }
}
