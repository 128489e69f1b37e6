use serde::{Deserialize, Serialize};

use super::classifier::{Classifier, ImageClassifier};
use super::metrics::{fid, kid};
use crate::condition::Condition;
use crate::diffusion::{generate, DenoiserModel, NoiseSchedule, SamplerConfig};
use crate::error::{CoreError, Result};
use crate::glyph::to_pixel_space;
use duge_tensor::{Rng, Tensor};

/// Samples `n` images per condition in pixel space. Condition `c` always uses
/// the streams `root.split(c.id()).split(j)`, so two models evaluated with the
/// same root see the same starting noise.
pub fn sample_conditions(
    model: &DenoiserModel,
    conds: &[Condition],
    n: usize,
    schedule: &NoiseSchedule,
    sampler: &SamplerConfig,
    root: &Rng,
) -> Result<Tensor> {
    let mut parts = Vec::with_capacity(conds.len());
    for &c in conds {
        let cs = vec![c; n];
        let imgs = generate(model, &cs, schedule, sampler, &root.split(c.id() as u64), 0)?;
        parts.push(to_pixel_space(&imgs));
    }
    Ok(Tensor::cat_outer(&parts)?)
}

/// Per-class top-1 accuracy (%) of `classifier` on `images`, laid out as
/// `n` consecutive images per entry of `classes`.
pub fn accuracy_from_images(
    images: &Tensor,
    classes: &[Condition],
    n: usize,
    classifier: &impl ImageClassifier,
) -> Result<Vec<f64>> {
    let pred = classifier.classify(images)?;
    Ok(classes
        .iter()
        .enumerate()
        .map(|(k, c)| {
            let hits = pred[k * n..(k + 1) * n]
                .iter()
                .filter(|&&p| Some(p) == c.label())
                .count();
            100.0 * hits as f64 / n as f64
        })
        .collect())
}

/// Generates `n` images for every class and reports per-class top-1 %.
pub fn accuracy_row(
    model: &DenoiserModel,
    classes: &[Condition],
    n: usize,
    classifier: &impl ImageClassifier,
    schedule: &NoiseSchedule,
    sampler: &SamplerConfig,
    root: &Rng,
) -> Result<Vec<f64>> {
    if n == 0 {
        return Err(CoreError::Precondition(
            "accuracy_row needs at least one image per class".into(),
        ));
    }
    let images = sample_conditions(model, classes, n, schedule, sampler, root)?;
    accuracy_from_images(&images, classes, n, classifier)
}

/// Steps × classes table of top-1 accuracy in percent; row 0 is the source model.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AccuracyMatrix {
    pub classes: Vec<Condition>,
    pub rows: Vec<Vec<f64>>,
}

impl AccuracyMatrix {
    pub fn new(classes: Vec<Condition>) -> Self {
        Self {
            classes,
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<f64>) -> Result<()> {
        if row.len() != self.classes.len() {
            return Err(CoreError::Config(format!(
                "accuracy row has {} entries for {} classes",
                row.len(),
                self.classes.len()
            )));
        }
        self.rows.push(row);
        Ok(())
    }

    /// Entry for `class` at `step`, if present.
    pub fn get(&self, step: usize, class: Condition) -> Option<f64> {
        let col = self.classes.iter().position(|&c| c == class)?;
        self.rows.get(step).map(|r| r[col])
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("step");
        for c in &self.classes {
            out.push_str(&format!(",class{}", c.id()));
        }
        out.push('\n');
        for (i, row) in self.rows.iter().enumerate() {
            out.push_str(&i.to_string());
            for v in row {
                out.push_str(&format!(",{v:.2}"));
            }
            out.push('\n');
        }
        out
    }
}

/// FID/KID analogs of one decremental step against the source model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErosionRecord {
    pub step: usize,
    pub fid: f64,
    pub kid: f64,
    /// Feature rows per model (images per condition × conditions).
    pub samples: usize,
}

/// Source-model features on the evaluation conditions, computed once and
/// compared against every later model.
#[derive(Clone, Debug)]
pub struct ErosionReference {
    pub conditions: Vec<Condition>,
    pub n: usize,
    features: Tensor,
    root: Rng,
}

impl ErosionReference {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        source: &DenoiserModel,
        conditions: &[Condition],
        n: usize,
        classifier: &Classifier,
        schedule: &NoiseSchedule,
        sampler: &SamplerConfig,
        root: &Rng,
    ) -> Result<Self> {
        if conditions.is_empty() {
            return Err(CoreError::Precondition(
                "erosion needs at least one evaluation condition".into(),
            ));
        }
        let images = sample_conditions(source, conditions, n, schedule, sampler, root)?;
        Ok(Self {
            conditions: conditions.to_vec(),
            n,
            features: classifier.features(&images)?,
            root: root.clone(),
        })
    }

    pub fn features(&self) -> &Tensor {
        &self.features
    }

    pub fn compare(
        &self,
        model: &DenoiserModel,
        step: usize,
        classifier: &Classifier,
        schedule: &NoiseSchedule,
        sampler: &SamplerConfig,
    ) -> Result<ErosionRecord> {
        let images =
            sample_conditions(model, &self.conditions, self.n, schedule, sampler, &self.root)?;
        let feats = classifier.features(&images)?;
        Ok(ErosionRecord {
            step,
            fid: fid(&feats, &self.features)?,
            kid: kid(&feats, &self.features)?,
            samples: feats.shape()[0],
        })
    }
}

/// One-off comparison of `model` against `source` on `conditions`, which must
/// avoid every class in `excluded`.
#[allow(clippy::too_many_arguments)]
pub fn erosion_report(
    model: &DenoiserModel,
    source: &DenoiserModel,
    step: usize,
    conditions: &[Condition],
    excluded: &[Condition],
    n: usize,
    classifier: &Classifier,
    schedule: &NoiseSchedule,
    sampler: &SamplerConfig,
    root: &Rng,
) -> Result<ErosionRecord> {
    if let Some(c) = conditions.iter().find(|c| excluded.contains(c)) {
        return Err(CoreError::Precondition(format!(
            "evaluation condition {c} belongs to the decremental set"
        )));
    }
    let reference =
        ErosionReference::new(source, conditions, n, classifier, schedule, sampler, root)?;
    reference.compare(model, step, classifier, schedule, sampler)
}
