use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::glyph::{GlyphDataset, SIDE};
use duge_tensor::{adam_step, AdamConfig, AdamState, Bound, ParamStore, Rng, Tape, Tensor, Var};

/// Anything that assigns 0-based class labels to `[N, 16, 16]` images in `[0, 1]`.
pub trait ImageClassifier {
    fn classify(&self, images: &Tensor) -> Result<Vec<usize>>;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClassifierConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    /// Minimum validation accuracy in percent.
    pub floor: f64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            steps: 800,
            batch: 64,
            lr: 2e-3,
            floor: 95.0,
        }
    }
}

const PATCH: usize = 4;
const PATCH_DIM: usize = 16;
const HIDDEN: usize = 64;
pub const FEATURE_DIM: usize = 32;

/// Patch embedding followed by two dense layers; the second one's output
/// is the 32-dim feature space used by the FID/KID analogs.
#[derive(Clone, Debug, PartialEq)]
pub struct Classifier {
    pub num_classes: usize,
    pub params: ParamStore,
}

fn dense(fan_in: usize, fan_out: usize, rng: &mut Rng) -> Tensor {
    Tensor::randn(&[fan_in, fan_out], (2.0 / fan_in as f64).sqrt(), rng)
}

impl Classifier {
    pub fn new(num_classes: usize, rng: &mut Rng) -> Result<Self> {
        if num_classes < 2 {
            return Err(CoreError::Precondition(
                "a classifier needs at least two classes".into(),
            ));
        }
        let tokens = (SIDE / PATCH) * (SIDE / PATCH);
        let mut p = ParamStore::new();
        p.insert("patch.w", dense(PATCH * PATCH, PATCH_DIM, rng))?;
        p.insert("patch.b", Tensor::zeros(&[PATCH_DIM]))?;
        p.insert("fc1.w", dense(tokens * PATCH_DIM, HIDDEN, rng))?;
        p.insert("fc1.b", Tensor::zeros(&[HIDDEN]))?;
        p.insert("fc2.w", dense(HIDDEN, FEATURE_DIM, rng))?;
        p.insert("fc2.b", Tensor::zeros(&[FEATURE_DIM]))?;
        p.insert("head.w", dense(FEATURE_DIM, num_classes, rng))?;
        p.insert("head.b", Tensor::zeros(&[num_classes]))?;
        Ok(Self {
            num_classes,
            params: p,
        })
    }

    pub fn from_params(num_classes: usize, params: ParamStore) -> Result<Self> {
        let fresh = Self::new(num_classes, &mut Rng::new(0))?;
        let diff = fresh.params.manifest_diff(&params);
        if !diff.is_empty() {
            return Err(CoreError::Config(format!(
                "classifier checkpoint does not match {num_classes} classes: {}",
                diff.join("; ")
            )));
        }
        Ok(Self {
            num_classes,
            params,
        })
    }

    /// Returns `(features [N, 32], logits [N, K])` vars.
    fn forward(&self, tape: &mut Tape, p: &Bound, images: &Tensor) -> Result<(Var, Var)> {
        let n = check_images(images)?;
        let g = SIDE / PATCH;
        let x = tape.constant(images.clone().reshape(&[n, g, PATCH, g, PATCH])?);
        let x = tape.permute(x, &[0, 1, 3, 2, 4])?;
        let x = tape.reshape(x, &[n * g * g, PATCH * PATCH])?;
        let h = affine(tape, x, p.get("patch.w"), p.get("patch.b"))?;
        let h = tape.gelu(h)?;
        let h = tape.reshape(h, &[n, g * g * PATCH_DIM])?;
        let h = affine(tape, h, p.get("fc1.w"), p.get("fc1.b"))?;
        let h = tape.gelu(h)?;
        let f = affine(tape, h, p.get("fc2.w"), p.get("fc2.b"))?;
        let f = tape.gelu(f)?;
        let logits = affine(tape, f, p.get("head.w"), p.get("head.b"))?;
        Ok((f, logits))
    }

    pub fn logits(&self, images: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, |_| false);
        let (_, l) = self.forward(&mut tape, &p, images)?;
        Ok(tape.value(l).clone())
    }

    /// Penultimate activations, `[N, 32]`.
    pub fn features(&self, images: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, |_| false);
        let (f, _) = self.forward(&mut tape, &p, images)?;
        Ok(tape.value(f).clone())
    }

    /// Top-1 accuracy in percent.
    pub fn accuracy(&self, ds: &GlyphDataset) -> Result<f64> {
        let pred = self.classify(&ds.images)?;
        let hits = pred.iter().zip(&ds.labels).filter(|(a, b)| a == b).count();
        Ok(100.0 * hits as f64 / ds.len().max(1) as f64)
    }
}

impl ImageClassifier for Classifier {
    fn classify(&self, images: &Tensor) -> Result<Vec<usize>> {
        let l = self.logits(images)?;
        Ok(l.data().chunks(self.num_classes).map(argmax).collect())
    }
}

fn affine(tape: &mut Tape, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = tape.matmul(x, w)?;
    Ok(tape.add_broadcast(y, b)?)
}

fn check_images(images: &Tensor) -> Result<usize> {
    match images.shape() {
        [n, SIDE, SIDE] => Ok(*n),
        s => Err(CoreError::Config(format!(
            "classifier expects [N, {SIDE}, {SIDE}] images, got {s:?}"
        ))),
    }
}

pub(crate) fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Trains on `train`, then checks the floor on `val`. Returns the classifier
/// and its validation accuracy.
pub fn train_classifier(
    train: &GlyphDataset,
    val: &GlyphDataset,
    cfg: &ClassifierConfig,
    rng: &mut Rng,
) -> Result<(Classifier, f64)> {
    let distinct = {
        let mut l = train.labels.clone();
        l.sort_unstable();
        l.dedup();
        l.len()
    };
    if train.num_classes < 2 || distinct < 2 {
        return Err(CoreError::Precondition(
            "classifier training set is degenerate (fewer than two classes)".into(),
        ));
    }
    let mut clf = Classifier::new(train.num_classes, rng)?;
    let mut state = AdamState::new(AdamConfig::with_lr(cfg.lr), clf.params.tensors());
    let n = train.len();
    for step in 0..cfg.steps {
        state.config.lr = crate::diffusion::cosine_lr(cfg.lr, 0.05, step, cfg.steps);
        let idx: Vec<usize> = (0..cfg.batch).map(|_| rng.below(n)).collect();
        let x = train.gather(&idx);
        let y: Vec<usize> = idx.iter().map(|&i| train.labels[i]).collect();
        let mut tape = Tape::new();
        let p = clf.params.bind(&mut tape, |_| true);
        let (_, logits) = clf.forward(&mut tape, &p, &x)?;
        let loss = tape.cross_entropy(logits, &y)?;
        tape.backward(loss)?;
        let grads = p.grads(&tape);
        adam_step(clf.params.tensors_mut(), &grads, &mut state)?;
    }
    let acc = clf.accuracy(val)?;
    if acc < cfg.floor {
        return Err(CoreError::ClassifierFloor {
            accuracy: acc,
            floor: cfg.floor,
        });
    }
    Ok((clf, acc))
}
