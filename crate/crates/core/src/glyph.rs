//! Procedural 16×16 glyph classes used as the toy image domain.

use serde::{Deserialize, Serialize};

use crate::condition::Condition;
use crate::error::{CoreError, Result};
use duge_tensor::{ParamStore, Rng, Tensor};

pub const SIDE: usize = 16;
pub const PIXELS: usize = SIDE * SIDE;

pub const CLASS_NAMES: [&str; 10] = [
    "hbars", "vbars", "disk", "diagonal", "antidiagonal", "cross", "ring", "checker", "frame",
    "dots",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GlyphConfig {
    pub num_classes: usize,
    pub per_class: usize,
    /// Held-out images per class for classifier validation.
    pub val_per_class: usize,
    /// Std of additive Gaussian pixel noise.
    pub noise: f64,
    /// Translations are uniform on `-max_shift..=max_shift` in both axes.
    pub max_shift: i32,
}

impl Default for GlyphConfig {
    fn default() -> Self {
        Self {
            num_classes: 5,
            per_class: 500,
            val_per_class: 100,
            noise: 0.05,
            max_shift: 2,
        }
    }
}

impl GlyphConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 || self.num_classes > CLASS_NAMES.len() {
            return Err(CoreError::Config(format!(
                "num_classes must be in 2..={}, got {} (a single class is degenerate)",
                CLASS_NAMES.len(),
                self.num_classes
            )));
        }
        if self.per_class == 0 || self.noise < 0.0 || self.max_shift < 0 {
            return Err(CoreError::Config(
                "per_class must be positive; noise and max_shift non-negative".into(),
            ));
        }
        Ok(())
    }
}

/// Noise-free glyph of `class` (0-based) translated by `(dx, dy)`, values in {0, 1}.
pub fn render(class: usize, dx: i32, dy: i32) -> [f64; PIXELS] {
    let mut img = [0.0; PIXELS];
    let c = 7.5;
    for y in 0..SIDE {
        for x in 0..SIDE {
            // pattern coordinates after undoing the translation
            let u = x as i32 - dx;
            let v = y as i32 - dy;
            let (fu, fv) = (u as f64 - c, v as f64 - c);
            let r = (fu * fu + fv * fv).sqrt();
            let on = match CLASS_NAMES[class] {
                "hbars" => v.rem_euclid(4) < 2,
                "vbars" => u.rem_euclid(4) < 2,
                "ring" => (r - 5.0).abs() < 1.3,
                "cross" => (fu.abs() < 1.6 && fv.abs() < 6.0) || (fv.abs() < 1.6 && fu.abs() < 6.0),
                "diagonal" => (u + v).rem_euclid(4) < 2,
                "checker" => (u.div_euclid(4) + v.div_euclid(4)).rem_euclid(2) == 0,
                "antidiagonal" => (u - v).rem_euclid(4) < 2,
                "frame" => fu.abs().max(fv.abs()) > 4.0 && fu.abs().max(fv.abs()) < 6.0,
                "dots" => u.rem_euclid(5) < 2 && v.rem_euclid(5) < 2,
                "disk" => r < 4.5,
                _ => unreachable!("unknown glyph family"),
            };
            img[y * SIDE + x] = if on { 1.0 } else { 0.0 };
        }
    }
    img
}

/// Labelled images in `[0, 1]`, shape `[N, 16, 16]`; labels are 0-based.
#[derive(Clone, Debug, PartialEq)]
pub struct GlyphDataset {
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl GlyphDataset {
    /// `per_class` images of each class, interleaved by class. Image `i`
    /// draws its shift and noise from `rng.split(i)`.
    pub fn generate(cfg: &GlyphConfig, per_class: usize, rng: &Rng) -> Result<Self> {
        cfg.validate()?;
        let n = per_class * cfg.num_classes;
        let mut data = Vec::with_capacity(n * PIXELS);
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let class = i % cfg.num_classes;
            let mut r = rng.split(i as u64);
            let span = (2 * cfg.max_shift + 1) as usize;
            let dx = r.below(span) as i32 - cfg.max_shift;
            let dy = r.below(span) as i32 - cfg.max_shift;
            let base = render(class, dx, dy);
            for &p in &base {
                let v = if cfg.noise > 0.0 {
                    p + cfg.noise * r.normal()
                } else {
                    p
                };
                data.push(v.clamp(0.0, 1.0));
            }
            labels.push(class);
        }
        Ok(Self {
            images: Tensor::new(&[n, SIDE, SIDE], data)?,
            labels,
            num_classes: cfg.num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Images at `idx` as `[len, 16, 16]`.
    pub fn gather(&self, idx: &[usize]) -> Tensor {
        let mut data = Vec::with_capacity(idx.len() * PIXELS);
        for &i in idx {
            data.extend_from_slice(&self.images.data()[i * PIXELS..(i + 1) * PIXELS]);
        }
        Tensor::new(&[idx.len(), SIDE, SIDE], data).expect("gather shape")
    }

    pub fn conditions(&self, idx: &[usize]) -> Vec<Condition> {
        idx.iter().map(|&i| Condition::from_label(self.labels[i])).collect()
    }

    pub fn to_store(&self) -> Result<ParamStore> {
        let mut s = ParamStore::new();
        s.insert("images", self.images.clone())?;
        s.insert(
            "labels",
            Tensor::new(&[self.len()], self.labels.iter().map(|&l| l as f64).collect())?,
        )?;
        Ok(s)
    }

    pub fn from_store(store: &ParamStore, num_classes: usize) -> Result<Self> {
        let images = store
            .get("images")
            .ok_or_else(|| CoreError::Config("dataset file lacks `images`".into()))?
            .clone();
        let labels: Vec<usize> = store
            .get("labels")
            .ok_or_else(|| CoreError::Config("dataset file lacks `labels`".into()))?
            .data()
            .iter()
            .map(|&l| l as usize)
            .collect();
        if images.shape() != [labels.len(), SIDE, SIDE] {
            return Err(CoreError::Config(format!(
                "dataset images {:?} do not match {} labels",
                images.shape(),
                labels.len()
            )));
        }
        Ok(Self {
            images,
            labels,
            num_classes,
        })
    }
}

/// `[0,1]` pixels to the `[-1,1]` range the diffusion model works in.
pub fn to_model_space(images: &Tensor) -> Tensor {
    images.map(|v| 2.0 * v - 1.0)
}

/// `[-1,1]` samples back to clamped `[0,1]` pixels.
pub fn to_pixel_space(images: &Tensor) -> Tensor {
    images.map(|v| ((v + 1.0) / 2.0).clamp(0.0, 1.0))
}
