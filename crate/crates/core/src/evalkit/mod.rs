//! Classifier-based accuracy matrices and FID/KID analogs on classifier features.

mod classifier;
mod erosion;
mod evaluator;
mod metrics;

pub use classifier::{train_classifier, Classifier, ClassifierConfig, ImageClassifier, FEATURE_DIM};
pub use erosion::{
    accuracy_from_images, accuracy_row, erosion_report, sample_conditions, AccuracyMatrix,
    ErosionRecord, ErosionReference,
};
pub use evaluator::Evaluator;
pub use metrics::{fid, kid, EIGEN_FLOOR};
