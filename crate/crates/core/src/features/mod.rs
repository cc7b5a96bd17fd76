//! Whole-series global features: the twelve expert statistics and the
//! rasterized curve image.

mod expert;
mod image;

pub use expert::{
    expert_features, expert_features_with_eps, fit_polynomial, longest_repeated_len, ExpertFeatureVector,
    DEFAULT_REPEAT_EPS, NUM_EXPERT_FEATURES,
};
pub use image::{render_curve_image, CurveImage, IMAGE_CHANNELS, IMAGE_SIZE};
