//! Add-on scaling defenses: masked-pooling prevention (median, randomized)
//! and threshold detectors.

pub mod detection;
pub mod histogram;
pub mod prevention;
pub mod smooth_median;

pub use detection::{
    calibrate_threshold, detect_score, detect_score_grad, ssim, DetectionKind, DetectionSpec, DistortionMetric,
};
pub use histogram::{distortion_histogram, DistortionHistogram};
pub use prevention::{
    apply_prevention, apply_prevention_traced, expected_defense, median_window, CachedSampler, PreventionKind,
    PreventionSpec, Routing,
};
pub use smooth_median::{smooth_defense, smooth_defense_backprop, smooth_median, smooth_median_grad, SmoothDefenseJacobian};
