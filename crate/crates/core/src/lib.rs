//! Image-scaling attacks, scaling defenses and joint adversarial attacks
//! against a `model ∘ scale ∘ defense` pipeline.

pub mod attack;
pub mod attack_scaling;
pub mod attack_whitebox;
pub mod attack_blackbox;
pub mod classifier;
pub mod dataset;
pub mod defenses;
pub mod error;
pub mod image;
pub mod io;
pub mod rng;
pub mod scaling;

pub use attack::AttackResult;
pub use dataset::{hr_corpus, hr_source, synth_dataset, Dataset};
pub use error::{Error, Result};
pub use image::{l2_norm, linf_norm, scaled_l2, DiffImage, Grid, Image, Shape};
pub use rng::RngState;
pub use scaling::{ScalerKind, ScalerSpec, VulnerabilityMask};
