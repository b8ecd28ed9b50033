use crate::error::Result;
use crate::image::{l2_norm, scaled_l2, Image};

/// Outcome of one attack run on one image.
#[derive(Debug, Clone, PartialEq)]
pub struct AttackResult {
    /// Final (best) attack image `A`, inside the unit box.
    pub image: Image,
    /// `‖A − S‖₂` in the attacked space.
    pub l2: f64,
    /// `l2 / β`.
    pub scaled_l2: f64,
    /// Oracle queries (black-box) or gradient evaluations (white-box).
    pub queries: usize,
    pub iterations: usize,
    pub success: bool,
    /// Label assigned to `A` by the attacked pipeline, when known.
    pub label: Option<usize>,
}

impl AttackResult {
    pub fn measure(source: &Image, image: Image, beta: f64) -> Result<Self> {
        let delta = image.diff(source)?;
        Ok(Self {
            l2: l2_norm(&delta),
            scaled_l2: scaled_l2(&delta, beta)?,
            image,
            queries: 0,
            iterations: 0,
            success: false,
            label: None,
        })
    }
}
