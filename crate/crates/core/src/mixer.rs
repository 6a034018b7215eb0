//! Combining two samples with a mask: inputs coordinate-wise by `M`,
//! labels by the scalar λ.

use serde::{Deserialize, Serialize};

use crate::error::{check_len, MsdaError, Result};
use crate::masks::Mask;

/// An input vector with a soft label (probability vector over classes).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
}

impl Sample {
    pub fn new(x: Vec<f64>, y: Vec<f64>) -> Self {
        Self { x, y }
    }

    /// One-hot label for `class` out of `classes`.
    pub fn one_hot(x: Vec<f64>, class: usize, classes: usize) -> Self {
        let mut y = vec![0.0; classes];
        y[class] = 1.0;
        Self { x, y }
    }
}

/// `x' = M⊙a.x + (1−M)⊙b.x`, `y' = λ·a.y + (1−λ)·b.y`.
pub fn mix_pair(a: &Sample, b: &Sample, mask: &Mask) -> Result<Sample> {
    check_len(a.x.len(), b.x.len())?;
    check_len(a.x.len(), mask.values.len())?;
    check_len(a.y.len(), b.y.len())?;
    let x = mask
        .values
        .iter()
        .zip(a.x.iter().zip(&b.x))
        .map(|(&m, (&xa, &xb))| m * xa + (1.0 - m) * xb)
        .collect();
    Ok(Sample { x, y: blend(&a.y, &b.y, mask.lambda) })
}

fn blend(a: &[f64], b: &[f64], lambda: f64) -> Vec<f64> {
    a.iter().zip(b).map(|(&u, &v)| lambda * u + (1.0 - lambda) * v).collect()
}

/// Default range accepted by [`mix_extrapolate`].
pub const EXTRAPOLATION_LIMIT: f64 = 2.0;

/// Constant-weight combination `λ·a + (1−λ)·b` with λ allowed outside
/// [0, 1]. Values are kept unclipped.
pub fn mix_extrapolate(a: &Sample, b: &Sample, lambda: f64) -> Result<Sample> {
    mix_extrapolate_within(a, b, lambda, EXTRAPOLATION_LIMIT)
}

pub fn mix_extrapolate_within(a: &Sample, b: &Sample, lambda: f64, limit: f64) -> Result<Sample> {
    if !(lambda.is_finite() && lambda.abs() <= limit) {
        return Err(MsdaError::Parameter(format!("|lambda| must be at most {limit}, got {lambda}")));
    }
    check_len(a.x.len(), b.x.len())?;
    check_len(a.y.len(), b.y.len())?;
    Ok(Sample { x: blend(&a.x, &b.x, lambda), y: blend(&a.y, &b.y, lambda) })
}
