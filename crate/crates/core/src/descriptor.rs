use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{vec2_serde, Vec2};

/// Fixed-length appearance vector attached to a keypoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Descriptor(pub Vec<f64>);

impl Descriptor {
    pub fn zeros(dim: usize) -> Self {
        Descriptor(vec![0.0; dim])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn norm(&self) -> f64 {
        norm(&self.0)
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }
}

impl From<Vec<f64>> for Descriptor {
    fn from(v: Vec<f64>) -> Self {
        Descriptor(v)
    }
}

impl AsRef<[f64]> for Descriptor {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

impl std::ops::Deref for Descriptor {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Keypoint {
    #[serde(with = "vec2_serde")]
    pub position: Vec2,
    pub descriptor: Descriptor,
}

impl Keypoint {
    pub fn new(position: Vec2, descriptor: Descriptor) -> Self {
        Keypoint {
            position,
            descriptor,
        }
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Unit-L2 copy of `v`. Zero or non-finite norms are a degenerate input.
pub fn l2_normalize(v: &[f64]) -> Result<Vec<f64>> {
    let n = norm(v);
    if !(n.is_finite() && n > 0.0) {
        return Err(Error::Degenerate(format!(
            "cannot L2-normalize a vector of norm {n}"
        )));
    }
    Ok(v.iter().map(|x| x / n).collect())
}
