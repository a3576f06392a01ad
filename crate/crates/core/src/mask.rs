use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskSource {
    Saliency,
    Noise,
}

/// Row-major H×W boolean grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinaryMask {
    pub height: usize,
    pub width: usize,
    pub data: Vec<bool>,
    pub threshold: f64,
    pub source: MaskSource,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize, data: Vec<bool>, threshold: f64, source: MaskSource) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Dimension(format!(
                "{height}x{width} mask needs {} cells, got {}",
                height * width,
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            data,
            threshold,
            source,
        })
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|b| **b).count()
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.data[row * self.width + col]
    }

    /// `true` when every set cell of `self` is also set in `other`.
    pub fn is_subset_of(&self, other: &BinaryMask) -> bool {
        self.data.iter().zip(&other.data).all(|(a, b)| !a || *b)
    }

    /// `{false, true} → {0, 1}` intensities.
    pub fn to_values(&self) -> Vec<f64> {
        self.data.iter().map(|b| if *b { 1.0 } else { 0.0 }).collect()
    }
}
