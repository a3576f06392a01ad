//! Dense H×W×C intensity grids.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// An image stored row-major, channel-last, in double precision.
///
/// Ingested images hold intensities in `[0, dynamic_range]`. Attack
/// intermediates are allowed to leave that range (see
/// [`Image::new_unbounded`]) and are brought back with [`Image::clipped`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Image {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
    dynamic_range: f64,
}

impl Image {
    /// Builds an image and checks every intensity lies in `[0, 1]`.
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        let img = Self::new_unbounded(height, width, channels, data)?;
        if let Some(v) = img.data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Domain(format!("intensity {v} outside [0, 1]")));
        }
        Ok(img)
    }

    /// Builds an image whose intensities may leave `[0, 1]` (they must be finite).
    pub fn new_unbounded(
        height: usize,
        width: usize,
        channels: usize,
        data: Vec<f64>,
    ) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(Error::Dimension(format!(
                "image dimensions must be positive, got {height}x{width}x{channels}"
            )));
        }
        if data.len() != height * width * channels {
            return Err(Error::Dimension(format!(
                "{height}x{width}x{channels} image needs {} values, got {}",
                height * width * channels,
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain("non-finite intensity".into()));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
            dynamic_range: 1.0,
        })
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self::filled(height, width, channels, 0.0)
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f64) -> Self {
        Self {
            height,
            width,
            channels,
            data: vec![value; height * width * channels],
            dynamic_range: 1.0,
        }
    }

    /// Same shape as `self`, new contents. Panics on a length mismatch.
    pub fn with_data(&self, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), self.data.len(), "with_data: length mismatch");
        Self {
            height: self.height,
            width: self.width,
            channels: self.channels,
            data,
            dynamic_range: self.dynamic_range,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn dynamic_range(&self) -> f64 {
        self.dynamic_range
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, row: usize, col: usize, channel: usize) -> f64 {
        self.data[(row * self.width + col) * self.channels + channel]
    }

    /// One channel as a row-major H×W plane.
    pub fn channel_plane(&self, channel: usize) -> Vec<f64> {
        self.data
            .iter()
            .skip(channel)
            .step_by(self.channels)
            .copied()
            .collect()
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    pub fn clipped(&self) -> Self {
        let l = self.dynamic_range;
        self.with_data(self.data.iter().map(|v| v.clamp(0.0, l)).collect())
    }

    pub fn in_range(&self) -> bool {
        self.data
            .iter()
            .all(|v| (0.0..=self.dynamic_range).contains(v))
    }

    pub fn same_shape(&self, other: &Image) -> bool {
        self.shape() == other.shape()
    }

    pub(crate) fn check_same_shape(&self, other: &Image) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::Dimension(format!(
                "image shapes differ: {:?} vs {:?}",
                self.shape(),
                other.shape()
            )))
        }
    }
}
