//! Feature-map tensors, their on-disk format, dataset manifests and the
//! synthetic dataset generator.

pub(crate) mod manifest;
mod synth;
mod wsfx;

pub use manifest::{read_json_lines, write_json_lines, DatasetManifest, ManifestEntry, Split};
pub use synth::{generate_synthetic, read_mask, SynthConfig, MANIFEST_FILE};
pub use wsfx::{
    read_feature_layers, read_feature_map, write_feature_layers, write_feature_map, HEADER_LEN,
    WSFX_MAGIC, WSFX_VERSION,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense `height × width × channels` array of `f32`, stored `(h, w, c)` with
/// the channel index fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f32>,
}

impl FeatureMap {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(Error::Config(format!(
                "feature map dims must be positive, got {height}x{width}x{channels}"
            )));
        }
        let expected = height * width * channels;
        if data.len() != expected {
            return Err(Error::DimensionMismatch {
                expected,
                actual: data.len(),
            });
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Result<Self> {
        Self::new(
            height,
            width,
            channels,
            vec![0.0; height * width * channels],
        )
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

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    /// Channel vector at spatial position `(h, w)`.
    pub fn patch(&self, h: usize, w: usize) -> &[f32] {
        let start = (h * self.width + w) * self.channels;
        &self.data[start..start + self.channels]
    }

    pub fn patch_mut(&mut self, h: usize, w: usize) -> &mut [f32] {
        let start = (h * self.width + w) * self.channels;
        &mut self.data[start..start + self.channels]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Where a patch feature came from: image id and patch coordinate.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PatchOrigin {
    pub image_id: String,
    pub h: u32,
    pub w: u32,
}

impl PatchOrigin {
    pub fn new(image_id: impl Into<String>, h: usize, w: usize) -> Self {
        Self {
            image_id: image_id.into(),
            h: h as u32,
            w: w as u32,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PatchFeature {
    pub vector: Vec<f32>,
    pub origin: Option<PatchOrigin>,
}

/// Row-major `rows × dim` matrix of `f32` feature vectors. The in-memory
/// form of every feature set (normal bank, mined and augmented sets).
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    dim: usize,
    data: Vec<f32>,
}

impl FeatureMatrix {
    pub fn new(dim: usize, data: Vec<f32>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Config("feature dimension must be positive".into()));
        }
        if data.len() % dim != 0 {
            return Err(Error::DimensionMismatch {
                expected: (data.len() / dim + 1) * dim,
                actual: data.len(),
            });
        }
        Ok(Self { dim, data })
    }

    pub fn with_capacity(dim: usize, rows: usize) -> Self {
        Self {
            dim,
            data: Vec::with_capacity(dim * rows),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn rows(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn iter_rows(&self) -> std::slice::ChunksExact<'_, f32> {
        self.data.chunks_exact(self.dim)
    }

    pub fn push_row(&mut self, row: &[f32]) -> Result<()> {
        if row.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                actual: row.len(),
            });
        }
        self.data.extend_from_slice(row);
        Ok(())
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// Persisted shape is `rows × 1 × dim`.
    pub fn to_feature_map(&self) -> Result<FeatureMap> {
        FeatureMap::new(self.rows(), 1, self.dim, self.data.clone())
    }

    /// Flattens every `(h, w)` position of `map` into one row.
    pub fn from_feature_map(map: FeatureMap) -> Self {
        let dim = map.channels();
        Self {
            dim,
            data: map.into_data(),
        }
    }
}
