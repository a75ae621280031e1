//! Multi-scale alignment and neighborhood aggregation of feature maps into
//! per-image patch sets.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::feature_io::{
    read_feature_layers, DatasetManifest, FeatureMap, ManifestEntry, PatchFeature, PatchOrigin,
};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct AggregationConfig {
    /// Side length `p` of the square aggregation window. Must be odd.
    pub neighborhood_size: usize,
    /// Which layers of a multi-layer feature file to use.
    pub layer_indices: Vec<usize>,
    /// Common resolution for the selected layers; defaults to the first
    /// selected layer's dims.
    pub target_height: Option<usize>,
    pub target_width: Option<usize>,
}

impl Default for AggregationConfig {
    fn default() -> Self {
        Self {
            neighborhood_size: 5,
            layer_indices: vec![0],
            target_height: None,
            target_width: None,
        }
    }
}

impl AggregationConfig {
    pub fn with_neighborhood(p: usize) -> Self {
        Self {
            neighborhood_size: p,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.neighborhood_size == 0 || self.neighborhood_size % 2 == 0 {
            return Err(Error::Config(format!(
                "neighborhood size must be odd and positive, got {}",
                self.neighborhood_size
            )));
        }
        if self.layer_indices.is_empty() {
            return Err(Error::Config("layer selection is empty".into()));
        }
        if self.target_height == Some(0) || self.target_width == Some(0) {
            return Err(Error::Config("target resolution must be positive".into()));
        }
        Ok(())
    }
}

/// The aggregated patch features of one image, `H' × W'` vectors of length
/// `C'`. Patch origins are implied by position.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchSet {
    pub image_id: String,
    map: FeatureMap,
}

impl PatchSet {
    pub fn new(image_id: impl Into<String>, map: FeatureMap) -> Self {
        Self {
            image_id: image_id.into(),
            map,
        }
    }

    pub fn height(&self) -> usize {
        self.map.height()
    }

    pub fn width(&self) -> usize {
        self.map.width()
    }

    pub fn dim(&self) -> usize {
        self.map.channels()
    }

    pub fn len(&self) -> usize {
        self.height() * self.width()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Vector of the `i`-th patch in row-major `(h, w)` order.
    pub fn vector(&self, i: usize) -> &[f32] {
        self.map.patch(i / self.width(), i % self.width())
    }

    pub fn origin(&self, i: usize) -> PatchOrigin {
        PatchOrigin::new(self.image_id.clone(), i / self.width(), i % self.width())
    }

    pub fn vectors(&self) -> std::slice::ChunksExact<'_, f32> {
        self.map.data().chunks_exact(self.dim())
    }

    pub fn features(&self) -> Vec<PatchFeature> {
        (0..self.len())
            .map(|i| PatchFeature {
                vector: self.vector(i).to_vec(),
                origin: Some(self.origin(i)),
            })
            .collect()
    }

    pub fn map(&self) -> &FeatureMap {
        &self.map
    }
}

/// Resizes every selected layer to the target resolution with bilinear
/// interpolation (half-pixel centers, edge clamped) and concatenates them
/// along channels.
pub fn align_multiscale(layers: &[FeatureMap], config: &AggregationConfig) -> Result<FeatureMap> {
    config.validate()?;
    let selected = config
        .layer_indices
        .iter()
        .map(|&i| {
            layers.get(i).ok_or_else(|| {
                Error::Config(format!(
                    "layer index {i} out of range ({} layers)",
                    layers.len()
                ))
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let first = selected[0];
    let th = config.target_height.unwrap_or(first.height());
    let tw = config.target_width.unwrap_or(first.width());

    if selected.len() == 1 && first.height() == th && first.width() == tw {
        return Ok(first.clone());
    }

    let resized: Vec<FeatureMap> = selected
        .iter()
        .map(|layer| resize_bilinear(layer, th, tw))
        .collect::<Result<_>>()?;
    let channels: usize = resized.iter().map(FeatureMap::channels).sum();
    let mut out = Vec::with_capacity(th * tw * channels);
    for h in 0..th {
        for w in 0..tw {
            for layer in &resized {
                out.extend_from_slice(layer.patch(h, w));
            }
        }
    }
    FeatureMap::new(th, tw, channels, out)
}

/// Source sample positions for one output axis: `(lower index, upper index,
/// weight of upper)`.
fn axis_samples(input: usize, output: usize) -> Vec<(usize, usize, f64)> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|i| {
            let src = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (input - 1) as f64);
            let lo = src.floor() as usize;
            let hi = (lo + 1).min(input - 1);
            (lo, hi, src - lo as f64)
        })
        .collect()
}

pub fn resize_bilinear(map: &FeatureMap, height: usize, width: usize) -> Result<FeatureMap> {
    if height == 0 || width == 0 {
        return Err(Error::Config("resize target must be positive".into()));
    }
    if map.height() == height && map.width() == width {
        return Ok(map.clone());
    }
    let rows = axis_samples(map.height(), height);
    let cols = axis_samples(map.width(), width);
    let c = map.channels();
    let mut out = Vec::with_capacity(height * width * c);
    for &(r0, r1, fy) in &rows {
        for &(c0, c1, fx) in &cols {
            let (p00, p01) = (map.patch(r0, c0), map.patch(r0, c1));
            let (p10, p11) = (map.patch(r1, c0), map.patch(r1, c1));
            for k in 0..c {
                let top = p00[k] as f64 * (1.0 - fx) + p01[k] as f64 * fx;
                let bottom = p10[k] as f64 * (1.0 - fx) + p11[k] as f64 * fx;
                out.push((top * (1.0 - fy) + bottom * fy) as f32);
            }
        }
    }
    FeatureMap::new(height, width, c, out)
}

/// Replaces each patch vector by the per-channel mean over its `p × p`
/// neighborhood, clipped to the map bounds.
pub fn aggregate(map: &FeatureMap, config: &AggregationConfig) -> Result<FeatureMap> {
    config.validate()?;
    let radius = config.neighborhood_size / 2;
    if radius == 0 {
        return Ok(map.clone());
    }
    let (height, width, c) = (map.height(), map.width(), map.channels());
    let mut out = Vec::with_capacity(map.data().len());
    let mut acc = vec![0f64; c];
    for h in 0..height {
        let rows = h.saturating_sub(radius)..=(h + radius).min(height - 1);
        for w in 0..width {
            let cols = w.saturating_sub(radius)..=(w + radius).min(width - 1);
            acc.fill(0.0);
            let mut count = 0usize;
            for a in rows.clone() {
                for b in cols.clone() {
                    for (s, &v) in acc.iter_mut().zip(map.patch(a, b)) {
                        *s += v as f64;
                    }
                    count += 1;
                }
            }
            let n = count as f64;
            out.extend(acc.iter().map(|s| (s / n) as f32));
        }
    }
    FeatureMap::new(height, width, c, out)
}

/// Reads an entry's feature file and produces its aggregated patch set.
pub fn extract_patch_set(
    manifest: &DatasetManifest,
    entry: &ManifestEntry,
    config: &AggregationConfig,
) -> Result<PatchSet> {
    let layers = read_feature_layers(manifest.feature_path(entry))?;
    let aligned = align_multiscale(&layers, config)?;
    let aggregated = aggregate(&aligned, config)?;
    Ok(PatchSet::new(entry.id.clone(), aggregated))
}
