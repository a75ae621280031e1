//! Anomaly maps and image scores for test images, plus PGM rendering.

use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::discriminator::Discriminator;
use crate::error::{Error, Result};
use crate::feature_io::manifest::{read_json_lines, write_json_lines};
use crate::feature_io::{write_feature_map, FeatureMap};
use crate::pipeline::PatchSet;

/// Raw patch-level scores over the `H' × W'` grid.
#[derive(Debug, Clone, PartialEq)]
pub struct AnomalyMap {
    pub image_id: String,
    pub height: usize,
    pub width: usize,
    /// Row-major.
    pub grid: Vec<f64>,
}

impl AnomalyMap {
    pub fn max(&self) -> f64 {
        self.grid.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// Row-major index of the maximum (first one on ties).
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &v) in self.grid.iter().enumerate() {
            if v > self.grid[best] {
                best = i;
            }
        }
        best
    }

    /// Stored as an `H' × W' × 1` WSFX file (values narrowed to `f32`).
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let map = FeatureMap::new(
            self.height,
            self.width,
            1,
            self.grid.iter().map(|&v| v as f32).collect(),
        )?;
        write_feature_map(&map, path)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageResult {
    #[serde(rename = "id")]
    pub image_id: String,
    pub label: Option<u8>,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoredImage {
    pub map: AnomalyMap,
    pub result: ImageResult,
}

impl ScoredImage {
    /// Wraps a raw grid; the image score is its maximum.
    pub fn from_grid(image_id: String, height: usize, width: usize, grid: Vec<f64>) -> Self {
        let map = AnomalyMap {
            image_id: image_id.clone(),
            height,
            width,
            grid,
        };
        let score = map.max();
        Self {
            map,
            result: ImageResult {
                image_id,
                label: None,
                score,
            },
        }
    }

    pub fn with_label(mut self, label: Option<u8>) -> Self {
        self.result.label = label;
        self
    }
}

/// Applies `model` to every patch; the image score is the map maximum.
pub fn score_image(model: &Discriminator, patches: &PatchSet) -> Result<ScoredImage> {
    if patches.dim() != model.input_dim() {
        return Err(Error::DimensionMismatch {
            expected: model.input_dim(),
            actual: patches.dim(),
        });
    }
    let grid = patches
        .vectors()
        .map(|v| model.forward(v))
        .collect::<Result<Vec<_>>>()?;
    if grid.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("anomaly map"));
    }
    Ok(ScoredImage::from_grid(
        patches.image_id.clone(),
        patches.height(),
        patches.width(),
        grid,
    ))
}

/// Scores many images in parallel, preserving input order.
pub fn score_images(model: &Discriminator, sets: &[PatchSet]) -> Result<Vec<ScoredImage>> {
    sets.par_iter().map(|s| score_image(model, s)).collect()
}

pub fn write_scores(path: impl AsRef<Path>, results: &[ImageResult]) -> Result<()> {
    write_json_lines(path, results)
}

pub fn read_scores(path: impl AsRef<Path>) -> Result<Vec<ImageResult>> {
    read_json_lines(path.as_ref())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RenderConfig {
    pub height: usize,
    pub width: usize,
    /// Gaussian blur sigma in output pixels; 0 disables blurring.
    pub sigma: f64,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self {
            height: 256,
            width: 256,
            sigma: 4.0,
        }
    }
}

/// Upsampled, optionally blurred, min-max normalized map in `[0, 1]`,
/// row-major `height × width`. Constant maps normalize to all zeros.
pub fn render_values(map: &AnomalyMap, config: &RenderConfig) -> Result<Vec<f64>> {
    if config.height == 0 || config.width == 0 {
        return Err(Error::Config("render target has zero area".into()));
    }
    if config.height < map.height || config.width < map.width {
        return Err(Error::Config(format!(
            "render target {}x{} smaller than map {}x{}",
            config.height, config.width, map.height, map.width
        )));
    }
    if !(config.sigma >= 0.0 && config.sigma.is_finite()) {
        return Err(Error::Config("render sigma must be finite and >= 0".into()));
    }
    let mut img = upsample(map, config.height, config.width);
    if config.sigma > 0.0 {
        gaussian_blur(&mut img, config.height, config.width, config.sigma);
    }
    let lo = img.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = img.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    if span > 0.0 {
        img.iter_mut().for_each(|v| *v = (*v - lo) / span);
    } else {
        img.fill(0.0);
    }
    Ok(img)
}

/// Writes [`render_values`] as a binary 8-bit PGM (P5).
pub fn render_map(map: &AnomalyMap, config: &RenderConfig, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let values = render_values(map, config)?;
    let mut bytes = format!("P5\n{} {}\n255\n", config.width, config.height).into_bytes();
    bytes.extend(
        values
            .iter()
            .map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8),
    );
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn upsample(map: &AnomalyMap, height: usize, width: usize) -> Vec<f64> {
    let axis = |input: usize, output: usize| -> Vec<(usize, usize, f64)> {
        let scale = input as f64 / output as f64;
        (0..output)
            .map(|i| {
                let src = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (input - 1) as f64);
                let lo = src.floor() as usize;
                (lo, (lo + 1).min(input - 1), src - lo as f64)
            })
            .collect()
    };
    let rows = axis(map.height, height);
    let cols = axis(map.width, width);
    let at = |h: usize, w: usize| map.grid[h * map.width + w];
    let mut out = Vec::with_capacity(height * width);
    for &(r0, r1, fy) in &rows {
        for &(c0, c1, fx) in &cols {
            let top = at(r0, c0) * (1.0 - fx) + at(r0, c1) * fx;
            let bottom = at(r1, c0) * (1.0 - fx) + at(r1, c1) * fx;
            out.push(top * (1.0 - fy) + bottom * fy);
        }
    }
    out
}

/// Separable Gaussian blur, radius `ceil(3σ)`, edge-clamped.
fn gaussian_blur(img: &mut [f64], height: usize, width: usize, sigma: f64) {
    let radius = (3.0 * sigma).ceil() as isize;
    let mut kernel: Vec<f64> = (-radius..=radius)
        .map(|x| (-(x * x) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= total);

    let mut tmp = vec![0.0; img.len()];
    for h in 0..height {
        for w in 0..width {
            tmp[h * width + w] = kernel
                .iter()
                .enumerate()
                .map(|(i, k)| {
                    let x =
                        (w as isize + i as isize - radius).clamp(0, width as isize - 1) as usize;
                    k * img[h * width + x]
                })
                .sum();
        }
    }
    for h in 0..height {
        for w in 0..width {
            img[h * width + w] = kernel
                .iter()
                .enumerate()
                .map(|(i, k)| {
                    let y =
                        (h as isize + i as isize - radius).clamp(0, height as isize - 1) as usize;
                    k * tmp[y * width + w]
                })
                .sum();
        }
    }
}
