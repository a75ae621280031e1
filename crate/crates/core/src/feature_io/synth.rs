//! Seeded synthetic feature maps with planted rectangular anomalies.
//!
//! Every patch of every image is `base + noise_sigma * z`, with `base` drawn
//! once per dataset and `z` standard normal. Anomaly images add
//! `shift_magnitude * u` inside one `blob_height × blob_width` rectangle,
//! where `u` is a unit direction drawn once per dataset.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{
    read_feature_map, write_feature_map, DatasetManifest, FeatureMap, ManifestEntry, Split,
};
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.jsonl";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub seed: u64,
    pub n_normal_train: usize,
    pub n_anomaly_train: usize,
    pub n_normal_test: usize,
    pub n_anomaly_test: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub blob_height: usize,
    pub blob_width: usize,
    pub shift_magnitude: f64,
    pub noise_sigma: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            n_normal_train: 100,
            n_anomaly_train: 8,
            n_normal_test: 50,
            n_anomaly_test: 50,
            height: 16,
            width: 16,
            channels: 32,
            blob_height: 5,
            blob_width: 5,
            shift_magnitude: 3.0,
            noise_sigma: 0.5,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 || self.channels == 0 {
            return Err(Error::Config("synthetic map dims must be positive".into()));
        }
        if self.blob_height == 0
            || self.blob_width == 0
            || self.blob_height > self.height
            || self.blob_width > self.width
        {
            return Err(Error::Config(format!(
                "blob {}x{} does not fit in a {}x{} map",
                self.blob_height, self.blob_width, self.height, self.width
            )));
        }
        if !(self.shift_magnitude >= 0.0 && self.shift_magnitude.is_finite()) {
            return Err(Error::Config(
                "shift_magnitude must be finite and >= 0".into(),
            ));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::Config("noise_sigma must be finite and >= 0".into()));
        }
        Ok(())
    }
}

/// Writes feature maps, masks and `manifest.jsonl` under `out_dir` and
/// returns the manifest (rooted at `out_dir`).
pub fn generate_synthetic(
    config: &SynthConfig,
    out_dir: impl AsRef<Path>,
) -> Result<DatasetManifest> {
    config.validate()?;
    let out_dir = out_dir.as_ref();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let c = config.channels;

    let base: Vec<f64> = (0..c).map(|_| StandardNormal.sample(&mut rng)).collect();
    let direction = unit_direction(&mut rng, c);

    let plan = [
        (
            Split::TrainNormal,
            "train_normal",
            config.n_normal_train,
            0u8,
        ),
        (
            Split::TrainAnomaly,
            "train_anomaly",
            config.n_anomaly_train,
            1,
        ),
        (Split::Test, "test_normal", config.n_normal_test, 0),
        (Split::Test, "test_anomaly", config.n_anomaly_test, 1),
    ];

    let mut entries = Vec::new();
    for (split, prefix, count, label) in plan {
        for i in 0..count {
            let id = format!("{prefix}_{i:04}");
            let blob = (label == 1).then(|| {
                let top = rng.random_range(0..=config.height - config.blob_height);
                let left = rng.random_range(0..=config.width - config.blob_width);
                (top, left)
            });

            let mut map = FeatureMap::zeros(config.height, config.width, c)?;
            let mut mask = FeatureMap::zeros(config.height, config.width, 1)?;
            for h in 0..config.height {
                for w in 0..config.width {
                    let inside = blob.is_some_and(|(top, left)| {
                        (top..top + config.blob_height).contains(&h)
                            && (left..left + config.blob_width).contains(&w)
                    });
                    let shift = if inside { config.shift_magnitude } else { 0.0 };
                    for (k, v) in map.patch_mut(h, w).iter_mut().enumerate() {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        *v = (base[k] + config.noise_sigma * z + shift * direction[k]) as f32;
                    }
                    if inside {
                        mask.patch_mut(h, w)[0] = 1.0;
                    }
                }
            }

            let feature_path = format!("features/{id}.wsfx");
            write_feature_map(&map, out_dir.join(&feature_path))?;
            let mask_path = if label == 1 {
                let p = format!("masks/{id}.wsfx");
                write_feature_map(&mask, out_dir.join(&p))?;
                Some(p)
            } else {
                None
            };
            entries.push(ManifestEntry {
                id,
                split,
                label,
                feature_path,
                mask_path,
            });
        }
    }

    let manifest = DatasetManifest::new(out_dir, entries)?;
    manifest.save(out_dir.join(MANIFEST_FILE))?;
    Ok(manifest)
}

fn unit_direction(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut *rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-12 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

/// Reads a ground-truth patch mask (`H × W × 1`, nonzero = anomalous) as a
/// row-major boolean grid.
pub fn read_mask(path: impl AsRef<Path>) -> Result<(usize, usize, Vec<bool>)> {
    let map = read_feature_map(path)?;
    if map.channels() != 1 {
        return Err(Error::DimensionMismatch {
            expected: 1,
            actual: map.channels(),
        });
    }
    let (h, w) = (map.height(), map.width());
    Ok((h, w, map.data().iter().map(|&v| v != 0.0).collect()))
}
