//! Anomaly feature mining and linear-mixing augmentation.
//!
//! Mining scores every patch feature of the anomaly training images by its
//! distance to the normal bank and keeps the `⌊r·|M_a|⌋` most distant ones;
//! anomaly images are mostly normal tissue, and those patches would otherwise
//! be labelled anomalous. Mixing then interpolates mined features towards
//! random bank rows until the anomaly set is as large as the bank.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::feature_io::manifest::{read_json_lines, write_json_lines};
use crate::feature_io::{read_feature_map, write_feature_map, FeatureMatrix, PatchOrigin};
use crate::memory_bank::NormalBank;
use crate::pipeline::PatchSet;

/// Slack for `r · n` landing a hair below an integer, e.g. `0.29 * 100`.
const RETENTION_EPS: f64 = 1e-9;

/// `⌊rate · available⌋`.
pub fn retention_count(rate: f64, available: usize) -> Result<usize> {
    if !(rate > 0.0 && rate <= 1.0) {
        return Err(Error::Config(format!(
            "retention rate {rate} not in (0, 1]"
        )));
    }
    let count = ((rate * available as f64) + RETENTION_EPS).floor() as usize;
    Ok(count.min(available))
}

/// Indices of the `⌊rate · n⌋` highest scores, best first. Equal scores keep
/// their input order, so the selection for a smaller rate is always a prefix
/// of the selection for a larger one.
pub fn select_top(scores: &[f64], rate: f64) -> Result<Vec<usize>> {
    let keep = retention_count(rate, scores.len())?;
    if keep == 0 {
        return Err(Error::EmptyRetention {
            rate,
            available: scores.len(),
        });
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order.truncate(keep);
    Ok(order)
}

/// The retained anomaly features, sorted by score descending.
#[derive(Debug, Clone, PartialEq)]
pub struct MinedAnomalySet {
    pub features: FeatureMatrix,
    pub scores: Vec<f64>,
    pub origins: Vec<PatchOrigin>,
    pub retention_rate: f64,
    /// `|M_a|` before selection.
    pub source_count: usize,
}

impl MinedAnomalySet {
    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        write_feature_map(&self.features.to_feature_map()?, path)?;
        let rows: Vec<MinedRow> = self
            .scores
            .iter()
            .zip(&self.origins)
            .map(|(&score, origin)| MinedRow {
                score,
                origin: origin.clone(),
            })
            .collect();
        write_json_lines(rows_sidecar(path), &rows)?;
        write_meta(
            path,
            &MinedMeta {
                retention_rate: self.retention_rate,
                source_count: self.source_count,
            },
        )
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let features = FeatureMatrix::from_feature_map(read_feature_map(path)?);
        let rows: Vec<MinedRow> = read_json_lines(&rows_sidecar(path))?;
        if rows.len() != features.rows() {
            return Err(Error::DimensionMismatch {
                expected: features.rows(),
                actual: rows.len(),
            });
        }
        let meta: MinedMeta = read_meta(path)?;
        let (scores, origins) = rows.into_iter().map(|r| (r.score, r.origin)).unzip();
        Ok(Self {
            features,
            scores,
            origins,
            retention_rate: meta.retention_rate,
            source_count: meta.source_count,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct MinedRow {
    score: f64,
    #[serde(flatten)]
    origin: PatchOrigin,
}

#[derive(Serialize, Deserialize)]
struct MinedMeta {
    retention_rate: f64,
    source_count: usize,
}

/// Scores every patch of `anomaly_patches` against `bank` and keeps the top
/// `⌊rate · |M_a|⌋`. Ties are broken by image order, then row-major patch
/// position.
pub fn mine(bank: &NormalBank, anomaly_patches: &[PatchSet], rate: f64) -> Result<MinedAnomalySet> {
    if anomaly_patches.is_empty() {
        return Err(Error::NoAnomalyImages);
    }
    let vectors: Vec<&[f32]> = anomaly_patches.iter().flat_map(|s| s.vectors()).collect();
    let scores = bank.nearest_distances(vectors.par_iter().copied())?;
    let keep = select_top(&scores, rate)?;

    let mut origins_flat = Vec::with_capacity(vectors.len());
    for set in anomaly_patches {
        origins_flat.extend((0..set.len()).map(|i| (set, i)));
    }
    let mut features = FeatureMatrix::with_capacity(bank.dim(), keep.len());
    for &i in &keep {
        features.push_row(vectors[i])?;
    }
    Ok(MinedAnomalySet {
        features,
        scores: keep.iter().map(|&i| scores[i]).collect(),
        origins: keep
            .iter()
            .map(|&i| {
                let (set, j) = origins_flat[i];
                set.origin(j)
            })
            .collect(),
        retention_rate: rate,
        source_count: vectors.len(),
    })
}

/// Where an augmented row came from. `normal_row` is `None` for a mined
/// feature copied verbatim.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MixPair {
    pub anomaly_row: usize,
    pub normal_row: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedAnomalySet {
    pub features: FeatureMatrix,
    pub alphas: Vec<f64>,
    pub pairs: Vec<MixPair>,
}

impl AugmentedAnomalySet {
    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    /// The mined set as-is, without any mixed rows.
    pub fn unmixed(mined: &MinedAnomalySet) -> Self {
        Self {
            features: mined.features.clone(),
            alphas: vec![1.0; mined.len()],
            pairs: (0..mined.len())
                .map(|anomaly_row| MixPair {
                    anomaly_row,
                    normal_row: None,
                })
                .collect(),
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        write_feature_map(&self.features.to_feature_map()?, path)?;
        let rows: Vec<AugmentedRow> = self
            .alphas
            .iter()
            .zip(&self.pairs)
            .map(|(&alpha, pair)| AugmentedRow { alpha, pair: *pair })
            .collect();
        write_json_lines(rows_sidecar(path), &rows)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let features = FeatureMatrix::from_feature_map(read_feature_map(path)?);
        let rows: Vec<AugmentedRow> = read_json_lines(&rows_sidecar(path))?;
        if rows.len() != features.rows() {
            return Err(Error::DimensionMismatch {
                expected: features.rows(),
                actual: rows.len(),
            });
        }
        let (alphas, pairs) = rows.into_iter().map(|r| (r.alpha, r.pair)).unzip();
        Ok(Self {
            features,
            alphas,
            pairs,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct AugmentedRow {
    alpha: f64,
    #[serde(flatten)]
    pair: MixPair,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MixConfig {
    /// Output size; `None` means the bank size.
    pub target_size: Option<usize>,
    pub alpha_low: f64,
    pub alpha_high: f64,
    pub seed: u64,
}

impl Default for MixConfig {
    fn default() -> Self {
        Self {
            target_size: None,
            alpha_low: 0.1,
            alpha_high: 1.0,
            seed: 0,
        }
    }
}

/// Keeps every mined row (`α = 1`) and appends
/// `target − |M'_a|` rows `α·m_a + (1−α)·m_n`, with `m_a` and `m_n` drawn
/// uniformly with replacement and `α ~ U[alpha_low, alpha_high]`.
pub fn linear_mix(
    mined: &MinedAnomalySet,
    bank: &NormalBank,
    config: &MixConfig,
) -> Result<AugmentedAnomalySet> {
    if mined.is_empty() {
        return Err(Error::EmptyRetention {
            rate: mined.retention_rate,
            available: mined.source_count,
        });
    }
    if mined.features.dim() != bank.dim() {
        return Err(Error::DimensionMismatch {
            expected: bank.dim(),
            actual: mined.features.dim(),
        });
    }
    let (lo, hi) = (config.alpha_low, config.alpha_high);
    if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
        return Err(Error::Config(format!(
            "alpha range [{lo}, {hi}] must satisfy 0 < low <= high <= 1"
        )));
    }
    let target = config.target_size.unwrap_or(bank.len());
    if target < mined.len() {
        return Err(Error::MixTargetTooSmall {
            target,
            mined: mined.len(),
        });
    }

    let mut out = AugmentedAnomalySet::unmixed(mined);
    let dim = bank.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut row = vec![0f32; dim];
    for _ in mined.len()..target {
        let a = rng.random_range(0..mined.len());
        let n = rng.random_range(0..bank.len());
        let alpha: f64 = rng.random_range(lo..=hi);
        let (ma, mn) = (mined.features.row(a), bank.row(n));
        for ((o, &x), &y) in row.iter_mut().zip(ma).zip(mn) {
            *o = mix_value(x, y, alpha);
        }
        out.features.push_row(&row)?;
        out.alphas.push(alpha);
        out.pairs.push(MixPair {
            anomaly_row: a,
            normal_row: Some(n),
        });
    }
    Ok(out)
}

#[inline]
fn mix_value(anomaly: f32, normal: f32, alpha: f64) -> f32 {
    let v = alpha * anomaly as f64 + (1.0 - alpha) * normal as f64;
    // keep the result on the segment despite f64 round-off
    let (lo, hi) = if anomaly <= normal {
        (anomaly, normal)
    } else {
        (normal, anomaly)
    };
    (v as f32).clamp(lo, hi)
}

pub fn rows_sidecar(path: &Path) -> PathBuf {
    path.with_extension("rows.jsonl")
}

fn meta_path(path: &Path) -> PathBuf {
    path.with_extension("meta.json")
}

fn write_meta<T: Serialize>(path: &Path, meta: &T) -> Result<()> {
    let p = meta_path(path);
    let text = serde_json::to_string_pretty(meta).map_err(|source| Error::Json {
        path: p.clone(),
        line: 0,
        source,
    })?;
    std::fs::write(&p, text).map_err(|e| Error::io(&p, e))
}

fn read_meta<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let p = meta_path(path);
    let text = std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
    serde_json::from_str(&text).map_err(|source| Error::Json {
        path: p,
        line: 1,
        source,
    })
}
