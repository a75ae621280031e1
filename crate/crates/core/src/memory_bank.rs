//! The normal feature bank and exact nearest-neighbor distance queries.

use std::path::{Path, PathBuf};

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::feature_io::manifest::{read_json_lines, write_json_lines};
use crate::feature_io::{
    read_feature_map, write_feature_map, DatasetManifest, FeatureMatrix, PatchOrigin, Split,
};
use crate::pipeline::{extract_patch_set, AggregationConfig, PatchSet};

/// Row block size for the parallel single-query scan.
const PAR_BLOCK_ROWS: usize = 4096;

/// All patch features of the normal training images, with precomputed squared
/// row norms for distance expansion.
#[derive(Debug, Clone)]
pub struct NormalBank {
    features: FeatureMatrix,
    row_norms: Vec<f64>,
    origins: Vec<PatchOrigin>,
}

impl NormalBank {
    pub fn new(features: FeatureMatrix, origins: Vec<PatchOrigin>) -> Result<Self> {
        if features.is_empty() {
            return Err(Error::NoNormalImages);
        }
        if origins.len() != features.rows() {
            return Err(Error::DimensionMismatch {
                expected: features.rows(),
                actual: origins.len(),
            });
        }
        if !features.data().iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("normal bank"));
        }
        let row_norms = features.iter_rows().map(|r| dot(r, r)).collect();
        Ok(Self {
            features,
            row_norms,
            origins,
        })
    }

    pub fn from_patch_sets<'a>(sets: impl IntoIterator<Item = &'a PatchSet>) -> Result<Self> {
        let mut features: Option<FeatureMatrix> = None;
        let mut origins = Vec::new();
        for set in sets {
            let m =
                features.get_or_insert_with(|| FeatureMatrix::with_capacity(set.dim(), set.len()));
            for (i, v) in set.vectors().enumerate() {
                m.push_row(v)?;
                origins.push(set.origin(i));
            }
        }
        Self::new(features.ok_or(Error::NoNormalImages)?, origins)
    }

    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.features.dim()
    }

    pub fn features(&self) -> &FeatureMatrix {
        &self.features
    }

    pub fn row(&self, i: usize) -> &[f32] {
        self.features.row(i)
    }

    pub fn origins(&self) -> &[PatchOrigin] {
        &self.origins
    }

    fn check_dim(&self, query: &[f32]) -> Result<()> {
        if query.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                actual: query.len(),
            });
        }
        Ok(())
    }

    fn min_sq_distance(&self, query: &[f32], query_norm: f64, rows: std::ops::Range<usize>) -> f64 {
        let dim = self.dim();
        let data = &self.features.data()[rows.start * dim..rows.end * dim];
        data.chunks_exact(dim)
            .zip(&self.row_norms[rows])
            .map(|(row, &norm)| query_norm + norm - 2.0 * dot(query, row))
            .fold(f64::INFINITY, f64::min)
    }

    /// Exact distance from `query` to its nearest bank row.
    pub fn nearest_distance(&self, query: &[f32]) -> Result<f64> {
        self.check_dim(query)?;
        let d2 = self.min_sq_distance(query, dot(query, query), 0..self.len());
        Ok(d2.max(0.0).sqrt())
    }

    /// Same as [`nearest_distance`](Self::nearest_distance) but splits the
    /// bank scan into row blocks evaluated in parallel.
    pub fn nearest_distance_par(&self, query: &[f32]) -> Result<f64> {
        self.check_dim(query)?;
        let qn = dot(query, query);
        let n = self.len();
        let d2 = (0..n.div_ceil(PAR_BLOCK_ROWS))
            .into_par_iter()
            .map(|b| {
                self.min_sq_distance(
                    query,
                    qn,
                    b * PAR_BLOCK_ROWS..((b + 1) * PAR_BLOCK_ROWS).min(n),
                )
            })
            .reduce(|| f64::INFINITY, f64::min);
        Ok(d2.max(0.0).sqrt())
    }

    /// Nearest distances for many queries, parallel over queries.
    pub fn nearest_distances<'q, I>(&self, queries: I) -> Result<Vec<f64>>
    where
        I: IntoParallelIterator<Item = &'q [f32]>,
        I::Iter: IndexedParallelIterator,
    {
        queries
            .into_par_iter()
            .map(|q| self.nearest_distance(q))
            .collect()
    }

    /// Uniform random subset of `fraction` of the rows, keeping their
    /// original relative order.
    pub fn subsample(&self, fraction: f64, seed: u64) -> Result<Self> {
        if !(fraction > 0.0 && fraction <= 1.0) {
            return Err(Error::Config(format!(
                "bank subsample fraction {fraction} not in (0, 1]"
            )));
        }
        let keep = ((self.len() as f64 * fraction).round() as usize).clamp(1, self.len());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut idx = sample(&mut rng, self.len(), keep).into_vec();
        idx.sort_unstable();
        let mut features = FeatureMatrix::with_capacity(self.dim(), keep);
        for &i in &idx {
            features.push_row(self.row(i))?;
        }
        let origins = idx.iter().map(|&i| self.origins[i].clone()).collect();
        Self::new(features, origins)
    }

    /// Writes the bank as a `rows × 1 × C'` WSFX file plus a JSON-lines
    /// origins sidecar next to it.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        write_feature_map(&self.features.to_feature_map()?, path)?;
        write_json_lines(origins_sidecar(path), &self.origins)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let features = FeatureMatrix::from_feature_map(read_feature_map(path)?);
        let origins = read_json_lines(&origins_sidecar(path))?;
        Self::new(features, origins)
    }
}

pub fn origins_sidecar(path: &Path) -> PathBuf {
    path.with_extension("origins.jsonl")
}

/// f64 dot product of two f32 vectors. `dot(x, x)` and a norm computed with
/// this function agree bitwise, so a bank row queried against itself yields
/// exactly zero.
#[inline]
pub(crate) fn dot(a: &[f32], b: &[f32]) -> f64 {
    // Four independent accumulators; order is fixed so results are
    // reproducible.
    let mut acc = [0f64; 4];
    let mut ca = a.chunks_exact(4);
    let mut cb = b.chunks_exact(4);
    for (x, y) in (&mut ca).zip(&mut cb) {
        for k in 0..4 {
            acc[k] += x[k] as f64 * y[k] as f64;
        }
    }
    let mut tail = 0f64;
    for (x, y) in ca.remainder().iter().zip(cb.remainder()) {
        tail += *x as f64 * *y as f64;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// Builds the bank from every train-normal image, in manifest order.
pub fn build_bank(manifest: &DatasetManifest, config: &AggregationConfig) -> Result<NormalBank> {
    let entries: Vec<_> = manifest.split(Split::TrainNormal).collect();
    if entries.is_empty() {
        return Err(Error::NoNormalImages);
    }
    let sets = entries
        .par_iter()
        .map(|e| extract_patch_set(manifest, e, config))
        .collect::<Result<Vec<_>>>()?;
    let dim = sets[0].dim();
    if let Some(bad) = sets.iter().find(|s| s.dim() != dim) {
        return Err(Error::DimensionMismatch {
            expected: dim,
            actual: bad.dim(),
        });
    }
    NormalBank::from_patch_sets(&sets)
}

/// Nearest-neighbor distance map of a test image and its maximum. Used when
/// no anomaly images are available for training.
pub fn knn_score_image(
    bank: &NormalBank,
    patches: &PatchSet,
) -> Result<crate::inference::ScoredImage> {
    let grid = bank.nearest_distances(patches.vectors().collect::<Vec<_>>())?;
    Ok(crate::inference::ScoredImage::from_grid(
        patches.image_id.clone(),
        patches.height(),
        patches.width(),
        grid,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::feature_io::FeatureMap;
    use proptest::prelude::*;
    use rand::Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn random_bank(rows: usize, dim: usize, seed: u64) -> NormalBank {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..rows * dim)
            .map(|_| StandardNormal.sample(&mut rng))
            .collect::<Vec<f32>>();
        let origins = (0..rows).map(|i| PatchOrigin::new("r", i, 0)).collect();
        NormalBank::new(FeatureMatrix::new(dim, data).unwrap(), origins).unwrap()
    }

    fn brute_force(bank: &NormalBank, q: &[f32]) -> f64 {
        bank.features()
            .iter_rows()
            .map(|r| {
                r.iter()
                    .zip(q)
                    .map(|(a, b)| (*a as f64 - *b as f64).powi(2))
                    .sum::<f64>()
                    .sqrt()
            })
            .fold(f64::INFINITY, f64::min)
    }

    #[test]
    fn members_score_zero() {
        let bank = random_bank(300, 17, 1);
        for i in 0..bank.len() {
            assert_eq!(bank.nearest_distance(bank.row(i)).unwrap(), 0.0);
        }
    }

    #[test]
    fn three_four_five() {
        let bank = NormalBank::new(
            FeatureMatrix::new(2, vec![0.0, 0.0, 3.0, 4.0]).unwrap(),
            vec![PatchOrigin::new("a", 0, 0), PatchOrigin::new("a", 0, 1)],
        )
        .unwrap();
        assert_eq!(bank.nearest_distance(&[6.0, 8.0]).unwrap(), 5.0);
    }

    #[test]
    fn dimension_mismatch() {
        let bank = random_bank(4, 3, 0);
        assert!(matches!(
            bank.nearest_distance(&[0.0; 4]),
            Err(Error::DimensionMismatch {
                expected: 3,
                actual: 4
            })
        ));
    }

    #[test]
    fn matches_brute_force_and_parallel() {
        let bank = random_bank(1000, 64, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let q: Vec<f32> = (0..64).map(|_| StandardNormal.sample(&mut rng)).collect();
            let want = brute_force(&bank, &q);
            let got = bank.nearest_distance(&q).unwrap();
            let par = bank.nearest_distance_par(&q).unwrap();
            assert!((got - want).abs() <= 1e-6 * want, "{got} vs {want}");
            assert!((par - got).abs() <= 1e-6 * got);
        }
    }

    #[test]
    fn empty_bank_rejected() {
        assert!(matches!(
            NormalBank::new(FeatureMatrix::with_capacity(3, 0), vec![]),
            Err(Error::NoNormalImages)
        ));
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bank.wsfx");
        let bank = random_bank(10, 5, 9);
        bank.save(&path).unwrap();
        let back = NormalBank::load(&path).unwrap();
        assert_eq!(back.features(), bank.features());
        assert_eq!(back.origins(), bank.origins());
        assert!(dir.path().join("bank.origins.jsonl").exists());
    }

    #[test]
    fn subsample_keeps_rows_in_order() {
        let bank = random_bank(100, 4, 0);
        let sub = bank.subsample(0.25, 1).unwrap();
        assert_eq!(sub.len(), 25);
        let rows: Vec<u32> = sub.origins().iter().map(|o| o.h).collect();
        assert!(rows.windows(2).all(|w| w[0] < w[1]));
        assert!(bank.subsample(0.0, 1).is_err());
        assert_eq!(bank.subsample(0.25, 1).unwrap().origins(), sub.origins());
    }

    #[test]
    fn knn_identical_image_scores_zero() {
        let map = FeatureMap::new(2, 2, 3, (0..12).map(|v| v as f32 * 0.1).collect()).unwrap();
        let set = PatchSet::new("x", map);
        let bank = NormalBank::from_patch_sets([&set]).unwrap();
        let scored = knn_score_image(&bank, &set).unwrap();
        assert!(scored.map.grid.iter().all(|&v| v == 0.0));
        assert_eq!(scored.result.score, 0.0);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn one_lipschitz_and_nonnegative(seed in any::<u64>()) {
            let bank = random_bank(200, 8, seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
            for _ in 0..20 {
                let a: Vec<f32> = (0..8).map(|_| rng.random_range(-3.0..3.0)).collect();
                let b: Vec<f32> = (0..8).map(|_| rng.random_range(-3.0..3.0)).collect();
                let (sa, sb) = (bank.nearest_distance(&a).unwrap(), bank.nearest_distance(&b).unwrap());
                let gap = a.iter().zip(&b).map(|(x, y)| ((x - y) as f64).powi(2)).sum::<f64>().sqrt();
                prop_assert!(sa >= 0.0 && sb >= 0.0);
                prop_assert!((sa - sb).abs() <= gap + 1e-5);
            }
        }
    }
}
