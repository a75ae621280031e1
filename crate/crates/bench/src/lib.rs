//! Seeded fixtures shared by the benchmarks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use wsad_core::{FeatureMap, FeatureMatrix, ImageResult, NormalBank, PatchOrigin};

pub fn uniform_matrix(rows: usize, dim: usize, seed: u64) -> FeatureMatrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..rows * dim)
        .map(|_| rng.random_range(-1.0f32..1.0))
        .collect();
    FeatureMatrix::new(dim, data).expect("non-empty dims")
}

pub fn bank(rows: usize, dim: usize, seed: u64) -> NormalBank {
    let origins = (0..rows).map(|i| PatchOrigin::new("bench", i, 0)).collect();
    NormalBank::new(uniform_matrix(rows, dim, seed), origins).expect("valid bank")
}

pub fn feature_map(height: usize, width: usize, channels: usize, seed: u64) -> FeatureMap {
    let data = uniform_matrix(height * width, channels, seed)
        .data()
        .to_vec();
    FeatureMap::new(height, width, channels, data).expect("consistent dims")
}

/// Labelled scores on a coarse grid, so ties are common.
pub fn scored_results(n: usize, seed: u64) -> Vec<ImageResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let label = rng.random_bool(0.5) as u8;
            let score = (rng.random_range(0.0..4.0) + label as f64).floor();
            ImageResult {
                image_id: format!("img{i}"),
                label: Some(label),
                score,
            }
        })
        .collect()
}
