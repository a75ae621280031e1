#![allow(dead_code)]

use std::path::Path;

use wsad_core::feature_io::{generate_synthetic, read_mask};
use wsad_core::{DatasetManifest, SynthConfig};

pub fn synth(dir: &Path, config: &SynthConfig) -> DatasetManifest {
    generate_synthetic(config, dir).expect("synthetic dataset")
}

/// Row-major mask of the image with `id`.
pub fn mask_of(manifest: &DatasetManifest, id: &str) -> (usize, usize, Vec<bool>) {
    let entry = manifest
        .entries
        .iter()
        .find(|e| e.id == id)
        .expect("known id");
    read_mask(manifest.mask_path(entry).expect("anomaly image has a mask")).expect("readable mask")
}

pub fn single_threaded<T: Send>(f: impl FnOnce() -> T + Send) -> T {
    rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .expect("thread pool")
        .install(f)
}
