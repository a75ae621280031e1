//! End-to-end driver: extract → bank → mine → mix → train → score → eval,
//! persisting every stage's artifact under one output directory.
//!
//! ```text
//! <out>/run.json                resolved configuration
//! <out>/bank.wsfx               normal bank (+ .origins.jsonl)
//! <out>/mined.wsfx              mined anomaly set (+ .rows.jsonl, .meta.json)
//! <out>/rep<i>/augmented.wsfx   mixed anomaly set (+ .rows.jsonl)
//! <out>/rep<i>/model.wsdm       discriminator
//! <out>/rep<i>/train_log.jsonl  per-epoch loss
//! <out>/rep<i>/scores.jsonl     test image scores
//! <out>/rep<i>/report.json
//! <out>/rep<i>/maps/<id>.wsfx   raw anomaly maps
//! <out>/rep<i>/renders/<id>.pgm optional renders
//! <out>/report.json, report.md  mean ± std over repeats
//! ```

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::discriminator::{train, TrainConfig};
use crate::error::{Error, Result};
use crate::eval::{aggregate_runs, evaluate, markdown_table, EvalReport};
use crate::feature_io::manifest::write_json_lines;
use crate::feature_io::{read_mask, DatasetManifest, PatchOrigin, Split};
use crate::inference::{
    render_map, score_images, write_scores, ImageResult, RenderConfig, ScoredImage,
};
use crate::memory_bank::{build_bank, knn_score_image, NormalBank};
use crate::mining::{linear_mix, mine, AugmentedAnomalySet, MinedAnomalySet, MixConfig};
use crate::pipeline::{extract_patch_set, AggregationConfig, PatchSet};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub manifest: PathBuf,
    /// Root for manifest-relative paths; defaults to the manifest's directory.
    pub dataset_root: Option<PathBuf>,
    pub output_dir: PathBuf,
    pub aggregation: AggregationConfig,
    pub retention_rate: f64,
    pub alpha_low: f64,
    pub alpha_high: f64,
    /// Augmented set size; `None` means the bank size.
    pub mix_target: Option<usize>,
    pub train: TrainConfig,
    /// Independent repeats; repeat `i` uses seed `train.seed + i`.
    pub repeat: usize,
    /// When off, every anomaly-image patch is kept.
    pub mining: bool,
    /// When off, the mined set is used without augmentation.
    pub mixing: bool,
    pub bank_subsample: Option<f64>,
    pub save_maps: bool,
    pub render: Option<RenderConfig>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            manifest: PathBuf::from("manifest.jsonl"),
            dataset_root: None,
            output_dir: PathBuf::from("run"),
            aggregation: AggregationConfig::default(),
            retention_rate: 0.2,
            alpha_low: 0.1,
            alpha_high: 1.0,
            mix_target: None,
            train: TrainConfig::default(),
            repeat: 1,
            mining: true,
            mixing: true,
            bank_subsample: None,
            save_maps: true,
            render: None,
        }
    }
}

impl RunConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|source| Error::Json {
            path: path.to_path_buf(),
            line: source.line(),
            source,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.aggregation.validate()?;
        self.train.validate()?;
        if self.repeat == 0 {
            return Err(Error::Config("repeat must be at least 1".into()));
        }
        if !(self.retention_rate > 0.0 && self.retention_rate <= 1.0) {
            return Err(Error::Config(format!(
                "retention rate {} not in (0, 1]",
                self.retention_rate
            )));
        }
        Ok(())
    }

    pub fn load_manifest(&self) -> Result<DatasetManifest> {
        match &self.dataset_root {
            Some(root) => DatasetManifest::load_with_root(&self.manifest, root),
            None => DatasetManifest::load(&self.manifest),
        }
    }

    pub fn mix_config(&self, seed: u64) -> MixConfig {
        MixConfig {
            target_size: self.mix_target,
            alpha_low: self.alpha_low,
            alpha_high: self.alpha_high,
            seed,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScoringMode {
    Discriminator,
    /// No anomaly training images: nearest-neighbor distances to the bank.
    KnnFallback,
}

#[derive(Debug, Clone)]
pub struct RepeatOutcome {
    pub seed: u64,
    pub dir: PathBuf,
    pub report: EvalReport,
    pub results: Vec<ImageResult>,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub mode: ScoringMode,
    pub report: EvalReport,
    pub repeats: Vec<RepeatOutcome>,
    pub bank_size: usize,
    pub mined: Option<MinedAnomalySet>,
}

#[derive(Serialize)]
struct RunRecord<'a> {
    version: &'static str,
    config: &'a RunConfig,
}

/// Extracts the patch sets of every entry in `split`, in manifest order.
pub fn extract_split(
    manifest: &DatasetManifest,
    split: Split,
    config: &AggregationConfig,
) -> Result<Vec<PatchSet>> {
    let entries: Vec<_> = manifest.split(split).collect();
    entries
        .par_iter()
        .map(|e| extract_patch_set(manifest, e, config))
        .collect()
}

/// Fraction of mined patches whose origin lies within `dilation` patches
/// (Chebyshev distance) of a ground-truth mask cell. `dilation = 0` is the
/// plain mask. `None` if any mined image has no mask.
pub fn mined_mask_precision(
    mined: &MinedAnomalySet,
    manifest: &DatasetManifest,
    dilation: usize,
) -> Result<Option<f64>> {
    let mut masks: HashMap<&str, (usize, usize, Vec<bool>)> = HashMap::new();
    for e in &manifest.entries {
        if let Some(p) = manifest.mask_path(e) {
            masks.insert(e.id.as_str(), read_mask(p)?);
        }
    }
    if mined.is_empty() {
        return Ok(None);
    }
    let mut hits = 0usize;
    for PatchOrigin { image_id, h, w } in &mined.origins {
        let Some((height, width, mask)) = masks.get(image_id.as_str()) else {
            return Ok(None);
        };
        let (h, w) = (*h as usize, *w as usize);
        let rows = h.saturating_sub(dilation)..=(h + dilation).min(height - 1);
        let hit = rows.into_iter().any(|a| {
            (w.saturating_sub(dilation)..=(w + dilation).min(width - 1))
                .any(|b| mask[a * width + b])
        });
        hits += hit as usize;
    }
    Ok(Some(hits as f64 / mined.len() as f64))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        line: 0,
        source,
    })?;
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub fn write_report(path: impl AsRef<Path>, report: &EvalReport) -> Result<()> {
    write_json(path.as_ref(), report)
}

pub fn read_report(path: impl AsRef<Path>) -> Result<EvalReport> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        line: source.line(),
        source,
    })
}

/// Attaches manifest labels to scored images.
pub fn labelled_results(scored: &[ScoredImage], manifest: &DatasetManifest) -> Vec<ImageResult> {
    let labels: HashMap<&str, u8> = manifest
        .entries
        .iter()
        .map(|e| (e.id.as_str(), e.label))
        .collect();
    scored
        .iter()
        .map(|s| {
            let mut r = s.result.clone();
            r.label = labels.get(r.image_id.as_str()).copied();
            r
        })
        .collect()
}

fn persist_scored(
    dir: &Path,
    scored: &[ScoredImage],
    results: &[ImageResult],
    config: &RunConfig,
) -> Result<EvalReport> {
    write_scores(dir.join("scores.jsonl"), results)?;
    if config.save_maps {
        for s in scored {
            s.map
                .save(dir.join("maps").join(format!("{}.wsfx", s.map.image_id)))?;
        }
    }
    if let Some(render) = &config.render {
        for s in scored {
            render_map(
                &s.map,
                render,
                dir.join("renders").join(format!("{}.pgm", s.map.image_id)),
            )?;
        }
    }
    let report = evaluate(results)?;
    write_report(dir.join("report.json"), &report)?;
    Ok(report)
}

/// Runs the whole pipeline described by `config`.
pub fn run_all(config: &RunConfig) -> Result<RunOutcome> {
    config.validate()?;
    let out = &config.output_dir;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    write_json(
        &out.join("run.json"),
        &RunRecord {
            version: env!("CARGO_PKG_VERSION"),
            config,
        },
    )?;

    let manifest = config.load_manifest().map_err(|e| e.in_stage("manifest"))?;
    let agg = &config.aggregation;

    let mut bank = build_bank(&manifest, agg).map_err(|e| e.in_stage("bank"))?;
    if let Some(fraction) = config.bank_subsample {
        bank = bank
            .subsample(fraction, config.train.seed)
            .map_err(|e| e.in_stage("bank"))?;
    }
    bank.save(out.join("bank.wsfx"))
        .map_err(|e| e.in_stage("bank"))?;

    let test_sets =
        extract_split(&manifest, Split::Test, agg).map_err(|e| e.in_stage("extract"))?;
    let anomaly_sets =
        extract_split(&manifest, Split::TrainAnomaly, agg).map_err(|e| e.in_stage("extract"))?;

    if anomaly_sets.is_empty() {
        log::warn!("no train-anomaly images (K = 0); scoring with bank nearest-neighbor distances");
        return run_knn_fallback(config, &manifest, &bank, &test_sets);
    }

    let rate = if config.mining {
        config.retention_rate
    } else {
        1.0
    };
    let mined = mine(&bank, &anomaly_sets, rate).map_err(|e| e.in_stage("mine"))?;
    mined
        .save(out.join("mined.wsfx"))
        .map_err(|e| e.in_stage("mine"))?;
    drop(anomaly_sets);

    let mut repeats = Vec::with_capacity(config.repeat);
    for i in 0..config.repeat {
        let seed = config.train.seed + i as u64;
        let dir = out.join(format!("rep{i}"));
        let outcome = run_repeat(config, &manifest, &bank, &mined, &test_sets, seed, &dir)?;
        repeats.push(outcome);
    }
    finish(
        config,
        ScoringMode::Discriminator,
        repeats,
        bank.len(),
        Some(mined),
    )
}

fn run_repeat(
    config: &RunConfig,
    manifest: &DatasetManifest,
    bank: &NormalBank,
    mined: &MinedAnomalySet,
    test_sets: &[PatchSet],
    seed: u64,
    dir: &Path,
) -> Result<RepeatOutcome> {
    let augmented = if config.mixing {
        linear_mix(mined, bank, &config.mix_config(seed)).map_err(|e| e.in_stage("mix"))?
    } else {
        AugmentedAnomalySet::unmixed(mined)
    };
    augmented
        .save(dir.join("augmented.wsfx"))
        .map_err(|e| e.in_stage("mix"))?;

    let train_cfg = TrainConfig {
        seed,
        ..config.train.clone()
    };
    let trained =
        train(bank.features(), &augmented.features, &train_cfg).map_err(|e| e.in_stage("train"))?;
    trained
        .model
        .save(dir.join("model.wsdm"))
        .map_err(|e| e.in_stage("train"))?;
    write_json_lines(dir.join("train_log.jsonl"), &trained.log).map_err(|e| e.in_stage("train"))?;

    let scored = score_images(&trained.model, test_sets).map_err(|e| e.in_stage("score"))?;
    let results = labelled_results(&scored, manifest);
    let report = persist_scored(dir, &scored, &results, config).map_err(|e| e.in_stage("eval"))?;
    Ok(RepeatOutcome {
        seed,
        dir: dir.to_path_buf(),
        report,
        results,
    })
}

fn run_knn_fallback(
    config: &RunConfig,
    manifest: &DatasetManifest,
    bank: &NormalBank,
    test_sets: &[PatchSet],
) -> Result<RunOutcome> {
    let scored = test_sets
        .iter()
        .map(|s| knn_score_image(bank, s))
        .collect::<Result<Vec<_>>>()
        .map_err(|e| e.in_stage("score"))?;
    let results = labelled_results(&scored, manifest);
    let dir = config.output_dir.join("rep0");
    let report = persist_scored(&dir, &scored, &results, config).map_err(|e| e.in_stage("eval"))?;
    let repeats = vec![RepeatOutcome {
        seed: config.train.seed,
        dir,
        report,
        results,
    }];
    finish(config, ScoringMode::KnnFallback, repeats, bank.len(), None)
}

fn finish(
    config: &RunConfig,
    mode: ScoringMode,
    repeats: Vec<RepeatOutcome>,
    bank_size: usize,
    mined: Option<MinedAnomalySet>,
) -> Result<RunOutcome> {
    let reports: Vec<EvalReport> = repeats.iter().map(|r| r.report.clone()).collect();
    let report = aggregate_runs(&reports).map_err(|e| e.in_stage("eval"))?;
    let out = &config.output_dir;
    write_report(out.join("report.json"), &report)?;
    let label = match (mode, config.mining, config.mixing) {
        (ScoringMode::KnnFallback, ..) => "knn",
        (_, true, true) => "mining+mixing",
        (_, true, false) => "mining",
        (_, false, true) => "mixing",
        (_, false, false) => "none",
    };
    let md = markdown_table(&[(label, &report)]);
    fs::write(out.join("report.md"), md).map_err(|e| Error::io(out.join("report.md"), e))?;
    Ok(RunOutcome {
        mode,
        report,
        repeats,
        bank_size,
        mined,
    })
}
