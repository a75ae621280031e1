//! Acceptance checks for the library and the end-to-end pipeline.
//!
//! Runs as a plain binary (no libtest harness) so every criterion prints
//! exactly one verdict line. Exits non-zero if any criterion fails.

mod common;

use std::fs;
use std::path::Path;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use wsad_core::discriminator::{gradients, loss};
use wsad_core::eval::auroc;
use wsad_core::feature_io::Split;
use wsad_core::memory_bank::knn_score_image;
use wsad_core::mining::{linear_mix, mine, retention_count, select_top, MixConfig};
use wsad_core::run::{extract_split, mined_mask_precision, run_all};
use wsad_core::{
    Discriminator, FeatureMap, FeatureMatrix, ImageResult, MinedAnomalySet, NormalBank,
    PatchOrigin, PatchSet, RunConfig, SynthConfig,
};

struct Verdict {
    pass: bool,
    detail: String,
}

impl Verdict {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Self {
            pass,
            detail: detail.into(),
        }
    }
}

fn gaussian_matrix(rows: usize, dim: usize, rng: &mut ChaCha8Rng) -> FeatureMatrix {
    let data = (0..rows * dim)
        .map(|_| StandardNormal.sample(rng))
        .collect::<Vec<f32>>();
    FeatureMatrix::new(dim, data).unwrap()
}

fn anonymous_bank(features: FeatureMatrix) -> NormalBank {
    let origins = (0..features.rows())
        .map(|i| PatchOrigin::new("bank", i, 0))
        .collect();
    NormalBank::new(features, origins).unwrap()
}

// ---------------------------------------------------------------- 1

fn brute_force_nearest(bank: &FeatureMatrix, query: &[f32]) -> f64 {
    bank.iter_rows()
        .map(|row| {
            row.iter()
                .zip(query)
                .map(|(&a, &b)| {
                    let d = a as f64 - b as f64;
                    d * d
                })
                .sum::<f64>()
                .sqrt()
        })
        .fold(f64::INFINITY, f64::min)
}

fn knn_oracle() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let features = gaussian_matrix(10_000, 64, &mut rng);
    let mut queries = gaussian_matrix(990, 64, &mut rng);
    for i in 0..10 {
        queries.push_row(features.row(i * 997)).unwrap();
    }
    let bank = anonymous_bank(features.clone());

    let (got, elapsed) = common::single_threaded(|| {
        let start = Instant::now();
        let got: Vec<f64> = queries
            .iter_rows()
            .map(|q| bank.nearest_distance(q).unwrap())
            .collect();
        (got, start.elapsed())
    });
    let mut worst = 0.0f64;
    let mut bad = 0;
    for (q, &d) in queries.iter_rows().zip(&got) {
        let want = brute_force_nearest(&features, q);
        let err = if want == 0.0 {
            d
        } else {
            (d - want).abs() / want
        };
        worst = worst.max(err);
        bad += (err > 1e-6) as usize;
    }
    let fast = elapsed < Duration::from_secs(5);
    Verdict::new(
        bad == 0 && fast,
        format!(
            "1000 queries, max rel err {worst:.2e}, {bad} over 1e-6, {elapsed:.2?} single-threaded"
        ),
    )
}

// ---------------------------------------------------------------- 2

fn sort_oracle(scores: &[f64], keep: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
    idx.truncate(keep);
    idx
}

fn mining_oracle() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let bank = anonymous_bank(FeatureMatrix::new(1, vec![0.0]).unwrap());
    let mut cases = 0;
    let mut failures = Vec::new();
    for trial in 0..12 {
        // Half the trials draw from a handful of levels so duplicated scores abound.
        let values: Vec<f32> = (0..200)
            .map(|_| match trial % 3 {
                0 => rng.random_range(0.0f32..100.0),
                1 => rng.random_range(0..12) as f32,
                _ => rng.random_range(0..3) as f32 * 0.5,
            })
            .collect();
        let map = FeatureMap::new(10, 20, 1, values.clone()).unwrap();
        let set = PatchSet::new(format!("img{trial}"), map);
        let scores: Vec<f64> = values.iter().map(|&v| (v as f64).abs()).collect();
        for tenth in 1..=10 {
            let r = tenth as f64 / 10.0;
            let expected_len = 200 * tenth / 10;
            let oracle = sort_oracle(&scores, expected_len);
            let top = select_top(&scores, r).unwrap();
            let mined = mine(&bank, std::slice::from_ref(&set), r).unwrap();
            let mined_idx: Vec<usize> = mined
                .origins
                .iter()
                .map(|o| o.h as usize * 20 + o.w as usize)
                .collect();
            cases += 1;
            if top != oracle
                || mined_idx != oracle
                || mined.len() != expected_len
                || retention_count(r, 200).unwrap() != expected_len
            {
                failures.push(format!("trial {trial} r={r}"));
            }
        }
    }
    Verdict::new(
        failures.is_empty(),
        format!(
            "{cases} (trial, r) cases incl. tied scores, {} mismatches {:?}",
            failures.len(),
            failures
        ),
    )
}

// ---------------------------------------------------------------- 3

fn norm_diff(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| (x as f64 - y as f64).powi(2))
        .sum::<f64>()
        .sqrt()
}

fn mixing_geometry() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let bank = anonymous_bank(gaussian_matrix(2000, 32, &mut rng));
    let features = gaussian_matrix(300, 32, &mut rng);
    let mined = MinedAnomalySet {
        origins: (0..300)
            .map(|i| PatchOrigin::new("a", i / 20, i % 20))
            .collect(),
        scores: vec![1.0; 300],
        features,
        retention_rate: 1.0,
        source_count: 300,
    };
    let config = MixConfig {
        target_size: Some(300 + 10_000),
        seed: 3,
        ..MixConfig::default()
    };
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("augmented.wsfx");
    linear_mix(&mined, &bank, &config)
        .unwrap()
        .save(&path)
        .unwrap();
    let stored = wsad_core::AugmentedAnomalySet::load(&path).unwrap();

    let mut mixed = 0;
    let mut worst = 0.0f64;
    let mut bad = 0;
    for (i, (pair, &alpha)) in stored.pairs.iter().zip(&stored.alphas).enumerate() {
        let Some(n) = pair.normal_row else { continue };
        mixed += 1;
        let m_a = mined.features.row(pair.anomaly_row);
        let m_n = bank.row(n);
        let segment = norm_diff(m_n, m_a);
        let moved = norm_diff(stored.features.row(i), m_a);
        let err = (moved - (1.0 - alpha) * segment).abs() / segment;
        worst = worst.max(err);
        bad += (err > 1e-5 || !(0.1..=1.0).contains(&alpha)) as usize;
    }
    Verdict::new(
        mixed == 10_000 && bad == 0,
        format!(
            "{mixed} mixed rows from stored provenance, max rel err {worst:.2e}, {bad} violations"
        ),
    )
}

// ---------------------------------------------------------------- 4

fn independent_forward(d: &Discriminator, m: &[f32]) -> f64 {
    let mut out = d.b2;
    for ((row, &b), &w2) in d.w1.chunks_exact(m.len()).zip(&d.b1).zip(&d.w2) {
        let mut z = b;
        for (&w, &x) in row.iter().zip(m) {
            z += w * x as f64;
        }
        out += w2 * if z >= 0.0 { z } else { 0.1 * z };
    }
    out
}

/// Averages the per-pair hinge terms over every (normal, anomaly) pair, the
/// pairwise form of the loss.
fn double_sum_loss(d: &Discriminator, normals: &[&[f32]], anomalies: &[&[f32]]) -> f64 {
    let mut total = 0.0;
    for n in normals {
        for a in anomalies {
            total +=
                independent_forward(d, n).max(0.0) + (1.0 - independent_forward(d, a)).max(0.0);
        }
    }
    total / (normals.len() * anomalies.len()) as f64
}

fn loss_equivalence() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst = 0.0f64;
    for draw in 0..100 {
        let dim = rng.random_range(1..10);
        let hidden = rng.random_range(1..10);
        let model = Discriminator::init(dim, hidden, draw).unwrap();
        let n = gaussian_matrix(rng.random_range(1..40), dim, &mut rng);
        let a = gaussian_matrix(rng.random_range(1..40), dim, &mut rng);
        let n_rows: Vec<&[f32]> = n.iter_rows().collect();
        let a_rows: Vec<&[f32]> = a.iter_rows().collect();
        let got = loss(&model, &n_rows, &a_rows).unwrap();
        let want = double_sum_loss(&model, &n_rows, &a_rows);
        worst = worst.max((got - want).abs());
    }

    // D(m) = lrelu(m_0) + b2 with unit weights: outputs are chosen exactly.
    let mut model = Discriminator::zeros(1, 1).unwrap();
    model.w1[0] = 1.0;
    model.w2[0] = 1.0;
    let normal_levels = [-1.0f32, -0.25, 0.0, 0.5];
    let anomaly_levels = [0.5f32, 1.0, 2.0, 3.0];
    let mut crafted = 0;
    let mut iff_failures = 0;
    for n_count in 1..=3 {
        for a_count in 1..=3 {
            let n_combos = normal_levels.len().pow(n_count);
            let a_combos = anomaly_levels.len().pow(a_count);
            for nc in 0..n_combos {
                for ac in 0..a_combos {
                    let pick = |mut code: usize, count: u32, levels: &[f32]| -> Vec<[f32; 1]> {
                        (0..count)
                            .map(|_| {
                                let v = levels[code % levels.len()];
                                code /= levels.len();
                                [v]
                            })
                            .collect()
                    };
                    let ns = pick(nc, n_count, &normal_levels);
                    let as_ = pick(ac, a_count, &anomaly_levels);
                    let n_rows: Vec<&[f32]> = ns.iter().map(|r| r.as_slice()).collect();
                    let a_rows: Vec<&[f32]> = as_.iter().map(|r| r.as_slice()).collect();
                    let l = loss(&model, &n_rows, &a_rows).unwrap();
                    let satisfied = ns.iter().all(|r| independent_forward(&model, r) <= 0.0)
                        && as_.iter().all(|r| independent_forward(&model, r) >= 1.0);
                    iff_failures += ((l == 0.0) != satisfied) as usize;
                    crafted += 1;
                }
            }
        }
    }
    Verdict::new(
        worst <= 1e-12 && iff_failures == 0,
        format!(
            "100 random batch pairs, max |diff| {worst:.2e}; L=0 iff margins hold on {crafted} crafted batches, {iff_failures} violations"
        ),
    )
}

// ---------------------------------------------------------------- 5

fn near_kink(d: &Discriminator, m: &[f32], anomaly: bool, guard: f64) -> bool {
    let dim = m.len();
    let pre_activation_kink = (0..d.b1.len()).any(|j| {
        let z = d.b1[j]
            + (0..dim)
                .map(|k| d.w1[j * dim + k] * m[k] as f64)
                .sum::<f64>();
        z.abs() < guard
    });
    let out = independent_forward(d, m);
    let hinge = if anomaly { 1.0 - out } else { out };
    pre_activation_kink || hinge.abs() < guard
}

fn gradient_check() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let h = 1e-5;
    let guard = 1e-6;
    let scale = Normal::new(0.0, 1.0).unwrap();
    let mut checked = 0;
    let mut excluded = 0;
    let mut worst = 0.0f64;
    let mut bad = 0;
    for draw in 0..100u64 {
        let dim = rng.random_range(1..9);
        let hidden = rng.random_range(1..9);
        let mut model = Discriminator::init(dim, hidden, draw).unwrap();
        let params: Vec<f64> = model
            .params()
            .iter()
            .map(|_| scale.sample(&mut rng))
            .collect();
        model.set_params(&params).unwrap();
        let n = gaussian_matrix(rng.random_range(1..9), dim, &mut rng);
        let a = gaussian_matrix(rng.random_range(1..9), dim, &mut rng);
        let n_rows: Vec<&[f32]> = n
            .iter_rows()
            .filter(|r| !near_kink(&model, r, false, guard))
            .collect();
        let a_rows: Vec<&[f32]> = a
            .iter_rows()
            .filter(|r| !near_kink(&model, r, true, guard))
            .collect();
        excluded += n.rows() + a.rows() - n_rows.len() - a_rows.len();
        if n_rows.is_empty() || a_rows.is_empty() {
            continue;
        }
        let (_, grad) = gradients(&model, &n_rows, &a_rows).unwrap();
        for (k, &g) in grad.flat().iter().enumerate() {
            let at = |delta: f64| {
                let mut p = params.clone();
                p[k] += delta;
                let mut m = model.clone();
                m.set_params(&p).unwrap();
                loss(&m, &n_rows, &a_rows).unwrap()
            };
            let numeric = (at(h) - at(-h)) / (2.0 * h);
            let diff = (g - numeric).abs();
            // Central differences carry about eps*L/h = 1e-11 of roundoff, so exact
            // zeros need an absolute floor well above it.
            let rel = diff / g.abs().max(numeric.abs()).max(1e-6);
            checked += 1;
            worst = worst.max(rel);
            bad += (rel > 1e-4) as usize;
        }
    }
    Verdict::new(
        bad == 0,
        format!(
            "{checked} partials over 100 draws, max rel err {worst:.2e}, {bad} over 1e-4, {excluded} kink-adjacent samples excluded"
        ),
    )
}

// ---------------------------------------------------------------- 6

fn pairwise_auroc(results: &[ImageResult]) -> f64 {
    let pos: Vec<f64> = results
        .iter()
        .filter(|r| r.label == Some(1))
        .map(|r| r.score)
        .collect();
    let neg: Vec<f64> = results
        .iter()
        .filter(|r| r.label == Some(0))
        .map(|r| r.score)
        .collect();
    let mut wins = 0.0;
    for &p in &pos {
        for &n in &neg {
            wins += if p > n {
                1.0
            } else if p == n {
                0.5
            } else {
                0.0
            };
        }
    }
    wins / (pos.len() * neg.len()) as f64
}

fn auroc_oracle() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut worst = 0.0f64;
    let mut min_tie_fraction = 1.0f64;
    let mut invariance_failures = 0;
    for _ in 0..20 {
        let results: Vec<ImageResult> = (0..500)
            .map(|i| {
                let label = rng.random_bool(0.4) as u8;
                let raw: f64 = StandardNormal.sample(&mut rng);
                let score = ((raw + label as f64) * 4.0).round() / 4.0;
                ImageResult {
                    image_id: format!("r{i}"),
                    label: Some(label),
                    score,
                }
            })
            .collect();
        let mut sorted: Vec<f64> = results.iter().map(|r| r.score).collect();
        sorted.sort_by(f64::total_cmp);
        let tied = (0..sorted.len())
            .filter(|&i| {
                (i > 0 && sorted[i - 1] == sorted[i])
                    || (i + 1 < sorted.len() && sorted[i + 1] == sorted[i])
            })
            .count();
        min_tie_fraction = min_tie_fraction.min(tied as f64 / 500.0);

        let got = auroc(&results).unwrap();
        worst = worst.max((got - pairwise_auroc(&results)).abs());
        let transform = |f: fn(f64) -> f64| {
            let mapped: Vec<ImageResult> = results
                .iter()
                .map(|r| ImageResult {
                    score: f(r.score),
                    ..r.clone()
                })
                .collect();
            auroc(&mapped).unwrap()
        };
        invariance_failures += (transform(|x| 2.0 * x + 7.0) != got) as usize;
        invariance_failures += (transform(f64::exp) != got) as usize;
    }
    Verdict::new(
        worst <= 1e-12 && min_tie_fraction >= 0.1 && invariance_failures == 0,
        format!(
            "20 sets of 500 scores, min tied fraction {:.0}%, max |diff| {worst:.2e}, {invariance_failures} monotone-invariance failures",
            min_tie_fraction * 100.0
        ),
    )
}

// ---------------------------------------------------------------- 7-9

fn run_config(data: &Path, out: &Path, seed: u64) -> RunConfig {
    let mut config = RunConfig {
        manifest: data.join("manifest.jsonl"),
        output_dir: out.to_path_buf(),
        ..RunConfig::default()
    };
    config.train.seed = seed;
    config
}

fn knn_test_auroc(config: &RunConfig) -> f64 {
    let manifest = config.load_manifest().unwrap();
    let bank = NormalBank::load(config.output_dir.join("bank.wsfx")).unwrap();
    let tests = extract_split(&manifest, Split::Test, &config.aggregation).unwrap();
    let results: Vec<ImageResult> = tests
        .iter()
        .map(|s| {
            let label = manifest
                .entries
                .iter()
                .find(|e| e.id == s.image_id)
                .unwrap()
                .label;
            knn_score_image(&bank, s)
                .unwrap()
                .with_label(Some(label))
                .result
        })
        .collect();
    auroc(&results).unwrap()
}

fn end_to_end() -> Verdict {
    let data = tempfile::tempdir().unwrap();
    let out = tempfile::tempdir().unwrap();
    let manifest = common::synth(data.path(), &SynthConfig::default());
    let config = run_config(data.path(), out.path(), 0);

    let (outcome, elapsed) = common::single_threaded(|| {
        let start = Instant::now();
        let outcome = run_all(&config).unwrap();
        (outcome, start.elapsed())
    });
    let knn = knn_test_auroc(&config);
    let mined = outcome.mined.as_ref().unwrap();
    let precision = mined_mask_precision(mined, &manifest, 0).unwrap().unwrap();
    let window = config.aggregation.neighborhood_size / 2;
    let field_precision = mined_mask_precision(mined, &manifest, window)
        .unwrap()
        .unwrap();
    let mask_cells = 8 * 25;
    let in_mask = (precision * mined.len() as f64).round() as usize;

    let auroc = outcome.report.auroc;
    let pass = knn >= 0.9 && auroc >= 0.95 && precision >= 0.8 && elapsed < Duration::from_secs(60);
    Verdict::new(
        pass,
        format!(
            "kNN pre-check AUROC {knn:.4}; test AUROC {auroc:.4}; mask precision {precision:.3} \
             ({in_mask}/{} mined in mask, ceiling {mask_cells}/{} = {:.3}); \
             precision within the {w}x{w} aggregation window {field_precision:.3}; {elapsed:.2?} single-threaded",
            mined.len(),
            mined.len(),
            mask_cells as f64 / mined.len() as f64,
            w = 2 * window + 1,
        ),
    )
}

fn ablation() -> Verdict {
    let arms = [
        ("full", true, true),
        ("mining-only", true, false),
        ("mixing-only", false, true),
        ("neither", false, false),
    ];
    let mut means = [0.0f64; 4];
    let seeds = [0u64, 1, 2];
    for &seed in &seeds {
        let data = tempfile::tempdir().unwrap();
        common::synth(
            data.path(),
            &SynthConfig {
                seed,
                ..SynthConfig::default()
            },
        );
        for (k, &(_, mining, mixing)) in arms.iter().enumerate() {
            let out = tempfile::tempdir().unwrap();
            let config = RunConfig {
                mining,
                mixing,
                save_maps: false,
                ..run_config(data.path(), out.path(), seed)
            };
            means[k] += run_all(&config).unwrap().report.auroc / seeds.len() as f64;
        }
    }
    let ordered = means.windows(2).all(|w| w[0] - w[1] >= -0.01);
    let listing: Vec<String> = arms
        .iter()
        .zip(&means)
        .map(|((name, ..), m)| format!("{name} {m:.4}"))
        .collect();
    Verdict::new(
        ordered,
        format!("mean AUROC over seeds 0-2: {}", listing.join(", ")),
    )
}

fn determinism() -> Verdict {
    let data = tempfile::tempdir().unwrap();
    common::synth(data.path(), &SynthConfig::default());
    let outs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    for out in &outs {
        let config = run_config(data.path(), out.path(), 0);
        common::single_threaded(|| run_all(&config).unwrap());
    }
    let files = [
        "rep0/scores.jsonl",
        "rep0/report.json",
        "report.json",
        "report.md",
        "rep0/model.wsdm",
    ];
    let differing: Vec<&str> = files
        .iter()
        .copied()
        .filter(|f| {
            fs::read(outs[0].path().join(f)).unwrap() != fs::read(outs[1].path().join(f)).unwrap()
        })
        .collect();
    Verdict::new(
        differing.is_empty(),
        format!(
            "compared {} artifacts of two runs bytewise, differing: {differing:?}",
            files.len()
        ),
    )
}

type Criterion = (&'static str, fn() -> Verdict);

fn main() {
    let criteria: [Criterion; 9] = [
        ("exact kNN matches brute force", knn_oracle),
        ("mining matches full-sort oracle", mining_oracle),
        ("mixing geometry", mixing_geometry),
        ("loss equals double-sum oracle", loss_equivalence),
        ("gradient check", gradient_check),
        ("AUROC matches pairwise oracle", auroc_oracle),
        ("end-to-end synthetic run", end_to_end),
        ("ablation ordering", ablation),
        ("determinism", determinism),
    ];
    let filter: Vec<String> = std::env::args()
        .skip(1)
        .filter(|a| !a.starts_with('-'))
        .collect();
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let n = i + 1;
        if !filter.is_empty()
            && !filter
                .iter()
                .any(|f| *f == n.to_string() || name.contains(f.as_str()))
        {
            continue;
        }
        let verdict = check();
        let tag = if verdict.pass { "PASS" } else { "FAIL" };
        println!("criterion {n} {tag}: {name}: {}", verdict.detail);
        failed += !verdict.pass as usize;
    }
    if failed > 0 {
        println!("{failed} criterion(s) failed");
        std::process::exit(1);
    }
}
