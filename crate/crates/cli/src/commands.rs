use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use wsad_core::discriminator::train;
use wsad_core::eval::{aggregate_runs, evaluate, markdown_table};
use wsad_core::feature_io::{
    generate_synthetic, read_feature_map, write_feature_map, write_json_lines, ManifestEntry,
    Split, MANIFEST_FILE,
};
use wsad_core::inference::{read_scores, render_map, score_images, write_scores, RenderConfig};
use wsad_core::memory_bank::{build_bank, knn_score_image};
use wsad_core::mining::{linear_mix, mine, MixConfig};
use wsad_core::pipeline::extract_patch_set;
use wsad_core::run::{extract_split, labelled_results, run_all, write_report};
use wsad_core::{
    AggregationConfig, DatasetManifest, Discriminator, EvalReport, FeatureMatrix, MinedAnomalySet,
    NormalBank, RunConfig, SynthConfig, TrainConfig,
};

use crate::{
    AggregateArgs, AggregationArgs, BankBuildArgs, BankCommand, Cli, Command, EvalArgs, MineArgs,
    MixArgs, RunArgs, ScoreArgs, SynthArgs, TrainArgs,
};

pub fn parse_hw(s: &str) -> Result<(usize, usize), String> {
    let (h, w) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| format!("expected HxW, got {s:?}"))?;
    let h = h
        .trim()
        .parse()
        .map_err(|e| format!("bad height in {s:?}: {e}"))?;
    let w = w
        .trim()
        .parse()
        .map_err(|e| format!("bad width in {s:?}: {e}"))?;
    Ok((h, w))
}

pub fn parse_range(s: &str) -> Result<(f64, f64), String> {
    let (lo, hi) = s
        .split_once(':')
        .ok_or_else(|| format!("expected LOW:HIGH, got {s:?}"))?;
    let lo: f64 = lo
        .trim()
        .parse()
        .map_err(|e| format!("bad lower bound in {s:?}: {e}"))?;
    let hi: f64 = hi
        .trim()
        .parse()
        .map_err(|e| format!("bad upper bound in {s:?}: {e}"))?;
    Ok((lo, hi))
}

pub fn dispatch(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the thread pool")?;
    }
    let root = cli.data_root.as_deref();
    match cli.command {
        Command::Synth(a) => synth(a),
        Command::Aggregate(a) => aggregate(a, root),
        Command::Bank(BankCommand::Build(a)) => bank_build(a, root),
        Command::Mine(a) => mine_cmd(a, root),
        Command::Mix(a) => mix(a),
        Command::Train(a) => train_cmd(a),
        Command::Score(a) => score(a, root),
        Command::Eval(a) => eval(a),
        Command::Run(a) => run(a, root),
    }
}

impl AggregationArgs {
    fn apply(&self, mut config: AggregationConfig) -> AggregationConfig {
        if let Some(p) = self.patch_size {
            config.neighborhood_size = p;
        }
        if let Some(layers) = &self.layers {
            config.layer_indices = layers.clone();
        }
        if let Some((h, w)) = self.target_hw {
            config.target_height = Some(h);
            config.target_width = Some(w);
        }
        config
    }

    fn config(&self) -> AggregationConfig {
        self.apply(AggregationConfig::default())
    }
}

/// Fails with a message naming the subcommand that produces `path`.
fn require(path: &Path, what: &str, producer: &str) -> Result<()> {
    if !path.exists() {
        bail!(
            "{what} {} not found; create it with `wsad {producer}`",
            path.display()
        );
    }
    Ok(())
}

fn load_manifest(path: &Path, root: Option<&Path>) -> Result<DatasetManifest> {
    require(path, "manifest", "synth")?;
    let manifest = match root {
        Some(root) => DatasetManifest::load_with_root(path, root),
        None => DatasetManifest::load(path),
    };
    Ok(manifest?)
}

fn synth(a: SynthArgs) -> Result<()> {
    let mut config = match &a.config {
        Some(path) => {
            let text =
                fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?
        }
        None => SynthConfig::default(),
    };
    if let Some(seed) = a.seed {
        config.seed = seed;
    }
    if let Some(shift) = a.shift {
        config.shift_magnitude = shift;
    }
    if let Some(sigma) = a.sigma {
        config.noise_sigma = sigma;
    }
    if let Some(k) = a.anomalies {
        config.n_anomaly_train = k;
    }
    let manifest = generate_synthetic(&config, &a.out)?;
    log::info!(
        "wrote {} images to {}",
        manifest.entries.len(),
        a.out.display()
    );
    Ok(())
}

fn aggregate(a: AggregateArgs, root: Option<&Path>) -> Result<()> {
    let manifest = load_manifest(&a.manifest, root)?;
    let config = a.aggregation.config();
    config.validate()?;
    let mut entries = Vec::with_capacity(manifest.entries.len());
    for entry in &manifest.entries {
        let set = extract_patch_set(&manifest, entry, &config)?;
        let feature_path = format!("features/{}.wsfx", entry.id);
        write_feature_map(set.map(), a.out.join(&feature_path))?;
        let mask_path = match manifest.mask_path(entry) {
            Some(src) => {
                let rel = format!("masks/{}.wsfx", entry.id);
                let dst = a.out.join(&rel);
                fs::create_dir_all(dst.parent().expect("mask path has a parent"))?;
                fs::copy(&src, &dst).with_context(|| format!("copying mask {}", src.display()))?;
                Some(rel)
            }
            None => None,
        };
        entries.push(ManifestEntry {
            feature_path,
            mask_path,
            ..entry.clone()
        });
    }
    DatasetManifest::new(&a.out, entries)?.save(a.out.join(MANIFEST_FILE))?;
    log::info!(
        "aggregated {} images into {}; use --patch-size 1 downstream to avoid aggregating twice",
        manifest.entries.len(),
        a.out.display()
    );
    Ok(())
}

fn bank_build(a: BankBuildArgs, root: Option<&Path>) -> Result<()> {
    let manifest = load_manifest(&a.manifest, root)?;
    let mut bank = build_bank(&manifest, &a.aggregation.config())?;
    if let Some(fraction) = a.subsample {
        bank = bank.subsample(fraction, a.seed)?;
    }
    bank.save(&a.out)?;
    log::info!(
        "bank of {} x {} written to {}",
        bank.len(),
        bank.dim(),
        a.out.display()
    );
    Ok(())
}

fn load_bank(path: &Path) -> Result<NormalBank> {
    require(path, "bank", "bank build")?;
    Ok(NormalBank::load(path)?)
}

fn mine_cmd(a: MineArgs, root: Option<&Path>) -> Result<()> {
    let manifest = load_manifest(&a.manifest, root)?;
    let bank = load_bank(&a.bank)?;
    let sets = extract_split(&manifest, Split::TrainAnomaly, &a.aggregation.config())?;
    let mined = mine(&bank, &sets, a.r)?;
    mined.save(&a.out)?;
    log::info!(
        "kept {} of {} anomaly-image patches",
        mined.len(),
        mined.source_count
    );
    Ok(())
}

fn mix(a: MixArgs) -> Result<()> {
    require(&a.mined, "mined set", "mine")?;
    let mined = MinedAnomalySet::load(&a.mined)?;
    let bank = load_bank(&a.bank)?;
    let config = MixConfig {
        target_size: a.target,
        alpha_low: a.alpha.0,
        alpha_high: a.alpha.1,
        seed: a.seed,
    };
    let augmented = linear_mix(&mined, &bank, &config)?;
    augmented.save(&a.out)?;
    log::info!(
        "augmented set of {} rows written to {}",
        augmented.len(),
        a.out.display()
    );
    Ok(())
}

fn train_cmd(a: TrainArgs) -> Result<()> {
    let bank = load_bank(&a.bank)?;
    require(&a.anomalies, "anomaly set", "mix` or `wsad mine")?;
    let anomalies = FeatureMatrix::from_feature_map(read_feature_map(&a.anomalies)?);
    let defaults = TrainConfig::default();
    let config = TrainConfig {
        epochs: a.epochs.unwrap_or(defaults.epochs),
        batch_size: a.batch.unwrap_or(defaults.batch_size),
        learning_rate: a.lr.unwrap_or(defaults.learning_rate),
        hidden_dim: a.hidden,
        seed: a.seed,
        ..defaults
    };
    let trained = train(bank.features(), &anomalies, &config)?;
    trained.model.save(&a.out)?;
    let log_path = a.log.unwrap_or_else(|| {
        a.out
            .parent()
            .unwrap_or(Path::new(""))
            .join("train_log.jsonl")
    });
    write_json_lines(&log_path, &trained.log)?;
    if let Some(last) = trained.log.last() {
        log::info!(
            "final loss {:.6} after {} epochs",
            last.loss,
            trained.log.len()
        );
    }
    Ok(())
}

fn score(a: ScoreArgs, root: Option<&Path>) -> Result<()> {
    let manifest = load_manifest(&a.manifest, root)?;
    let sets = extract_split(&manifest, Split::Test, &a.aggregation.config())?;
    let scored = match (&a.model, &a.knn_bank) {
        (Some(model), _) => {
            require(model, "model", "train")?;
            score_images(&Discriminator::load(model)?, &sets)?
        }
        (None, Some(bank)) => {
            let bank = load_bank(bank)?;
            sets.iter()
                .map(|s| knn_score_image(&bank, s))
                .collect::<Result<Vec<_>, _>>()?
        }
        (None, None) => unreachable!("clap requires --model or --knn-bank"),
    };
    let results = labelled_results(&scored, &manifest);
    write_scores(&a.out, &results)?;
    if let Some(dir) = &a.maps_dir {
        for s in &scored {
            s.map.save(dir.join(format!("{}.wsfx", s.map.image_id)))?;
        }
    }
    if let Some(dir) = &a.render_dir {
        let render = RenderConfig {
            height: a.render_size,
            width: a.render_size,
            sigma: a.render_sigma,
        };
        for s in &scored {
            render_map(&s.map, &render, dir.join(format!("{}.pgm", s.map.image_id)))?;
        }
    }
    log::info!("scored {} images", results.len());
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let mut reports = Vec::with_capacity(a.scores.len());
    for path in &a.scores {
        require(path, "scores file", "score")?;
        reports.push(
            evaluate(&read_scores(path)?)
                .with_context(|| format!("evaluating {}", path.display()))?,
        );
    }
    let names: Vec<String> = a.scores.iter().map(|p| label_of(p)).collect();
    if a.repeat_aggregate || reports.len() == 1 {
        let report = if a.repeat_aggregate {
            aggregate_runs(&reports)?
        } else {
            reports.remove(0)
        };
        write_report(&a.out, &report)?;
        print_summary(&report);
        if let Some(md) = &a.markdown {
            fs::write(md, markdown_table(&[("run", &report)]))?;
        }
    } else {
        let text = serde_json::to_string_pretty(&reports)?;
        fs::write(&a.out, text + "\n").with_context(|| format!("writing {}", a.out.display()))?;
        if let Some(md) = &a.markdown {
            let rows: Vec<(&str, &EvalReport)> =
                names.iter().map(String::as_str).zip(&reports).collect();
            fs::write(md, markdown_table(&rows))?;
        }
        for (name, r) in names.iter().zip(&reports) {
            println!(
                "{name}: auroc {:.4} acc {:.4} f1 {:.4}",
                r.auroc, r.accuracy, r.f1
            );
        }
    }
    Ok(())
}

fn label_of(path: &Path) -> String {
    let parent = path.parent().and_then(|p| p.file_name());
    match parent {
        Some(dir) => dir.to_string_lossy().into_owned(),
        None => path.display().to_string(),
    }
}

fn print_summary(r: &EvalReport) {
    println!(
        "auroc {:.4} ± {:.4}  acc {:.4} ± {:.4}  f1 {:.4} ± {:.4}  ({} normal, {} anomaly)",
        r.auroc, r.std.auroc, r.accuracy, r.std.accuracy, r.f1, r.std.f1, r.n_normal, r.n_anomaly
    );
}

fn run(a: RunArgs, root: Option<&Path>) -> Result<()> {
    let mut config = match &a.config {
        Some(path) => {
            require(path, "run config", "run` with flags, or write one by hand")?;
            RunConfig::load(path)?
        }
        None => RunConfig::default(),
    };
    if let Some(m) = a.manifest {
        config.manifest = m;
    }
    if let Some(root) = root {
        config.dataset_root = Some(root.to_path_buf());
    }
    if let Some(out) = a.out {
        config.output_dir = out;
    }
    if let Some(r) = a.r {
        config.retention_rate = r;
    }
    if let Some((lo, hi)) = a.alpha {
        config.alpha_low = lo;
        config.alpha_high = hi;
    }
    if let Some(seed) = a.seed {
        config.train.seed = seed;
    }
    if let Some(n) = a.repeat {
        config.repeat = n;
    }
    if let Some(e) = a.epochs {
        config.train.epochs = e;
    }
    if let Some(lr) = a.lr {
        config.train.learning_rate = lr;
    }
    if let Some(b) = a.batch {
        config.train.batch_size = b;
    }
    config.mining &= !a.no_mining;
    config.mixing &= !a.no_mixing;
    if a.render && config.render.is_none() {
        config.render = Some(RenderConfig::default());
    }
    config.aggregation = a.aggregation.apply(config.aggregation);
    require(&config.manifest, "manifest", "synth")?;
    let outcome = run_all(&config)?;
    print_summary(&outcome.report);
    println!(
        "artifacts in {}",
        PathBuf::from(&config.output_dir).display()
    );
    Ok(())
}
