use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use cadgmm::checkpoint::{DatasetCache, ModelCheckpoint};
use cadgmm::config::{parse_u64_list, RunConfig};
use cadgmm::data::{load_and_encode, training_stream, DatasetRecipe, LabeledDataset};
use cadgmm::eval::{
    config_fingerprint, export_embeddings, k_sweep, noise_experiment, prf1, run_experiment, score_dataset,
    threshold_by_ratio, SweepReport,
};
use cadgmm::trainer::{fit_frozen_gmm, train_with_hook};

#[derive(Parser)]
#[command(name = "cadgmm", version, about = "Correlation-aware deep Gaussian mixture anomaly detection")]
struct Cli {
    /// Root for relative output paths.
    #[arg(long, global = true, env = "CADGMM_OUT", default_value = "runs")]
    out_root: PathBuf,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Encode, split and normalize a dataset into a cache file.
    Prepare(PrepareArgs),
    /// Train a model on a prepared cache.
    Train(TrainArgs),
    /// Score the test split of a cache with a trained checkpoint.
    Eval(EvalArgs),
    /// Multi-seed experiments over K values or training contamination.
    Sweep(SweepArgs),
}

#[derive(Args)]
struct ConfigArgs {
    /// Run configuration file.
    #[arg(long, conflicts_with = "preset")]
    config: Option<PathBuf>,
    /// Shipped preset: kdd99, arrhythmia or satellite.
    #[arg(long)]
    preset: Option<String>,
    /// Override a config value, e.g. `--set train.iterations=100`.
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE")]
    overrides: Vec<String>,
    /// Directory holding built-in dataset sources.
    #[arg(long, env = "CADGMM_DATA_DIR")]
    data_dir: Option<PathBuf>,
}

#[derive(Args)]
struct PrepareArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Recipe file (overrides the configured dataset).
    #[arg(long)]
    recipe: Option<PathBuf>,
    #[arg(long)]
    split_seed: Option<u64>,
    /// Cache file to write.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    #[arg(long)]
    cache: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Replace the graph-attention branch output with zeros.
    #[arg(long)]
    ablate_graph: bool,
    /// Output directory for checkpoint and log.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    cache: PathBuf,
    /// Fraction of test samples flagged (default: dataset anomaly ratio).
    #[arg(long)]
    threshold_ratio: Option<f64>,
    /// Scoring batch size (default: training batch size).
    #[arg(long)]
    batch_size: Option<usize>,
    /// Write z0..z{D+1},energy,label for every test row.
    #[arg(long)]
    export_embeddings: Option<PathBuf>,
    /// Output directory for the report and scores.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// K values, e.g. `5..19:2` or `5,9,13`.
    #[arg(long, conflicts_with = "noise_list")]
    k_list: Option<String>,
    /// Training contamination in percent, e.g. `1,2,3,4,5`.
    #[arg(long)]
    noise_list: Option<String>,
    /// Seeds, e.g. `0..9`.
    #[arg(long)]
    seeds: Option<String>,
    #[arg(long)]
    ablate_graph: bool,
    #[arg(long)]
    threshold_ratio: Option<f64>,
    /// Run seeds concurrently on all cores.
    #[arg(long)]
    parallel: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Prepare(a) => prepare(&cli.out_root, a),
        Command::Train(a) => train(&cli.out_root, a),
        Command::Eval(a) => eval(&cli.out_root, a),
        Command::Sweep(a) => sweep(&cli.out_root, a),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn under(root: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        root.join(p)
    }
}

fn load_config(a: &ConfigArgs, required: bool) -> Result<RunConfig> {
    let mut cfg = match (&a.config, &a.preset) {
        (Some(path), _) => RunConfig::from_file(path)?,
        (None, Some(name)) => RunConfig::preset(name)?,
        (None, None) if !required => RunConfig::parse("", Path::new("<defaults>"))?,
        (None, None) => bail!("either --config or --preset is required"),
    };
    for o in &a.overrides {
        let (key, value) = o
            .split_once('=')
            .with_context(|| format!("override '{o}' is not SECTION.KEY=VALUE"))?;
        let (section, key) = key
            .split_once('.')
            .with_context(|| format!("override key '{key}' is not SECTION.KEY"))?;
        cfg.set(section.trim(), key.trim(), value.trim())?;
    }
    if let Some(d) = &a.data_dir {
        cfg.data.data_dir = Some(d.clone());
    }
    cfg.validate()?;
    Ok(cfg)
}

fn recipe_for(cfg: &RunConfig, explicit: Option<&Path>) -> Result<DatasetRecipe> {
    let recipe = match (explicit, cfg.data.recipe.as_deref(), &cfg.data.dataset) {
        (Some(p), _, _) | (None, Some(p), _) => DatasetRecipe::from_file(p)?,
        (None, None, Some(name)) => {
            let dir = cfg.data.data_dir.clone().unwrap_or_else(|| PathBuf::from("data"));
            DatasetRecipe::builtin(name, &dir)?
        }
        (None, None, None) => bail!("no dataset: set [data] dataset or recipe"),
    };
    if !recipe.source.exists() {
        bail!(
            "dataset source {} not found (datasets are not downloaded automatically)",
            recipe.source.display()
        );
    }
    Ok(recipe)
}

fn default_cache(root: &Path, cfg: &RunConfig) -> PathBuf {
    match &cfg.data.cache {
        Some(p) => under(root, p),
        None => root.join(format!("{}.cache", cfg.data.dataset.as_deref().unwrap_or("dataset"))),
    }
}

fn check_dims(cfg: &RunConfig, ds: &LabeledDataset) -> Result<()> {
    if cfg.train.model.input_dim != ds.n_features() {
        bail!(
            "model input_dim {} does not match the {} encoded features of {}",
            cfg.train.model.input_dim,
            ds.n_features(),
            ds.name
        );
    }
    Ok(())
}

fn prepare(root: &Path, a: PrepareArgs) -> Result<bool> {
    let mut cfg = load_config(&a.cfg, a.recipe.is_none())?;
    if let Some(s) = a.split_seed {
        cfg.data.split_seed = s;
    }
    let recipe = recipe_for(&cfg, a.recipe.as_deref())?;
    let out = a.out.map(|p| under(root, &p)).unwrap_or_else(|| default_cache(root, &cfg));
    let cache = DatasetCache::prepare(&recipe, cfg.data.split_seed)?;
    let fp = cache.save(&out)?;
    let recipe_echo = out.with_extension("recipe");
    std::fs::write(&recipe_echo, cache.dataset.recipe.to_text())
        .with_context(|| format!("writing {}", recipe_echo.display()))?;
    let ds = &cache.dataset;
    println!(
        "{}: N={} F={} anomaly_ratio={:.4} train={} test={}",
        ds.name,
        ds.len(),
        ds.n_features(),
        ds.anomaly_ratio(),
        ds.train_indices()?.len(),
        ds.test_indices()?.len()
    );
    println!("cache {} fingerprint {fp}", out.display());
    Ok(true)
}

fn train(root: &Path, a: TrainArgs) -> Result<bool> {
    let mut cfg = load_config(&a.cfg, true)?;
    if let Some(s) = a.seed {
        cfg.train.seed = s;
    }
    if a.ablate_graph {
        cfg.train.model.graph_branch = false;
    }
    let cache_path = a.cache.map(|p| under(root, &p)).unwrap_or_else(|| default_cache(root, &cfg));
    let (cache, fp) = DatasetCache::load(&cache_path)
        .with_context(|| format!("loading cache {} (run `cadgmm prepare` first)", cache_path.display()))?;
    check_dims(&cfg, &cache.dataset)?;
    let out = a
        .out
        .map(|p| under(root, &p))
        .unwrap_or_else(|| root.join(format!("{}-seed{}", cache.dataset.name, cfg.train.seed)));
    std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    std::fs::write(out.join("config.cfg"), cfg.to_text())?;

    let ds = &cache.dataset;
    let split = ds.split.as_ref().context("cache has no split")?;
    let stream = training_stream(&ds.labels, split, cfg.noise_ratio, cfg.train.seed)?;
    let x = cache.rows(&stream.rows);
    log::info!(
        "training on {} rows ({} injected anomalies) for {} iterations",
        x.rows(),
        stream.injected.len(),
        cfg.train.iterations
    );

    let snapshot = |model: &cadgmm::Cadgmm, gmm, iteration| ModelCheckpoint {
        config: cfg.train.clone(),
        params: model.params.clone(),
        gmm,
        preprocessor: Some(cache.preprocessor.clone()),
        dataset_fingerprint: Some(fp.clone()),
        iteration,
    };
    let ck_dir = out.join("checkpoints");
    let trained = train_with_hook(&x, &cfg.train, &mut |it, model| {
        let gmm = fit_frozen_gmm(model, &x, cfg.train.batch_size)?;
        snapshot(model, gmm, it as u64).save(&ck_dir.join(format!("iter_{it:06}.ckpt")))
    })?;
    let ck = snapshot(&trained.model, trained.gmm.clone(), cfg.train.iterations as u64);
    ck.save(&out.join("model.ckpt"))?;
    let log_file = File::create(out.join("train_log.csv"))?;
    trained.log.write_csv(BufWriter::new(log_file))?;
    let last = trained.log.rows.last().map(|r| r.terms.total).unwrap_or(f64::NAN);
    println!(
        "wrote {} (final loss {last:.6}, {} skipped steps)",
        out.join("model.ckpt").display(),
        trained.log.skipped_steps
    );
    Ok(true)
}

fn eval(root: &Path, a: EvalArgs) -> Result<bool> {
    let ck = ModelCheckpoint::load(&under(root, &a.checkpoint))?;
    let (cache, fp) = DatasetCache::load(&under(root, &a.cache))?;
    if let Some(expected) = &ck.dataset_fingerprint {
        if *expected != fp {
            return Err(cadgmm::Error::FingerprintMismatch {
                expected: expected.clone(),
                found: fp,
            }
            .into());
        }
    }
    let model = ck.model()?;
    let (test, labels) = cache.test_set()?;
    let batch = a.batch_size.unwrap_or(ck.config.batch_size);
    let scores = score_dataset(&model, &ck.gmm, &test, batch)?;
    let ratio = a.threshold_ratio.unwrap_or_else(|| cache.dataset.anomaly_ratio());
    let (threshold, predictions) = threshold_by_ratio(&scores.energies, ratio);
    let metrics = prf1(&labels, &predictions)?;

    let out = a.out.map(|p| under(root, &p)).unwrap_or_else(|| {
        under(root, &a.checkpoint)
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_else(|| root.to_path_buf())
    });
    std::fs::create_dir_all(&out)?;
    let report = serde_json::json!({
        "dataset": cache.dataset.name,
        "seed": ck.config.seed,
        "fingerprint": config_fingerprint(&ck.config),
        "dataset_fingerprint": fp,
        "threshold_ratio": ratio,
        "threshold": threshold,
        "test_rows": test.rows(),
        "flagged": predictions.iter().filter(|&&p| p == 1).count(),
        "metrics": metrics,
        "config": ck.config,
    });
    std::fs::write(out.join("report.json"), serde_json::to_string_pretty(&report)? + "\n")?;
    let mut w = BufWriter::new(File::create(out.join("scores.csv"))?);
    writeln!(w, "index,energy,prediction,label")?;
    for (i, ((e, p), y)) in scores.energies.iter().zip(&predictions).zip(&labels).enumerate() {
        writeln!(w, "{i},{e},{p},{y}")?;
    }
    w.flush()?;
    if let Some(path) = a.export_embeddings {
        let path = under(root, &path);
        let f = BufWriter::new(File::create(&path).with_context(|| format!("creating {}", path.display()))?);
        export_embeddings(&scores, &labels, f)?;
    }
    println!(
        "precision {:.4} recall {:.4} F1 {:.4} (threshold {threshold:.6})",
        metrics.precision, metrics.recall, metrics.f1
    );
    Ok(true)
}

fn sweep(root: &Path, a: SweepArgs) -> Result<bool> {
    let mut cfg = load_config(&a.cfg, true)?;
    if let Some(s) = &a.seeds {
        cfg.eval.seeds = parse_u64_list(s)?;
    }
    if a.ablate_graph {
        cfg.train.model.graph_branch = false;
    }
    if let Some(r) = a.threshold_ratio {
        cfg.eval.threshold_ratio = Some(r);
    }
    cfg.validate()?;
    let ds = load_and_encode(&recipe_for(&cfg, None)?)?;
    check_dims(&cfg, &ds)?;
    let exp = cfg.experiment();
    let seeds = &cfg.eval.seeds;

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(if a.parallel { 0 } else { 1 })
        .build()?;
    let (label, report) = pool.install(|| -> Result<_> {
        Ok(if let Some(list) = &a.k_list {
            let ks: Vec<usize> = parse_u64_list(list)?.into_iter().map(|k| k as usize).collect();
            ("k", k_sweep(&ds, &exp, &ks, seeds)?)
        } else if let Some(list) = &a.noise_list {
            let ratios = parse_percent_list(list)?;
            ("noise_percent", noise_experiment(&ds, &exp, &ratios, seeds)?)
        } else {
            ("k", SweepReport::single(run_experiment(&ds, &exp, seeds)?))
        })
    })?;

    let out = a
        .out
        .map(|p| under(root, &p))
        .unwrap_or_else(|| root.join(format!("{}-sweep", ds.name)));
    std::fs::create_dir_all(&out)?;
    std::fs::write(out.join("config.cfg"), cfg.to_text())?;
    std::fs::write(out.join("sweep.json"), report.to_json() + "\n")?;
    let mut w = BufWriter::new(File::create(out.join("sweep.csv"))?);
    writeln!(w, "{label},precision,recall,f1,f1_std,runs,failures")?;
    let mut failures = 0;
    for p in &report.points {
        let setting = if label == "k" {
            p.k.to_string()
        } else {
            format!("{}", (p.noise_ratio * 100.0).round())
        };
        failures += p.failures();
        match p.mean {
            Some(m) => writeln!(
                w,
                "{setting},{:.6},{:.6},{:.6},{:.6},{},{}",
                m.precision,
                m.recall,
                m.f1,
                m.f1_std,
                m.runs,
                p.failures()
            )?,
            None => writeln!(w, "{setting},,,,,0,{}", p.failures())?,
        }
        if let Some(m) = p.mean {
            println!("{label}={setting}: P {:.4} R {:.4} F1 {:.4} ± {:.4}", m.precision, m.recall, m.f1, m.f1_std);
        }
    }
    w.flush()?;
    if let Some(s) = report.f1_spread {
        println!("F1 spread {s:.4}");
    }
    if failures > 0 {
        eprintln!("{failures} run(s) failed; see {}", out.join("sweep.json").display());
    }
    Ok(failures == 0)
}

fn parse_percent_list(s: &str) -> Result<Vec<f64>> {
    let out: Vec<f64> = s
        .split(',')
        .map(str::trim)
        .filter(|v| !v.is_empty())
        .map(|v| v.parse::<f64>().map(|p| p / 100.0).with_context(|| format!("bad percentage '{v}'")))
        .collect::<Result<_>>()?;
    if out.is_empty() {
        bail!("empty noise list");
    }
    Ok(out)
}
