//! Scoring, ratio thresholding, precision/recall/F1 and experiment
//! harnesses.

use std::io::Write;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::batching::context_batches;
use crate::data::{split_tags, training_stream, LabeledDataset, Preprocessor, Split};
use crate::error::{Error, Result};
use crate::graph::build_knn_graph;
use crate::model::{Cadgmm, GmmState};
use crate::numeric::Matrix;
use crate::trainer::{train, TrainConfig, TrainedModel};

/// Per-row embedding and energy of a scored matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Scores {
    pub z: Matrix,
    pub energies: Vec<f64>,
}

/// Scores `x` in consecutive batches of `batch_size` rows with a k-NN
/// graph built inside each batch.
pub fn score_dataset(model: &Cadgmm, gmm: &GmmState, x: &Matrix, batch_size: usize) -> Result<Scores> {
    let k = model.config.k;
    let batches = context_batches(x, batch_size, k)?;
    let parts: Vec<(Matrix, Vec<f64>)> = batches
        .par_iter()
        .map(|b| {
            let graph = build_knn_graph(&b.rows, k)?;
            let out = model.forward(&b.rows, &graph)?;
            let own: Vec<usize> = b.own.clone().collect();
            let z = out.z.select_rows(&own);
            let e = gmm.energy(&z)?;
            Ok((z, e))
        })
        .collect::<Result<_>>()?;
    let z = Matrix::vstack(&parts.iter().map(|(z, _)| z).collect::<Vec<_>>())?;
    let energies = parts.into_iter().flat_map(|(_, e)| e).collect();
    Ok(Scores { z, energies })
}

/// Number of samples flagged for `ratio` of `n`.
pub fn flag_count(n: usize, ratio: f64) -> usize {
    if !(ratio > 0.0) {
        return 0;
    }
    // tolerate products like 0.3 * 10 = 3.0000000000000004
    ((ratio * n as f64 - 1e-9).ceil().max(0.0) as usize).min(n)
}

/// Flags the `⌈ratio·N⌉` highest energies, breaking ties by ascending
/// index. The threshold is the smallest flagged energy (`+inf` when
/// nothing is flagged).
pub fn threshold_by_ratio(energies: &[f64], ratio: f64) -> (f64, Vec<u8>) {
    let count = flag_count(energies.len(), ratio);
    let mut order: Vec<usize> = (0..energies.len()).collect();
    order.sort_by(|&a, &b| energies[b].total_cmp(&energies[a]).then(a.cmp(&b)));
    let mut pred = vec![0u8; energies.len()];
    for &i in &order[..count] {
        pred[i] = 1;
    }
    let threshold = if count == 0 {
        f64::INFINITY
    } else {
        energies[order[count - 1]]
    };
    (threshold, pred)
}

/// Flags every sample with energy at or above `threshold`.
pub fn threshold_by_value(energies: &[f64], threshold: f64) -> Vec<u8> {
    energies.iter().map(|&e| (e >= threshold) as u8).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub tn: usize,
    /// Set when some ratio had a zero denominator and was reported as 0.
    pub undefined: bool,
}

/// Precision, recall and F1 with anomalies (label 1) as the positive
/// class.
pub fn prf1(labels: &[u8], predictions: &[u8]) -> Result<Metrics> {
    if labels.len() != predictions.len() {
        return Err(Error::Shape {
            op: "prf1",
            lhs: (labels.len(), 1),
            rhs: (predictions.len(), 1),
        });
    }
    let (mut tp, mut fp, mut fn_, mut tn) = (0, 0, 0, 0);
    for (&y, &p) in labels.iter().zip(predictions) {
        match (y != 0, p != 0) {
            (true, true) => tp += 1,
            (false, true) => fp += 1,
            (true, false) => fn_ += 1,
            (false, false) => tn += 1,
        }
    }
    let mut undefined = false;
    let mut ratio = |num: f64, den: f64| {
        if den == 0.0 {
            undefined = true;
            0.0
        } else {
            num / den
        }
    };
    let precision = ratio(tp as f64, (tp + fp) as f64);
    let recall = ratio(tp as f64, (tp + fn_) as f64);
    let f1 = ratio(2.0 * precision * recall, precision + recall);
    Ok(Metrics {
        precision,
        recall,
        f1,
        tp,
        fp,
        fn_,
        tn,
        undefined,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub energies: Vec<f64>,
    pub predictions: Vec<u8>,
    pub threshold: f64,
    pub metrics: Metrics,
    pub fingerprint: String,
    pub seed: u64,
}

/// Hex SHA-256 of the JSON form of `cfg`.
pub fn config_fingerprint(cfg: &TrainConfig) -> String {
    let json = serde_json::to_vec(cfg).expect("config serializes");
    hex(&Sha256::digest(json))
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Everything [`run_experiment`] varies besides the seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub train: TrainConfig,
    /// Fraction of test samples flagged; `None` uses the dataset's global
    /// anomaly ratio.
    pub threshold_ratio: Option<f64>,
    /// Fraction of anomalies mixed into the training stream.
    pub noise_ratio: f64,
    /// Scoring batch size; `None` uses the training batch size.
    pub eval_batch_size: Option<usize>,
}

impl ExperimentConfig {
    pub fn new(train: TrainConfig) -> Self {
        ExperimentConfig {
            train,
            threshold_ratio: None,
            noise_ratio: 0.0,
            eval_batch_size: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub metrics: Option<Metrics>,
    pub threshold: Option<f64>,
    pub error: Option<String>,
    pub train_rows: usize,
    pub injected: usize,
    pub test_rows: usize,
    pub skipped_steps: usize,
    pub seconds: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub f1_std: f64,
    pub runs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub dataset: String,
    pub k: usize,
    pub graph_branch: bool,
    pub noise_ratio: f64,
    pub threshold_ratio: f64,
    pub fingerprint: String,
    pub runs: Vec<SeedResult>,
    /// Mean over successful runs; `None` if every run failed.
    pub mean: Option<MeanMetrics>,
}

impl ExperimentReport {
    pub fn failures(&self) -> usize {
        self.runs.iter().filter(|r| r.error.is_some()).count()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Inputs and outputs of one seed's train and score cycle.
#[derive(Debug, Clone)]
pub struct SeedRun {
    pub trained: TrainedModel,
    pub preprocessor: Preprocessor,
    pub test: Matrix,
    pub test_labels: Vec<u8>,
    pub scores: Scores,
    pub report: ScoreReport,
    pub train_rows: usize,
    pub injected: usize,
}

/// Splits with `seed`, fits the preprocessing on the training split,
/// trains on the (optionally contaminated) normal stream and scores the
/// test split.
pub fn run_seed(ds: &LabeledDataset, cfg: &ExperimentConfig, seed: u64) -> Result<SeedRun> {
    let split = split_tags(ds.len(), seed);
    let idx = |want: Split| -> Vec<usize> { (0..ds.len()).filter(|&i| split[i] == want).collect() };
    let train_idx = idx(Split::Train);
    let test_idx = idx(Split::Test);
    let stream = training_stream(&ds.labels, &split, cfg.noise_ratio, seed)?;

    let preprocessor = Preprocessor::fit(ds, &train_idx)?;
    let x_train = preprocessor.transform_rows(ds, &stream.rows);
    let test = preprocessor.transform_rows(ds, &test_idx);
    let test_labels = ds.labels_of(&test_idx);

    let mut tcfg = cfg.train.clone();
    tcfg.seed = seed;
    let trained = train(&x_train, &tcfg)?;
    let batch = cfg.eval_batch_size.unwrap_or(tcfg.batch_size);
    let scores = score_dataset(&trained.model, &trained.gmm, &test, batch)?;
    let ratio = cfg.threshold_ratio.unwrap_or_else(|| ds.anomaly_ratio());
    let (threshold, predictions) = threshold_by_ratio(&scores.energies, ratio);
    let metrics = prf1(&test_labels, &predictions)?;
    let report = ScoreReport {
        energies: scores.energies.clone(),
        predictions,
        threshold,
        metrics,
        fingerprint: config_fingerprint(&tcfg),
        seed,
    };
    Ok(SeedRun {
        trained,
        preprocessor,
        test,
        test_labels,
        scores,
        report,
        train_rows: stream.rows.len(),
        injected: stream.injected.len(),
    })
}

/// Full train, score and metric cycle for every seed. A failing seed is
/// recorded in the report and the remaining seeds still run.
pub fn run_experiment(ds: &LabeledDataset, cfg: &ExperimentConfig, seeds: &[u64]) -> Result<ExperimentReport> {
    if seeds.is_empty() {
        return Err(Error::Config("at least one seed is required".into()));
    }
    cfg.train.validate()?;
    let runs: Vec<SeedResult> = seeds
        .par_iter()
        .map(|&seed| {
            let start = Instant::now();
            let out = run_seed(ds, cfg, seed);
            let seconds = start.elapsed().as_secs_f64();
            match out {
                Ok(run) => {
                    log::info!(
                        "{} seed {seed}: F1 {:.4} ({seconds:.1}s)",
                        ds.name,
                        run.report.metrics.f1
                    );
                    SeedResult {
                        seed,
                        metrics: Some(run.report.metrics),
                        threshold: Some(run.report.threshold),
                        error: None,
                        train_rows: run.train_rows,
                        injected: run.injected,
                        test_rows: run.test.rows(),
                        skipped_steps: run.trained.log.skipped_steps,
                        seconds,
                    }
                }
                Err(e) => {
                    log::error!("{} seed {seed} failed: {e}", ds.name);
                    SeedResult {
                        seed,
                        metrics: None,
                        threshold: None,
                        error: Some(e.to_string()),
                        train_rows: 0,
                        injected: 0,
                        test_rows: 0,
                        skipped_steps: 0,
                        seconds,
                    }
                }
            }
        })
        .collect();
    Ok(ExperimentReport {
        dataset: ds.name.clone(),
        k: cfg.train.model.k,
        graph_branch: cfg.train.model.graph_branch,
        noise_ratio: cfg.noise_ratio,
        threshold_ratio: cfg.threshold_ratio.unwrap_or_else(|| ds.anomaly_ratio()),
        fingerprint: config_fingerprint(&cfg.train),
        mean: mean_metrics(&runs),
        runs,
    })
}

fn mean_metrics(runs: &[SeedResult]) -> Option<MeanMetrics> {
    let ok: Vec<&Metrics> = runs.iter().filter_map(|r| r.metrics.as_ref()).collect();
    if ok.is_empty() {
        return None;
    }
    let n = ok.len() as f64;
    let f1 = ok.iter().map(|m| m.f1).sum::<f64>() / n;
    let var = ok.iter().map(|m| (m.f1 - f1).powi(2)).sum::<f64>() / n;
    Some(MeanMetrics {
        precision: ok.iter().map(|m| m.precision).sum::<f64>() / n,
        recall: ok.iter().map(|m| m.recall).sum::<f64>() / n,
        f1,
        f1_std: var.sqrt(),
        runs: ok.len(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub points: Vec<ExperimentReport>,
    /// max − min of the mean F1 over points that produced one.
    pub f1_spread: Option<f64>,
}

impl SweepReport {
    /// Report for a single setting.
    pub fn single(point: ExperimentReport) -> Self {
        Self::new(vec![point])
    }

    pub fn new(points: Vec<ExperimentReport>) -> Self {
        let f1: Vec<f64> = points.iter().filter_map(|p| p.mean.map(|m| m.f1)).collect();
        let f1_spread = (!f1.is_empty()).then(|| {
            f1.iter().cloned().fold(f64::NEG_INFINITY, f64::max) - f1.iter().cloned().fold(f64::INFINITY, f64::min)
        });
        SweepReport { points, f1_spread }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// One experiment per neighborhood size.
pub fn k_sweep(ds: &LabeledDataset, cfg: &ExperimentConfig, k_values: &[usize], seeds: &[u64]) -> Result<SweepReport> {
    for &k in k_values {
        if k == 0 || k >= cfg.train.batch_size {
            return Err(Error::Config(format!(
                "k = {k} must satisfy 1 <= k < batch size {}",
                cfg.train.batch_size
            )));
        }
    }
    let points = k_values
        .iter()
        .map(|&k| {
            let mut c = cfg.clone();
            c.train.model.k = k;
            run_experiment(ds, &c, seeds)
        })
        .collect::<Result<_>>()?;
    Ok(SweepReport::new(points))
}

/// One experiment per training contamination ratio.
pub fn noise_experiment(ds: &LabeledDataset, cfg: &ExperimentConfig, ratios: &[f64], seeds: &[u64]) -> Result<SweepReport> {
    let points = ratios
        .iter()
        .map(|&r| {
            let mut c = cfg.clone();
            c.noise_ratio = r;
            run_experiment(ds, &c, seeds)
        })
        .collect::<Result<_>>()?;
    Ok(SweepReport::new(points))
}

/// Writes `z0..z{D+1},energy,label` rows.
pub fn export_embeddings<W: Write>(scores: &Scores, labels: &[u8], mut out: W) -> Result<()> {
    if labels.len() != scores.energies.len() {
        return Err(Error::Shape {
            op: "export_embeddings",
            lhs: scores.z.shape(),
            rhs: (labels.len(), 1),
        });
    }
    let io = |e| Error::io("<embeddings>", e);
    let header: Vec<String> = (0..scores.z.cols()).map(|c| format!("z{c}")).collect();
    writeln!(out, "{},energy,label", header.join(",")).map_err(io)?;
    for (r, (&e, &y)) in scores.energies.iter().zip(labels).enumerate() {
        let mut line = String::new();
        for v in scores.z.row(r) {
            line.push_str(&format!("{v},"));
        }
        writeln!(out, "{line}{e},{y}").map_err(io)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn threshold_example() {
        let (t, p) = threshold_by_ratio(&[0.1, 0.9, 0.5, 0.7], 0.25);
        assert_eq!(p, vec![0, 1, 0, 0]);
        assert_eq!(t, 0.9);
    }

    #[test]
    fn threshold_all_flagged() {
        let (_, p) = threshold_by_ratio(&[0.3, 0.2, 0.1], 1.0);
        assert_eq!(p, vec![1, 1, 1]);
    }

    #[test]
    fn ties_broken_by_index() {
        let (_, p) = threshold_by_ratio(&[1.0, 2.0, 2.0, 2.0], 0.5);
        assert_eq!(p, vec![0, 1, 1, 0]);
    }

    #[test]
    fn flag_count_guards_rounding() {
        assert_eq!(flag_count(10, 0.3), 3);
        assert_eq!(flag_count(10, 0.31), 4);
        assert_eq!(flag_count(10, 0.0), 0);
    }

    #[test]
    fn prf1_examples() {
        let m = prf1(&[1, 1, 1, 1, 1, 0, 0], &[1, 1, 1, 0, 0, 1, 0]).unwrap();
        assert_eq!((m.tp, m.fp, m.fn_, m.tn), (3, 1, 2, 1));
        assert!((m.precision - 0.75).abs() < 1e-12);
        assert!((m.recall - 0.6).abs() < 1e-12);
        assert!((m.f1 - 2.0 / 3.0).abs() < 1e-12);
        let perfect = prf1(&[1, 0, 1], &[1, 0, 1]).unwrap();
        assert_eq!((perfect.precision, perfect.recall, perfect.f1), (1.0, 1.0, 1.0));
        let none = prf1(&[1, 0], &[0, 0]).unwrap();
        assert_eq!(none.recall, 0.0);
        assert!(none.undefined);
    }

    #[test]
    fn by_value_flags_at_or_above() {
        assert_eq!(threshold_by_value(&[1.0, 2.0, 3.0], 2.0), vec![0, 1, 1]);
    }
}
