//! Four-term objective, adaptive-moment updates and the training loop.
//!
//! `L = (1/N)‖X−X̂‖²_F + λ1·mean(E) + λ2·Σ_m Σ_d 1/(Σ_m)_dd + λ3·(1/N)‖Z‖²_F`

use std::io::Write;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::batching::context_batches;
use crate::error::{Error, Result};
use crate::graph::build_knn_graph;
use crate::model::network::batch_energy;
use crate::model::{
    Cadgmm, ForwardVars, GmmAccumulator, GmmState, ModelConfig, ParamStore, ParamVars, TapedGmm,
};
use crate::numeric::{Gradients, Matrix, SeededRng, Tape, Var};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    /// λ1, sample energy.
    pub energy: f64,
    /// λ2, inverse covariance diagonal.
    pub covariance: f64,
    /// λ3, squared embedding norm.
    pub embedding: f64,
}

impl LossWeights {
    pub fn new(energy: f64, covariance: f64, embedding: f64) -> Result<Self> {
        let w = LossWeights {
            energy,
            covariance,
            embedding,
        };
        w.validate()?;
        Ok(w)
    }

    pub fn zero() -> Self {
        LossWeights {
            energy: 0.0,
            covariance: 0.0,
            embedding: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda1", self.energy),
            ("lambda2", self.covariance),
            ("lambda3", self.embedding),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

pub const DEFAULT_LEARNING_RATE: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub model: ModelConfig,
    pub weights: LossWeights,
    /// Write a checkpoint every this many iterations (0 disables).
    pub checkpoint_interval: usize,
}

impl TrainConfig {
    pub fn kdd99() -> Self {
        TrainConfig {
            iterations: 300,
            batch_size: 1024,
            learning_rate: DEFAULT_LEARNING_RATE,
            seed: 0,
            model: ModelConfig::kdd99(),
            weights: LossWeights {
                energy: 0.1,
                covariance: 0.005,
                embedding: 10.0,
            },
            checkpoint_interval: 0,
        }
    }

    pub fn arrhythmia() -> Self {
        TrainConfig {
            iterations: 20000,
            batch_size: 128,
            learning_rate: DEFAULT_LEARNING_RATE,
            seed: 0,
            model: ModelConfig::arrhythmia(),
            weights: LossWeights {
                energy: 0.1,
                covariance: 0.005,
                embedding: 0.001,
            },
            checkpoint_interval: 0,
        }
    }

    pub fn satellite() -> Self {
        TrainConfig {
            iterations: 3000,
            batch_size: 512,
            learning_rate: DEFAULT_LEARNING_RATE,
            seed: 0,
            model: ModelConfig::satellite(),
            weights: LossWeights {
                energy: 0.1,
                covariance: 0.005,
                embedding: 0.005,
            },
            checkpoint_interval: 0,
        }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "kdd99" => Some(Self::kdd99()),
            "arrhythmia" => Some(Self::arrhythmia()),
            "satellite" => Some(Self::satellite()),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.weights.validate()?;
        if self.iterations == 0 {
            return Err(Error::Config("iterations must be >= 1".into()));
        }
        if self.batch_size <= self.model.k {
            return Err(Error::Config(format!(
                "batch size {} must exceed k = {}",
                self.batch_size, self.model.k
            )));
        }
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Config(format!(
                "learning rate must be finite and >= 0, got {}",
                self.learning_rate
            )));
        }
        Ok(())
    }
}

/// Individual loss terms of one step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub recon: f64,
    pub energy: f64,
    pub cov_penalty: f64,
    pub embed_penalty: f64,
    pub total: f64,
}

impl LossTerms {
    pub fn is_finite(&self) -> bool {
        [self.recon, self.energy, self.cov_penalty, self.embed_penalty, self.total]
            .iter()
            .all(|v| v.is_finite())
    }
}

/// Records the objective on the tape. Returns the total loss node and the
/// unweighted terms.
pub fn loss(
    tape: &mut Tape,
    out: &ForwardVars,
    gmm: &TapedGmm,
    x: Var,
    w: &LossWeights,
) -> Result<(Var, LossTerms)> {
    let n = tape.value(x).rows().max(1) as f64;
    let diff = tape.sub(x, out.xhat)?;
    let sq = tape.mul(diff, diff)?;
    let sq_sum = tape.sum(sq);
    let recon = tape.scale(sq_sum, 1.0 / n);
    let energy = tape.mean(gmm.energy);
    let zsq = tape.mul(out.z, out.z)?;
    let zsq_sum = tape.sum(zsq);
    let embed = tape.scale(zsq_sum, 1.0 / n);

    let e_term = tape.scale(energy, w.energy);
    let c_term = tape.scale(gmm.cov_penalty, w.covariance);
    let z_term = tape.scale(embed, w.embedding);
    let total = tape.add(recon, e_term)?;
    let total = tape.add(total, c_term)?;
    let total = tape.add(total, z_term)?;

    let terms = LossTerms {
        recon: tape.item(recon),
        energy: tape.item(energy),
        cov_penalty: tape.item(gmm.cov_penalty),
        embed_penalty: tape.item(embed),
        total: tape.item(total),
    };
    Ok((total, terms))
}

/// Evaluates the objective of `model` on `batch` and its parameter
/// gradients.
pub fn loss_and_gradients(
    model: &Cadgmm,
    batch: &Matrix,
    weights: &LossWeights,
) -> Result<(LossTerms, Gradients)> {
    let graph = build_knn_graph(batch, model.config.k)?;
    let x = Arc::new(batch.clone());
    let mut tape = Tape::new();
    let p = ParamVars::register(&mut tape, &model.params);
    let out = model.forward_taped(&mut tape, &p, &x, &graph)?;
    let gmm = batch_energy(&mut tape, &out, model.config.epsilon)?;
    let xv = tape.constant(batch.clone());
    let (total, terms) = loss(&mut tape, &out, &gmm, xv, weights)?;
    if !terms.is_finite() {
        return Err(Error::NonFiniteLoss {
            recon: terms.recon,
            energy: terms.energy,
            cov_penalty: terms.cov_penalty,
            embed_penalty: terms.embed_penalty,
        });
    }
    let grads = tape.backward(total)?;
    Ok((terms, grads))
}

/// Adaptive moment estimation with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    first: Vec<Matrix>,
    second: Vec<Matrix>,
}

impl Adam {
    pub fn new(params: &ParamStore, learning_rate: f64) -> Self {
        let zeros: Vec<Matrix> = params
            .iter()
            .map(|(_, m)| Matrix::zeros(m.rows(), m.cols()))
            .collect();
        Adam {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            first: zeros.clone(),
            second: zeros,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn update(&mut self, params: &mut ParamStore, grads: &Gradients) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for id in 0..params.len() {
            let Some(g) = grads.get(id) else { continue };
            let m = &mut self.first[id];
            let v = &mut self.second[id];
            let p = params.get_mut(id);
            for (((pv, mv), vv), gv) in p
                .data_mut()
                .iter_mut()
                .zip(m.data_mut())
                .zip(v.data_mut())
                .zip(g.data())
            {
                *mv = self.beta1 * *mv + (1.0 - self.beta1) * gv;
                *vv = self.beta2 * *vv + (1.0 - self.beta2) * gv * gv;
                let mhat = *mv / bc1;
                let vhat = *vv / bc2;
                *pv -= self.learning_rate * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOutcome {
    pub terms: LossTerms,
    /// True when the update was skipped because of non-finite values.
    pub skipped: bool,
}

/// One optimization step: graph, forward, loss, backward, update.
pub fn train_step(model: &mut Cadgmm, opt: &mut Adam, batch: &Matrix, w: &LossWeights) -> Result<StepOutcome> {
    match loss_and_gradients(model, batch, w) {
        Ok((terms, grads)) => {
            if !grads.all_finite() {
                log::warn!("non-finite gradients, skipping step (loss {:.6})", terms.total);
                return Ok(StepOutcome { terms, skipped: true });
            }
            opt.update(&mut model.params, &grads);
            model.params.check_finite()?;
            Ok(StepOutcome {
                terms,
                skipped: false,
            })
        }
        Err(Error::NonFiniteLoss {
            recon,
            energy,
            cov_penalty,
            embed_penalty,
        }) => {
            log::warn!(
                "non-finite loss, skipping step: recon={recon} energy={energy} cov={cov_penalty} embed={embed_penalty}"
            );
            Ok(StepOutcome {
                terms: LossTerms {
                    recon,
                    energy,
                    cov_penalty,
                    embed_penalty,
                    total: f64::NAN,
                },
                skipped: true,
            })
        }
        Err(e @ (Error::NotPositiveDefinite { .. } | Error::ComponentNotPositiveDefinite { .. })) => {
            log::warn!("skipping step: {e}");
            Ok(StepOutcome {
                terms: LossTerms {
                    recon: f64::NAN,
                    energy: f64::NAN,
                    cov_penalty: f64::NAN,
                    embed_penalty: f64::NAN,
                    total: f64::NAN,
                },
                skipped: true,
            })
        }
        Err(e) => Err(e),
    }
}

/// Reshuffles the training rows once per pass and hands out consecutive
/// batches. A trailing batch with at most `k` rows is dropped.
#[derive(Debug)]
pub struct BatchSampler {
    rng: SeededRng,
    order: Vec<usize>,
    cursor: usize,
    batch_size: usize,
    min_rows: usize,
}

impl BatchSampler {
    pub fn new(n: usize, batch_size: usize, k: usize, rng: SeededRng) -> Result<Self> {
        if n <= k {
            return Err(Error::InvalidK { k, n });
        }
        let mut s = BatchSampler {
            rng,
            order: Vec::new(),
            cursor: n,
            batch_size,
            min_rows: k + 1,
        };
        s.order = (0..n).collect();
        Ok(s)
    }

    pub fn next_indices(&mut self) -> Vec<usize> {
        let n = self.order.len();
        if n - self.cursor < self.min_rows {
            self.rng.shuffle(&mut self.order);
            self.cursor = 0;
        }
        let end = (self.cursor + self.batch_size).min(n);
        let out = self.order[self.cursor..end].to_vec();
        self.cursor = end;
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub iteration: usize,
    #[serde(flatten)]
    pub terms: LossTerms,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub rows: Vec<LogRow>,
    pub skipped_steps: usize,
}

impl TrainLog {
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "iteration,recon,energy,cov_penalty,embed_penalty,total")?;
        for r in &self.rows {
            let t = &r.terms;
            writeln!(
                out,
                "{},{},{},{},{},{}",
                r.iteration, t.recon, t.energy, t.cov_penalty, t.embed_penalty, t.total
            )?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub model: Cadgmm,
    pub gmm: GmmState,
    pub log: TrainLog,
}

/// Streams `x` through the network in batches and aggregates the mixture
/// statistics over every row.
pub fn fit_frozen_gmm(model: &Cadgmm, x: &Matrix, batch_size: usize) -> Result<GmmState> {
    let cfg = &model.config;
    let mut acc = GmmAccumulator::new(cfg.mixtures, cfg.z_dim());
    for batch in context_batches(x, batch_size, cfg.k)? {
        let graph = build_knn_graph(&batch.rows, cfg.k)?;
        let out = model.forward(&batch.rows, &graph)?;
        let own: Vec<usize> = batch.own.clone().collect();
        acc.add(&out.z.select_rows(&own), &out.membership.select_rows(&own))?;
    }
    acc.finish(cfg.epsilon)
}

/// Hook invoked every `checkpoint_interval` iterations.
pub type CheckpointHook<'a> = dyn FnMut(usize, &Cadgmm) -> Result<()> + 'a;

pub fn train(x: &Matrix, cfg: &TrainConfig) -> Result<TrainedModel> {
    train_with_hook(x, cfg, &mut |_, _| Ok(()))
}

/// Runs `cfg.iterations` steps over reshuffled batches of `x` (the
/// training stream), then freezes the mixture over all of `x`.
pub fn train_with_hook(x: &Matrix, cfg: &TrainConfig, hook: &mut CheckpointHook<'_>) -> Result<TrainedModel> {
    cfg.validate()?;
    if x.rows() == 0 {
        return Err(Error::Dataset("training set is empty".into()));
    }
    if x.cols() != cfg.model.input_dim {
        return Err(Error::Shape {
            op: "train",
            lhs: x.shape(),
            rhs: (x.rows(), cfg.model.input_dim),
        });
    }
    let mut model = Cadgmm::new(cfg.model.clone(), cfg.seed)?;
    let mut opt = Adam::new(&model.params, cfg.learning_rate);
    let root = SeededRng::new(cfg.seed);
    let mut sampler = BatchSampler::new(x.rows(), cfg.batch_size, cfg.model.k, root.substream(2))?;
    let mut log = TrainLog::default();
    for it in 1..=cfg.iterations {
        let batch = x.select_rows(&sampler.next_indices());
        let outcome = train_step(&mut model, &mut opt, &batch, &cfg.weights)?;
        if outcome.skipped {
            log.skipped_steps += 1;
        }
        log.rows.push(LogRow {
            iteration: it,
            terms: outcome.terms,
        });
        if it % 100 == 0 || it == cfg.iterations {
            log::debug!("iteration {it}: loss {:.6}", outcome.terms.total);
        }
        if cfg.checkpoint_interval > 0 && it % cfg.checkpoint_interval == 0 {
            hook(it, &model)?;
        }
    }
    let gmm = fit_frozen_gmm(&model, x, cfg.batch_size)?;
    Ok(TrainedModel { model, gmm, log })
}
