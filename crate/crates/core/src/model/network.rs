//! Forward pass: dual encoder, fusion, decoder, reconstruction features
//! and membership estimation. Every stage is recorded on a [`Tape`].

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::graph::NeighborGraph;
use crate::model::gmm::{gmm_energy_taped, GmmState, TapedGmm};
use crate::model::params::{Dense, Layout, ParamStore};
use crate::model::{ModelConfig, OutputActivation};
use crate::numeric::{Matrix, SeededRng, Tape, Var};

/// Parameters registered on a tape, indexed like the [`ParamStore`].
#[derive(Debug, Clone)]
pub struct ParamVars(Vec<Var>);

impl ParamVars {
    pub fn register(tape: &mut Tape, store: &ParamStore) -> Self {
        ParamVars((0..store.len()).map(|id| tape.param(id, store.get(id))).collect())
    }

    pub fn get(&self, id: usize) -> Var {
        self.0[id]
    }
}

/// Tape handles of every intermediate of a forward pass.
#[derive(Debug, Clone, Copy)]
pub struct ForwardVars {
    pub zx: Var,
    pub zv: Var,
    pub zf: Var,
    pub xhat: Var,
    pub zr: Var,
    pub z: Var,
    pub membership: Var,
}

/// Materialized forward intermediates.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutputs {
    pub zx: Matrix,
    pub zv: Matrix,
    pub zf: Matrix,
    pub xhat: Matrix,
    pub zr: Matrix,
    pub z: Matrix,
    pub membership: Matrix,
}

impl ForwardOutputs {
    pub fn collect(tape: &Tape, v: &ForwardVars) -> Self {
        ForwardOutputs {
            zx: tape.value(v.zx).clone(),
            zv: tape.value(v.zv).clone(),
            zf: tape.value(v.zf).clone(),
            xhat: tape.value(v.xhat).clone(),
            zr: tape.value(v.zr).clone(),
            z: tape.value(v.z).clone(),
            membership: tape.value(v.membership).clone(),
        }
    }
}

/// Attention weights over each node's neighborhood (k-NN list plus self).
#[derive(Debug, Clone, PartialEq)]
pub struct Attention {
    /// `N x (k+1)`, row `i` aligned with `table[i*(k+1)..]`.
    pub weights: Matrix,
    pub table: Arc<[usize]>,
}

impl Attention {
    /// Expands to an `N x N` matrix that is zero outside each neighborhood.
    pub fn dense(&self) -> Matrix {
        let (n, w) = self.weights.shape();
        let mut out = Matrix::zeros(n, n);
        for i in 0..n {
            for s in 0..w {
                let j = self.table[i * w + s];
                out.set(i, j, out.get(i, j) + self.weights.get(i, s));
            }
        }
        out
    }
}

fn dense_layer(tape: &mut Tape, input: Var, layer: Dense, p: &ParamVars, act: bool) -> Result<Var> {
    let lin = tape.matmul(input, p.get(layer.weight))?;
    let out = tape.add_row(lin, p.get(layer.bias))?;
    Ok(if act { tape.tanh(out) } else { out })
}

/// Feature encoder: `Z ← tanh(Z·W + b)` for every encoder layer.
pub fn feature_encode(tape: &mut Tape, x: Var, layers: &[Dense], p: &ParamVars) -> Result<Var> {
    layers
        .iter()
        .try_fold(x, |z, layer| dense_layer(tape, z, *layer, p, true))
}

/// Projected features `h = X·W^cᵀ` and attention weights
/// `α_i = softmax_{j∈N_i} tanh(aᵀ[h_i ‖ h_j])`.
pub fn attention_coefficients(
    tape: &mut Tape,
    x: Var,
    table: Arc<[usize]>,
    projection: Var,
    vector: Var,
) -> Result<(Var, Var)> {
    let d = tape.value(projection).rows();
    if tape.value(vector).shape() != (2 * d, 1) {
        return Err(Error::Shape {
            op: "attention",
            lhs: tape.value(projection).shape(),
            rhs: tape.value(vector).shape(),
        });
    }
    let wt = tape.transpose(projection);
    let h = tape.matmul(x, wt)?;
    let a_src = tape.slice_rows(vector, 0, d)?;
    let a_dst = tape.slice_rows(vector, d, 2 * d)?;
    let s_src = tape.matmul(h, a_src)?;
    let s_dst = tape.matmul(h, a_dst)?;
    let scores = tape.neighbor_scores(s_src, s_dst, table)?;
    let w = tape.tanh(scores);
    Ok((tape.row_softmax(w), h))
}

/// `Z^V_i = Σ_{k∈N_i} α_ik · h_k`, aggregating projected features.
pub fn graph_encode(tape: &mut Tape, alpha: Var, h: Var, table: Arc<[usize]>) -> Result<Var> {
    tape.neighbor_aggregate(alpha, h, table)
}

/// Elementwise sum of the two encoder outputs followed by a linear layer.
pub fn fuse(tape: &mut Tape, zx: Var, zv: Var, fusion: Dense, p: &ParamVars) -> Result<Var> {
    let sum = tape.add(zx, zv)?;
    dense_layer(tape, sum, fusion, p, false)
}

pub fn decode(
    tape: &mut Tape,
    zf: Var,
    layers: &[Dense],
    p: &ParamVars,
    output: OutputActivation,
) -> Result<Var> {
    let last = layers.len().saturating_sub(1);
    layers.iter().enumerate().try_fold(zf, |z, (l, layer)| {
        let act = l < last || output == OutputActivation::Tanh;
        dense_layer(tape, z, *layer, p, act)
    })
}

/// tanh hidden layers, linear final layer, row softmax.
pub fn estimate_membership(tape: &mut Tape, z: Var, layers: &[Dense], p: &ParamVars) -> Result<Var> {
    let last = layers.len().saturating_sub(1);
    let logits = layers
        .iter()
        .enumerate()
        .try_fold(z, |h, (l, layer)| dense_layer(tape, h, *layer, p, l < last))?;
    Ok(tape.row_softmax(logits))
}

/// Network configuration plus its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Cadgmm {
    pub config: ModelConfig,
    pub layout: Layout,
    pub params: ParamStore,
}

impl Cadgmm {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let mut rng = SeededRng::new(seed).substream(1);
        let (layout, params) = Layout::init(&config, &mut rng)?;
        Ok(Cadgmm {
            config,
            layout,
            params,
        })
    }

    pub fn from_params(config: ModelConfig, params: ParamStore) -> Result<Self> {
        let layout = Layout::from_store(&config, &params)?;
        Ok(Cadgmm {
            config,
            layout,
            params,
        })
    }

    /// Records the full forward pass on `tape`.
    pub fn forward_taped(
        &self,
        tape: &mut Tape,
        p: &ParamVars,
        x: &Arc<Matrix>,
        graph: &NeighborGraph,
    ) -> Result<ForwardVars> {
        let cfg = &self.config;
        if x.cols() != cfg.input_dim || graph.n_nodes() != x.rows() {
            return Err(Error::Shape {
                op: "forward",
                lhs: x.shape(),
                rhs: (graph.n_nodes(), cfg.input_dim),
            });
        }
        let xv = tape.constant((**x).clone());
        let zx = feature_encode(tape, xv, &self.layout.encoder, p)?;
        let zv = if cfg.graph_branch {
            let table = graph.attention_table();
            let (alpha, h) = attention_coefficients(
                tape,
                xv,
                table.clone(),
                p.get(self.layout.attn_projection),
                p.get(self.layout.attn_vector),
            )?;
            graph_encode(tape, alpha, h, table)?
        } else {
            tape.constant(Matrix::zeros(x.rows(), cfg.graph_dim))
        };
        let zf = fuse(tape, zx, zv, self.layout.fusion, p)?;
        let xhat = decode(tape, zf, &self.layout.decoder, p, cfg.decoder_output)?;
        let zr = tape.recon_features(x.clone(), xhat)?;
        let z = tape.concat_cols(&[zf, zr])?;
        let membership = estimate_membership(tape, z, &self.layout.estimator, p)?;
        Ok(ForwardVars {
            zx,
            zv,
            zf,
            xhat,
            zr,
            z,
            membership,
        })
    }

    /// Forward pass returning plain matrices.
    pub fn forward(&self, x: &Matrix, graph: &NeighborGraph) -> Result<ForwardOutputs> {
        let mut tape = Tape::new();
        let p = ParamVars::register(&mut tape, &self.params);
        let vars = self.forward_taped(&mut tape, &p, &Arc::new(x.clone()), graph)?;
        Ok(ForwardOutputs::collect(&tape, &vars))
    }

    /// Attention weights for a batch, outside any training step.
    pub fn attention(&self, x: &Matrix, graph: &NeighborGraph) -> Result<Attention> {
        let mut tape = Tape::new();
        let p = ParamVars::register(&mut tape, &self.params);
        let xv = tape.constant(x.clone());
        let table = graph.attention_table();
        let (alpha, _) = attention_coefficients(
            &mut tape,
            xv,
            table.clone(),
            p.get(self.layout.attn_projection),
            p.get(self.layout.attn_vector),
        )?;
        Ok(Attention {
            weights: tape.value(alpha).clone(),
            table,
        })
    }

    /// Sample energies under a frozen mixture.
    pub fn energy(&self, x: &Matrix, graph: &NeighborGraph, gmm: &GmmState) -> Result<Vec<f64>> {
        gmm.energy(&self.forward(x, graph)?.z)
    }
}

/// Energy of the batch under its own differentiable mixture fit.
pub fn batch_energy(tape: &mut Tape, out: &ForwardVars, eps: f64) -> Result<TapedGmm> {
    gmm_energy_taped(tape, out.z, out.membership, eps)
}
