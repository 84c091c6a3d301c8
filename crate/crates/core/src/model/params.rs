use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::numeric::{Matrix, SeededRng};

/// Named, ordered collection of trainable matrices. Ids are insertion
/// positions and double as tape parameter ids.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Matrix>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn push(&mut self, name: impl Into<String>, value: Matrix) -> usize {
        self.names.push(name.into());
        self.values.push(value);
        self.values.len() - 1
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: usize) -> &Matrix {
        &self.values[id]
    }

    pub fn get_mut(&mut self, id: usize) -> &mut Matrix {
        &mut self.values[id]
    }

    pub fn name(&self, id: usize) -> &str {
        &self.names[id]
    }

    pub fn id_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn by_name(&self, name: &str) -> Option<&Matrix> {
        self.id_of(name).map(|i| &self.values[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Matrix)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn param_count(&self) -> usize {
        self.values.iter().map(|m| m.rows() * m.cols()).sum()
    }

    pub fn check_finite(&self) -> Result<()> {
        for (name, m) in self.iter() {
            m.check_finite()
                .map_err(|e| Error::Config(format!("parameter {name}: {e}")))?;
        }
        Ok(())
    }

    /// Replaces the value of `name`, keeping its shape.
    pub fn set(&mut self, name: &str, value: Matrix) -> Result<()> {
        let id = self
            .id_of(name)
            .ok_or_else(|| Error::Config(format!("unknown parameter `{name}`")))?;
        self.values[id].same_shape("param_set", &value)?;
        self.values[id] = value;
        Ok(())
    }
}

/// Weight/bias ids of one fully connected layer. The weight is stored
/// `fan_in x fan_out` so a layer computes `Z·W + b`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Dense {
    pub weight: usize,
    pub bias: usize,
}

/// Ids of every parameter group in a [`ParamStore`] built by
/// [`Layout::init`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    pub encoder: Vec<Dense>,
    /// `W^c`, shape `graph_dim x input_dim`.
    pub attn_projection: usize,
    /// `a`, shape `2·graph_dim x 1`.
    pub attn_vector: usize,
    pub fusion: Dense,
    pub decoder: Vec<Dense>,
    pub estimator: Vec<Dense>,
}

fn glorot(rng: &mut SeededRng, rows: usize, cols: usize, fan_in: usize, fan_out: usize) -> Matrix {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..rows * cols).map(|_| rng.uniform(-bound, bound)).collect();
    Matrix::from_vec(rows, cols, data)
}

fn dense_stack(
    store: &mut ParamStore,
    rng: &mut SeededRng,
    prefix: &str,
    dims: &[usize],
) -> Vec<Dense> {
    dims.windows(2)
        .enumerate()
        .map(|(l, w)| {
            let (i, o) = (w[0], w[1]);
            Dense {
                weight: store.push(format!("{prefix}.{l}.weight"), glorot(rng, i, o, i, o)),
                bias: store.push(format!("{prefix}.{l}.bias"), Matrix::zeros(1, o)),
            }
        })
        .collect()
}

impl Layout {
    /// Allocates every parameter with Glorot-uniform weights and zero
    /// biases, in a fixed order so a seed fully determines the result.
    pub fn init(cfg: &ModelConfig, rng: &mut SeededRng) -> Result<(Layout, ParamStore)> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let encoder = dense_stack(&mut store, rng, "encoder", &cfg.encoder_dims());
        let (f, d) = (cfg.input_dim, cfg.graph_dim);
        let attn_projection = store.push("attention.projection", glorot(rng, d, f, f, d));
        let a = cfg.attention_dim();
        let attn_vector = store.push("attention.vector", glorot(rng, a, 1, a, 1));
        let fusion = dense_stack(&mut store, rng, "fusion", &[d, cfg.latent_dim])[0];
        let decoder = dense_stack(&mut store, rng, "decoder", &cfg.decoder_dims());
        let estimator = dense_stack(&mut store, rng, "estimator", &cfg.estimator_dims());
        Ok((
            Layout {
                encoder,
                attn_projection,
                attn_vector,
                fusion,
                decoder,
                estimator,
            },
            store,
        ))
    }

    /// Recovers the layout of a store whose names follow [`Layout::init`].
    pub fn from_store(cfg: &ModelConfig, store: &ParamStore) -> Result<Layout> {
        let (layout, template) = Layout::init(cfg, &mut SeededRng::new(0))?;
        if template.len() != store.len() {
            return Err(Error::Config(format!(
                "parameter count {} does not match configuration ({})",
                store.len(),
                template.len()
            )));
        }
        for (id, (name, m)) in template.iter().enumerate() {
            if store.name(id) != name || store.get(id).shape() != m.shape() {
                return Err(Error::Config(format!(
                    "parameter {id}: expected {name} {:?}, found {} {:?}",
                    m.shape(),
                    store.name(id),
                    store.get(id).shape()
                )));
            }
        }
        Ok(layout)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kdd99_shapes() {
        let (layout, store) = Layout::init(&ModelConfig::kdd99(), &mut SeededRng::new(3)).unwrap();
        assert_eq!(store.get(layout.encoder[0].weight).shape(), (120, 64));
        assert_eq!(store.get(layout.encoder[1].weight).shape(), (64, 32));
        assert_eq!(store.get(layout.attn_projection).shape(), (32, 120));
        assert_eq!(store.get(layout.attn_vector).shape(), (64, 1));
        assert_eq!(store.get(layout.fusion.weight).shape(), (32, 8));
        assert_eq!(store.get(layout.decoder[2].weight).shape(), (64, 120));
        assert_eq!(store.get(layout.estimator[0].weight).shape(), (10, 20));
        assert_eq!(store.get(layout.estimator[2].bias).shape(), (1, 4));
    }

    #[test]
    fn init_is_bitwise_reproducible() {
        let cfg = ModelConfig::satellite();
        let (_, a) = Layout::init(&cfg, &mut SeededRng::new(9)).unwrap();
        let (_, b) = Layout::init(&cfg, &mut SeededRng::new(9)).unwrap();
        for ((_, x), (_, y)) in a.iter().zip(b.iter()) {
            let xb: Vec<u64> = x.data().iter().map(|v| v.to_bits()).collect();
            let yb: Vec<u64> = y.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(xb, yb);
        }
        let (_, c) = Layout::init(&cfg, &mut SeededRng::new(10)).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn glorot_bounds_and_zero_bias() {
        let cfg = ModelConfig::satellite();
        let (layout, store) = Layout::init(&cfg, &mut SeededRng::new(1)).unwrap();
        let bound = (6.0 / (36.0 + 16.0_f64)).sqrt();
        let w = store.get(layout.encoder[0].weight);
        assert!(w.data().iter().all(|v| v.abs() <= bound));
        assert!(store.get(layout.encoder[0].bias).data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn layout_recovered_from_store() {
        let cfg = ModelConfig::arrhythmia();
        let (layout, store) = Layout::init(&cfg, &mut SeededRng::new(5)).unwrap();
        assert_eq!(Layout::from_store(&cfg, &store).unwrap(), layout);
        assert!(Layout::from_store(&ModelConfig::satellite(), &store).is_err());
    }
}
