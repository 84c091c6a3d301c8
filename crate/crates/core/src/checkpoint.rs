//! Versioned little-endian container for model checkpoints and dataset
//! caches.
//!
//! Layout: magic, version (u32), kind, entry count (u32), entries, then the
//! SHA-256 of everything before it. Strings are a u32 length followed by
//! UTF-8 bytes. Each entry is a name, a tag byte and a payload:
//! matrix (rows u64, cols u64, f64 data), text, or u64.

use std::path::Path;

use sha2::{Digest, Sha256};

use crate::data::{DatasetRecipe, LabeledDataset, NormStats, Preprocessor, Split};
use crate::error::{Error, Result};
use crate::eval::hex;
use crate::model::{Cadgmm, GmmState, ParamStore};
use crate::numeric::Matrix;
use crate::trainer::TrainConfig;

pub const MAGIC: &[u8; 8] = b"CADGMMv\0";
pub const VERSION: u32 = 1;

const TAG_MATRIX: u8 = 0;
const TAG_TEXT: u8 = 1;
const TAG_U64: u8 = 2;

#[derive(Debug, Clone, PartialEq)]
pub enum Entry {
    Matrix(Matrix),
    Text(String),
    U64(u64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub kind: String,
    entries: Vec<(String, Entry)>,
}

impl Container {
    pub fn new(kind: impl Into<String>) -> Self {
        Container {
            kind: kind.into(),
            entries: Vec::new(),
        }
    }

    pub fn entries(&self) -> &[(String, Entry)] {
        &self.entries
    }

    pub fn put(&mut self, name: impl Into<String>, entry: Entry) {
        let name = name.into();
        match self.entries.iter_mut().find(|(n, _)| *n == name) {
            Some(slot) => slot.1 = entry,
            None => self.entries.push((name, entry)),
        }
    }

    pub fn put_matrix(&mut self, name: impl Into<String>, m: Matrix) {
        self.put(name, Entry::Matrix(m));
    }

    pub fn put_text(&mut self, name: impl Into<String>, s: impl Into<String>) {
        self.put(name, Entry::Text(s.into()));
    }

    pub fn put_u64(&mut self, name: impl Into<String>, v: u64) {
        self.put(name, Entry::U64(v));
    }

    pub fn get(&self, name: &str) -> Option<&Entry> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, e)| e)
    }

    fn missing(&self, name: &str, what: &str) -> Error {
        Error::Checkpoint(format!("{} container has no {what} entry '{name}'", self.kind))
    }

    pub fn matrix(&self, name: &str) -> Result<&Matrix> {
        match self.get(name) {
            Some(Entry::Matrix(m)) => Ok(m),
            _ => Err(self.missing(name, "matrix")),
        }
    }

    pub fn text(&self, name: &str) -> Result<&str> {
        match self.get(name) {
            Some(Entry::Text(s)) => Ok(s),
            _ => Err(self.missing(name, "text")),
        }
    }

    pub fn u64(&self, name: &str) -> Result<u64> {
        match self.get(name) {
            Some(Entry::U64(v)) => Ok(*v),
            _ => Err(self.missing(name, "integer")),
        }
    }

    fn body(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        put_str(&mut out, &self.kind);
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, entry) in &self.entries {
            put_str(&mut out, name);
            match entry {
                Entry::Matrix(m) => {
                    out.push(TAG_MATRIX);
                    out.extend_from_slice(&(m.rows() as u64).to_le_bytes());
                    out.extend_from_slice(&(m.cols() as u64).to_le_bytes());
                    for v in m.data() {
                        out.extend_from_slice(&v.to_le_bytes());
                    }
                }
                Entry::Text(s) => {
                    out.push(TAG_TEXT);
                    put_str(&mut out, s);
                }
                Entry::U64(v) => {
                    out.push(TAG_U64);
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        out
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = self.body();
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    /// Hex SHA-256 of the serialized content.
    pub fn fingerprint(&self) -> String {
        hex(&Sha256::digest(self.body()))
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() + 32 || &bytes[..MAGIC.len()] != MAGIC {
            return Err(Error::Checkpoint("not a container file (bad magic)".into()));
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        let actual = Sha256::digest(body);
        if actual.as_slice() != digest {
            return Err(Error::FingerprintMismatch {
                expected: hex(digest),
                found: hex(&actual),
            });
        }
        let mut r = Reader {
            buf: body,
            pos: MAGIC.len(),
        };
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported container version {version} (expected {VERSION})"
            )));
        }
        let kind = r.string()?;
        let count = r.u32()? as usize;
        let mut entries = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let name = r.string()?;
            let entry = match r.u8()? {
                TAG_MATRIX => {
                    let rows = r.u64()? as usize;
                    let cols = r.u64()? as usize;
                    let n = rows
                        .checked_mul(cols)
                        .filter(|n| n.checked_mul(8).is_some_and(|b| b <= r.remaining()))
                        .ok_or_else(|| Error::Checkpoint(format!("entry '{name}': truncated matrix")))?;
                    let data = (0..n).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
                    Entry::Matrix(Matrix::new(rows, cols, data)?)
                }
                TAG_TEXT => Entry::Text(r.string()?),
                TAG_U64 => Entry::U64(r.u64()?),
                t => return Err(Error::Checkpoint(format!("entry '{name}': unknown tag {t}"))),
            };
            entries.push((name, entry));
        }
        if r.remaining() != 0 {
            return Err(Error::Checkpoint(format!("{} trailing bytes", r.remaining())));
        }
        Ok(Container { kind, entries })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    pub fn expect_kind(self, kind: &str) -> Result<Self> {
        if self.kind != kind {
            return Err(Error::Checkpoint(format!("expected a {kind} container, found {}", self.kind)));
        }
        Ok(self)
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.remaining() < n {
            return Err(Error::Checkpoint("unexpected end of container".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Checkpoint("invalid UTF-8 string".into()))
    }
}

fn row_vector(v: &[f64]) -> Matrix {
    Matrix::new(1, v.len(), v.to_vec()).expect("finite row")
}

/// A trained model as stored on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelCheckpoint {
    pub config: TrainConfig,
    pub params: ParamStore,
    pub gmm: GmmState,
    pub preprocessor: Option<Preprocessor>,
    /// Fingerprint of the dataset cache the model was trained on.
    pub dataset_fingerprint: Option<String>,
    /// Iteration at which the snapshot was taken.
    pub iteration: u64,
}

impl ModelCheckpoint {
    pub fn model(&self) -> Result<Cadgmm> {
        Cadgmm::from_params(self.config.model.clone(), self.params.clone())
    }

    pub fn to_container(&self) -> Container {
        let mut c = Container::new("model");
        c.put_text("config", serde_json::to_string(&self.config).expect("config serializes"));
        c.put_u64("seed", self.config.seed);
        c.put_u64("iteration", self.iteration);
        for (name, m) in self.params.iter() {
            c.put_matrix(format!("param/{name}"), m.clone());
        }
        c.put_matrix("gmm/phi", row_vector(&self.gmm.phi));
        c.put_matrix("gmm/means", self.gmm.means.clone());
        for (m, cov) in self.gmm.covariances.iter().enumerate() {
            c.put_matrix(format!("gmm/cov/{m}"), cov.clone());
        }
        let degenerate: Vec<f64> = self.gmm.degenerate.iter().map(|&d| d as u8 as f64).collect();
        c.put_matrix("gmm/degenerate", row_vector(&degenerate));
        if let Some(p) = &self.preprocessor {
            put_preprocessor(&mut c, p);
        }
        if let Some(fp) = &self.dataset_fingerprint {
            c.put_text("dataset_fingerprint", fp.clone());
        }
        c
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let config: TrainConfig = serde_json::from_str(c.text("config")?)
            .map_err(|e| Error::Checkpoint(format!("bad config entry: {e}")))?;
        let mut params = ParamStore::new();
        for (name, entry) in c.entries() {
            if let (Some(p), Entry::Matrix(m)) = (name.strip_prefix("param/"), entry) {
                params.push(p, m.clone());
            }
        }
        let phi = c.matrix("gmm/phi")?.data().to_vec();
        let covariances = (0..phi.len())
            .map(|m| c.matrix(&format!("gmm/cov/{m}")).cloned())
            .collect::<Result<Vec<_>>>()?;
        let gmm = GmmState {
            degenerate: c.matrix("gmm/degenerate")?.data().iter().map(|&v| v != 0.0).collect(),
            means: c.matrix("gmm/means")?.clone(),
            covariances,
            epsilon: config.model.epsilon,
            phi,
        };
        let preprocessor = match c.get("norm/min") {
            Some(_) => Some(get_preprocessor(c)?),
            None => None,
        };
        let ck = ModelCheckpoint {
            params,
            gmm,
            preprocessor,
            dataset_fingerprint: c.text("dataset_fingerprint").ok().map(str::to_string),
            iteration: c.u64("iteration")?,
            config,
        };
        ck.model()?;
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container().write(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(&Container::read(path)?.expect_kind("model")?)
    }
}

fn put_preprocessor(c: &mut Container, p: &Preprocessor) {
    c.put_matrix("norm/min", stats_row(&p.stats.min));
    c.put_matrix("norm/max", stats_row(&p.stats.max));
    c.put_matrix("norm/means", row_vector(&p.means));
}

/// Columns never observed in training keep infinite bounds; those are
/// stored as 0 (the column is constant for scaling purposes).
fn stats_row(v: &[f64]) -> Matrix {
    row_vector(&v.iter().map(|x| if x.is_finite() { *x } else { 0.0 }).collect::<Vec<_>>())
}

fn get_preprocessor(c: &Container) -> Result<Preprocessor> {
    Ok(Preprocessor {
        stats: NormStats {
            min: c.matrix("norm/min")?.data().to_vec(),
            max: c.matrix("norm/max")?.data().to_vec(),
        },
        means: c.matrix("norm/means")?.data().to_vec(),
    })
}

/// Encoded dataset with its split and fitted preprocessing.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetCache {
    /// Raw encoded features with the split assigned.
    pub dataset: LabeledDataset,
    pub preprocessor: Preprocessor,
    pub split_seed: u64,
}

impl DatasetCache {
    /// Loads, encodes and splits `recipe`, then fits preprocessing on the
    /// training split.
    pub fn prepare(recipe: &DatasetRecipe, split_seed: u64) -> Result<Self> {
        let ds = crate::data::load_and_encode(recipe)?;
        Self::from_dataset(ds, split_seed)
    }

    pub fn from_dataset(ds: LabeledDataset, split_seed: u64) -> Result<Self> {
        let ds = crate::data::split_train_test(ds, split_seed);
        let preprocessor = Preprocessor::fit(&ds, &ds.train_indices()?)?;
        Ok(DatasetCache {
            dataset: ds,
            preprocessor,
            split_seed,
        })
    }

    /// Normalized rows.
    pub fn rows(&self, idx: &[usize]) -> Matrix {
        self.preprocessor.transform_rows(&self.dataset, idx)
    }

    pub fn test_set(&self) -> Result<(Matrix, Vec<u8>)> {
        let idx = self.dataset.test_indices()?;
        Ok((self.rows(&idx), self.dataset.labels_of(&idx)))
    }

    pub fn to_container(&self) -> Container {
        let ds = &self.dataset;
        let mut c = Container::new("dataset");
        c.put_text("name", ds.name.clone());
        c.put_text("recipe", ds.recipe.to_text());
        c.put_u64("split_seed", self.split_seed);
        c.put_matrix("features", ds.features.clone());
        let labels: Vec<f64> = ds.labels.iter().map(|&l| l as f64).collect();
        c.put_matrix("labels", Matrix::new(labels.len(), 1, labels).expect("finite"));
        let split: Vec<f64> = ds
            .split
            .as_ref()
            .map(|s| s.iter().map(|&t| (t == Split::Train) as u8 as f64).collect())
            .unwrap_or_default();
        c.put_matrix("split_train", Matrix::new(split.len(), 1, split).expect("finite"));
        let missing: Vec<f64> = ds.missing.iter().flat_map(|&(r, col)| [r as f64, col as f64]).collect();
        c.put_matrix("missing", Matrix::new(ds.missing.len(), 2, missing).expect("finite"));
        put_preprocessor(&mut c, &self.preprocessor);
        c
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let recipe = DatasetRecipe::parse(c.text("recipe")?, Path::new("<cache>"))?;
        let labels: Vec<u8> = c.matrix("labels")?.data().iter().map(|&v| v as u8).collect();
        let split: Vec<Split> = c
            .matrix("split_train")?
            .data()
            .iter()
            .map(|&v| if v != 0.0 { Split::Train } else { Split::Test })
            .collect();
        let features = c.matrix("features")?.clone();
        if labels.len() != features.rows() || split.len() != features.rows() {
            return Err(Error::Checkpoint("dataset cache has inconsistent row counts".into()));
        }
        let m = c.matrix("missing")?;
        let missing = (0..m.rows()).map(|r| (m.get(r, 0) as usize, m.get(r, 1) as usize)).collect();
        let preprocessor = get_preprocessor(c)?;
        Ok(DatasetCache {
            dataset: LabeledDataset {
                name: c.text("name")?.to_string(),
                features,
                labels,
                split: Some(split),
                stats: None,
                missing,
                recipe,
            },
            preprocessor,
            split_seed: c.u64("split_seed")?,
        })
    }

    pub fn fingerprint(&self) -> String {
        self.to_container().fingerprint()
    }

    pub fn save(&self, path: &Path) -> Result<String> {
        let c = self.to_container();
        c.write(path)?;
        Ok(c.fingerprint())
    }

    /// Loads a cache and returns it with its fingerprint.
    pub fn load(path: &Path) -> Result<(Self, String)> {
        let c = Container::read(path)?.expect_kind("dataset")?;
        Ok((Self::from_container(&c)?, c.fingerprint()))
    }
}
