//! Dataset recipes, loading, one-hot encoding, normalization and splits.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{Matrix, SeededRng};

/// RNG substream used by [`split_train_test`].
const SPLIT_STREAM: u64 = 3;
/// RNG substream used by [`inject_noise`].
const NOISE_STREAM: u64 = 4;

const MISSING: &[&str] = &["?", ""];

/// Plain-text description of how to turn a CSV file into a labeled
/// feature matrix.
///
/// ```text
/// name = satellite
/// source = satellite.csv
/// label_column = last
/// anomaly_labels = 2,4,5
/// expected_features = 36
/// ```
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetRecipe {
    pub name: String,
    pub source: PathBuf,
    pub delimiter: u8,
    pub header: bool,
    /// Raw column holding the class; `None` means the last column.
    pub label_column: Option<usize>,
    /// Raw columns to one-hot encode.
    pub categorical: Vec<usize>,
    /// Raw columns to discard.
    pub drop_columns: Vec<usize>,
    /// Class values that mark a row as anomalous.
    pub anomaly_labels: Vec<String>,
    pub expected_features: Option<usize>,
    /// Frozen category order per categorical column. Columns missing here
    /// are discovered in first-appearance order.
    pub categories: BTreeMap<usize, Vec<String>>,
}

const BUILTIN_KDD99: &str = include_str!("../recipes/kdd99.recipe");
const BUILTIN_ARRHYTHMIA: &str = include_str!("../recipes/arrhythmia.recipe");
const BUILTIN_SATELLITE: &str = include_str!("../recipes/satellite.recipe");

impl DatasetRecipe {
    pub fn builtin_names() -> &'static [&'static str] {
        &["kdd99", "arrhythmia", "satellite"]
    }

    /// Built-in recipe with its source resolved against `data_dir`.
    pub fn builtin(name: &str, data_dir: &Path) -> Result<Self> {
        let text = match name {
            "kdd99" => BUILTIN_KDD99,
            "arrhythmia" => BUILTIN_ARRHYTHMIA,
            "satellite" => BUILTIN_SATELLITE,
            _ => return Err(Error::Config(format!("unknown dataset '{name}'"))),
        };
        let mut r = Self::parse(text, Path::new(name))?;
        r.source = data_dir.join(&r.source);
        Ok(r)
    }

    /// Reads a recipe file; a relative `source` is taken relative to the
    /// file's directory.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut r = Self::parse(&text, path)?;
        if r.source.is_relative() {
            if let Some(dir) = path.parent() {
                r.source = dir.join(&r.source);
            }
        }
        Ok(r)
    }

    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let err = |line: usize, message: String| Error::Parse {
            path: origin.to_path_buf(),
            line: line as u64,
            message,
        };
        let mut r = DatasetRecipe {
            name: String::new(),
            source: PathBuf::new(),
            delimiter: b',',
            header: false,
            label_column: None,
            categorical: Vec::new(),
            drop_columns: Vec::new(),
            anomaly_labels: Vec::new(),
            expected_features: None,
            categories: BTreeMap::new(),
        };
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| err(i + 1, format!("expected key = value, got '{line}'")))?;
            let (key, value) = (key.trim(), value.trim());
            let usize_list = |v: &str| -> Result<Vec<usize>> {
                split_list(v)
                    .map(|s| s.parse().map_err(|_| err(i + 1, format!("bad column index '{s}'"))))
                    .collect()
            };
            match key {
                "name" => r.name = value.to_string(),
                "source" => r.source = PathBuf::from(value),
                "delimiter" => {
                    r.delimiter = match value {
                        "tab" | "\\t" => b'\t',
                        "space" => b' ',
                        v if v.len() == 1 => v.as_bytes()[0],
                        v => return Err(err(i + 1, format!("delimiter must be one byte, got '{v}'"))),
                    }
                }
                "header" => {
                    r.header = value
                        .parse()
                        .map_err(|_| err(i + 1, format!("header must be true or false, got '{value}'")))?
                }
                "label_column" => {
                    r.label_column = match value {
                        "last" => None,
                        v => Some(v.parse().map_err(|_| err(i + 1, format!("bad label column '{v}'")))?),
                    }
                }
                "categorical" => r.categorical = usize_list(value)?,
                "drop_columns" => r.drop_columns = usize_list(value)?,
                "anomaly_labels" => r.anomaly_labels = split_list(value).map(str::to_string).collect(),
                "expected_features" => {
                    r.expected_features = Some(
                        value
                            .parse()
                            .map_err(|_| err(i + 1, format!("bad feature count '{value}'")))?,
                    )
                }
                k if k.starts_with("categories.") => {
                    let col = k["categories.".len()..]
                        .parse()
                        .map_err(|_| err(i + 1, format!("bad categories key '{k}'")))?;
                    r.categories
                        .insert(col, value.split('|').map(str::to_string).collect());
                }
                k => return Err(err(i + 1, format!("unknown recipe key '{k}'"))),
            }
        }
        if r.anomaly_labels.is_empty() {
            return Err(err(0, "recipe defines no anomaly_labels".into()));
        }
        if r.source.as_os_str().is_empty() {
            return Err(err(0, "recipe defines no source".into()));
        }
        Ok(r)
    }

    /// Serializes back to the key-value format, including frozen category
    /// orders.
    pub fn to_text(&self) -> String {
        let join = |v: &[usize]| v.iter().map(|c| c.to_string()).collect::<Vec<_>>().join(",");
        let mut s = String::new();
        let _ = writeln!(s, "name = {}", self.name);
        let _ = writeln!(s, "source = {}", self.source.display());
        let delim = match self.delimiter {
            b'\t' => "tab".to_string(),
            b' ' => "space".to_string(),
            b => (b as char).to_string(),
        };
        let _ = writeln!(s, "delimiter = {delim}");
        let _ = writeln!(s, "header = {}", self.header);
        match self.label_column {
            Some(c) => {
                let _ = writeln!(s, "label_column = {c}");
            }
            None => s.push_str("label_column = last\n"),
        }
        let _ = writeln!(s, "categorical = {}", join(&self.categorical));
        let _ = writeln!(s, "drop_columns = {}", join(&self.drop_columns));
        let _ = writeln!(s, "anomaly_labels = {}", self.anomaly_labels.join(","));
        if let Some(f) = self.expected_features {
            let _ = writeln!(s, "expected_features = {f}");
        }
        for (col, cats) in &self.categories {
            let _ = writeln!(s, "categories.{col} = {}", cats.join("|"));
        }
        s
    }
}

fn split_list(v: &str) -> impl Iterator<Item = &str> {
    v.split(',').map(str::trim).filter(|s| !s.is_empty())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Split {
    Train,
    Test,
}

/// Per-column min-max statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    pub name: String,
    pub features: Matrix,
    /// 1 marks an anomaly.
    pub labels: Vec<u8>,
    /// `None` until [`split_train_test`] runs.
    pub split: Option<Vec<Split>>,
    pub stats: Option<NormStats>,
    /// Cells that were missing in the source, as (row, col). They hold 0
    /// until [`normalize`] imputes them.
    pub missing: Vec<(usize, usize)>,
    /// Recipe with category orders frozen.
    pub recipe: DatasetRecipe,
}

impl LabeledDataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn n_features(&self) -> usize {
        self.features.cols()
    }

    pub fn anomaly_ratio(&self) -> f64 {
        if self.labels.is_empty() {
            return 0.0;
        }
        self.labels.iter().map(|&l| l as usize).sum::<usize>() as f64 / self.labels.len() as f64
    }

    fn rows_where(&self, keep: impl Fn(Split, u8) -> bool) -> Result<Vec<usize>> {
        let split = self
            .split
            .as_ref()
            .ok_or_else(|| Error::Dataset("dataset has not been split".into()))?;
        Ok((0..self.len()).filter(|&i| keep(split[i], self.labels[i])).collect())
    }

    pub fn train_indices(&self) -> Result<Vec<usize>> {
        self.rows_where(|s, _| s == Split::Train)
    }

    pub fn test_indices(&self) -> Result<Vec<usize>> {
        self.rows_where(|s, _| s == Split::Test)
    }

    /// Normal rows of the training split, the clean training stream.
    pub fn train_normal_indices(&self) -> Result<Vec<usize>> {
        self.rows_where(|s, l| s == Split::Train && l == 0)
    }

    /// Anomalous training rows, the pool for [`inject_noise`].
    pub fn train_anomaly_indices(&self) -> Result<Vec<usize>> {
        self.rows_where(|s, l| s == Split::Train && l == 1)
    }

    pub fn rows(&self, idx: &[usize]) -> Matrix {
        self.features.select_rows(idx)
    }

    pub fn labels_of(&self, idx: &[usize]) -> Vec<u8> {
        idx.iter().map(|&i| self.labels[i]).collect()
    }

    /// Test features and labels.
    pub fn test_set(&self) -> Result<(Matrix, Vec<u8>)> {
        let idx = self.test_indices()?;
        Ok((self.rows(&idx), self.labels_of(&idx)))
    }
}

enum ColumnKind {
    Continuous,
    Categorical { values: Vec<String>, index: HashMap<String, usize>, frozen: bool },
}

/// Reads the recipe's CSV source, one-hot encodes categorical columns and
/// maps classes to binary labels.
pub fn load_and_encode(recipe: &DatasetRecipe) -> Result<LabeledDataset> {
    let path = &recipe.source;
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(recipe.delimiter)
        .has_headers(recipe.header)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            other => Error::Dataset(format!("{}: {other:?}", path.display())),
        })?;

    let anomalies: HashSet<&str> = recipe.anomaly_labels.iter().map(String::as_str).collect();
    let categorical: HashSet<usize> = recipe.categorical.iter().copied().collect();
    let dropped: HashSet<usize> = recipe.drop_columns.iter().copied().collect();

    let mut width = None;
    let mut label_col = 0;
    let mut kinds: Vec<(usize, ColumnKind)> = Vec::new();
    let mut cells: Vec<Vec<Cell>> = Vec::new();
    let mut labels = Vec::new();
    let mut unknown = 0usize;

    for record in reader.records() {
        let record = record?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        if record.len() == 1 && record[0].is_empty() {
            continue;
        }
        let w = *width.get_or_insert_with(|| {
            label_col = recipe.label_column.unwrap_or(record.len().saturating_sub(1));
            kinds = (0..record.len())
                .filter(|c| *c != label_col && !dropped.contains(c))
                .map(|c| {
                    let kind = if categorical.contains(&c) {
                        let values = recipe.categories.get(&c).cloned().unwrap_or_default();
                        let index = values.iter().enumerate().map(|(i, v)| (v.clone(), i)).collect();
                        let frozen = recipe.categories.contains_key(&c);
                        ColumnKind::Categorical { values, index, frozen }
                    } else {
                        ColumnKind::Continuous
                    };
                    (c, kind)
                })
                .collect();
            record.len()
        });
        if record.len() != w {
            return Err(Error::Parse {
                path: path.clone(),
                line,
                message: format!("expected {w} fields, found {}", record.len()),
            });
        }
        if label_col >= w {
            return Err(Error::Parse {
                path: path.clone(),
                line,
                message: format!("label column {label_col} out of range for {w} fields"),
            });
        }
        let mut row = Vec::with_capacity(kinds.len());
        for (c, kind) in kinds.iter_mut() {
            let field = &record[*c];
            match kind {
                ColumnKind::Continuous => {
                    if MISSING.contains(&field) {
                        row.push(Cell::Missing);
                    } else {
                        let v: f64 = field.parse().map_err(|_| Error::Parse {
                            path: path.clone(),
                            line,
                            message: format!("column {c}: '{field}' is not numeric"),
                        })?;
                        if !v.is_finite() {
                            return Err(Error::Parse {
                                path: path.clone(),
                                line,
                                message: format!("column {c}: non-finite value '{field}'"),
                            });
                        }
                        row.push(Cell::Value(v));
                    }
                }
                ColumnKind::Categorical { values, index, frozen } => match index.get(field) {
                    Some(&k) => row.push(Cell::Category(Some(k))),
                    None if *frozen => {
                        unknown += 1;
                        row.push(Cell::Category(None));
                    }
                    None => {
                        index.insert(field.to_string(), values.len());
                        row.push(Cell::Category(Some(values.len())));
                        values.push(field.to_string());
                    }
                },
            }
        }
        labels.push(anomalies.contains(&record[label_col]) as u8);
        cells.push(row);
    }
    if cells.is_empty() {
        return Err(Error::Dataset(format!("{} contains no rows", path.display())));
    }
    if unknown > 0 {
        log::warn!("{unknown} unknown categorical values encoded as zero vectors");
    }

    let block_widths: Vec<usize> = kinds
        .iter()
        .map(|(_, k)| match k {
            ColumnKind::Continuous => 1,
            ColumnKind::Categorical { values, .. } => values.len(),
        })
        .collect();
    let f: usize = block_widths.iter().sum();
    if let Some(expected) = recipe.expected_features {
        if expected != f {
            return Err(Error::Dataset(format!(
                "{}: encoding produced {f} features, recipe expects {expected}",
                recipe.name
            )));
        }
    }

    let n = cells.len();
    let mut data = vec![0.0; n * f];
    let mut missing = Vec::new();
    for (r, row) in cells.iter().enumerate() {
        let mut offset = 0;
        for (cell, width) in row.iter().zip(&block_widths) {
            match *cell {
                Cell::Value(v) => data[r * f + offset] = v,
                Cell::Missing => missing.push((r, offset)),
                Cell::Category(Some(k)) => data[r * f + offset + k] = 1.0,
                Cell::Category(None) => {}
            }
            offset += width;
        }
    }

    let mut frozen = recipe.clone();
    for (c, kind) in &kinds {
        if let ColumnKind::Categorical { values, .. } = kind {
            frozen.categories.insert(*c, values.clone());
        }
    }
    if !missing.is_empty() {
        log::info!("{}: {} missing cells will be mean-imputed", recipe.name, missing.len());
    }
    Ok(LabeledDataset {
        name: recipe.name.clone(),
        features: Matrix::new(n, f, data)?,
        labels,
        split: None,
        stats: None,
        missing,
        recipe: frozen,
    })
}

#[derive(Clone, Copy)]
enum Cell {
    Value(f64),
    Missing,
    Category(Option<usize>),
}

/// Uniform 50/50 split: a seeded permutation whose first `⌊N/2⌋` rows
/// become training rows.
pub fn split_train_test(mut ds: LabeledDataset, seed: u64) -> LabeledDataset {
    ds.split = Some(split_tags(ds.len(), seed));
    ds
}

/// Column means for imputation and min-max statistics, fitted on
/// training rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Preprocessor {
    pub stats: NormStats,
    /// Training mean of every column, used for missing cells.
    pub means: Vec<f64>,
}

impl Preprocessor {
    pub fn fit(ds: &LabeledDataset, train: &[usize]) -> Result<Self> {
        if train.is_empty() {
            return Err(Error::Dataset("no training rows to normalize with".into()));
        }
        let f = ds.n_features();
        let missing = missing_by_row(ds);
        let mut min = vec![f64::INFINITY; f];
        let mut max = vec![f64::NEG_INFINITY; f];
        let mut sum = vec![0.0; f];
        let mut count = vec![0usize; f];
        for &r in train {
            let skip = missing.get(&r);
            for (c, &v) in ds.features.row(r).iter().enumerate() {
                if skip.is_some_and(|cols| cols.contains(&c)) {
                    continue;
                }
                min[c] = min[c].min(v);
                max[c] = max[c].max(v);
                sum[c] += v;
                count[c] += 1;
            }
        }
        let means = sum
            .iter()
            .zip(&count)
            .map(|(s, &k)| if k > 0 { s / k as f64 } else { 0.0 })
            .collect();
        Ok(Preprocessor {
            stats: NormStats { min, max },
            means,
        })
    }

    /// Imputed and scaled copy of the given rows.
    pub fn transform_rows(&self, ds: &LabeledDataset, idx: &[usize]) -> Matrix {
        let mut x = ds.features.select_rows(idx);
        if !ds.missing.is_empty() {
            let missing = missing_by_row(ds);
            for (out, r) in idx.iter().enumerate() {
                for &c in missing.get(r).into_iter().flatten() {
                    x.set(out, c, self.means[c]);
                }
            }
        }
        apply_stats(&mut x, &self.stats);
        x
    }
}

fn missing_by_row(ds: &LabeledDataset) -> HashMap<usize, Vec<usize>> {
    let mut map: HashMap<usize, Vec<usize>> = HashMap::new();
    for &(r, c) in &ds.missing {
        map.entry(r).or_default().push(c);
    }
    map
}

/// Imputes missing cells with the training-row column mean, then min-max
/// scales every column with training-row statistics. Values outside the
/// training range are clipped to [0, 1]; constant columns become 0.
pub fn normalize(mut ds: LabeledDataset) -> Result<LabeledDataset> {
    let train = ds.train_indices()?;
    let pre = Preprocessor::fit(&ds, &train)?;
    let all: Vec<usize> = (0..ds.len()).collect();
    ds.features = pre.transform_rows(&ds, &all);
    ds.missing.clear();
    ds.stats = Some(pre.stats);
    Ok(ds)
}

/// Min-max scales `x` in place with precomputed statistics.
pub fn apply_stats(x: &mut Matrix, stats: &NormStats) {
    let f = x.cols();
    for r in 0..x.rows() {
        for c in 0..f {
            let range = stats.max[c] - stats.min[c];
            let v = if range > 0.0 {
                ((x.get(r, c) - stats.min[c]) / range).clamp(0.0, 1.0)
            } else {
                0.0
            };
            x.set(r, c, v);
        }
    }
}

/// Split tags for `n` rows: a seeded permutation whose first `⌊n/2⌋`
/// entries are training rows.
pub fn split_tags(n: usize, seed: u64) -> Vec<Split> {
    let perm = SeededRng::new(seed).substream(SPLIT_STREAM).permutation(n);
    let mut split = vec![Split::Test; n];
    for &i in &perm[..n / 2] {
        split[i] = Split::Train;
    }
    split
}

/// Training stream row indices, optionally contaminated with anomalies.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingStream {
    pub rows: Vec<usize>,
    pub injected: Vec<usize>,
}

impl TrainingStream {
    pub fn contamination(&self) -> f64 {
        if self.rows.is_empty() {
            0.0
        } else {
            self.injected.len() as f64 / self.rows.len() as f64
        }
    }
}

/// Number of anomalies to add to `normals` rows so that they form `ratio`
/// of the stream.
pub fn noise_count(normals: usize, ratio: f64) -> usize {
    if ratio <= 0.0 {
        return 0;
    }
    (ratio * normals as f64 / (1.0 - ratio)).round() as usize
}

/// Normal training rows plus anomalous training rows drawn without
/// replacement so that anomalies make up `ratio` of the stream.
pub fn inject_noise(ds: &LabeledDataset, ratio: f64, seed: u64) -> Result<TrainingStream> {
    let split = ds
        .split
        .as_ref()
        .ok_or_else(|| Error::Dataset("dataset has not been split".into()))?;
    training_stream(&ds.labels, split, ratio, seed)
}

/// [`inject_noise`] on bare labels and split tags.
pub fn training_stream(labels: &[u8], split: &[Split], ratio: f64, seed: u64) -> Result<TrainingStream> {
    if !(0.0..1.0).contains(&ratio) {
        return Err(Error::Config(format!("noise ratio must be in [0, 1), got {ratio}")));
    }
    let train = |want: u8| -> Vec<usize> {
        (0..labels.len())
            .filter(|&i| split[i] == Split::Train && labels[i] == want)
            .collect()
    };
    let mut rows = train(0);
    let needed = noise_count(rows.len(), ratio);
    if needed == 0 {
        return Ok(TrainingStream {
            rows,
            injected: Vec::new(),
        });
    }
    let pool = train(1);
    if pool.len() < needed {
        return Err(Error::InsufficientAnomalies {
            needed,
            available: pool.len(),
        });
    }
    let mut rng = SeededRng::new(seed).substream(NOISE_STREAM);
    let perm = rng.permutation(pool.len());
    let mut injected: Vec<usize> = perm[..needed].iter().map(|&p| pool[p]).collect();
    injected.sort_unstable();
    rows.extend_from_slice(&injected);
    rows.sort_unstable();
    Ok(TrainingStream { rows, injected })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn noise_count_examples() {
        assert_eq!(noise_count(950, 0.05), 50);
        assert_eq!(noise_count(950, 0.0), 0);
    }

    #[test]
    fn recipe_round_trip() {
        let text = "name = t\nsource = a.csv\ndelimiter = tab\nheader = true\nlabel_column = 3\n\
                    categorical = 1,2\nanomaly_labels = x, y\nexpected_features = 7\ncategories.1 = a|b\n";
        let r = DatasetRecipe::parse(text, Path::new("t")).unwrap();
        assert_eq!(r.delimiter, b'\t');
        assert_eq!(r.label_column, Some(3));
        assert_eq!(r.anomaly_labels, vec!["x", "y"]);
        assert_eq!(r.categories[&1], vec!["a", "b"]);
        let again = DatasetRecipe::parse(&r.to_text(), Path::new("t")).unwrap();
        assert_eq!(again, r);
    }

    #[test]
    fn unknown_key_reports_line() {
        let err = DatasetRecipe::parse("name = t\nbogus = 1\n", Path::new("r")).unwrap_err();
        assert!(err.to_string().contains("r:2"), "{err}");
    }

    #[test]
    fn builtin_recipes_parse() {
        for name in DatasetRecipe::builtin_names() {
            let r = DatasetRecipe::builtin(name, Path::new("/data")).unwrap();
            assert!(r.source.starts_with("/data"));
        }
        let k = DatasetRecipe::builtin("kdd99", Path::new(".")).unwrap();
        assert_eq!(k.anomaly_labels, vec!["normal."]);
        assert_eq!(k.expected_features, Some(120));
        let a = DatasetRecipe::builtin("arrhythmia", Path::new(".")).unwrap();
        assert_eq!(a.anomaly_labels, vec!["3", "4", "5", "7", "8", "9", "14", "15"]);
        assert_eq!(a.expected_features, Some(274));
        let s = DatasetRecipe::builtin("satellite", Path::new(".")).unwrap();
        assert_eq!(s.anomaly_labels, vec!["2", "4", "5"]);
        assert_eq!(s.expected_features, Some(36));
    }
}
