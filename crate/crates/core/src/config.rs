//! Sectioned `key = value` run configuration.
//!
//! ```text
//! preset = satellite
//!
//! [data]
//! dataset = satellite
//! cache = out/satellite.cache
//!
//! [train]
//! iterations = 3000
//! lambda3 = 0.005
//! ```
//!
//! `preset` must precede every section. Unknown sections and keys are
//! rejected with their line number.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::eval::ExperimentConfig;
use crate::trainer::TrainConfig;

const PRESET_KDD99: &str = include_str!("../presets/kdd99.cfg");
const PRESET_ARRHYTHMIA: &str = include_str!("../presets/arrhythmia.cfg");
const PRESET_SATELLITE: &str = include_str!("../presets/satellite.cfg");

#[derive(Debug, Clone, PartialEq, Default)]
pub struct DataSection {
    /// Built-in recipe name.
    pub dataset: Option<String>,
    /// Recipe file; takes precedence over `dataset`.
    pub recipe: Option<PathBuf>,
    /// Directory holding built-in dataset sources.
    pub data_dir: Option<PathBuf>,
    pub cache: Option<PathBuf>,
    pub split_seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalSection {
    pub threshold_ratio: Option<f64>,
    pub batch_size: Option<usize>,
    pub seeds: Vec<u64>,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            threshold_ratio: None,
            batch_size: None,
            seeds: (0..10).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub preset: Option<String>,
    pub data: DataSection,
    pub train: TrainConfig,
    pub noise_ratio: f64,
    pub eval: EvalSection,
    pub output_dir: Option<PathBuf>,
}

impl RunConfig {
    pub fn preset(name: &str) -> Result<Self> {
        let text = match name {
            "kdd99" => PRESET_KDD99,
            "arrhythmia" => PRESET_ARRHYTHMIA,
            "satellite" => PRESET_SATELLITE,
            _ => return Err(Error::Config(format!("unknown preset '{name}'"))),
        };
        Self::parse(text, Path::new(&format!("{name}.cfg")))
    }

    fn base(preset: Option<&str>) -> Result<Self> {
        let train = match preset {
            Some(name) => {
                TrainConfig::preset(name).ok_or_else(|| Error::Config(format!("unknown preset '{name}'")))?
            }
            None => TrainConfig::satellite(),
        };
        Ok(RunConfig {
            preset: preset.map(str::to_string),
            data: DataSection::default(),
            train,
            noise_ratio: 0.0,
            eval: EvalSection::default(),
            output_dir: None,
        })
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let err = |line: usize, message: String| Error::Parse {
            path: origin.to_path_buf(),
            line: line as u64,
            message,
        };
        let mut cfg = Self::base(None)?;
        let mut section: Option<String> = None;
        let mut seen_key = false;
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                let name = name.trim();
                if !["data", "model", "train", "eval", "output"].contains(&name) {
                    return Err(err(i + 1, format!("unknown section [{name}]")));
                }
                section = Some(name.to_string());
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| err(i + 1, format!("expected key = value, got '{line}'")))?;
            let (key, value) = (key.trim(), value.trim());
            match section.as_deref() {
                None if key == "preset" => {
                    if seen_key {
                        return Err(err(i + 1, "preset must come before any other key".into()));
                    }
                    cfg = Self::base(Some(value)).map_err(|e| err(i + 1, e.to_string()))?;
                }
                None => return Err(err(i + 1, format!("key '{key}' outside a section"))),
                Some(s) => cfg.set(s, key, value).map_err(|e| err(i + 1, e.to_string()))?,
            }
            seen_key = true;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Sets one `section.key`; used by the parser and by command-line
    /// overrides.
    pub fn set(&mut self, section: &str, key: &str, value: &str) -> Result<()> {
        let m = &mut self.train.model;
        match (section, key) {
            ("data", "dataset") => self.data.dataset = Some(value.to_string()),
            ("data", "recipe") => self.data.recipe = Some(PathBuf::from(value)),
            ("data", "data_dir") => self.data.data_dir = Some(PathBuf::from(value)),
            ("data", "cache") => self.data.cache = Some(PathBuf::from(value)),
            ("data", "split_seed") => self.data.split_seed = num(key, value)?,

            ("model", "input_dim") => m.input_dim = num(key, value)?,
            ("model", "encoder_hidden") => m.encoder_hidden = usize_list(key, value)?,
            ("model", "graph_dim") => m.graph_dim = num(key, value)?,
            ("model", "latent_dim") => m.latent_dim = num(key, value)?,
            ("model", "decoder_hidden") => m.decoder_hidden = usize_list(key, value)?,
            ("model", "estimator_hidden") => m.estimator_hidden = usize_list(key, value)?,
            ("model", "mixtures") => m.mixtures = num(key, value)?,
            ("model", "k") => m.k = num(key, value)?,
            ("model", "epsilon") => m.epsilon = num(key, value)?,
            ("model", "decoder_output") => m.decoder_output = value.parse()?,
            ("model", "recon_features") => m.recon_features = value.parse()?,
            ("model", "graph_branch") => m.graph_branch = num(key, value)?,

            ("train", "iterations") => self.train.iterations = num(key, value)?,
            ("train", "batch_size") => self.train.batch_size = num(key, value)?,
            ("train", "learning_rate") => self.train.learning_rate = num(key, value)?,
            ("train", "seed") => self.train.seed = num(key, value)?,
            ("train", "lambda1") => self.train.weights.energy = num(key, value)?,
            ("train", "lambda2") => self.train.weights.covariance = num(key, value)?,
            ("train", "lambda3") => self.train.weights.embedding = num(key, value)?,
            ("train", "checkpoint_interval") => self.train.checkpoint_interval = num(key, value)?,
            ("train", "noise_ratio") => self.noise_ratio = num(key, value)?,

            ("eval", "threshold_ratio") => self.eval.threshold_ratio = Some(num(key, value)?),
            ("eval", "batch_size") => self.eval.batch_size = Some(num(key, value)?),
            ("eval", "seeds") => self.eval.seeds = parse_u64_list(value)?,

            ("output", "dir") => self.output_dir = Some(PathBuf::from(value)),
            (s, k) => return Err(Error::Config(format!("unknown key '{k}' in [{s}]"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if !(0.0..1.0).contains(&self.noise_ratio) {
            return Err(Error::Config(format!("noise_ratio must be in [0, 1), got {}", self.noise_ratio)));
        }
        if let Some(r) = self.eval.threshold_ratio {
            if !(r > 0.0 && r <= 1.0) {
                return Err(Error::Config(format!("threshold_ratio must be in (0, 1], got {r}")));
            }
        }
        if let Some(b) = self.eval.batch_size {
            if b <= self.train.model.k {
                return Err(Error::Config(format!("eval batch_size {b} must exceed k = {}", self.train.model.k)));
            }
        }
        if self.eval.seeds.is_empty() {
            return Err(Error::Config("eval seeds must not be empty".into()));
        }
        Ok(())
    }

    pub fn experiment(&self) -> ExperimentConfig {
        ExperimentConfig {
            train: self.train.clone(),
            threshold_ratio: self.eval.threshold_ratio,
            noise_ratio: self.noise_ratio,
            eval_batch_size: self.eval.batch_size,
        }
    }

    /// Effective configuration in the same format `parse` accepts.
    pub fn to_text(&self) -> String {
        let list = |v: &[usize]| v.iter().map(|d| d.to_string()).collect::<Vec<_>>().join(",");
        let m = &self.train.model;
        let mut s = String::new();
        if let Some(p) = &self.preset {
            let _ = writeln!(s, "preset = {p}\n");
        }
        s.push_str("[data]\n");
        if let Some(d) = &self.data.dataset {
            let _ = writeln!(s, "dataset = {d}");
        }
        if let Some(r) = &self.data.recipe {
            let _ = writeln!(s, "recipe = {}", r.display());
        }
        if let Some(d) = &self.data.data_dir {
            let _ = writeln!(s, "data_dir = {}", d.display());
        }
        if let Some(c) = &self.data.cache {
            let _ = writeln!(s, "cache = {}", c.display());
        }
        let _ = writeln!(s, "split_seed = {}", self.data.split_seed);

        s.push_str("\n[model]\n");
        let _ = writeln!(s, "input_dim = {}", m.input_dim);
        let _ = writeln!(s, "encoder_hidden = {}", list(&m.encoder_hidden));
        let _ = writeln!(s, "graph_dim = {}", m.graph_dim);
        let _ = writeln!(s, "latent_dim = {}", m.latent_dim);
        let _ = writeln!(s, "decoder_hidden = {}", list(&m.decoder_hidden));
        let _ = writeln!(s, "estimator_hidden = {}", list(&m.estimator_hidden));
        let _ = writeln!(s, "mixtures = {}", m.mixtures);
        let _ = writeln!(s, "k = {}", m.k);
        let _ = writeln!(s, "epsilon = {:e}", m.epsilon);
        let _ = writeln!(s, "decoder_output = {}", m.decoder_output);
        let _ = writeln!(s, "recon_features = {}", m.recon_features);
        let _ = writeln!(s, "graph_branch = {}", m.graph_branch);

        let t = &self.train;
        s.push_str("\n[train]\n");
        let _ = writeln!(s, "iterations = {}", t.iterations);
        let _ = writeln!(s, "batch_size = {}", t.batch_size);
        let _ = writeln!(s, "learning_rate = {:e}", t.learning_rate);
        let _ = writeln!(s, "seed = {}", t.seed);
        let _ = writeln!(s, "lambda1 = {}", t.weights.energy);
        let _ = writeln!(s, "lambda2 = {}", t.weights.covariance);
        let _ = writeln!(s, "lambda3 = {}", t.weights.embedding);
        let _ = writeln!(s, "checkpoint_interval = {}", t.checkpoint_interval);
        let _ = writeln!(s, "noise_ratio = {}", self.noise_ratio);

        s.push_str("\n[eval]\n");
        if let Some(r) = self.eval.threshold_ratio {
            let _ = writeln!(s, "threshold_ratio = {r}");
        }
        if let Some(b) = self.eval.batch_size {
            let _ = writeln!(s, "batch_size = {b}");
        }
        let seeds: Vec<String> = self.eval.seeds.iter().map(|v| v.to_string()).collect();
        let _ = writeln!(s, "seeds = {}", seeds.join(","));

        if let Some(d) = &self.output_dir {
            let _ = writeln!(s, "\n[output]\ndir = {}", d.display());
        }
        s
    }
}

fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value '{value}' for {key}")))
}

fn usize_list(key: &str, value: &str) -> Result<Vec<usize>> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| num(key, s))
        .collect()
}

/// Parses `a,b,c` or the inclusive range `lo..hi[:step]`.
pub fn parse_u64_list(s: &str) -> Result<Vec<u64>> {
    let s = s.trim();
    if let Some((lo, rest)) = s.split_once("..") {
        let (hi, step) = match rest.split_once(':') {
            Some((h, st)) => (h, st),
            None => (rest, "1"),
        };
        let lo: u64 = num("range start", lo.trim())?;
        let hi: u64 = num("range end", hi.trim())?;
        let step: u64 = num("range step", step.trim())?;
        if step == 0 || hi < lo {
            return Err(Error::Config(format!("invalid range '{s}'")));
        }
        return Ok((lo..=hi).step_by(step as usize).collect());
    }
    let out: Vec<u64> = s
        .split(',')
        .map(str::trim)
        .filter(|v| !v.is_empty())
        .map(|v| num("list entry", v))
        .collect::<Result<_>>()?;
    if out.is_empty() {
        return Err(Error::Config("empty list".into()));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ranges_and_lists() {
        assert_eq!(parse_u64_list("5..19:2").unwrap(), vec![5, 7, 9, 11, 13, 15, 17, 19]);
        assert_eq!(parse_u64_list("0..3").unwrap(), vec![0, 1, 2, 3]);
        assert_eq!(parse_u64_list("1, 2,3").unwrap(), vec![1, 2, 3]);
        assert!(parse_u64_list("").is_err());
        assert!(parse_u64_list("3..1").is_err());
    }

    #[test]
    fn kdd99_preset_values() {
        let c = RunConfig::preset("kdd99").unwrap();
        let t = &c.train;
        assert_eq!((t.model.k, t.model.mixtures, t.batch_size, t.iterations), (15, 4, 1024, 300));
        assert_eq!((t.weights.energy, t.weights.covariance, t.weights.embedding), (0.1, 0.005, 10.0));
        assert_eq!(t, &TrainConfig::kdd99());
    }

    #[test]
    fn presets_match_builtin_train_configs() {
        for name in ["kdd99", "arrhythmia", "satellite"] {
            let c = RunConfig::preset(name).unwrap();
            assert_eq!(c.train, TrainConfig::preset(name).unwrap(), "{name}");
            assert_eq!(c.data.dataset.as_deref(), Some(name));
        }
    }

    #[test]
    fn unknown_key_rejected_with_line() {
        let e = RunConfig::parse("[train]\niterations = 5\nbogus = 1\n", Path::new("c.cfg")).unwrap_err();
        assert!(e.to_string().starts_with("c.cfg:3:"), "{e}");
        let e = RunConfig::parse("[nope]\n", Path::new("c.cfg")).unwrap_err();
        assert!(e.to_string().contains("unknown section"));
    }

    #[test]
    fn preset_must_come_first() {
        assert!(RunConfig::parse("[train]\nseed = 1\n", Path::new("c")).is_ok());
        assert!(RunConfig::parse("[train]\nseed = 1\n[data]\n", Path::new("c")).is_ok());
        let e = RunConfig::parse("[train]\nseed = 1\npreset = kdd99\n", Path::new("c"));
        assert!(e.is_err());
    }

    #[test]
    fn text_round_trip() {
        let mut c = RunConfig::preset("arrhythmia").unwrap();
        c.eval.threshold_ratio = Some(0.15);
        c.noise_ratio = 0.02;
        c.output_dir = Some(PathBuf::from("/tmp/o"));
        let back = RunConfig::parse(&c.to_text(), Path::new("echo")).unwrap();
        assert_eq!(back, c);
    }
}
