//! Flat, human-editable run configuration: `[section]` headers with
//! `key = value` lines. Unknown sections or keys are rejected so typos fail
//! loudly, and `parse(serialize(c)) == c` holds exactly.

use std::fmt::Write as _;

use crate::data::SyntheticConfig;
use crate::error::GcError;
use crate::lm::MiniLmConfig;
use crate::train::{AdamConfig, TrainConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    /// Load this corpus file instead of generating one.
    pub corpus_path: Option<String>,
    pub synthetic: SyntheticConfig,
    /// TF-IDF vocabulary cap (top terms by document frequency on the train split).
    pub vocab_cap: usize,
    /// Architecture for `train`; `grid` runs `grid_variants` instead.
    pub variant: String,
    pub grid_variants: Vec<String>,
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub ff_dim: usize,
    pub max_len: usize,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub lr_lm: f64,
    pub lr_other: f64,
    pub seeds: Vec<u64>,
    pub out_dir: String,
    pub workers: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let lm = MiniLmConfig::default();
        let train = TrainConfig::default();
        RunConfig {
            corpus_path: None,
            synthetic: SyntheticConfig::default(),
            vocab_cap: 2000,
            variant: "lm_only".into(),
            grid_variants: crate::fusion::ArchitectureSpec::default_grid()
                .iter()
                .map(|s| s.name())
                .collect(),
            dim: lm.dim,
            layers: lm.layers,
            heads: lm.heads,
            ff_dim: lm.ff_dim,
            max_len: lm.max_len,
            batch_size: train.batch_size,
            max_epochs: train.max_epochs,
            patience: train.patience,
            lr_lm: train.adam.lr_lm,
            lr_other: train.adam.lr_other,
            seeds: (0..10).collect(),
            out_dir: "out".into(),
            workers: 1,
        }
    }
}

impl RunConfig {
    pub fn lm_config(&self, vocab_size: usize) -> MiniLmConfig {
        MiniLmConfig {
            vocab_size,
            dim: self.dim,
            layers: self.layers,
            heads: self.heads,
            ff_dim: self.ff_dim,
            max_len: self.max_len,
        }
    }

    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            batch_size: self.batch_size,
            max_epochs: self.max_epochs,
            patience: self.patience,
            adam: AdamConfig { lr_lm: self.lr_lm, lr_other: self.lr_other, ..AdamConfig::default() },
            seed,
        }
    }

    pub fn validate(&self) -> Result<(), GcError> {
        if self.synthetic.n == 0 && self.corpus_path.is_none() {
            return Err(GcError::Config("n = 0 and no corpus path".into()));
        }
        if self.batch_size == 0 || self.max_epochs == 0 || self.workers == 0 {
            return Err(GcError::Config("batch_size, max_epochs, workers must be positive".into()));
        }
        if self.seeds.is_empty() {
            return Err(GcError::Config("at least one seed required".into()));
        }
        if self.dim % self.heads != 0 {
            return Err(GcError::Config(format!("dim {} not divisible by heads {}", self.dim, self.heads)));
        }
        crate::fusion::ArchitectureSpec::parse(&self.variant)?;
        for v in &self.grid_variants {
            crate::fusion::ArchitectureSpec::parse(v)?;
        }
        Ok(())
    }

    pub fn serialize(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "[data]");
        if let Some(p) = &self.corpus_path {
            let _ = writeln!(s, "corpus = {p}");
        }
        let _ = writeln!(s, "n = {}", self.synthetic.n);
        let _ = writeln!(s, "classes = {}", self.synthetic.num_classes);
        let _ = writeln!(s, "homophily = {}", self.synthetic.homophily);
        let _ = writeln!(s, "text_signal = {}", self.synthetic.text_signal);
        let _ = writeln!(s, "graph_signal = {}", self.synthetic.graph_signal);
        let _ = writeln!(s, "gen_seed = {}", self.synthetic.seed);
        let _ = writeln!(s, "vocab_cap = {}", self.vocab_cap);
        let _ = writeln!(s, "\n[model]");
        let _ = writeln!(s, "variant = {}", self.variant);
        let _ = writeln!(s, "grid = {}", self.grid_variants.join(","));
        let _ = writeln!(s, "dim = {}", self.dim);
        let _ = writeln!(s, "layers = {}", self.layers);
        let _ = writeln!(s, "heads = {}", self.heads);
        let _ = writeln!(s, "ff_dim = {}", self.ff_dim);
        let _ = writeln!(s, "max_len = {}", self.max_len);
        let _ = writeln!(s, "\n[train]");
        let _ = writeln!(s, "batch_size = {}", self.batch_size);
        let _ = writeln!(s, "max_epochs = {}", self.max_epochs);
        let _ = writeln!(s, "patience = {}", self.patience);
        let _ = writeln!(s, "lr_lm = {}", self.lr_lm);
        let _ = writeln!(s, "lr_other = {}", self.lr_other);
        let _ = writeln!(
            s,
            "seeds = {}",
            self.seeds.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
        );
        let _ = writeln!(s, "\n[output]");
        let _ = writeln!(s, "dir = {}", self.out_dir);
        let _ = writeln!(s, "workers = {}", self.workers);
        s
    }

    pub fn parse(text: &str) -> Result<Self, GcError> {
        let mut c = RunConfig::default();
        let mut section = String::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            let err = |msg: String| GcError::Parse {
                path: "<config>".into(),
                line: lineno + 1,
                msg,
            };
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                section = name.to_string();
                if !matches!(section.as_str(), "data" | "model" | "train" | "output") {
                    return Err(err(format!("unknown section '[{section}]'")));
                }
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .map(|(k, v)| (k.trim(), v.trim()))
                .ok_or_else(|| err(format!("expected 'key = value', got '{line}'")))?;
            let bad_value = |what: &str| err(format!("bad {what} for '{key}': '{value}'"));
            macro_rules! num {
                ($what:expr) => {
                    value.parse().map_err(|_| bad_value($what))?
                };
            }
            match (section.as_str(), key) {
                ("data", "corpus") => c.corpus_path = Some(value.to_string()),
                ("data", "n") => c.synthetic.n = num!("integer"),
                ("data", "classes") => c.synthetic.num_classes = num!("integer"),
                ("data", "homophily") => c.synthetic.homophily = num!("number"),
                ("data", "text_signal") => c.synthetic.text_signal = num!("number"),
                ("data", "graph_signal") => c.synthetic.graph_signal = num!("number"),
                ("data", "gen_seed") => c.synthetic.seed = num!("integer"),
                ("data", "vocab_cap") => c.vocab_cap = num!("integer"),
                ("model", "variant") => c.variant = value.to_string(),
                ("model", "grid") => {
                    c.grid_variants = value.split(',').map(|s| s.trim().to_string()).collect()
                }
                ("model", "dim") => c.dim = num!("integer"),
                ("model", "layers") => c.layers = num!("integer"),
                ("model", "heads") => c.heads = num!("integer"),
                ("model", "ff_dim") => c.ff_dim = num!("integer"),
                ("model", "max_len") => c.max_len = num!("integer"),
                ("train", "batch_size") => c.batch_size = num!("integer"),
                ("train", "max_epochs") => c.max_epochs = num!("integer"),
                ("train", "patience") => c.patience = num!("integer"),
                ("train", "lr_lm") => c.lr_lm = num!("number"),
                ("train", "lr_other") => c.lr_other = num!("number"),
                ("train", "seeds") => {
                    c.seeds = value
                        .split(',')
                        .map(|s| s.trim().parse().map_err(|_| bad_value("seed list")))
                        .collect::<Result<_, _>>()?;
                }
                ("output", "dir") => c.out_dir = value.to_string(),
                ("output", "workers") => c.workers = num!("integer"),
                _ => return Err(err(format!("unknown key '{key}' in section '[{section}]'"))),
            }
        }
        Ok(c)
    }

    pub fn load(path: &std::path::Path) -> Result<Self, GcError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| GcError::io(path.display().to_string(), e))?;
        Self::parse(&text).map_err(|e| match e {
            GcError::Parse { line, msg, .. } => {
                GcError::Parse { path: path.display().to_string(), line, msg }
            }
            other => other,
        })
    }
}

/// FNV-1a hash of the serialized config, for manifests.
pub fn config_hash(text: &str) -> String {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in text.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    format!("{h:016x}")
}
