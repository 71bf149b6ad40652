//! Flat `key = value` run configuration.
//!
//! Keys carry a section prefix (`data.`, `model.`, `train.`, ...). Lines
//! starting with `#` are comments. Values given with `--set` win over the
//! file, which wins over the defaults below.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use anyhow::{anyhow, bail, Context, Result};

/// `(key, default, description)` for every accepted key.
pub const KEYS: &[(&str, &str, &str)] = &[
    (
        "seed",
        "1",
        "base seed for model init, shuffling and Monte Carlo draws",
    ),
    ("workers", "0", "worker threads, 0 = available cores"),
    ("data.seed", "1", "generator seed"),
    ("data.n_train", "8000", "training samples"),
    ("data.n_val", "1000", "validation samples"),
    ("data.n_test", "1000", "test samples"),
    ("data.len_a", "16", "token length of modality A"),
    ("data.len_b", "16", "token length of modality B"),
    ("data.vocab_a", "64", "vocabulary size of modality A"),
    ("data.vocab_b", "64", "vocabulary size of modality B"),
    ("data.noise_rate", "0.05", "label flip probability"),
    ("data.dir", "", "dataset directory written by gen-data"),
    ("data.split", "test", "split used by analysis commands"),
    (
        "data.limit",
        "0",
        "use only the first N samples of the split, 0 = all",
    ),
    ("model.flavor", "feature", "feature | pooled | dense"),
    ("model.d_raw", "24", "frozen embedding width"),
    ("model.d_model", "32", "model width"),
    ("model.layers", "2", "transformer layers per expert"),
    ("model.heads", "4", "attention heads"),
    ("model.mlp_ratio", "2", "feed-forward expansion"),
    ("model.gate_hidden", "32", "gate hidden width"),
    ("model.temperature", "1.0", "gate softmax temperature"),
    ("model.encoder_seed", "7", "seed of the frozen encoders"),
    ("model.path", "", "checkpoint written by train"),
    ("train.lr", "0.001", "Adam learning rate"),
    ("train.batch_size", "64", "minibatch size"),
    ("train.epochs", "15", "training epochs"),
    ("train.lambda_int", "0.5", "interaction loss weight"),
    (
        "train.patience",
        "0",
        "early stopping patience in epochs, 0 = off",
    ),
    (
        "attr.method",
        "grad_attnroll",
        "random | attnroll | ig | grad_attnroll",
    ),
    (
        "attr.scope",
        "model",
        "model, an expert index, or a role such as synergy",
    ),
    (
        "attr.target",
        "auto",
        "auto | all | unique | redundancy | synergy",
    ),
    (
        "attr.ig_steps",
        "64",
        "integrated gradients evaluations along the path",
    ),
    (
        "attr.ig_rule",
        "adaptive",
        "path quadrature: adaptive | midpoint",
    ),
    (
        "attr.ig_curvature",
        "10",
        "path partition curvature, 0 = uniform",
    ),
    ("attr.chunk", "32", "sequences per attribution pass"),
    (
        "faith.methods",
        "random,attnroll,ig,grad_attnroll",
        "methods swept",
    ),
    (
        "faith.ks",
        "5,10,15,20,25,30",
        "masked percentages per modality",
    ),
    ("faith.seeds", "1,2,3", "seeds of the random baseline"),
    ("faith.metric", "micro_f1", "metric whose drop is reported"),
    (
        "mc.sii_samples",
        "4",
        "Monte Carlo contexts for the interaction index",
    ),
    (
        "mc.gap_samples",
        "4",
        "Monte Carlo contexts for the redundancy gap",
    ),
    ("mc.sampling", "stratified", "stratified | uniform"),
    ("mc.mask_scope", "universe", "universe | global"),
    ("bins.experts", "synergy,redundancy", "experts probed"),
    (
        "bins.edges",
        "0.1,0.2,0.3",
        "cumulative importance bin edges",
    ),
    (
        "bins.qs",
        "0.05,0.1,0.2",
        "top fractions of pairs summarized",
    ),
    ("bins.subsample", "32", "samples probed"),
    ("pairmask.experts", "synergy,redundancy", "experts probed"),
    (
        "pairmask.pool_fraction",
        "0.1",
        "top fraction of positions forming the pool",
    ),
    ("pairmask.budget", "0.05", "fraction of pool pairs masked"),
    ("pairmask.seeds", "1,2,3,4,5", "seeds of the masking runs"),
    ("pairmask.subsample", "64", "samples evaluated"),
    (
        "pairmask.metric",
        "micro_f1",
        "metric whose drop is reported",
    ),
    ("interactions.expert", "synergy", "expert probed"),
    (
        "interactions.rho",
        "0.3",
        "top fraction of positions forming the universe",
    ),
    ("interactions.samples", "8", "samples probed"),
    (
        "interactions.top",
        "1.0",
        "fraction of ranked pairs kept in the report",
    ),
    (
        "report.root",
        "",
        "run root to collate, empty = the current run root",
    ),
];

#[derive(Clone, Debug)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
}

fn known(key: &str) -> bool {
    KEYS.iter().any(|(k, _, _)| *k == key)
}

fn parse_line(line: &str) -> Result<Option<(String, String)>> {
    let line = line.trim();
    if line.is_empty() || line.starts_with('#') {
        return Ok(None);
    }
    let (key, value) = line
        .split_once('=')
        .ok_or_else(|| anyhow!("expected key = value, got {line:?}"))?;
    Ok(Some((key.trim().to_string(), value.trim().to_string())))
}

impl RunConfig {
    pub fn defaults() -> Self {
        Self {
            values: KEYS
                .iter()
                .map(|(k, v, _)| (k.to_string(), v.to_string()))
                .collect(),
        }
    }

    /// Defaults, then the file, then the overrides.
    pub fn resolve(file: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut cfg = Self::defaults();
        if let Some(path) = file {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("reading config {}", path.display()))?;
            for (i, line) in text.lines().enumerate() {
                if let Some((k, v)) =
                    parse_line(line).with_context(|| format!("{}:{}", path.display(), i + 1))?
                {
                    cfg.set(&k, &v)
                        .with_context(|| format!("{}:{}", path.display(), i + 1))?;
                }
            }
        }
        for o in overrides {
            let (k, v) = parse_line(o)?.ok_or_else(|| anyhow!("empty override"))?;
            cfg.set(&k, &v)?;
        }
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        if !known(key) {
            bail!("unknown config key {key:?}");
        }
        self.values.insert(key.to_string(), value.to_string());
        Ok(())
    }

    pub fn raw(&self, key: &str) -> &str {
        self.values
            .get(key)
            .unwrap_or_else(|| panic!("config key {key} has no default"))
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        let raw = self.raw(key);
        raw.parse()
            .map_err(|e| anyhow!("config key {key} = {raw:?}: {e}"))
    }

    pub fn list<T: FromStr>(&self, key: &str) -> Result<Vec<T>>
    where
        T::Err: std::fmt::Display,
    {
        self.raw(key)
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| {
                s.parse()
                    .map_err(|e| anyhow!("config key {key}: {s:?}: {e}"))
            })
            .collect()
    }

    /// Non-empty path value, or an error naming the key.
    pub fn path(&self, key: &str) -> Result<&Path> {
        let raw = self.raw(key);
        if raw.is_empty() {
            bail!("config key {key} must be set");
        }
        Ok(Path::new(raw))
    }

    /// Every key in `key = value` form, readable back by [`RunConfig::resolve`].
    pub fn echo(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.values {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }
}
