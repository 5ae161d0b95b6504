//! Run configuration: a flat `key = value` file that every artifact embeds
//! together with its fingerprint.

use std::fmt::Write as _;
use std::path::PathBuf;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::eval::DegreeEdges;
use crate::model::{AdamConfig, ModelConfig};
use crate::ranker::Aggregation;
use crate::verbalize::{Mode, VerbalizerConfig};

/// Parses `key = value` lines; `#` starts a comment line.
pub fn parse_kv(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", i + 1)))?;
        out.push((k.trim().to_owned(), v.trim().to_owned()));
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub train: Option<PathBuf>,
    pub valid: Option<PathBuf>,
    pub test: Option<PathBuf>,
    pub entity_mentions: Option<PathBuf>,
    pub relation_mentions: Option<PathBuf>,
    pub descriptions: Option<PathBuf>,
    pub vocab: Option<PathBuf>,

    pub mode: Mode,
    pub k: usize,
    pub token_budget: usize,
    pub with_descriptions: bool,
    pub freeze_context: bool,

    pub model: ModelConfig,
    pub steps: u64,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup_steps: u64,
    pub clip_norm: f64,
    pub seed: u64,

    pub samples: usize,
    pub temperature: f64,
    pub aggregation: Aggregation,
    pub both_directions: bool,
    pub macro_directions: bool,
    pub degree_edges: DegreeEdges,

    pub kge_dim: usize,
    pub kge_epochs: usize,
    pub kge_negatives: usize,
    pub kge_lr: f64,
    pub kge_batch: usize,
    pub router_threshold: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let adam = AdamConfig::default();
        RunConfig {
            train: None,
            valid: None,
            test: None,
            entity_mentions: None,
            relation_mentions: None,
            descriptions: None,
            vocab: None,
            mode: Mode::Context,
            k: crate::verbalize::DEFAULT_K,
            token_budget: crate::verbalize::DEFAULT_TOKEN_BUDGET,
            with_descriptions: false,
            freeze_context: false,
            model: ModelConfig::default(),
            steps: 1000,
            batch_size: 32,
            lr: adam.lr,
            warmup_steps: adam.warmup_steps,
            clip_norm: adam.clip_norm,
            seed: 0,
            samples: crate::ranker::DEFAULT_SAMPLES,
            temperature: 1.0,
            aggregation: Aggregation::Max,
            both_directions: true,
            macro_directions: false,
            degree_edges: DegreeEdges::default(),
            kge_dim: 64,
            kge_epochs: 50,
            kge_negatives: 50,
            kge_lr: 0.01,
            kge_batch: 64,
            router_threshold: 1,
        }
    }
}

fn parse<T: std::str::FromStr>(k: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("bad value for {k}: `{v}`")))
}

fn parse_bool(k: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("bad boolean for {k}: `{v}`"))),
    }
}

fn path(v: &str) -> Option<PathBuf> {
    (!v.is_empty()).then(|| PathBuf::from(v))
}

impl RunConfig {
    pub fn from_text(text: &str) -> Result<Self> {
        let mut c = RunConfig::default();
        for (k, v) in parse_kv(text)? {
            c.set(&k, &v)?;
        }
        Ok(c)
    }

    /// Sets one key. Model keys may be given bare or with a `model.` prefix.
    pub fn set(&mut self, k: &str, v: &str) -> Result<()> {
        match k {
            "train" => self.train = path(v),
            "valid" => self.valid = path(v),
            "test" => self.test = path(v),
            "entity_mentions" => self.entity_mentions = path(v),
            "relation_mentions" => self.relation_mentions = path(v),
            "descriptions" => self.descriptions = path(v),
            "vocab" => self.vocab = path(v),
            "mode" => {
                self.mode = Mode::parse(v).ok_or_else(|| Error::Config(format!("unknown mode `{v}`")))?
            }
            "k" => self.k = parse(k, v)?,
            "token_budget" => self.token_budget = parse(k, v)?,
            "with_descriptions" => self.with_descriptions = parse_bool(k, v)?,
            "freeze_context" => self.freeze_context = parse_bool(k, v)?,
            "steps" => self.steps = parse(k, v)?,
            "batch_size" => self.batch_size = parse(k, v)?,
            "lr" => self.lr = parse(k, v)?,
            "warmup_steps" => self.warmup_steps = parse(k, v)?,
            "clip_norm" => self.clip_norm = parse(k, v)?,
            "seed" => self.seed = parse(k, v)?,
            "samples" => self.samples = parse(k, v)?,
            "temperature" => self.temperature = parse(k, v)?,
            "aggregation" => {
                self.aggregation = Aggregation::parse(v)
                    .ok_or_else(|| Error::Config(format!("unknown aggregation `{v}`")))?
            }
            "both_directions" => self.both_directions = parse_bool(k, v)?,
            "macro_directions" => self.macro_directions = parse_bool(k, v)?,
            "degree_edges" => self.degree_edges = DegreeEdges::parse(v)?,
            "kge_dim" => self.kge_dim = parse(k, v)?,
            "kge_epochs" => self.kge_epochs = parse(k, v)?,
            "kge_negatives" => self.kge_negatives = parse(k, v)?,
            "kge_lr" => self.kge_lr = parse(k, v)?,
            "kge_batch" => self.kge_batch = parse(k, v)?,
            "router_threshold" => self.router_threshold = parse(k, v)?,
            _ => {
                let key = k.strip_prefix("model.").unwrap_or(k);
                if !self.model.set(key, v)? {
                    return Err(Error::Config(format!("unknown config key `{k}`")));
                }
            }
        }
        Ok(())
    }

    /// Canonical text form; stable across runs so fingerprints are too.
    pub fn to_text(&self) -> String {
        let p = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        let mut s = String::new();
        let _ = writeln!(s, "train = {}", p(&self.train));
        let _ = writeln!(s, "valid = {}", p(&self.valid));
        let _ = writeln!(s, "test = {}", p(&self.test));
        let _ = writeln!(s, "entity_mentions = {}", p(&self.entity_mentions));
        let _ = writeln!(s, "relation_mentions = {}", p(&self.relation_mentions));
        let _ = writeln!(s, "descriptions = {}", p(&self.descriptions));
        let _ = writeln!(s, "vocab = {}", p(&self.vocab));
        let _ = writeln!(s, "mode = {}", self.mode);
        let _ = writeln!(s, "k = {}", self.k);
        let _ = writeln!(s, "token_budget = {}", self.token_budget);
        let _ = writeln!(s, "with_descriptions = {}", self.with_descriptions);
        let _ = writeln!(s, "freeze_context = {}", self.freeze_context);
        for line in self.model.to_text().lines() {
            let _ = writeln!(s, "model.{line}");
        }
        let _ = writeln!(s, "steps = {}", self.steps);
        let _ = writeln!(s, "batch_size = {}", self.batch_size);
        let _ = writeln!(s, "lr = {}", self.lr);
        let _ = writeln!(s, "warmup_steps = {}", self.warmup_steps);
        let _ = writeln!(s, "clip_norm = {}", self.clip_norm);
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "samples = {}", self.samples);
        let _ = writeln!(s, "temperature = {}", self.temperature);
        let _ = writeln!(s, "aggregation = {}", self.aggregation.as_str());
        let _ = writeln!(s, "both_directions = {}", self.both_directions);
        let _ = writeln!(s, "macro_directions = {}", self.macro_directions);
        let _ = writeln!(s, "degree_edges = {}", self.degree_edges);
        let _ = writeln!(s, "kge_dim = {}", self.kge_dim);
        let _ = writeln!(s, "kge_epochs = {}", self.kge_epochs);
        let _ = writeln!(s, "kge_negatives = {}", self.kge_negatives);
        let _ = writeln!(s, "kge_lr = {}", self.kge_lr);
        let _ = writeln!(s, "kge_batch = {}", self.kge_batch);
        let _ = writeln!(s, "router_threshold = {}", self.router_threshold);
        s
    }

    pub fn fingerprint(&self) -> String {
        fingerprint(&self.to_text())
    }

    pub fn verbalizer(&self) -> VerbalizerConfig {
        VerbalizerConfig {
            mode: self.mode,
            k: self.k,
            token_budget: self.token_budget,
            with_descriptions: self.with_descriptions,
            freeze_context: self.freeze_context,
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            warmup_steps: self.warmup_steps,
            clip_norm: self.clip_norm,
            ..AdamConfig::default()
        }
    }
}

/// First 16 hex digits of the SHA-256 of `text`.
pub fn fingerprint(text: &str) -> String {
    let digest = Sha256::digest(text.as_bytes());
    digest[..8].iter().map(|b| format!("{b:02x}")).collect()
}
