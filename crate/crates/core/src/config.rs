//! Training and run configuration, presets, `key=value` overrides and
//! content hashing.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::datagen::ScmConfig;
use crate::error::{Error, Result};
use crate::intervention::ContextMode;
use crate::prototypes::{DistanceKind, KMode};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    NoMi,
    NoCluster,
    NoDo,
    SharedProto,
    ErmBaseline,
}

impl Ablation {
    pub const ALL: [Ablation; 5] = [
        Ablation::NoMi,
        Ablation::NoCluster,
        Ablation::NoDo,
        Ablation::SharedProto,
        Ablation::ErmBaseline,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::NoMi => "no_mi",
            Ablation::NoCluster => "no_cluster",
            Ablation::NoDo => "no_do",
            Ablation::SharedProto => "shared_proto",
            Ablation::ErmBaseline => "erm_baseline",
        }
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ablation::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown ablation '{s}'")))
    }
}

/// Name of a variant: `full`, or the sorted ablation names joined by `+`.
pub fn variant_name(ablation: &[Ablation]) -> String {
    let mut a = ablation.to_vec();
    a.sort();
    a.dedup();
    if a.is_empty() {
        "full".into()
    } else {
        a.iter().map(|x| x.name()).collect::<Vec<_>>().join("+")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lambda1: f64,
    pub lambda2: f64,
    pub beta: f64,
    pub k_per_class: usize,
    pub k_mode: KMode,
    pub m: usize,
    pub latent_dim: usize,
    pub channels: Vec<usize>,
    pub share_stem: bool,
    pub fusion_hidden: usize,
    pub q_hidden: usize,
    pub learning_rate: f64,
    /// Defaults to `learning_rate`.
    pub q_learning_rate: Option<f64>,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub projection_period: usize,
    pub projection_warmup: usize,
    pub seed: u64,
    pub ablation: Vec<Ablation>,
    pub tau: f64,
    pub margin: f64,
    pub logit_distance: DistanceKind,
    pub nwgm_mode: ContextMode,
    /// Prior over spurious contexts; uniform when absent.
    pub context_weights: Option<Vec<f64>>,
    /// Random subset of contexts per training step; all when absent.
    pub subsample_contexts: Option<usize>,
    pub freeze_ps_in_ce: bool,
    /// Standardize each latent dimension: batch statistics while training,
    /// running statistics at evaluation.
    pub latent_norm: bool,
    /// Penalize only the positive part of the MI estimate.
    pub clamp_mi: bool,
    /// Z-score both latents over the batch before they reach the MI estimator.
    pub mi_standardize: bool,
    pub purity_neighbors: usize,
    /// Steps of the freshly fitted conditional model used to report the MI bound.
    pub mi_eval_steps: usize,
    pub mi_eval_lr: f64,
    pub mi_eval_batch: usize,
    pub max_loss: f64,
    /// Keep the parameters of the epoch with the best validation BAcc.
    pub select_best: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda1: 0.1,
            lambda2: 0.1,
            beta: 0.5,
            k_per_class: 10,
            k_mode: KMode::PerClass,
            m: 50,
            latent_dim: 64,
            channels: vec![8, 16, 32],
            share_stem: false,
            fusion_hidden: 64,
            q_hidden: 64,
            learning_rate: 1e-4,
            q_learning_rate: None,
            weight_decay: 1e-4,
            epochs: 100,
            batch_size: 32,
            projection_period: 10,
            projection_warmup: 10,
            seed: 0,
            ablation: Vec::new(),
            tau: 0.1,
            margin: 1.0,
            logit_distance: DistanceKind::Euclidean,
            nwgm_mode: ContextMode::Arithmetic,
            context_weights: None,
            subsample_contexts: None,
            freeze_ps_in_ce: false,
            clamp_mi: true,
            latent_norm: true,
            mi_standardize: true,
            purity_neighbors: 20,
            mi_eval_steps: 400,
            mi_eval_lr: 3e-3,
            mi_eval_batch: 128,
            max_loss: 1e6,
            select_best: true,
        }
    }
}

impl TrainConfig {
    pub fn has(&self, a: Ablation) -> bool {
        self.ablation.contains(&a)
    }

    pub fn variant(&self) -> String {
        variant_name(&self.ablation)
    }

    pub fn q_lr(&self) -> f64 {
        self.q_learning_rate.unwrap_or(self.learning_rate)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
            ("beta", self.beta),
            ("learning_rate", self.learning_rate),
            ("weight_decay", self.weight_decay),
            ("tau", self.tau),
            ("mi_eval_lr", self.mi_eval_lr),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        if let Some(q) = self.q_learning_rate {
            if !(q >= 0.0 && q.is_finite()) {
                return Err(Error::Config(format!("q_learning_rate must be >= 0, got {q}")));
            }
        }
        if !self.margin.is_finite() {
            return Err(Error::Config("margin must be finite".into()));
        }
        for (name, v) in [
            ("k_per_class", self.k_per_class),
            ("m", self.m),
            ("latent_dim", self.latent_dim),
            ("batch_size", self.batch_size),
            ("fusion_hidden", self.fusion_hidden),
            ("q_hidden", self.q_hidden),
            ("purity_neighbors", self.purity_neighbors),
            ("mi_eval_batch", self.mi_eval_batch),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be >= 1")));
            }
        }
        if self.channels.is_empty() || self.channels.contains(&0) {
            return Err(Error::Config("channels must be a non-empty list of positive widths".into()));
        }
        if self.has(Ablation::ErmBaseline) && self.ablation.iter().any(|a| *a != Ablation::ErmBaseline) {
            return Err(Error::Config("erm_baseline cannot be combined with other ablations".into()));
        }
        if let Some(s) = self.subsample_contexts {
            if s == 0 || s > self.m {
                return Err(Error::Config(format!("subsample_contexts must lie in 1..={}, got {s}", self.m)));
            }
        }
        if let Some(w) = &self.context_weights {
            if self.has(Ablation::SharedProto) {
                return Err(Error::Config("context_weights are not supported with shared_proto".into()));
            }
            if w.len() != self.m {
                return Err(Error::Config(format!("{} context weights for m = {}", w.len(), self.m)));
            }
        }
        if self.projection_period == 0 {
            return Err(Error::Config("projection_period must be >= 1".into()));
        }
        Ok(())
    }
}

/// Everything that determines a run.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: ScmConfig,
    pub train: TrainConfig,
    pub seeds: Vec<u64>,
}

pub const PRESETS: [(&str, &str); 3] = [
    ("desk", include_str!("../../../presets/desk.json")),
    ("large", include_str!("../../../presets/large.json")),
    ("shift", include_str!("../../../presets/shift.json")),
];

impl RunConfig {
    pub fn preset(name: &str) -> Result<Self> {
        let text = PRESETS
            .iter()
            .find(|(n, _)| *n == name)
            .map(|(_, t)| *t)
            .ok_or_else(|| Error::Config(format!("unknown preset '{name}'")))?;
        Self::from_json(text, Path::new(name))
    }

    pub fn from_json(text: &str, origin: &Path) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Parse {
            path: origin.to_path_buf(),
            line: e.line() as u64,
            msg: e.to_string(),
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text, path)
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.train.validate()
    }

    /// Applies one `key=value` override. Keys are dotted paths such as
    /// `train.lambda1`, or bare field names when unambiguous. Values are read
    /// as JSON, falling back to a plain string; `ablation` also accepts a
    /// comma-separated list or `full`.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (key, raw) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override '{assignment}' is not key=value")))?;
        let key = key.trim();
        let mut tree = serde_json::to_value(&*self).map_err(|e| Error::Config(e.to_string()))?;
        let path = resolve_key(&tree, key)?;
        let value = parse_value(path.last().map(String::as_str).unwrap_or(""), raw.trim());
        let mut slot = &mut tree;
        for part in &path {
            slot = slot
                .get_mut(part.as_str())
                .ok_or_else(|| Error::Config(format!("unknown config key '{key}'")))?;
        }
        *slot = value;
        *self = serde_json::from_value(tree)
            .map_err(|e| Error::Config(format!("bad value for '{key}': {e}")))?;
        Ok(())
    }

    /// Hex SHA-256 of the canonical (key-sorted, compact) JSON form.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_value(self).expect("config serializes").to_string();
        let digest = Sha256::digest(canonical.as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

pub const MANIFEST_NAME: &str = "manifest.json";

/// Everything needed to rebuild the artifacts of a run directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config: RunConfig,
    pub config_hash: String,
    pub seeds: Vec<u64>,
    /// Dataset directory with `train/`, `val/` and `test/` manifests, when
    /// the data was not generated from `config.data`.
    pub data_dir: Option<PathBuf>,
    /// Artifact role to path relative to the run directory.
    pub layout: BTreeMap<String, String>,
}

impl RunManifest {
    pub fn new(config: RunConfig, data_dir: Option<PathBuf>, layout: BTreeMap<String, String>) -> Self {
        RunManifest {
            config_hash: config.hash(),
            seeds: config.seeds.clone(),
            config,
            data_dir,
            layout,
        }
    }

    pub fn save(&self, run_dir: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(run_dir).map_err(|e| Error::io(run_dir, e))?;
        let path = run_dir.join(MANIFEST_NAME);
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }

    pub fn load(run_dir: &Path) -> Result<Self> {
        let path = run_dir.join(MANIFEST_NAME);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let m: RunManifest = serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.clone(),
            line: e.line() as u64,
            msg: e.to_string(),
        })?;
        if m.config.hash() != m.config_hash {
            return Err(Error::Config(format!("{}: config hash does not match the stored config", path.display())));
        }
        Ok(m)
    }
}

fn resolve_key(tree: &Value, key: &str) -> Result<Vec<String>> {
    let parts: Vec<String> = key.split('.').map(str::to_string).collect();
    let mut node = tree;
    let mut direct = true;
    for p in &parts {
        match node.get(p.as_str()) {
            Some(n) => node = n,
            None => {
                direct = false;
                break;
            }
        }
    }
    if direct {
        return Ok(parts);
    }
    if parts.len() == 1 {
        let hits: Vec<Vec<String>> = tree
            .as_object()
            .into_iter()
            .flatten()
            .filter(|(_, v)| v.get(key).is_some())
            .map(|(section, _)| vec![section.clone(), key.to_string()])
            .collect();
        match hits.len() {
            1 => return Ok(hits.into_iter().next().expect("one hit")),
            n if n > 1 => {
                return Err(Error::Config(format!("config key '{key}' is ambiguous; qualify it")));
            }
            _ => {}
        }
    }
    Err(Error::Config(format!("unknown config key '{key}'")))
}

fn parse_value(field: &str, raw: &str) -> Value {
    if field == "ablation" && !raw.starts_with('[') {
        let items: Vec<Value> = raw
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty() && *s != "full")
            .map(|s| Value::String(s.to_string()))
            .collect();
        return Value::Array(items);
    }
    if field == "seeds" && !raw.starts_with('[') {
        if let Ok(v) = raw.split(',').map(|s| s.trim().parse::<u64>()).collect::<std::result::Result<Vec<_>, _>>() {
            return Value::Array(v.into_iter().map(Value::from).collect());
        }
    }
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_parse_and_validate() {
        for (name, _) in PRESETS {
            let c = RunConfig::preset(name).unwrap();
            c.validate().unwrap();
        }
        let large = RunConfig::preset("large").unwrap();
        assert_eq!(large.train.learning_rate, 1e-4);
        assert_eq!(large.train.epochs, 100);
        assert_eq!((large.train.k_per_class, large.train.m), (10, 50));
        let shift = RunConfig::preset("shift").unwrap();
        assert_eq!((shift.data.rho_train, shift.data.rho_test), (0.9, 0.0));
    }

    #[test]
    fn overrides_by_path_and_bare_name() {
        let mut c = RunConfig::default();
        c.apply_override("train.lambda1=0.5").unwrap();
        c.apply_override("rho_test=0.25").unwrap();
        c.apply_override("ablation=no_mi,no_cluster").unwrap();
        c.apply_override("seeds=4,5").unwrap();
        c.apply_override("nwgm_mode=geometric").unwrap();
        assert_eq!(c.train.lambda1, 0.5);
        assert_eq!(c.data.rho_test, 0.25);
        assert_eq!(c.train.ablation, vec![Ablation::NoMi, Ablation::NoCluster]);
        assert_eq!(c.seeds, vec![4, 5]);
        assert_eq!(c.train.nwgm_mode, ContextMode::Geometric);
        assert_eq!(c.train.variant(), "no_mi+no_cluster");
        c.apply_override("ablation=full").unwrap();
        assert_eq!(c.train.variant(), "full");
    }

    #[test]
    fn bad_overrides_are_config_errors() {
        let mut c = RunConfig::default();
        assert!(matches!(c.apply_override("nonsense=1"), Err(Error::Config(_))));
        assert!(matches!(c.apply_override("seed=1"), Err(Error::Config(_))), "ambiguous");
        assert!(matches!(c.apply_override("train.epochs=many"), Err(Error::Config(_))));
        assert!(matches!(c.apply_override("lambda1"), Err(Error::Config(_))));
        assert!(matches!(c.apply_override("ablation=no_such"), Err(Error::Config(_))));
    }

    #[test]
    fn erm_is_exclusive() {
        let mut c = RunConfig::default();
        c.apply_override("ablation=erm_baseline,no_mi").unwrap();
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        c.apply_override("ablation=erm_baseline").unwrap();
        c.validate().unwrap();
    }

    #[test]
    fn hash_tracks_effective_fields() {
        let a = RunConfig::default();
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.apply_override("train.tau=0.1").unwrap();
        assert_eq!(a.hash(), b.hash());
        b.apply_override("train.tau=0.2").unwrap();
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
    }

    #[test]
    fn unknown_json_fields_rejected() {
        let r = RunConfig::from_json(r#"{"train": {"lambda9": 1}}"#, Path::new("x.json"));
        assert!(matches!(r, Err(Error::Parse { .. })));
    }
}
