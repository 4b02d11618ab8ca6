//! Flat INI-style configuration with dotted section prefixes. Unknown keys
//! are errors; absent keys fall back to the reference defaults.

use crate::augment::AffinePolicy;
use crate::contrastive::{ContrastiveConfig, ContrastiveMode, ContrastiveObjective};
use crate::error::{Error, Result};
use crate::harness::dataset::{Appearance, DatasetKind, DatasetSpec};
use crate::ssl::{Learner, SslConfig};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

const KNOWN_KEYS: &[&str] = &[
    "dataset.kind",
    "dataset.image_size",
    "dataset.classes",
    "dataset.train_count",
    "dataset.test_count",
    "dataset.seed",
    "dataset.fg_hue",
    "dataset.fg_sat",
    "dataset.fg_val",
    "dataset.bg_hue",
    "dataset.bg_sat",
    "dataset.bg_val",
    "dataset.noise",
    "dataset.scale",
    "dataset.path",
    "split.n_labeled",
    "split.seed",
    "contrastive.objective",
    "contrastive.mode",
    "contrastive.temperature",
    "contrastive.ema_momentum",
    "contrastive.anchor_weight",
    "contrastive.epochs",
    "contrastive.batch_size",
    "contrastive.learning_rate",
    "contrastive.momentum",
    "contrastive.one_sided",
    "contrastive.affine",
    "ssl.learner",
    "ssl.confidence_threshold",
    "ssl.unlabeled_weight",
    "ssl.unlabeled_ratio",
    "ssl.batch_size",
    "ssl.epochs",
    "ssl.learning_rate",
    "ssl.momentum",
    "ssl.ema_momentum",
    "run.seed",
    "run.seeds",
    "run.out",
    "run.threads",
    "run.init",
    "run.data",
    "run.split",
    "sweep.snapshots",
    "sweep.labels",
    "eval.metrics",
];

/// Parsed `key = value` entries, canonically ordered.
#[derive(Debug, Clone, Default)]
pub struct RawConfig {
    entries: BTreeMap<String, String>,
}

impl RawConfig {
    pub fn parse(text: &str) -> Result<RawConfig> {
        let mut entries = BTreeMap::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Config(format!(
                    "line {}: expected 'key = value', got '{line}'",
                    lineno + 1
                )));
            };
            let key = key.trim().to_string();
            let value = value.trim().to_string();
            if !KNOWN_KEYS.contains(&key.as_str()) {
                return Err(Error::Config(format!("line {}: unknown key '{key}'", lineno + 1)));
            }
            if entries.insert(key.clone(), value).is_some() {
                return Err(Error::Config(format!("line {}: duplicate key '{key}'", lineno + 1)));
            }
        }
        Ok(RawConfig { entries })
    }

    pub fn load(path: &Path) -> Result<RawConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        RawConfig::parse(&text)
    }

    pub fn set(&mut self, key: &str, value: impl Into<String>) {
        debug_assert!(KNOWN_KEYS.contains(&key), "unknown config key {key}");
        self.entries.insert(key.to_string(), value.into());
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(|s| s.as_str())
    }

    /// Canonical text: sorted `key = value` lines.
    pub fn canonical(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.entries {
            out.push_str(k);
            out.push_str(" = ");
            out.push_str(v);
            out.push('\n');
        }
        out
    }

    fn parse_with<T>(&self, key: &str, f: impl FnOnce(&str) -> Option<T>) -> Result<Option<T>> {
        match self.get(key) {
            None => Ok(None),
            Some(v) => f(v)
                .map(Some)
                .ok_or_else(|| Error::Config(format!("bad value for {key}: '{v}'"))),
        }
    }

    fn get_f64(&self, key: &str) -> Result<Option<f64>> {
        self.parse_with(key, |v| v.parse().ok())
    }

    fn get_f32(&self, key: &str) -> Result<Option<f32>> {
        self.parse_with(key, |v| v.parse().ok())
    }

    fn get_usize(&self, key: &str) -> Result<Option<usize>> {
        self.parse_with(key, |v| v.parse().ok())
    }

    fn get_u64(&self, key: &str) -> Result<Option<u64>> {
        self.parse_with(key, |v| v.parse().ok())
    }

    fn get_bool(&self, key: &str) -> Result<Option<bool>> {
        self.parse_with(key, |v| match v {
            "true" | "on" | "1" => Some(true),
            "false" | "off" | "0" => Some(false),
            _ => None,
        })
    }

    fn get_pair(&self, key: &str) -> Result<Option<(f64, f64)>> {
        self.parse_with(key, |v| {
            let (a, b) = v.split_once(',')?;
            Some((a.trim().parse().ok()?, b.trim().parse().ok()?))
        })
    }

    fn get_list_usize(&self, key: &str) -> Result<Option<Vec<usize>>> {
        self.parse_with(key, |v| {
            v.split(',').map(|s| s.trim().parse().ok()).collect::<Option<Vec<_>>>()
        })
    }

    fn get_list_u64(&self, key: &str) -> Result<Option<Vec<u64>>> {
        self.parse_with(key, |v| {
            v.split(',').map(|s| s.trim().parse().ok()).collect::<Option<Vec<_>>>()
        })
    }
}

/// CLI-level overrides merged into the raw config before hashing.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub threads: Option<usize>,
    pub init: Option<String>,
    pub data: Option<PathBuf>,
    pub split: Option<PathBuf>,
}

/// Fully resolved experiment configuration.
#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub dataset: DatasetSpec,
    pub split_n_labeled: usize,
    pub split_seed: u64,
    pub contrastive: ContrastiveConfig,
    pub ssl: SslConfig,
    pub seed: u64,
    pub seeds: Vec<u64>,
    pub out: PathBuf,
    pub threads: usize,
    pub init: Option<String>,
    pub data: Option<PathBuf>,
    pub split_file: Option<PathBuf>,
    pub sweep_snapshots: Vec<usize>,
    pub sweep_labels: Vec<usize>,
    pub eval_metrics: Vec<String>,
    /// SHA-256 of the canonical resolved key-value text.
    pub config_hash: String,
}

impl ExperimentConfig {
    pub fn load(path: Option<&Path>, overrides: &Overrides) -> Result<ExperimentConfig> {
        let mut raw = match path {
            Some(p) => RawConfig::load(p)?,
            None => RawConfig::default(),
        };
        if let Some(s) = overrides.seed {
            raw.set("run.seed", s.to_string());
        }
        if let Some(o) = &overrides.out {
            raw.set("run.out", o.display().to_string());
        }
        if let Some(t) = overrides.threads {
            raw.set("run.threads", t.to_string());
        }
        if let Some(i) = &overrides.init {
            raw.set("run.init", i.clone());
        }
        if let Some(d) = &overrides.data {
            raw.set("run.data", d.display().to_string());
        }
        if let Some(s) = &overrides.split {
            raw.set("run.split", s.display().to_string());
        }
        ExperimentConfig::from_raw(&raw)
    }

    pub fn from_raw(raw: &RawConfig) -> Result<ExperimentConfig> {
        let mut dataset = DatasetSpec::default();
        if let Some(kind) = raw.get("dataset.kind") {
            dataset.kind = DatasetKind::parse(kind)?;
        }
        if let Some(v) = raw.get_usize("dataset.image_size")? {
            dataset.image_size = v;
        }
        if let Some(v) = raw.get_usize("dataset.classes")? {
            dataset.classes = v;
        }
        if let Some(v) = raw.get_usize("dataset.train_count")? {
            dataset.train_count = v;
        }
        if let Some(v) = raw.get_usize("dataset.test_count")? {
            dataset.test_count = v;
        }
        if let Some(v) = raw.get_u64("dataset.seed")? {
            dataset.seed = v;
        }
        let a = &mut dataset.appearance;
        apply_pair(raw, "dataset.fg_hue", &mut a.fg_hue)?;
        apply_pair(raw, "dataset.fg_sat", &mut a.fg_sat)?;
        apply_pair(raw, "dataset.fg_val", &mut a.fg_val)?;
        apply_pair(raw, "dataset.bg_hue", &mut a.bg_hue)?;
        apply_pair(raw, "dataset.bg_sat", &mut a.bg_sat)?;
        apply_pair(raw, "dataset.bg_val", &mut a.bg_val)?;
        if let Some(v) = raw.get_f64("dataset.noise")? {
            a.noise = v;
        }
        apply_pair(raw, "dataset.scale", &mut a.scale)?;
        if let Some(p) = raw.get("dataset.path") {
            dataset.source = Some(PathBuf::from(p));
        }
        dataset.validate()?;

        let split_n_labeled = raw.get_usize("split.n_labeled")?.unwrap_or(40);
        let split_seed = raw.get_u64("split.seed")?.unwrap_or(1);

        let mut contrastive = ContrastiveConfig::default();
        if let Some(v) = raw.get("contrastive.objective") {
            contrastive.objective = match v {
                "byol" => ContrastiveObjective::Byol,
                "info_nce" => ContrastiveObjective::InfoNce,
                other => return Err(Error::Config(format!("unknown objective '{other}'"))),
            };
        }
        if let Some(v) = raw.get("contrastive.mode") {
            contrastive.mode = match v {
                "global" => ContrastiveMode::Global,
                "dense" => ContrastiveMode::Dense,
                other => return Err(Error::Config(format!("unknown mode '{other}'"))),
            };
        }
        if let Some(v) = raw.get_f32("contrastive.temperature")? {
            contrastive.temperature = v;
        }
        if let Some(v) = raw.get_f32("contrastive.ema_momentum")? {
            contrastive.ema_momentum = v;
        }
        if let Some(v) = raw.get_f32("contrastive.anchor_weight")? {
            contrastive.anchor_weight = v;
        }
        if let Some(v) = raw.get_usize("contrastive.epochs")? {
            contrastive.epochs = v;
        }
        if let Some(v) = raw.get_usize("contrastive.batch_size")? {
            contrastive.batch_size = v;
        }
        if let Some(v) = raw.get_f32("contrastive.learning_rate")? {
            contrastive.learning_rate = v;
        }
        if let Some(v) = raw.get_f32("contrastive.momentum")? {
            contrastive.sgd_momentum = v;
        }
        if let Some(v) = raw.get_bool("contrastive.one_sided")? {
            contrastive.one_sided = v;
        }
        // affine augmentation defaults on for dense mode, off for global
        let affine_on = raw
            .get_bool("contrastive.affine")?
            .unwrap_or(contrastive.mode == ContrastiveMode::Dense);
        contrastive.affine = affine_on.then(AffinePolicy::default);
        contrastive.validate()?;

        let mut ssl = SslConfig::default();
        if let Some(v) = raw.get("ssl.learner") {
            ssl.learner = Learner::parse(v)?;
        }
        if let Some(v) = raw.get_f32("ssl.confidence_threshold")? {
            ssl.confidence_threshold = v;
        }
        if let Some(v) = raw.get_f32("ssl.unlabeled_weight")? {
            ssl.unlabeled_weight = v;
        }
        if let Some(v) = raw.get_usize("ssl.unlabeled_ratio")? {
            ssl.unlabeled_ratio = v;
        }
        if let Some(v) = raw.get_usize("ssl.batch_size")? {
            ssl.batch_size = v;
        }
        if let Some(v) = raw.get_usize("ssl.epochs")? {
            ssl.epochs = v;
        }
        if let Some(v) = raw.get_f32("ssl.learning_rate")? {
            ssl.learning_rate = v;
        }
        if let Some(v) = raw.get_f32("ssl.momentum")? {
            ssl.sgd_momentum = v;
        }
        if let Some(v) = raw.get_f32("ssl.ema_momentum")? {
            ssl.ema_momentum = v;
        }
        ssl.validate()?;

        let seed = raw.get_u64("run.seed")?.unwrap_or(0);
        let seeds = raw.get_list_u64("run.seeds")?.unwrap_or_else(|| vec![seed]);
        if seeds.is_empty() {
            return Err(Error::Config("run.seeds must be nonempty".into()));
        }
        let out = PathBuf::from(raw.get("run.out").unwrap_or("out"));
        let threads = raw.get_usize("run.threads")?.unwrap_or(1);
        if threads == 0 {
            return Err(Error::Config("run.threads must be >= 1".into()));
        }
        let init = raw.get("run.init").map(|s| s.to_string());
        let data = raw.get("run.data").map(PathBuf::from);
        let split_file = raw.get("run.split").map(PathBuf::from);
        let sweep_snapshots = raw.get_list_usize("sweep.snapshots")?.unwrap_or_else(|| vec![0]);
        let sweep_labels =
            raw.get_list_usize("sweep.labels")?.unwrap_or_else(|| vec![split_n_labeled]);
        let eval_metrics = raw
            .get("eval.metrics")
            .map(|v| {
                v.split(',')
                    .map(|s| s.trim().to_string())
                    .filter(|s| !s.is_empty())
                    .collect()
            })
            .unwrap_or_default();

        let mut hasher = Sha256::new();
        hasher.update(raw.canonical().as_bytes());
        let digest = hasher.finalize();
        let config_hash: String = digest.iter().map(|b| format!("{b:02x}")).collect();

        Ok(ExperimentConfig {
            dataset,
            split_n_labeled,
            split_seed,
            contrastive,
            ssl,
            seed,
            seeds,
            out,
            threads,
            init,
            data,
            split_file,
            sweep_snapshots,
            sweep_labels,
            eval_metrics,
            config_hash,
        })
    }

    pub fn hash8(&self) -> &str {
        &self.config_hash[..8]
    }
}

fn apply_pair(raw: &RawConfig, key: &str, target: &mut (f64, f64)) -> Result<()> {
    if let Some(v) = raw.get_pair(key)? {
        *target = v;
    }
    Ok(())
}

pub fn default_appearance_broad() -> Appearance {
    Appearance::default()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_reference_recipe() {
        let cfg = ExperimentConfig::load(None, &Overrides::default()).unwrap();
        // reference FixMatch settings
        assert_eq!(cfg.ssl.confidence_threshold, 0.95);
        assert_eq!(cfg.ssl.unlabeled_weight, 1.0);
        assert_eq!(cfg.ssl.unlabeled_ratio, 7);
        assert_eq!(cfg.ssl.batch_size, 64);
        assert_eq!(cfg.ssl.learning_rate, 0.1);
        assert_eq!(cfg.ssl.sgd_momentum, 0.9);
        // reference contrastive settings
        assert_eq!(cfg.contrastive.anchor_weight, 1e-2);
        assert_eq!(cfg.contrastive.batch_size, 256);
        assert_eq!(cfg.contrastive.learning_rate, 0.3);
        assert_eq!(cfg.contrastive.epochs, 300);
        assert_eq!(cfg.contrastive.sgd_momentum, 0.9);
    }

    #[test]
    fn parses_values_and_rejects_unknown_keys() {
        let raw = RawConfig::parse(
            "# comment\n\
             dataset.classes = 6\n\
             dataset.fg_hue = 10, 50\n\
             contrastive.mode = dense\n\
             ssl.learner = mean_teacher\n\
             run.seeds = 1,2,3\n",
        )
        .unwrap();
        let cfg = ExperimentConfig::from_raw(&raw).unwrap();
        assert_eq!(cfg.dataset.classes, 6);
        assert_eq!(cfg.dataset.appearance.fg_hue, (10.0, 50.0));
        assert!(cfg.contrastive.affine.is_some(), "dense mode turns affine on");
        assert_eq!(cfg.seeds, vec![1, 2, 3]);

        let err = RawConfig::parse("dataset.classes = 6\nnot.a.key = 1\n");
        assert!(matches!(err, Err(Error::Config(_))), "{err:?}");
        let err = RawConfig::parse("dataset.classes 6\n");
        assert!(err.is_err());
        let err = RawConfig::parse("run.seed = 1\nrun.seed = 2\n");
        assert!(err.is_err());
    }

    #[test]
    fn hash_is_stable_and_reflects_overrides() {
        let a = ExperimentConfig::load(None, &Overrides::default()).unwrap();
        let b = ExperimentConfig::load(None, &Overrides::default()).unwrap();
        assert_eq!(a.config_hash, b.config_hash);
        let c = ExperimentConfig::load(
            None,
            &Overrides { seed: Some(5), ..Default::default() },
        )
        .unwrap();
        assert_ne!(a.config_hash, c.config_hash);
        assert_eq!(c.seed, 5);
        assert_eq!(c.seeds, vec![5]);
    }
}
