//! Flat key-value configuration: `key = value` lines with `#` comments.
//! Flags override file values; unknown keys are errors.

use std::collections::BTreeMap;
use std::path::Path;

use anyhow::{bail, Context, Result};
use deltaforge_core::protocol::{MethodConfig, PerLayer};

const KNOWN_KEYS: &[&str] = &[
    "data_dir",
    "checkpoint",
    "seed",
    "p",
    "epochs",
    "batch_size",
    "lr",
    "momentum",
    "method",
    "rank",
    "aug",
    "mask_p",
    "out",
    "debug_wire64",
    "sweep_seeds",
    "sweep_epochs",
    "sweep_lra_ranks",
    "sweep_ml_ranks",
    "sweep_ka_augs",
    "sweep_rm_ps",
    "sweep_lru_ranks",
];

fn key_is_known(key: &str) -> bool {
    if KNOWN_KEYS.contains(&key) {
        return true;
    }
    // Per-layer hyperparameter overrides: rank_layer<N> / aug_layer<N>.
    for prefix in ["rank_layer", "aug_layer"] {
        if let Some(rest) = key.strip_prefix(prefix) {
            return !rest.is_empty() && rest.chars().all(|c| c.is_ascii_digit());
        }
    }
    false
}

#[derive(Debug, Clone, Default)]
pub struct Config {
    map: BTreeMap<String, String>,
}

impl Config {
    pub fn load(path: Option<&Path>) -> Result<Config> {
        let mut map = BTreeMap::new();
        if let Some(path) = path {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("reading config {}", path.display()))?;
            for (lineno, raw) in text.lines().enumerate() {
                let line = raw.split('#').next().unwrap_or("").trim();
                if line.is_empty() {
                    continue;
                }
                let Some((key, value)) = line.split_once('=') else {
                    bail!("{}:{}: expected `key = value`", path.display(), lineno + 1);
                };
                let key = key.trim().to_string();
                if !key_is_known(&key) {
                    bail!("{}:{}: unknown key `{key}`", path.display(), lineno + 1);
                }
                map.insert(key, value.trim().to_string());
            }
        }
        Ok(Config { map })
    }

    /// Flags override file values.
    pub fn set_flag<T: ToString>(&mut self, key: &str, value: Option<T>) {
        if let Some(v) = value {
            self.map.insert(key.to_string(), v.to_string());
        }
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.map.get(key).map(|s| s.as_str())
    }

    pub fn str_or(&self, key: &str, default: &str) -> String {
        self.get(key).unwrap_or(default).to_string()
    }

    pub fn u64_or(&self, key: &str, default: u64) -> Result<u64> {
        match self.get(key) {
            None => Ok(default),
            Some(v) => v.parse().with_context(|| format!("key {key}: `{v}`")),
        }
    }

    pub fn usize_or(&self, key: &str, default: usize) -> Result<usize> {
        match self.get(key) {
            None => Ok(default),
            Some(v) => v.parse().with_context(|| format!("key {key}: `{v}`")),
        }
    }

    pub fn f64_or(&self, key: &str, default: f64) -> Result<f64> {
        match self.get(key) {
            None => Ok(default),
            Some(v) => v.parse().with_context(|| format!("key {key}: `{v}`")),
        }
    }

    pub fn bool_or(&self, key: &str, default: bool) -> Result<bool> {
        match self.get(key) {
            None => Ok(default),
            Some(v) => match v {
                "true" | "1" | "yes" => Ok(true),
                "false" | "0" | "no" => Ok(false),
                other => bail!("key {key}: expected a boolean, got `{other}`"),
            },
        }
    }

    pub fn list_usize(&self, key: &str, default: &[usize]) -> Result<Vec<usize>> {
        match self.get(key) {
            None => Ok(default.to_vec()),
            Some(v) => v
                .split(',')
                .map(|s| s.trim().parse().with_context(|| format!("key {key}: `{s}`")))
                .collect(),
        }
    }

    pub fn list_u64(&self, key: &str, default: &[u64]) -> Result<Vec<u64>> {
        match self.get(key) {
            None => Ok(default.to_vec()),
            Some(v) => v
                .split(',')
                .map(|s| s.trim().parse().with_context(|| format!("key {key}: `{s}`")))
                .collect(),
        }
    }

    pub fn list_f64(&self, key: &str, default: &[f64]) -> Result<Vec<f64>> {
        match self.get(key) {
            None => Ok(default.to_vec()),
            Some(v) => v
                .split(',')
                .map(|s| s.trim().parse().with_context(|| format!("key {key}: `{s}`")))
                .collect(),
        }
    }

    /// Per-layer overrides collected from `<prefix>_layer<N>` keys.
    pub fn layer_overrides(&self, prefix: &str) -> Result<Vec<(u32, usize)>> {
        let mut out = Vec::new();
        let full = format!("{prefix}_layer");
        for (key, value) in &self.map {
            if let Some(id) = key.strip_prefix(&full) {
                let id: u32 = id.parse().with_context(|| format!("key {key}"))?;
                let v: usize = value.parse().with_context(|| format!("key {key}: `{value}`"))?;
                out.push((id, v));
            }
        }
        Ok(out)
    }

    /// Builds the method configuration from `method`, its hyperparameter and
    /// any per-layer overrides.
    pub fn method_config(&self) -> Result<MethodConfig> {
        let method = self.str_or("method", "ka");
        let rank = self.usize_or("rank", 1)?;
        let aug = self.usize_or("aug", 1)?;
        let mask_p = self.f64_or("mask_p", 0.01)?;
        let ranks = PerLayer::with_overrides(rank, self.layer_overrides("rank")?);
        let augs = PerLayer::with_overrides(aug, self.layer_overrides("aug")?);
        Ok(match method.as_str() {
            "lra" => MethodConfig::Lra { ranks },
            "ml" => MethodConfig::Ml { ranks },
            "ka" => MethodConfig::Ka { augs },
            "rm" => MethodConfig::Rm { p: mask_p },
            "lru" => MethodConfig::Lru { ranks },
            other => bail!("unknown method `{other}` (expected lra, ml, ka, rm or lru)"),
        })
    }

    /// Everything, echoed into manifests.
    pub fn echo(&self) -> BTreeMap<String, String> {
        self.map.clone()
    }
}
