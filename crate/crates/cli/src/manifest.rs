//! Run manifest: everything needed to recompute a reported number from the
//! checkpoint and package artifacts, serialized as JSON next to the output.

use std::collections::BTreeMap;
use std::path::Path;

use anyhow::{Context, Result};
use serde::Serialize;

#[derive(Debug, Serialize, Default)]
pub struct RunManifest {
    pub command: String,
    pub config: BTreeMap<String, String>,
    pub seed: u64,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub epoch_losses: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub initial_accuracy: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub test_accuracy: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub update_scalars: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub update_fraction: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub wire_bytes: Option<usize>,
    pub wall_clock_secs: f64,
}

impl RunManifest {
    pub fn write_next_to(&self, artifact: &Path) -> Result<()> {
        let path = artifact.with_extension(format!(
            "{}.manifest.json",
            artifact
                .extension()
                .map(|e| e.to_string_lossy().into_owned())
                .unwrap_or_default()
        ));
        let json = serde_json::to_string_pretty(self)?;
        std::fs::write(&path, json).with_context(|| format!("writing {}", path.display()))?;
        Ok(())
    }
}
