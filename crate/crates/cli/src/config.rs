//! Experiment configuration: training, evaluation and analysis settings in one file.

use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use stylesmooth::metrics::EndpointKind;
use stylesmooth::perceptual::BackboneTraining;
use stylesmooth::stylespace::{EndpointSource, InterpStrategy, DEFAULT_PATH_STEPS};
use stylesmooth::training::{BackendSpec, DatasetSpec, TrainConfig};
use stylesmooth::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Dataset to evaluate on; defaults to the checkpoint's own.
    pub dataset: Option<DatasetSpec>,
    /// Cap on test images per domain.
    pub test_per_domain: Option<usize>,
    pub endpoints: EndpointSource,
    /// Distance used by ps, ppl and lpips diversity.
    pub backend: BackendSpec,
    /// Feature network for fid and the linearity columns.
    pub backbone: Option<PathBuf>,
    /// Embedding network for frd.
    pub face_backbone: Option<PathBuf>,
    pub ps_paths: usize,
    pub steps: usize,
    pub strategy: InterpStrategy,
    pub fid_images: usize,
    pub fid_points: usize,
    pub fid_source: usize,
    pub fid_target: usize,
    pub diversity_images: usize,
    pub diversity_styles: usize,
    pub diversity_source: usize,
    pub diversity_target: usize,
    pub frd_samples: usize,
    pub ppl_samples: usize,
    pub ppl_epsilon: f64,
    pub ppl_kind: EndpointKind,
    pub linearity_pairs: usize,
    pub linearity_counts: Vec<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            dataset: None,
            test_per_domain: None,
            endpoints: EndpointSource::Mapper,
            backend: BackendSpec::default(),
            backbone: None,
            face_backbone: None,
            ps_paths: 100,
            steps: DEFAULT_PATH_STEPS,
            strategy: InterpStrategy::Lerp,
            fid_images: 50,
            fid_points: 20,
            fid_source: 0,
            fid_target: 1,
            diversity_images: 50,
            diversity_styles: 10,
            diversity_source: 0,
            diversity_target: 1,
            frd_samples: 500,
            ppl_samples: 200,
            ppl_epsilon: 1e-4,
            ppl_kind: EndpointKind::Mixed,
            linearity_pairs: 20,
            linearity_counts: vec![10, 20, 50, 100],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnalyzeConfig {
    pub n_triplets: usize,
    /// Cap on test images per domain in the scatter plot.
    pub scatter_per_domain: Option<usize>,
}

impl Default for AnalyzeConfig {
    fn default() -> Self {
        Self {
            n_triplets: 10_000,
            scatter_per_domain: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub channels: Vec<usize>,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        let t = BackboneTraining::default();
        Self {
            iterations: t.iterations,
            batch_size: t.batch_size,
            lr: t.lr,
            channels: vec![16, 32, 64],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub out: PathBuf,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub analyze: AnalyzeConfig,
    pub backbone: BackboneConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            out: PathBuf::from("runs/default"),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            analyze: AnalyzeConfig::default(),
            backbone: BackboneConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        let e = &self.eval;
        if e.steps == 0 || e.ps_paths == 0 {
            return Err(Error::Config("eval.steps and eval.ps_paths must be positive".into()));
        }
        if e.linearity_counts.contains(&0) {
            return Err(Error::Config("linearity counts must be positive".into()));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }
}

/// Applies `key.path=value` assignments. Values are parsed as TOML and fall back to
/// plain strings; unknown keys are rejected when the result is deserialized.
pub fn apply_overrides<T: Serialize + DeserializeOwned>(cfg: &T, overrides: &[String]) -> Result<T> {
    let mut root = toml::Value::try_from(cfg).map_err(|e| Error::Config(e.to_string()))?;
    for o in overrides {
        let (key, raw) = o
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override {o:?} is not KEY=VALUE")))?;
        let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| toml::Value::String(raw.to_string()));
        let parts: Vec<&str> = key.trim().split('.').collect();
        let mut node = &mut root;
        for p in &parts[..parts.len() - 1] {
            let table = node
                .as_table_mut()
                .ok_or_else(|| Error::Config(format!("override {key}: {p} is not a section")))?;
            node = table
                .entry(p.to_string())
                .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        }
        node.as_table_mut()
            .ok_or_else(|| Error::Config(format!("override {key}: parent is not a section")))?
            .insert(parts[parts.len() - 1].to_string(), value);
    }
    root.try_into().map_err(|e: toml::de::Error| Error::Config(format!("invalid override: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_reach_nested_keys() {
        let cfg = ExperimentConfig::default();
        let o = apply_overrides(
            &cfg,
            &[
                "train.iterations=0".into(),
                "train.smooth.use_sr=true".into(),
                "eval.backbone=weights/b.safetensors".into(),
                "out=\"x\"".into(),
            ],
        )
        .unwrap();
        assert_eq!(o.train.iterations, 0);
        assert!(o.train.smooth.use_sr);
        assert_eq!(o.eval.backbone, Some(PathBuf::from("weights/b.safetensors")));
        assert_eq!(o.out, PathBuf::from("x"));
        assert!(apply_overrides(&cfg, &["train.bogus=1".into()]).is_err());
        assert!(apply_overrides(&cfg, &["noequals".into()]).is_err());
    }

    #[test]
    fn toml_round_trip_is_stable() {
        let cfg = ExperimentConfig::default();
        let text = cfg.to_toml().unwrap();
        let back: ExperimentConfig = toml::from_str(&text).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.to_toml().unwrap(), text);
    }
}
