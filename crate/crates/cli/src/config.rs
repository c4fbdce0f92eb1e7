use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::ValueEnum;
use ividr_core::datagen::GenConfig;
use ividr_core::pipeline::PipelineConfig;
use ividr_core::recmodel::Variant;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    /// 10,000 x 1,000 synthetic data, full optimizer grid.
    Paper,
    /// 2,000 x 300 synthetic data for a single core.
    Desk,
    /// 290 x 300 Coat-shaped data (real files when `data.path` is set).
    Coat,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DataSource {
    /// Generated in memory. With `per_seed`, every seed draws its own
    /// dataset from `generator` reseeded; otherwise `generator.seed` is used
    /// once for all seeds.
    Synthetic { per_seed: bool },
    /// A directory written by `generate`.
    Bundle { path: PathBuf },
    /// Coat-format directory (`train.ascii`, `test.ascii`, optional
    /// `user_features.ascii`).
    CoatDir { path: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub preset: Preset,
    pub data: DataSource,
    pub generator: GenConfig,
    pub pipeline: PipelineConfig,
    pub variants: Vec<Variant>,
    pub baseline: Variant,
    pub seeds: Vec<u64>,
    /// Exposure-noise levels for `mcc-study`.
    pub gammas: Vec<f64>,
    /// Grid shared by the rho and tau series of `sweep`.
    pub sweep_points: Vec<f64>,
    /// Write a parameter checkpoint for every trained predictor.
    pub checkpoints: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self::preset(Preset::Desk)
    }
}

impl ExperimentConfig {
    pub fn preset(p: Preset) -> Self {
        let (generator, pipeline, data) = match p {
            Preset::Paper => (GenConfig::paper(), PipelineConfig::default(), DataSource::Synthetic { per_seed: true }),
            Preset::Desk => (GenConfig::desk(), PipelineConfig::default(), DataSource::Synthetic { per_seed: true }),
            Preset::Coat => (GenConfig::coat(), PipelineConfig::coat(), DataSource::Synthetic { per_seed: false }),
        };
        Self {
            preset: p,
            data,
            generator,
            pipeline,
            variants: Variant::ALL.to_vec(),
            baseline: Variant::Mf,
            seeds: (0..if p == Preset::Coat { 10 } else { 5 }).collect(),
            gammas: vec![0.0, 5.0, 10.0, 15.0, 20.0],
            sweep_points: (0..=5).map(|k| k as f64 * 0.2).collect(),
            checkpoints: true,
        }
    }

    /// Preset values overlaid with the keys present in `path`.
    pub fn load(preset: Preset, path: Option<&Path>) -> Result<Self> {
        let base = Self::preset(preset);
        let Some(path) = path else { return Ok(base) };
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let overlay: toml::Value = toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        // A `preset` key in the file selects the base before overlaying.
        let base = match overlay.get("preset").and_then(|v| v.as_str()) {
            Some(name) => Self::preset(Preset::from_str(name, true).map_err(anyhow::Error::msg)?),
            None => base,
        };
        let mut merged = toml::Value::try_from(&base)?;
        merge(&mut merged, overlay);
        let cfg: Self = merged.try_into().with_context(|| format!("invalid config {}", path.display()))?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            bail!("at least one seed is required");
        }
        if self.variants.is_empty() {
            bail!("at least one variant is required");
        }
        if self.sweep_points.iter().any(|v| !(0.0..=1.0).contains(v)) {
            bail!("sweep points must lie in [0, 1]");
        }
        self.generator.validate()?;
        self.pipeline.validate()?;
        Ok(())
    }
}

fn merge(base: &mut toml::Value, overlay: toml::Value) {
    match (base, overlay) {
        (toml::Value::Table(b), toml::Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// `name=start:end:step`, e.g. `rho=0:1:0.2`.
pub fn parse_sweep(s: &str) -> Result<(String, Vec<f64>)> {
    let (name, range) = s.split_once('=').context("expected name=start:end:step")?;
    let parts: Vec<f64> = range
        .split(':')
        .map(|p| p.trim().parse::<f64>().with_context(|| format!("bad number {p:?} in {s:?}")))
        .collect::<Result<_>>()?;
    let [start, end, step] = parts[..] else { bail!("expected three fields in {s:?}") };
    if step <= 0.0 || end < start {
        bail!("empty range in {s:?}");
    }
    let n = ((end - start) / step + 1e-9).floor() as usize;
    let name = name.trim().to_owned();
    if name != "rho" && name != "tau" {
        bail!("only rho and tau can be swept, got {name:?}");
    }
    // Round away accumulated float error so labels read 0.6, not 0.6000000000000001.
    Ok((name, (0..=n).map(|k| ((start + k as f64 * step) * 1e9).round() / 1e9).collect()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sweep_spec_has_six_points() {
        let (name, v) = parse_sweep("rho=0:1:0.2").unwrap();
        assert_eq!(name, "rho");
        assert_eq!(v, vec![0.0, 0.2, 0.4, 0.6, 0.8, 1.0]);
        assert!(parse_sweep("phi=0:1:0.5").is_err());
        assert!(parse_sweep("rho=0:1").is_err());
    }

    #[test]
    fn file_overlays_preset() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.toml");
        std::fs::write(&p, "seeds = [7]\n[generator]\nn_users = 50\n[pipeline.rec]\nepochs = 2\n").unwrap();
        let c = ExperimentConfig::load(Preset::Desk, Some(&p)).unwrap();
        assert_eq!(c.seeds, vec![7]);
        assert_eq!(c.generator.n_users, 50);
        assert_eq!(c.generator.n_items, 300);
        assert_eq!(c.pipeline.rec.epochs, 2);
        std::fs::write(&p, "nonsense = 1\n").unwrap();
        assert!(ExperimentConfig::load(Preset::Desk, Some(&p)).is_err());
    }
}
