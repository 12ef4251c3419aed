//! Run configuration: every tunable of every stage in one JSON document.
//!
//! Resolution order: preset, then the `--config` file (deep-merged, unknown
//! keys rejected), then command-line flags.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use strokeseg_core::loss::LossConfig;
use strokeseg_core::network::UNetConfig;
use strokeseg_core::optim::OptimConfig;
use strokeseg_core::phantom::PhantomConfig;
use strokeseg_core::preprocess::PreprocessConfig;
use strokeseg_core::sampling::{GridSpec, SamplerConfig};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    /// 3 levels, 8 base channels, 16^3 patches, 2000 iterations.
    Desk,
    /// 4 levels, 32 base channels, 128^3 patches, 40000 iterations.
    Paper,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalOptions {
    pub threshold: f32,
    /// Patches per forward pass during sliding-window inference.
    pub batch: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            threshold: 0.5,
            batch: 4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub preset: Preset,
    /// Master seed: network initialization and fold assignment.
    pub seed: u64,
    pub folds: usize,
    pub phantom: PhantomConfig,
    pub preprocess: PreprocessConfig,
    pub sampler: SamplerConfig,
    pub model: UNetConfig,
    pub optim: OptimConfig,
    /// `n0`/`n1` are recomputed from the training fold at train time.
    pub loss: LossConfig,
    pub grid: GridSpec,
    pub eval: EvalOptions,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::preset(Preset::Desk)
    }
}

impl RunConfig {
    pub fn preset(p: Preset) -> Self {
        match p {
            Preset::Desk => Self {
                preset: p,
                seed: 0,
                folds: 5,
                phantom: PhantomConfig::default(),
                preprocess: PreprocessConfig::default(),
                sampler: SamplerConfig::default(),
                model: UNetConfig::desk(),
                optim: OptimConfig {
                    lr0: 2e-3,
                    lr_floor: 2.5e-4,
                    total_iterations: 2000,
                    ..OptimConfig::default()
                },
                loss: LossConfig::default(),
                grid: GridSpec {
                    patch_size: 16,
                    overlap: 0.25,
                },
                eval: EvalOptions::default(),
            },
            Preset::Paper => Self {
                preset: p,
                sampler: SamplerConfig::paper(),
                model: UNetConfig::paper(),
                optim: OptimConfig::default(),
                grid: GridSpec {
                    patch_size: 128,
                    overlap: 0.25,
                },
                eval: EvalOptions {
                    batch: 1,
                    ..EvalOptions::default()
                },
                ..Self::preset(Preset::Desk)
            },
        }
    }

    /// Preset defaults overlaid with the JSON document `overlay`.
    pub fn from_overlay(preset: Preset, overlay: Option<Value>) -> Result<Self> {
        let mut base = serde_json::to_value(Self::preset(preset))?;
        if let Some(o) = overlay {
            merge(&mut base, o);
        }
        let cfg: Self = serde_json::from_value(base).map_err(|e| Error::Config(e.to_string()))?;
        Ok(cfg)
    }

    /// Reads `path`; its `"preset"` key (if any) selects the base unless
    /// `preset` is given explicitly.
    pub fn load(path: Option<&Path>, preset: Option<Preset>) -> Result<Self> {
        let overlay = match path {
            Some(p) => {
                let text = fs::read_to_string(p)
                    .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
                let v: Value = serde_json::from_str(&text)
                    .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
                if !v.is_object() {
                    return Err(Error::Config(format!(
                        "{}: expected a JSON object",
                        p.display()
                    )));
                }
                Some(v)
            }
            None => None,
        };
        let from_file = overlay
            .as_ref()
            .and_then(|v| v.get("preset"))
            .map(|p| serde_json::from_value::<Preset>(p.clone()))
            .transpose()
            .map_err(|e| Error::Config(e.to_string()))?;
        let chosen = preset.or(from_file).unwrap_or(Preset::Desk);
        let mut overlay = overlay;
        if let (Some(explicit), Some(Value::Object(o))) = (preset, overlay.as_mut()) {
            o.insert("preset".into(), serde_json::to_value(explicit)?);
        }
        let cfg = Self::from_overlay(chosen, overlay)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Sets every stage seed from one value.
    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.sampler.seed = seed;
        self.phantom.seed = seed;
    }

    pub fn validate(&self) -> Result<()> {
        let cfg = |r: strokeseg_core::Result<()>| r.map_err(|e| Error::Config(e.to_string()));
        cfg(self.phantom.validate())?;
        cfg(self.preprocess.validate())?;
        cfg(self.sampler.validate())?;
        cfg(self.model.validate())?;
        cfg(self.optim.validate())?;
        cfg(self.grid.validate())?;
        if !(self.loss.eps > 0.0) {
            return Err(Error::Config("loss.eps must be positive".into()));
        }
        if self.sampler.patch_size != self.model.patch_size
            || self.grid.patch_size != self.model.patch_size
        {
            return Err(Error::Config(format!(
                "patch sizes differ: model {}, sampler {}, grid {}",
                self.model.patch_size, self.sampler.patch_size, self.grid.patch_size
            )));
        }
        if self.folds < 2 {
            return Err(Error::Config("folds must be at least 2".into()));
        }
        if !(0.0..=1.0).contains(&self.eval.threshold) || self.eval.batch == 0 {
            return Err(Error::Config(
                "eval.threshold must lie in [0, 1] and eval.batch be positive".into(),
            ));
        }
        Ok(())
    }
}

fn merge(base: &mut Value, overlay: Value) {
    match (base, overlay) {
        (Value::Object(b), Value::Object(o)) => {
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

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn presets() {
        let d = RunConfig::preset(Preset::Desk);
        assert_eq!(
            (d.model.levels, d.model.base_channels, d.model.patch_size),
            (3, 8, 16)
        );
        assert_eq!(d.optim.total_iterations, 2000);
        let p = RunConfig::preset(Preset::Paper);
        assert_eq!(p.model.patch_size, 128);
        assert_eq!(p.optim.total_iterations, 40_000);
        assert_eq!(p.optim.batch_size, 2);
        assert_eq!(p.sampler.patches_per_patient, 32);
        assert_eq!(p.optim.lr0, 1e-4);
        p.validate().unwrap();
        d.validate().unwrap();
    }

    #[test]
    fn overlay_merges_deeply_and_rejects_unknown_keys() {
        let c = RunConfig::from_overlay(
            Preset::Desk,
            Some(json!({"optim": {"total_iterations": 7}})),
        )
        .unwrap();
        assert_eq!(c.optim.total_iterations, 7);
        assert_eq!(c.optim.lr0, RunConfig::preset(Preset::Desk).optim.lr0);
        assert!(
            RunConfig::from_overlay(Preset::Desk, Some(json!({"optim": {"lr": 1.0}}))).is_err()
        );
        assert!(RunConfig::from_overlay(Preset::Desk, Some(json!({"bogus": 1}))).is_err());
    }

    #[test]
    fn round_trips_through_json() {
        let c = RunConfig::preset(Preset::Paper);
        let back: RunConfig = serde_json::from_str(&serde_json::to_string(&c).unwrap()).unwrap();
        assert_eq!(back, c);
    }
}
