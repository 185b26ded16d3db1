//! Sectioned TOML configuration for every lab command.
//!
//! ```toml
//! [data]      # toy dataset
//! [model]     # micro ViT shape
//! [train]     # teacher training
//! [synth]     # image synthesis
//! [distill]   # quantization-aware distillation
//! [corr]      # head-quantization metric study
//! [motiv]     # coherency-stratified subsets
//! [sweep]     # bit-width sensitivity
//! ```
//!
//! Missing sections and keys take the desk-scale defaults of
//! [`LabConfig::default`].

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::data::{ToyConfig, IMAGE_SIDE};
use crate::distill::{CorrStudyConfig, DistillConfig};
use crate::error::{LabError, Result};
use crate::quant::BitWidths;
use crate::synthesis::SynthConfig;
use crate::train::TrainConfig;
use crate::vit::ViTConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MotivConfig {
    /// One base pool and one coherent set are synthesized per seed.
    pub seeds: Vec<u64>,
    pub base_pool: usize,
    pub coherent_pool: usize,
    /// Share of each class taken for the high and low subsets.
    pub fraction: f64,
    /// `L_HAD` weight while training the subset students.
    pub gamma: f64,
    pub bits: BitWidths,
    pub bins: usize,
}

impl Default for MotivConfig {
    fn default() -> Self {
        MotivConfig {
            seeds: vec![0, 1, 2],
            base_pool: 512,
            coherent_pool: 256,
            fraction: 0.25,
            gamma: 0.0,
            bits: BitWidths { weight: 4, act: 4 },
            bins: 20,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    /// Inclusive bit range; the lower end is the shared starting point.
    pub k_min: u8,
    pub k_max: u8,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig { k_min: 4, k_max: 8 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabConfig {
    pub data: ToyConfig,
    pub model: ViTConfig,
    pub train: TrainConfig,
    pub synth: SynthConfig,
    pub distill: DistillConfig,
    pub corr: CorrStudyConfig,
    pub motiv: MotivConfig,
    pub sweep: SweepConfig,
}

impl Default for LabConfig {
    /// Desk-scale preset: a few minutes per command on one core.
    fn default() -> Self {
        LabConfig {
            data: ToyConfig::default(),
            model: ViTConfig::default(),
            train: TrainConfig::default(),
            synth: SynthConfig {
                steps_per_batch: 200,
                ..SynthConfig::default()
            },
            distill: DistillConfig {
                epochs: 10,
                ..DistillConfig::default()
            },
            corr: CorrStudyConfig::default(),
            motiv: MotivConfig::default(),
            sweep: SweepConfig::default(),
        }
    }
}

const SECTIONS: [&str; 8] = ["data", "model", "train", "synth", "distill", "corr", "motiv", "sweep"];

impl LabConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let table: toml::Table = text.parse().map_err(|e: toml::de::Error| {
            let key = match e.span() {
                Some(span) => format!("line {}", text[..span.start].matches('\n').count() + 1),
                None => "<document>".to_string(),
            };
            LabError::config(key, e.message().trim())
        })?;
        if let Some(k) = table.keys().find(|k| !SECTIONS.contains(&k.as_str())) {
            return Err(LabError::config(k.clone(), "unknown section"));
        }
        let d = LabConfig::default();
        let cfg = LabConfig {
            data: section(&table, "data", d.data)?,
            model: section(&table, "model", d.model)?,
            train: section(&table, "train", d.train)?,
            synth: section(&table, "synth", d.synth)?,
            distill: section(&table, "distill", d.distill)?,
            corr: section(&table, "corr", d.corr)?,
            motiv: section(&table, "motiv", d.motiv)?,
            sweep: section(&table, "sweep", d.sweep)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config is always representable")
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.synth.validate()?;
        self.distill.validate()?;
        if self.model.image_side != IMAGE_SIDE || self.model.channels != 1 {
            return Err(LabError::config(
                "model.image_side",
                format!("toy images are 1x{IMAGE_SIDE}x{IMAGE_SIDE}"),
            ));
        }
        if self.model.classes != self.data.classes {
            return Err(LabError::config("model.classes", "must equal data.classes"));
        }
        if self.train.epochs == 0 || self.train.batch == 0 {
            return Err(LabError::config("train.epochs", "epochs and batch must be positive"));
        }
        if self.corr.n_configs < 2 {
            return Err(LabError::config("corr.n_configs", "need at least 2 settings"));
        }
        if self.corr.batch == 0 {
            return Err(LabError::config("corr.batch", "must be at least 1"));
        }
        let m = &self.motiv;
        if m.seeds.is_empty() {
            return Err(LabError::config("motiv.seeds", "need at least one seed"));
        }
        if !(m.fraction > 0.0 && m.fraction <= 0.5) {
            return Err(LabError::config("motiv.fraction", "must lie in (0, 0.5]"));
        }
        if m.bins == 0 {
            return Err(LabError::config("motiv.bins", "must be at least 1"));
        }
        if !(m.gamma >= 0.0) {
            return Err(LabError::config("motiv.gamma", "must be non-negative"));
        }
        let s = &self.sweep;
        if s.k_min < 2 || s.k_min >= s.k_max || s.k_max > 16 {
            return Err(LabError::config("sweep.k_min", "need 2 <= k_min < k_max <= 16"));
        }
        Ok(())
    }
}

/// Deserializes one section over the preset values; on failure, re-tries keys
/// one at a time to name the offending one.
fn section<T: DeserializeOwned + Serialize>(table: &toml::Table, name: &str, preset: T) -> Result<T> {
    let Some(value) = table.get(name) else {
        return Ok(preset);
    };
    let Some(user) = value.as_table() else {
        return Err(LabError::config(name, "expected a table"));
    };
    let base = match toml::Value::try_from(&preset) {
        Ok(toml::Value::Table(t)) => t,
        _ => unreachable!("config sections serialize to tables"),
    };
    let overlay = |keys: &mut dyn Iterator<Item = (&String, &toml::Value)>| {
        let mut t = base.clone();
        for (k, v) in keys {
            t.insert(k.clone(), v.clone());
        }
        toml::Value::Table(t).try_into::<T>()
    };
    match overlay(&mut user.iter()) {
        Ok(v) => Ok(v),
        Err(e) => {
            for kv in user {
                if let Err(e) = overlay(&mut std::iter::once(kv)) {
                    return Err(LabError::config(format!("{name}.{}", kv.0), e.message().trim()));
                }
            }
            Err(LabError::config(name, e.message().trim()))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn key_of(text: &str) -> String {
        match LabConfig::from_toml_str(text) {
            Err(LabError::Config { key, .. }) => key,
            other => panic!("expected a config error, got {other:?}"),
        }
    }

    #[test]
    fn empty_document_is_default() {
        assert_eq!(LabConfig::from_toml_str("").unwrap(), LabConfig::default());
    }

    #[test]
    fn partial_sections_merge_with_defaults() {
        let c = LabConfig::from_toml_str("[distill]\ngamma = 0.5\nbits = \"W8A8\"\n[synth]\nalpha = 2.0\n").unwrap();
        assert_eq!(c.distill.gamma, 0.5);
        assert_eq!(c.distill.bits, BitWidths { weight: 8, act: 8 });
        assert_eq!(c.distill.epochs, LabConfig::default().distill.epochs);
        assert_eq!(c.synth.alpha, 2.0);
        assert_eq!(c.synth.steps_per_batch, 200);
    }

    #[test]
    fn echo_roundtrips() {
        let mut c = LabConfig::default();
        c.distill.mode = crate::quant::QuantMode::Lsq;
        c.motiv.seeds = vec![4, 5];
        assert_eq!(LabConfig::from_toml_str(&c.to_toml_string()).unwrap(), c);
    }

    #[test]
    fn names_the_offending_key() {
        assert_eq!(key_of("[synth]\nalpha = \"lots\"\n"), "synth.alpha");
        assert_eq!(key_of("[distill]\nbits = \"W4B4\"\n"), "distill.bits");
        assert_eq!(key_of("[distill]\ngama = 1.0\n"), "distill.gama");
        assert_eq!(key_of("[bogus]\nx = 1\n"), "bogus");
        assert_eq!(key_of("[synth]\nalpha = -1.0\n"), "synth.alpha");
        assert_eq!(key_of("[model]\nheads = 5\n"), "model.heads");
        assert_eq!(key_of("[synth\nalpha = 1\n"), "line 1");
        assert_eq!(key_of("synth = 3\n"), "synth");
    }
}
