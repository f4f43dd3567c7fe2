//! Run configuration, stored as flat JSON with dotted keys.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};

use crate::data::{BiasSpec, MaskPolicy, NoiseSpec, SplitSpec, SynthConfig};
use crate::error::{Error, Result};
use crate::heads::LossWeights;
use crate::model::{FusionKind, ModelConfig};
use crate::regularizers::RegularizerMode;

/// Noise levels swept per modality.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseLadder {
    pub visual: Vec<f64>,
    pub text: Vec<f64>,
}

impl Default for NoiseLadder {
    fn default() -> Self {
        Self {
            visual: vec![0.0, 0.25, 0.5, 1.0, 2.0],
            text: vec![0.0, 0.25, 0.5, 0.75, 1.0],
        }
    }
}

impl NoiseLadder {
    pub fn validate(&self) -> Result<()> {
        if self.visual.is_empty() || self.text.is_empty() {
            return Err(Error::Config("noise ladders must be non-empty".into()));
        }
        for &s in &self.visual {
            NoiseSpec::visual(s).validate()?;
        }
        for &r in &self.text {
            NoiseSpec::text(r).validate()?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// First stage: reconstruction active.
    pub qr_epochs: usize,
    pub qr_lr: f64,
    /// Second stage: reconstruction head frozen.
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub mask_policy: MaskPolicy,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            qr_epochs: 30,
            qr_lr: 2e-3,
            epochs: 50,
            lr: 2e-3,
            batch_size: 32,
            mask_policy: MaskPolicy::OneNoun,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, lr) in [("qr_lr", self.qr_lr), ("lr", self.lr)] {
            if !(lr > 0.0 && lr <= 1.0) {
                return Err(Error::Config(format!("train.{name} must lie in (0, 1]; got {lr}")));
            }
        }
        if self.qr_epochs > 100_000 || self.epochs > 100_000 {
            return Err(Error::Config("epoch counts above 100000 are not supported".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be >= 1".into()));
        }
        if let MaskPolicy::Ratio(r) = self.mask_policy {
            if !(0.0..=1.0).contains(&r) {
                return Err(Error::Config(format!("mask ratio must lie in [0, 1]; got {r}")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Seeds model initialisation, shuffling and masking.
    pub seed: u64,
    pub out_dir: String,
    pub synth: SynthConfig,
    pub bias: BiasSpec,
    pub split: SplitSpec,
    pub noise: NoiseLadder,
    pub model: ModelConfig,
    pub loss: LossWeights,
    pub mode: RegularizerMode,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out_dir: "out".into(),
            synth: SynthConfig::default(),
            bias: BiasSpec::default(),
            split: SplitSpec::default(),
            noise: NoiseLadder::default(),
            model: ModelConfig::default(),
            loss: LossWeights::default(),
            mode: RegularizerMode::Geom,
            train: TrainConfig::default(),
        }
    }
}

impl RunConfig {
    /// The concatenation baseline: no fusion stack, no reconstruction,
    /// vanilla regularizer.
    pub fn baseline() -> Self {
        Self {
            model: ModelConfig {
                fusion: FusionKind::Concat,
                qr: false,
                ..ModelConfig::default()
            },
            mode: RegularizerMode::Vanilla,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        self.bias.validate()?;
        self.split.validate()?;
        self.noise.validate()?;
        self.model.validate()?;
        self.loss.validate()?;
        self.train.validate()?;
        if self.model.n_rff > 16 {
            return Err(Error::Config(format!("model.n_rff must be <= 16; got {}", self.model.n_rff)));
        }
        Ok(())
    }

    /// Sets the run seed and the data seed together.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.synth.seed = seed;
        self
    }

    pub fn to_flat(&self) -> Result<BTreeMap<String, Value>> {
        let mut flat = BTreeMap::new();
        flatten("", &serde_json::to_value(self)?, &mut flat);
        Ok(flat)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.to_flat()?)? + "\n")
    }

    /// Parses flat dotted JSON. Missing keys take defaults; unknown keys are
    /// errors.
    pub fn from_json(text: &str) -> Result<Self> {
        let flat: Map<String, Value> = serde_json::from_str(text)?;
        let nested = unflatten(flat)?;
        let cfg: RunConfig = serde_json::from_value(nested).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    /// Hash of everything except the output directory.
    pub fn hash(&self) -> Result<u64> {
        let mut flat = self.to_flat()?;
        flat.remove("out_dir");
        let digest = Sha256::digest(serde_json::to_vec(&flat)?);
        Ok(u64::from_le_bytes(digest[..8].try_into().expect("8 bytes")))
    }
}

fn flatten(prefix: &str, v: &Value, out: &mut BTreeMap<String, Value>) {
    match v {
        Value::Object(map) if !map.is_empty() => {
            for (k, child) in map {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, child, out);
            }
        }
        _ => {
            out.insert(prefix.to_string(), v.clone());
        }
    }
}

fn unflatten(flat: Map<String, Value>) -> Result<Value> {
    let mut root = Map::new();
    for (key, value) in flat {
        let parts: Vec<&str> = key.split('.').collect();
        if parts.iter().any(|p| p.is_empty()) {
            return Err(Error::Config(format!("malformed config key {key:?}")));
        }
        let mut node = &mut root;
        for part in &parts[..parts.len() - 1] {
            let entry = node.entry(part.to_string()).or_insert_with(|| Value::Object(Map::new()));
            node = entry
                .as_object_mut()
                .ok_or_else(|| Error::Config(format!("config key {key:?} conflicts with a scalar key")))?;
        }
        let leaf = parts[parts.len() - 1];
        if node.insert(leaf.to_string(), value).is_some() {
            return Err(Error::Config(format!("config key {key:?} conflicts with a nested key")));
        }
    }
    Ok(Value::Object(root))
}
