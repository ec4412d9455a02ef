//! Resolved run configuration and its layering: defaults, then a config
//! file, then `section.key=value` overrides.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};

use crate::dag::DagConfig;
use crate::data::UnpairedDataset;
use crate::discriminator::DiscriminatorConfig;
use crate::error::{Error, Result};
use crate::eval::EvalConfig;
use crate::generator::GeneratorConfig;
use crate::heads::{HeadConfig, PairShape};
use crate::losses::{LossWeights, StagePairSelection};
use crate::nn::InitScheme;
use crate::training::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Directory holding trainA/trainB (and optionally testA/testB).
    pub root: PathBuf,
    pub image_size: usize,
    pub flip: bool,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            root: PathBuf::from("datasets/toy"),
            image_size: 256,
            flip: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    pub root: PathBuf,
    pub run_name: String,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            root: PathBuf::from("runs"),
            run_name: "run".into(),
        }
    }
}

/// Environment variable that replaces `output.root`.
pub const OUTPUT_ROOT_ENV: &str = "STAGEMATCH_OUTPUT_ROOT";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub generator: GeneratorConfig,
    pub discriminator: DiscriminatorConfig,
    pub heads: HeadConfig,
    pub init: InitScheme,
    pub train: TrainConfig,
    pub loss: LossWeights,
    pub dag: DagConfig,
    pub stages: StagePairSelection,
    pub data: DataConfig,
    pub eval: EvalConfig,
    pub output: OutputConfig,
}

impl RunConfig {
    /// Desk-scale preset for 64×64 toy domains.
    pub fn toy() -> Self {
        let mut c = Self::default();
        c.generator.base_width = 16;
        c.generator.image_size = 64;
        c.discriminator.base_width = 16;
        c.heads.latent_dim = 64;
        c.dag.n_patches = 64;
        c.data.image_size = 64;
        c.train.epochs = 20;
        c
    }

    pub fn validate(&self) -> Result<()> {
        self.generator.validate()?;
        self.generator.check_input_size(self.data.image_size, self.data.image_size)?;
        if self.discriminator.grid_size(self.data.image_size).is_none() {
            return Err(Error::Config(format!(
                "data.image_size {} is below the discriminator minimum {}",
                self.data.image_size,
                self.discriminator.min_input_size()
            )));
        }
        if self.generator.input_channels != self.discriminator.input_channels {
            return Err(Error::Config("generator and discriminator channel counts differ".into()));
        }
        self.train.validate()?;
        self.loss.validate()?;
        self.dag.validate()?;
        self.stages.validate(&self.generator)?;
        let s = self.data.image_size;
        for p in &self.stages.pairs {
            let (h, w) = self
                .generator
                .tap_spatial(p.decoder, s, s)
                .ok_or_else(|| Error::Config(format!("unknown tap h{}", p.decoder)))?;
            self.dag.check_grid(h * w)?;
        }
        Ok(())
    }

    /// Channel layout of every configured pair.
    pub fn pair_shapes(&self) -> Vec<PairShape> {
        self.stages
            .pairs
            .iter()
            .map(|&pair| PairShape {
                pair,
                encoder_channels: self.generator.tap_channels(pair.encoder).unwrap_or(0),
                decoder_channels: self.generator.tap_channels(pair.decoder).unwrap_or(0),
            })
            .collect()
    }

    pub fn dataset(&self) -> UnpairedDataset {
        let mut d = UnpairedDataset::from_root(&self.data.root, self.data.image_size, self.train.seed);
        d.flip = self.data.flip;
        d
    }

    /// Run directory, honouring [`OUTPUT_ROOT_ENV`].
    pub fn run_dir(&self) -> PathBuf {
        let root = std::env::var_os(OUTPUT_ROOT_ENV)
            .map(PathBuf::from)
            .unwrap_or_else(|| self.output.root.clone());
        root.join(&self.output.run_name)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    /// sha256 of the canonical JSON form.
    pub fn hash(&self) -> Result<String> {
        Ok(hash_str(&self.to_json()?))
    }
}

pub fn hash_str(s: &str) -> String {
    hex::encode(Sha256::digest(s.as_bytes()))
}

/// Builds a config from a base, a sequence of overlay documents and
/// dotted-key overrides, in that order. Unknown keys are errors.
#[derive(Debug, Clone)]
pub struct ConfigLayers {
    value: Value,
}

impl ConfigLayers {
    pub fn new(base: &RunConfig) -> Result<Self> {
        Ok(Self {
            value: serde_json::to_value(base)?,
        })
    }

    /// Merges a document whose keys may be nested, dotted, or a mix.
    pub fn overlay(&mut self, doc: &Value) -> Result<()> {
        let Value::Object(map) = doc else {
            return Err(Error::Config("a config document must be a mapping".into()));
        };
        for (k, v) in flatten(map) {
            self.set_value(&k, v)?;
        }
        Ok(())
    }

    /// Sets one dotted key from a command-line string. The string is read
    /// as JSON when possible (numbers, booleans, lists) and as text otherwise.
    pub fn set(&mut self, key: &str, raw: &str) -> Result<()> {
        let v = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
        self.set_value(key, v)
    }

    pub fn set_value(&mut self, key: &str, v: Value) -> Result<()> {
        let parts: Vec<&str> = key.split('.').collect();
        let mut cur = &mut self.value;
        for (i, part) in parts.iter().enumerate() {
            let Value::Object(map) = cur else {
                return Err(Error::Config(format!("unknown config key {key}")));
            };
            let slot = map
                .get_mut(*part)
                .ok_or_else(|| Error::Config(format!("unknown config key {key}")))?;
            if i + 1 == parts.len() {
                // whole sub-sections may be replaced by a mapping
                if let (Value::Object(_), Value::Object(sub)) = (&*slot, &v) {
                    for (k, inner) in flatten(sub) {
                        self.set_value(&format!("{key}.{k}"), inner)?;
                    }
                    return Ok(());
                }
                *slot = v;
                return Ok(());
            }
            cur = slot;
        }
        Ok(())
    }

    pub fn resolve(&self) -> Result<RunConfig> {
        serde_json::from_value(self.value.clone())
            .map_err(|e| Error::Config(format!("invalid configuration: {e}")))
    }
}

/// Flattens nested mappings into dotted keys; lists and scalars are leaves.
pub fn flatten(map: &Map<String, Value>) -> Vec<(String, Value)> {
    let mut out = Vec::new();
    for (k, v) in map {
        match v {
            Value::Object(inner) if !inner.is_empty() && !is_tagged(inner) => {
                for (ik, iv) in flatten(inner) {
                    out.push((format!("{k}.{ik}"), iv));
                }
            }
            _ => out.push((k.clone(), v.clone())),
        }
    }
    out
}

fn is_tagged(map: &Map<String, Value>) -> bool {
    // tagged enums are set as a unit so the variant and its fields agree
    map.contains_key("kind")
}
