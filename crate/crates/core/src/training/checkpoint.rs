//! Single-file checkpoints: a safetensors container whose tensors hold
//! every network parameter and optimizer moment, and whose header
//! metadata holds the resolved config, progress and rng state.
//!
//! Tensor names:
//! - `generator.*`, `discriminator.*`, `heads.*` for parameters
//! - `optim.{g,d,heads}.{m,v}.<parameter name>` for Adam moments
//!
//! Metadata keys: `format`, `version`, `config` (JSON), `config_hash`
//! (sha256 of `config`), `iteration`, `total_iterations`, `tag`, `rng`
//! (JSON) and `optim_steps` (JSON map group → step count).

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use safetensors::tensor::TensorView;
use safetensors::{Dtype, SafeTensors};
use serde::{Deserialize, Serialize};

use crate::config::{hash_str, RunConfig};
use crate::error::{Error, Result};

pub const FORMAT: &str = "stagematch-checkpoint";
pub const VERSION: u32 = 1;

/// Complete position of a ChaCha8 stream.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: String,
    pub stream: u64,
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: hex::encode(rng.get_seed()),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        let bytes = hex::decode(&self.seed)
            .map_err(|e| Error::Checkpoint(format!("rng seed: {e}")))?;
        let seed: [u8; 32] = bytes
            .try_into()
            .map_err(|_| Error::Checkpoint("rng seed must be 32 bytes".into()))?;
        let pos: u128 = self
            .word_pos
            .parse()
            .map_err(|e| Error::Checkpoint(format!("rng position: {e}")))?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(pos);
        Ok(rng)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointMeta {
    pub config_json: String,
    pub config_hash: String,
    pub iteration: u64,
    pub total_iterations: u64,
    pub tag: String,
    pub rng: RngState,
    pub optim_steps: BTreeMap<String, u64>,
}

impl CheckpointMeta {
    pub fn config(&self) -> Result<RunConfig> {
        serde_json::from_str(&self.config_json)
            .map_err(|e| Error::Checkpoint(format!("stored config does not parse: {e}")))
    }

    /// Recomputes the config hash and compares it with the stored one.
    pub fn verify_hash(&self) -> Result<()> {
        let actual = hash_str(&self.config_json);
        if actual != self.config_hash {
            return Err(Error::Checkpoint(format!(
                "config hash mismatch: stored {} but config hashes to {actual}",
                self.config_hash
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub tensors: BTreeMap<String, Tensor>,
    pub meta: CheckpointMeta,
}

fn tensor_bytes(t: &Tensor) -> Result<Vec<u8>> {
    let v = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
    Ok(v.iter().flat_map(|x| x.to_le_bytes()).collect())
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        let bytes: Vec<(String, Vec<usize>, Vec<u8>)> = self
            .tensors
            .iter()
            .map(|(k, t)| Ok((k.clone(), t.dims().to_vec(), tensor_bytes(t)?)))
            .collect::<Result<_>>()?;
        let views = bytes
            .iter()
            .map(|(k, shape, b)| {
                TensorView::new(Dtype::F32, shape.clone(), b)
                    .map(|v| (k.clone(), v))
                    .map_err(|e| Error::Checkpoint(format!("tensor {k}: {e}")))
            })
            .collect::<Result<Vec<_>>>()?;
        let m = &self.meta;
        let mut meta = HashMap::new();
        meta.insert("format".to_string(), FORMAT.to_string());
        meta.insert("version".to_string(), VERSION.to_string());
        meta.insert("config".to_string(), m.config_json.clone());
        meta.insert("config_hash".to_string(), m.config_hash.clone());
        meta.insert("iteration".to_string(), m.iteration.to_string());
        meta.insert("total_iterations".to_string(), m.total_iterations.to_string());
        meta.insert("tag".to_string(), m.tag.clone());
        meta.insert("rng".to_string(), serde_json::to_string(&m.rng)?);
        meta.insert("optim_steps".to_string(), serde_json::to_string(&m.optim_steps)?);
        // write then rename so an interrupted save never leaves a torn file
        let tmp = path.with_extension("safetensors.tmp");
        safetensors::serialize_to_file(views, Some(meta), &tmp)
            .map_err(|e| Error::Checkpoint(format!("writing {}: {e}", tmp.display())))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
        let bad = |what: String| Error::Checkpoint(format!("{}: {what}", path.display()));
        let (_, header) = SafeTensors::read_metadata(&buf).map_err(|e| bad(e.to_string()))?;
        let meta = header
            .metadata()
            .clone()
            .ok_or_else(|| bad("no metadata header".into()))?;
        let get = |k: &str| meta.get(k).cloned().ok_or_else(|| bad(format!("missing metadata key {k}")));
        if get("format")? != FORMAT {
            return Err(bad(format!("not a {FORMAT} file")));
        }
        let version: u32 = get("version")?.parse().map_err(|_| bad("bad version".into()))?;
        if version != VERSION {
            return Err(bad(format!("unsupported version {version}, expected {VERSION}")));
        }
        let num = |k: &str| -> Result<u64> { get(k)?.parse().map_err(|_| bad(format!("bad {k}"))) };
        let meta = CheckpointMeta {
            config_json: get("config")?,
            config_hash: get("config_hash")?,
            iteration: num("iteration")?,
            total_iterations: num("total_iterations")?,
            tag: get("tag")?,
            rng: serde_json::from_str(&get("rng")?)?,
            optim_steps: serde_json::from_str(&get("optim_steps")?)?,
        };
        let st = SafeTensors::deserialize(&buf).map_err(|e| bad(e.to_string()))?;
        let mut tensors = BTreeMap::new();
        for (name, view) in st.tensors() {
            if view.dtype() != Dtype::F32 {
                return Err(bad(format!("tensor {name} is {:?}, expected F32", view.dtype())));
            }
            let values: Vec<f32> = view
                .data()
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            tensors.insert(name, Tensor::from_vec(values, view.shape(), &Device::Cpu)?);
        }
        Ok(Self { tensors, meta })
    }

    /// Tensors whose name starts with `prefix.`.
    pub fn component(&self, prefix: &str) -> BTreeMap<String, Tensor> {
        let p = format!("{prefix}.");
        self.tensors
            .iter()
            .filter(|(k, _)| k.starts_with(&p))
            .map(|(k, t)| (k.clone(), t.clone()))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn rng_state_round_trip() -> Result<()> {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let _: u64 = rng.random();
        let _: u32 = rng.random();
        let state = RngState::capture(&rng);
        let mut restored = state.restore()?;
        for _ in 0..10 {
            assert_eq!(rng.random::<u64>(), restored.random::<u64>());
        }
        Ok(())
    }

    #[test]
    fn save_load_round_trip() -> Result<()> {
        let dir = tempfile::tempdir().map_err(|e| Error::io("tempdir", e))?;
        let path = dir.path().join("c.safetensors");
        let cfg = RunConfig::toy();
        let json = cfg.to_json()?;
        let mut tensors = BTreeMap::new();
        tensors.insert("generator.w".to_string(), Tensor::new(&[[1.5f32, -2.0]], &Device::Cpu)?);
        let ck = Checkpoint {
            tensors,
            meta: CheckpointMeta {
                config_hash: hash_str(&json),
                config_json: json,
                iteration: 7,
                total_iterations: 9,
                tag: "final".into(),
                rng: RngState::capture(&ChaCha8Rng::seed_from_u64(1)),
                optim_steps: [("g".to_string(), 7u64)].into_iter().collect(),
            },
        };
        ck.save(&path)?;
        let back = Checkpoint::load(&path)?;
        assert_eq!(back.meta, ck.meta);
        back.meta.verify_hash()?;
        assert_eq!(back.meta.config()?, cfg);
        assert_eq!(back.tensors["generator.w"].to_vec2::<f32>()?, vec![vec![1.5, -2.0]]);
        assert_eq!(back.component("generator").len(), 1);
        assert!(back.component("heads").is_empty());
        Ok(())
    }
}
