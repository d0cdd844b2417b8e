//! Network checkpoints: parameters in safetensors format with the network kind,
//! the serialized config and its fingerprint stored in the file metadata.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use serde::{de::DeserializeOwned, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// SHA-256 (hex) of `kind` and the canonical JSON config.
pub fn fingerprint(kind: &str, config_json: &str) -> String {
    let mut h = Sha256::new();
    h.update(kind.as_bytes());
    h.update([0u8]);
    h.update(config_json.as_bytes());
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone)]
pub struct NetworkCheckpoint {
    pub kind: String,
    pub config_json: String,
    pub fingerprint: String,
    /// Growth stage (progressive GAN) or training phase index.
    pub stage: usize,
    /// Optimizer steps taken so far.
    pub step: usize,
    /// Free-form provenance (data sources, phases).
    pub metadata: BTreeMap<String, String>,
    pub tensors: BTreeMap<String, Tensor>,
}

impl NetworkCheckpoint {
    pub fn new<C: Serialize>(
        kind: &str,
        config: &C,
        stage: usize,
        step: usize,
        tensors: BTreeMap<String, Tensor>,
    ) -> Result<Self> {
        let config_json = serde_json::to_string(config)?;
        Ok(Self {
            kind: kind.to_string(),
            fingerprint: fingerprint(kind, &config_json),
            config_json,
            stage,
            step,
            metadata: BTreeMap::new(),
            tensors: tensors
                .into_iter()
                .map(|(k, t)| Ok((k, t.to_dtype(DType::F32)?.detach())))
                .collect::<Result<_>>()?,
        })
    }

    pub fn config<C: DeserializeOwned>(&self) -> Result<C> {
        Ok(serde_json::from_str(&self.config_json)?)
    }

    /// Fails unless this checkpoint was produced for `kind` with exactly `config`.
    pub fn expect<C: Serialize>(&self, kind: &str, config: &C) -> Result<()> {
        self.expect_kind(kind)?;
        let json = serde_json::to_string(config)?;
        let fp = fingerprint(kind, &json);
        if fp != self.fingerprint {
            return Err(Error::State(format!(
                "checkpoint fingerprint {} does not match config fingerprint {fp}",
                &self.fingerprint[..12.min(self.fingerprint.len())]
            )));
        }
        Ok(())
    }

    pub fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.kind != kind {
            return Err(Error::State(format!("expected a `{kind}` checkpoint, found `{}`", self.kind)));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut meta: HashMap<String, String> = HashMap::new();
        meta.insert("kind".into(), self.kind.clone());
        meta.insert("config".into(), self.config_json.clone());
        meta.insert("fingerprint".into(), self.fingerprint.clone());
        meta.insert("stage".into(), self.stage.to_string());
        meta.insert("step".into(), self.step.to_string());
        for (k, v) in &self.metadata {
            meta.insert(format!("meta.{k}"), v.clone());
        }
        let data: Vec<(&str, &Tensor)> = self.tensors.iter().map(|(k, v)| (k.as_str(), v)).collect();
        Ok(safetensors::serialize(data, Some(meta))?)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (_, header) = safetensors::SafeTensors::read_metadata(bytes)?;
        let meta = header
            .metadata()
            .clone()
            .ok_or_else(|| Error::State("checkpoint has no metadata".into()))?;
        let get = |k: &str| meta.get(k).cloned().ok_or_else(|| Error::State(format!("checkpoint metadata lacks `{k}`")));
        let kind = get("kind")?;
        let config_json = get("config")?;
        let fp = get("fingerprint")?;
        if fingerprint(&kind, &config_json) != fp {
            return Err(Error::State("checkpoint fingerprint does not match its embedded config".into()));
        }
        let parse = |k: &str| -> Result<usize> {
            get(k)?.parse().map_err(|_| Error::State(format!("checkpoint metadata `{k}` is not an integer")))
        };
        let tensors: BTreeMap<String, Tensor> =
            candle_core::safetensors::load_buffer(bytes, &Device::Cpu)?.into_iter().collect();
        let metadata = meta
            .iter()
            .filter_map(|(k, v)| k.strip_prefix("meta.").map(|s| (s.to_string(), v.clone())))
            .collect();
        Ok(Self { kind, config_json, fingerprint: fp, stage: parse("stage")?, step: parse("step")?, metadata, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        let bytes = self.to_bytes()?;
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Parameters equal element for element (used to verify zero-step training).
    pub fn same_parameters(&self, other: &NetworkCheckpoint) -> Result<bool> {
        if self.tensors.len() != other.tensors.len() {
            return Ok(false);
        }
        for (k, a) in &self.tensors {
            let Some(b) = other.tensors.get(k) else { return Ok(false) };
            if a.dims() != b.dims() {
                return Ok(false);
            }
            let va: Vec<f32> = a.flatten_all()?.to_vec1()?;
            let vb: Vec<f32> = b.flatten_all()?.to_vec1()?;
            if va != vb {
                return Ok(false);
            }
        }
        Ok(true)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[derive(Serialize, serde::Deserialize, PartialEq, Debug)]
    struct Cfg {
        width: usize,
    }

    #[test]
    fn round_trip_and_fingerprint() {
        let mut tensors = BTreeMap::new();
        tensors.insert("a".to_string(), Tensor::new(&[1.0f32, 2.0, 3.0], &Device::Cpu).unwrap());
        let mut ck = NetworkCheckpoint::new("test", &Cfg { width: 4 }, 2, 17, tensors).unwrap();
        ck.metadata.insert("source".into(), "synthetic:three_stage".into());
        let back = NetworkCheckpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap();
        assert_eq!(back.step, 17);
        assert_eq!(back.stage, 2);
        assert_eq!(back.metadata["source"], "synthetic:three_stage");
        assert!(back.same_parameters(&ck).unwrap());
        assert_eq!(back.config::<Cfg>().unwrap(), Cfg { width: 4 });
        back.expect("test", &Cfg { width: 4 }).unwrap();
        assert!(back.expect("test", &Cfg { width: 5 }).is_err());
        assert!(back.expect("other", &Cfg { width: 4 }).is_err());
    }
}
