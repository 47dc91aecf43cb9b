//! Single-file checkpoint archive.
//!
//! Layout: the 8-byte magic `MTTSCKPT`, a little-endian `u32` format
//! version, a little-endian `u64` header length, the JSON header, then the
//! flat little-endian `f64` payload. The header carries the model config,
//! the tensor manifest (name, partition, shape, payload offset), the
//! speaker-id → row map and free-form run info.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{EmbMode, FastSpeech, ModelConfig, ModelParameters, ParamMeta, ParamSet, Partition};
use crate::error::{Error, Result};
use crate::io::{sha256_hex, write_atomic};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"MTTSCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

/// A named tensor outside the model partitions (optimizer moments, speaker
/// encoder weights).
#[derive(Clone, Debug, PartialEq)]
pub struct ExtraTensor {
    pub name: String,
    pub value: Tensor<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model_config: ModelConfig,
    pub params: ModelParameters,
    /// Approach tag, masks, training state; owned by the writer.
    pub info: BTreeMap<String, serde_json::Value>,
    pub extra: Vec<ExtraTensor>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    partition: Option<Partition>,
    shape: [usize; 2],
    offset: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format_version: u32,
    model_config: ModelConfig,
    emb_mode: EmbMode,
    speaker_rows: Vec<(u32, usize)>,
    tensors: Vec<TensorEntry>,
    extra: Vec<TensorEntry>,
    info: BTreeMap<String, serde_json::Value>,
}

impl Checkpoint {
    pub fn info_str(&self, key: &str) -> Option<&str> {
        self.info.get(key).and_then(|v| v.as_str())
    }

    pub fn extra(&self, name: &str) -> Option<&Tensor<f64>> {
        self.extra.iter().find(|e| e.name == name).map(|e| &e.value)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut payload: Vec<u8> = Vec::new();
        let mut offset = 0;
        let mut entry = |name: &str, partition: Option<Partition>, t: &Tensor<f64>, payload: &mut Vec<u8>| {
            for v in &t.data {
                payload.extend_from_slice(&v.to_le_bytes());
            }
            let e = TensorEntry { name: name.to_string(), partition, shape: [t.rows, t.cols], offset };
            offset += t.len();
            e
        };
        let tensors = self
            .params
            .set
            .meta()
            .iter()
            .zip(&self.params.set.values)
            .map(|(m, t)| entry(&m.name, Some(m.partition), t, &mut payload))
            .collect();
        let extra = self.extra.iter().map(|e| entry(&e.name, None, &e.value, &mut payload)).collect();
        let header = Header {
            format_version: CHECKPOINT_VERSION,
            model_config: self.model_config.clone(),
            emb_mode: self.params.emb_mode,
            speaker_rows: self.params.speaker_rows.iter().map(|(&k, &v)| (k, v)).collect(),
            tensors,
            extra,
            info: self.info.clone(),
        };
        let header = serde_json::to_vec(&header).map_err(|e| Error::Input(format!("checkpoint header: {e}")))?;
        let mut out = Vec::with_capacity(20 + header.len() + payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&payload);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        let perr = |msg: String| Error::Parse { path: origin.to_path_buf(), line: 0, msg };
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(perr("not a checkpoint archive".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(perr(format!("unsupported checkpoint version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let body = &bytes[20..];
        if body.len() < hlen {
            return Err(perr("truncated header".into()));
        }
        let header: Header = serde_json::from_slice(&body[..hlen]).map_err(|e| perr(format!("header: {e}")))?;
        let payload = &body[hlen..];
        if !payload.len().is_multiple_of(8) {
            return Err(perr("payload is not a whole number of f64 values".into()));
        }
        let floats: Vec<f64> = payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        let read = |e: &TensorEntry| -> Result<Tensor<f64>> {
            let n = e.shape[0] * e.shape[1];
            let data = floats.get(e.offset..e.offset + n).ok_or_else(|| perr(format!("tensor {} exceeds payload", e.name)))?;
            Ok(Tensor::from_vec(e.shape[0], e.shape[1], data.to_vec()))
        };

        let model = FastSpeech::new(header.model_config.clone())?;
        let store_rows = header.tensors.last().map(|e| e.shape[0]).unwrap_or(0);
        let expected = model.manifest(store_rows);
        if expected.len() != header.tensors.len() {
            return Err(perr(format!("manifest lists {} tensors, config implies {}", header.tensors.len(), expected.len())));
        }
        let mut meta = Vec::with_capacity(expected.len());
        let mut values = Vec::with_capacity(expected.len());
        for (want, got) in expected.iter().zip(&header.tensors) {
            let got_meta = ParamMeta {
                name: got.name.clone(),
                partition: got.partition.ok_or_else(|| perr(format!("tensor {} has no partition", got.name)))?,
                rows: got.shape[0],
                cols: got.shape[1],
            };
            if &got_meta != want {
                return Err(perr(format!("manifest entry {:?} does not match config ({:?})", got_meta, want)));
            }
            values.push(read(got)?);
            meta.push(got_meta);
        }
        let extra = header
            .extra
            .iter()
            .map(|e| Ok(ExtraTensor { name: e.name.clone(), value: read(e)? }))
            .collect::<Result<Vec<_>>>()?;
        let params = ModelParameters {
            set: ParamSet::new(meta, values),
            emb_mode: header.emb_mode,
            speaker_rows: header.speaker_rows.into_iter().collect(),
        };
        if params.emb_mode != header.model_config.emb_mode {
            return Err(perr("emb_mode disagrees with model config".into()));
        }
        model.check_params(&params)?;
        Ok(Checkpoint { model_config: header.model_config, params, info: header.info, extra })
    }

    pub fn save(&self, path: &Path) -> Result<String> {
        let bytes = self.to_bytes()?;
        write_atomic(path, &bytes)?;
        Ok(sha256_hex(&bytes))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        Self::from_bytes(&bytes, path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_exact() {
        let cfg = ModelConfig { hidden_dim: 8, ffn_dim: 16, predictor_dim: 8, spk_emb_dim: 8, ..ModelConfig::default() };
        let model = FastSpeech::new(cfg.clone()).unwrap();
        let params = model.init_params(&[3, 7, 9], 5).unwrap();
        let mut info = BTreeMap::new();
        info.insert("approach".to_string(), serde_json::json!("multitask"));
        let ck = Checkpoint {
            model_config: cfg,
            params,
            info,
            extra: vec![ExtraTensor { name: "adam.step".into(), value: Tensor::from_vec(1, 1, vec![0.1 + 0.2]) }],
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.bin");
        let h1 = ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.info_str("approach"), Some("multitask"));
        assert_eq!(h1, back.save(&path).unwrap());
    }

    #[test]
    fn manifest_mismatch_is_rejected() {
        let cfg = ModelConfig { hidden_dim: 8, ffn_dim: 16, predictor_dim: 8, spk_emb_dim: 8, ..ModelConfig::default() };
        let model = FastSpeech::new(cfg.clone()).unwrap();
        let ck = Checkpoint { model_config: cfg.clone(), params: model.init_params(&[1], 0).unwrap(), info: BTreeMap::new(), extra: vec![] };
        let mut bytes = ck.to_bytes().unwrap();
        // claim a different depth in the header; payload no longer matches
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let header = String::from_utf8(bytes[20..20 + hlen].to_vec()).unwrap();
        let patched = header.replace("\"n_decoder_blocks\":2", "\"n_decoder_blocks\":3");
        assert_ne!(header, patched);
        let mut out = bytes[..12].to_vec();
        out.extend_from_slice(&(patched.len() as u64).to_le_bytes());
        out.extend_from_slice(patched.as_bytes());
        out.extend_from_slice(&bytes.split_off(20 + hlen));
        assert!(Checkpoint::from_bytes(&out, Path::new("x")).is_err());
        assert!(Checkpoint::from_bytes(b"garbage", Path::new("x")).is_err());
    }
}
