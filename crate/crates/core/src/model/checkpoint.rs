//! Single-file checkpoint: magic, JSON header, raw little-endian `f32` data.
//!
//! ```text
//! b"QRRKCKPT" | u32 version | u64 header_len | header JSON | tensor bytes
//! ```
//!
//! The header carries the [`ModelConfig`], the tokenizer vocabulary, optional
//! gate metadata and an index of named tensors with byte offsets into the
//! data section.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use super::{GateParams, LayerParams, ModelConfig, Params, Transformer};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"QRRKCKPT";
const VERSION: u32 = 1;

/// A model plus the vocabulary it was built for.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Transformer<f32>,
    pub vocab: Vec<String>,
    pub metadata: BTreeMap<String, String>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Serialize, Deserialize)]
struct GateHeader {
    layers: Vec<usize>,
    n_per_layer: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    vocab: Vec<String>,
    #[serde(default)]
    gate: Option<GateHeader>,
    #[serde(default)]
    metadata: BTreeMap<String, String>,
    tensors: Vec<TensorEntry>,
}

fn ckpt_err(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let model = &ckpt.model;
    if ckpt.vocab.len() != model.config.vocab_size {
        return Err(ckpt_err(format!(
            "vocabulary has {} symbols but config says {}",
            ckpt.vocab.len(),
            model.config.vocab_size
        )));
    }
    let mut named: Vec<(String, Vec<usize>, &[f32])> = model.params.tensors();
    if let Some(g) = &model.gate {
        for (l, w) in g.layers.iter().zip(&g.weights) {
            named.push((format!("gate.{l}"), w.shape().to_vec(), w.as_slice().expect("standard layout")));
        }
    }
    let mut entries = Vec::with_capacity(named.len());
    let mut offset = 0;
    for (name, shape, data) in &named {
        entries.push(TensorEntry { name: name.clone(), shape: shape.clone(), offset });
        offset += data.len() * 4;
    }
    let header = Header {
        config: model.config.clone(),
        vocab: ckpt.vocab.clone(),
        gate: model.gate.as_ref().map(|g| GateHeader { layers: g.layers.clone(), n_per_layer: g.n_per_layer }),
        metadata: ckpt.metadata.clone(),
        tensors: entries,
    };
    let header = serde_json::to_vec(&header)?;
    let mut buf = Vec::with_capacity(20 + header.len() + offset);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(header.len() as u64).to_le_bytes());
    buf.extend_from_slice(&header);
    for (_, _, data) in &named {
        for v in data.iter() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&buf)?;
    f.sync_all()?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let bytes = fs::read(path)?;
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(ckpt_err("not a checkpoint file (bad magic)"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != VERSION {
        return Err(ckpt_err(format!("unsupported version {version}")));
    }
    let header_len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    let data_start =
        20usize.checked_add(header_len).filter(|&e| e <= bytes.len()).ok_or_else(|| ckpt_err("truncated header"))?;
    let header: Header = serde_json::from_slice(&bytes[20..data_start])?;
    header.config.validate()?;
    let data = &bytes[data_start..];

    let mut tensors: BTreeMap<String, (Vec<usize>, Vec<f32>)> = BTreeMap::new();
    for e in header.tensors {
        let len: usize = e.shape.iter().product();
        let end = e.offset + len * 4;
        if end > data.len() {
            return Err(ckpt_err(format!("tensor {} runs past end of file", e.name)));
        }
        let values = data[e.offset..end].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        tensors.insert(e.name, (e.shape, values));
    }
    let mut take1 = |name: String| -> Result<Array1<f32>> {
        let (shape, v) = tensors.remove(&name).ok_or_else(|| ckpt_err(format!("missing tensor {name}")))?;
        if shape.len() != 1 {
            return Err(ckpt_err(format!("tensor {name} should be 1-d")));
        }
        Ok(Array1::from(v))
    };
    let cfg = &header.config;
    let mut layer_norms = Vec::new();
    for i in 0..cfg.n_layers {
        layer_norms.push((take1(format!("layers.{i}.attn_norm"))?, take1(format!("layers.{i}.mlp_norm"))?));
    }
    let mut take2 = |name: String| -> Result<Array2<f32>> {
        let (shape, v) = tensors.remove(&name).ok_or_else(|| ckpt_err(format!("missing tensor {name}")))?;
        if shape.len() != 2 {
            return Err(ckpt_err(format!("tensor {name} should be 2-d")));
        }
        Array2::from_shape_vec((shape[0], shape[1]), v).map_err(|e| ckpt_err(e.to_string()))
    };
    let embed = take2("embed".into())?;
    let mut layers = Vec::with_capacity(cfg.n_layers);
    for (i, (attn_norm, mlp_norm)) in layer_norms.into_iter().enumerate() {
        layers.push(LayerParams {
            attn_norm,
            wq: take2(format!("layers.{i}.wq"))?,
            wk: take2(format!("layers.{i}.wk"))?,
            wv: take2(format!("layers.{i}.wv"))?,
            wo: take2(format!("layers.{i}.wo"))?,
            mlp_norm,
            w_up: take2(format!("layers.{i}.w_up"))?,
            w_down: take2(format!("layers.{i}.w_down"))?,
        });
    }
    let gate = match header.gate {
        None => None,
        Some(gh) => {
            let weights = gh.layers.iter().map(|l| take2(format!("gate.{l}"))).collect::<Result<Vec<_>>>()?;
            Some(GateParams { layers: gh.layers, weights, n_per_layer: gh.n_per_layer })
        }
    };
    if let Some(extra) = tensors.keys().next() {
        return Err(ckpt_err(format!("unexpected tensor {extra}")));
    }
    let params = Params { embed, layers };
    params.check_shapes(cfg)?;
    if header.vocab.len() != cfg.vocab_size {
        return Err(ckpt_err("vocabulary size does not match config"));
    }
    Ok(Checkpoint {
        model: Transformer { config: header.config, params, gate },
        vocab: header.vocab,
        metadata: header.metadata,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Init;

    #[test]
    fn round_trip_is_bit_exact() {
        let cfg = ModelConfig::new(2, 2, 8, 4, 16);
        let mut model: Transformer<f32> = Transformer::new(cfg.clone(), Init::Random { seed: 5 }).unwrap();
        model.gate = Some(GateParams::new(&cfg, 0, 2, 2, Some(3)).unwrap());
        model.params.embed[[0, 0]] = f32::MIN_POSITIVE / 2.0; // subnormal survives
        let ckpt = Checkpoint {
            model,
            vocab: vec!["a".into(), "b".into(), "c".into(), "d".into()],
            metadata: [("note".to_string(), "x".to_string())].into(),
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_checkpoint(&ckpt, &path).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back, ckpt);
        let bits = |c: &Checkpoint| -> Vec<u32> {
            c.model.params.tensors().iter().flat_map(|(_, _, d)| d.iter().map(|x| x.to_bits())).collect()
        };
        assert_eq!(bits(&back), bits(&ckpt));
    }

    #[test]
    fn rejects_garbage() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad");
        std::fs::write(&path, b"hello world, definitely not a model").unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Checkpoint(_))));
    }
}
