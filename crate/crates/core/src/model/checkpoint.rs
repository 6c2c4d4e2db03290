//! `.upqc` checkpoints: model config and scheme tags in the JSON header,
//! every model tensor in canonical order.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Block, LinearScheme, ModelConfig, Proj, QuantizedLinear, SeqOrigin, ToyLm};
use crate::container::{self, Entry};
use crate::error::{Result, UpqError};
use crate::quant::{ChannelScale, FlexRoundParams, OmniQuantParams, SeqConfig};
use crate::tensor::Tensor;

pub const CHECKPOINT_EXTENSION: &str = "upqc";
pub const CHECKPOINT_VERSION: u32 = container::VERSION;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    kind: String,
    config: ModelConfig,
    seq: SeqConfig,
    schemes: BTreeMap<String, String>,
}

const KIND: &str = "model";

pub fn encode_checkpoint(model: &ToyLm) -> Result<Vec<u8>> {
    let header = Header {
        kind: KIND.into(),
        config: model.config,
        seq: model.seq,
        schemes: model.schemes(),
    };
    container::encode(&serde_json::to_string(&header)?, &model.tensors())
}

pub fn save_checkpoint(model: &ToyLm, path: &Path) -> Result<()> {
    let bytes = encode_checkpoint(model)?;
    // Write then rename so a crash never leaves a half-written checkpoint.
    let tmp = path.with_extension("upqc.tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<ToyLm> {
    decode_checkpoint(&fs::read(path)?)
}

fn header_error(reason: String) -> UpqError {
    // The header starts after magic, version and its length prefix.
    UpqError::Format { offset: 12, reason }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<ToyLm> {
    let (header, entries) = container::decode(bytes)?;
    let header: Header =
        serde_json::from_str(&header).map_err(|e| header_error(format!("bad header: {e}")))?;
    if header.kind != KIND {
        return Err(header_error(format!("container holds {:?}, not a model", header.kind)));
    }
    header.config.validate().map_err(|e| header_error(e.to_string()))?;
    let end = bytes.len() as u64;
    let mut tensors = Tensors {
        map: entries.into_iter().map(|e| (e.name.clone(), e)).collect(),
        end,
    };
    let cfg = header.config;
    let (d, h, v) = (cfg.dim, cfg.hidden(), cfg.vocab);
    let tok_emb = tensors.take("tok_emb", &[v, d])?;
    let pos_emb = tensors.take("pos_emb", &[cfg.context, d])?;
    let mut blocks = Vec::with_capacity(cfg.layers);
    for i in 0..cfg.layers {
        let attn_norm = tensors.take(&format!("blocks.{i}.attn_norm"), &[d])?;
        let mlp_norm = tensors.take(&format!("blocks.{i}.mlp_norm"), &[d])?;
        let mut lin = |p: Proj| -> Result<QuantizedLinear> {
            let (rows, cols) = match p {
                Proj::Gate | Proj::Up => (h, d),
                Proj::Down => (d, h),
                _ => (d, d),
            };
            let name = ToyLm::linear_name(i, p);
            let tag = header
                .schemes
                .get(&name)
                .ok_or_else(|| header_error(format!("no scheme recorded for {name}")))?;
            tensors.linear(&name, tag, rows, cols)
        };
        blocks.push(Block {
            attn_norm,
            mlp_norm,
            query: lin(Proj::Query)?,
            key: lin(Proj::Key)?,
            value: lin(Proj::Value)?,
            output: lin(Proj::Output)?,
            gate: lin(Proj::Gate)?,
            up: lin(Proj::Up)?,
            down: lin(Proj::Down)?,
        });
    }
    let final_norm = tensors.take("final_norm", &[d])?;
    let head = tensors.take("head", &[v, d])?;
    if let Some((name, e)) = tensors.map.iter().next() {
        return Err(UpqError::Format {
            offset: e.offset,
            reason: format!("unexpected tensor {name}"),
        });
    }
    if header.schemes.len() != cfg.layers * Proj::ALL.len() {
        return Err(header_error("scheme table names unknown layers".into()));
    }
    Ok(ToyLm {
        config: cfg,
        seq: header.seq,
        tok_emb,
        pos_emb,
        blocks,
        final_norm,
        head,
    })
}

struct Tensors {
    map: BTreeMap<String, Entry>,
    end: u64,
}

impl Tensors {
    fn take(&mut self, name: &str, shape: &[usize]) -> Result<Tensor> {
        let e = self.map.remove(name).ok_or_else(|| UpqError::Format {
            offset: self.end,
            reason: format!("missing tensor {name}"),
        })?;
        if e.tensor.shape() != shape {
            return Err(UpqError::Format {
                offset: e.offset,
                reason: format!("tensor {name} has shape {:?}, expected {shape:?}", e.tensor.shape()),
            });
        }
        Ok(e.tensor)
    }

    fn linear(&mut self, name: &str, tag: &str, rows: usize, cols: usize) -> Result<QuantizedLinear> {
        let weight = self.take(&format!("{name}.weight"), &[rows, cols])?;
        let col = [rows, 1];
        let scheme = match tag {
            "fp" => LinearScheme::Fp,
            "int4-flexround" => LinearScheme::FlexRound(FlexRoundParams {
                log_delta: self.take(&format!("{name}.log_delta"), &col)?,
                log_elem: self.take(&format!("{name}.log_elem"), &[rows, cols])?,
                log_row: self.take(&format!("{name}.log_row"), &col)?,
            }),
            "int4-omniquant" => LinearScheme::OmniQuant(OmniQuantParams {
                gamma_logit: self.take(&format!("{name}.gamma_logit"), &col)?,
                beta_logit: self.take(&format!("{name}.beta_logit"), &col)?,
            }),
            "int2-seq" | "int4-int2-seq" => {
                let key = format!("{name}.delta");
                let offset = self.map.get(&key).map_or(self.end, |e| e.offset);
                let delta = self.take(&key, &col)?;
                ChannelScale::from_column(&delta).map_err(|e| UpqError::Format {
                    offset,
                    reason: e.to_string(),
                })?;
                let origin = if tag == "int2-seq" { SeqOrigin::Fp } else { SeqOrigin::Int4 };
                LinearScheme::Seq { delta, origin }
            }
            other => return Err(header_error(format!("unknown scheme {other:?} for {name}"))),
        };
        let bias_key = format!("{name}.bias");
        let bias = if self.map.contains_key(&bias_key) {
            Some(self.take(&bias_key, &[rows])?)
        } else {
            None
        };
        Ok(QuantizedLinear { weight, scheme, bias })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{quantize_model, QuantTarget};

    fn tiny() -> ToyLm {
        ToyLm::new(ModelConfig {
            vocab: 16,
            dim: 8,
            layers: 2,
            heads: 2,
            mlp_expansion: 2,
            context: 6,
            seed: 3,
        })
        .unwrap()
    }

    #[test]
    fn round_trip_every_scheme_is_bit_exact() {
        let fp = tiny();
        let f4 = quantize_model(&fp, QuantTarget::Int4Flexround).unwrap();
        let o4 = quantize_model(&fp, QuantTarget::Int4Omniquant).unwrap();
        let s2 = quantize_model(&f4, QuantTarget::Int2Seq).unwrap();
        for m in [fp, f4, o4, s2] {
            let bytes = encode_checkpoint(&m).unwrap();
            let back = decode_checkpoint(&bytes).unwrap();
            assert_eq!(back, m);
            assert_eq!(encode_checkpoint(&back).unwrap(), bytes);
        }
    }

    #[test]
    fn tensor_names_follow_config() {
        let m = tiny();
        let names: Vec<_> = m.tensors().into_iter().map(|(n, _)| n).collect();
        // 2 embeddings + per block (2 norms + 7 weights) + final norm + head
        assert_eq!(names.len(), 2 + 2 * 9 + 2);
        assert_eq!(names[0], "tok_emb");
        assert!(names.contains(&"blocks.1.down.weight".to_string()));
    }

    #[test]
    fn missing_tensor_is_a_format_error() {
        let m = tiny();
        let mut tensors = m.tensors();
        tensors.retain(|(n, _)| n != "head");
        let header = serde_json::to_string(&Header {
            kind: KIND.into(),
            config: m.config,
            seq: m.seq,
            schemes: m.schemes(),
        })
        .unwrap();
        let bytes = container::encode(&header, &tensors).unwrap();
        let err = decode_checkpoint(&bytes).unwrap_err();
        assert!(matches!(err, UpqError::Format { .. }), "{err}");
    }

    #[test]
    fn save_and_load_through_disk() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.upqc");
        let m = tiny();
        save_checkpoint(&m, &path).unwrap();
        assert_eq!(load_checkpoint(&path).unwrap(), m);
    }
}
