//! File formats: weight files, JSON documents and token-id text files.
//!
//! A weight file is laid out as
//!
//! ```text
//! "SVWT"                      4 bytes
//! version                     u32 little-endian, currently 1
//! header length               u32 little-endian
//! header                      JSON {config, tensors: [{name, shape, offset}]}
//! payload                     little-endian f32, row-major, directory order
//! ```
//!
//! Offsets are byte offsets into the payload.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{tensor_directory, Model, ModelConfig, TokenId, Weights};

pub const MAGIC: &[u8; 4] = b"SVWT";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightHeader {
    pub config: ModelConfig,
    pub tensors: Vec<TensorEntry>,
}

/// Encodes a model into the weight file format.
pub fn encode_weights(model: &Model) -> Result<Vec<u8>> {
    let config = model.config();
    let tensors = model.weights().named_tensors(config);
    let mut entries = Vec::with_capacity(tensors.len());
    let mut offset = 0;
    for (name, shape, data) in &tensors {
        entries.push(TensorEntry {
            name: name.clone(),
            shape: shape.clone(),
            offset,
        });
        offset += data.len() * 4;
    }
    let header = serde_json::to_vec(&WeightHeader {
        config: config.clone(),
        tensors: entries,
    })?;
    let mut out = Vec::with_capacity(12 + header.len() + offset);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    for (_, _, data) in &tensors {
        for v in data.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn save_weights(path: &Path, model: &Model) -> Result<()> {
    let bytes = encode_weights(model)?;
    let mut f = fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

fn read_u32(bytes: &[u8], at: usize) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::weights("<header>", format!("file ends after {} bytes", bytes.len())))
}

/// Decodes a weight file; errors name the offending tensor.
pub fn decode_weights(bytes: &[u8]) -> Result<Model> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(Error::weights("<header>", "bad magic bytes, expected SVWT"));
    }
    let version = read_u32(bytes, 4)?;
    if version != VERSION {
        return Err(Error::weights("<header>", format!("unsupported version {version}")));
    }
    let header_len = read_u32(bytes, 8)? as usize;
    let header_bytes = bytes.get(12..12 + header_len).ok_or_else(|| {
        Error::weights(
            "<header>",
            format!("header of {header_len} bytes runs past end of file"),
        )
    })?;
    let header: WeightHeader = serde_json::from_slice(header_bytes)
        .map_err(|e| Error::weights("<header>", format!("invalid header JSON: {e}")))?;
    header.config.validate()?;
    let payload = &bytes[12 + header_len..];

    let expected: usize = header
        .tensors
        .iter()
        .map(|t| t.shape.iter().product::<usize>() * 4)
        .sum();
    if payload.len() < expected {
        let culprit = header
            .tensors
            .iter()
            .find(|t| t.offset + t.shape.iter().product::<usize>() * 4 > payload.len())
            .map_or("<payload>", |t| t.name.as_str());
        return Err(Error::weights(
            culprit,
            format!("truncated payload: expected {expected} bytes, found {}", payload.len()),
        ));
    }

    let directory = tensor_directory(&header.config);
    if directory.len() != header.tensors.len() {
        return Err(Error::weights(
            "<header>",
            format!(
                "{} tensors listed, config requires {}",
                header.tensors.len(),
                directory.len()
            ),
        ));
    }
    let mut named = std::collections::HashMap::new();
    let mut cursor = 0;
    for (i, t) in header.tensors.iter().enumerate() {
        let (ref want_name, ref want_shape) = directory[i];
        if &t.name != want_name {
            return Err(Error::weights(&t.name, format!("out of order, expected `{want_name}`")));
        }
        if t.offset != cursor {
            return Err(Error::weights(
                &t.name,
                format!("offset {} breaks contiguity, expected {cursor}", t.offset),
            ));
        }
        let end = header.tensors.get(i + 1).map_or(payload.len(), |n| n.offset);
        let held = end.saturating_sub(t.offset) / 4;
        let needed: usize = t.shape.iter().product();
        if held != needed || end < t.offset || (end - t.offset) % 4 != 0 {
            return Err(Error::weights(
                &t.name,
                format!("shape {:?} needs {needed} values, file holds {held}", t.shape),
            ));
        }
        if &t.shape != want_shape {
            return Err(Error::weights(
                &t.name,
                format!("shape {:?} does not match config shape {:?}", t.shape, want_shape),
            ));
        }
        let data: Vec<f32> = payload[t.offset..end]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        named.insert(t.name.clone(), data);
        cursor = end;
    }
    let weights = Weights::from_named(&header.config, named)?;
    Model::new(header.config, weights)
}

pub fn load_weights(path: &Path) -> Result<Model> {
    decode_weights(&fs::read(path)?)
}

pub fn save_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

pub fn load_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path)?;
    Ok(serde_json::from_str(&text)?)
}

fn parse_ids(text: &str, line: usize) -> Result<Vec<TokenId>> {
    text.split_whitespace()
        .map(|w| {
            w.parse::<TokenId>()
                .map_err(|_| Error::input(format!("line {line}: `{w}` is not a token id")))
        })
        .collect()
}

/// Whitespace-separated token ids.
pub fn read_prompt(path: &Path) -> Result<Vec<TokenId>> {
    let ids = parse_ids(&fs::read_to_string(path)?, 1)?;
    if ids.is_empty() {
        return Err(Error::input(format!("{} holds no token ids", path.display())));
    }
    Ok(ids)
}

/// One whitespace-separated sequence per non-blank line.
pub fn read_sequences(path: &Path) -> Result<Vec<Vec<TokenId>>> {
    let text = fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if !line.trim().is_empty() {
            out.push(parse_ids(line, i + 1)?);
        }
    }
    Ok(out)
}

pub fn write_sequences(path: &Path, sequences: &[Vec<TokenId>]) -> Result<()> {
    let mut text = String::new();
    for s in sequences {
        let line: Vec<String> = s.iter().map(|t| t.to_string()).collect();
        text.push_str(&line.join(" "));
        text.push('\n');
    }
    fs::write(path, text)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn small() -> Model {
        let cfg = ModelConfig {
            num_layers: 2,
            hidden: 8,
            ffn_hidden: 16,
            num_query_heads: 2,
            num_kv_heads: 1,
            vocab: 16,
            expert_hidden: 8,
            block_size: 4,
            ..ModelConfig::default()
        };
        Model::seeded(cfg, 3).unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let m = small();
        let bytes = encode_weights(&m).unwrap();
        let back = decode_weights(&bytes).unwrap();
        assert_eq!(back, m);
        assert_eq!(encode_weights(&back).unwrap(), bytes);
    }

    #[test]
    fn bad_magic_and_version() {
        let mut bytes = encode_weights(&small()).unwrap();
        bytes[4] = 9;
        assert!(decode_weights(&bytes).unwrap_err().to_string().contains("version"));
        bytes[0] = b'X';
        assert!(decode_weights(&bytes).unwrap_err().to_string().contains("magic"));
    }

    #[test]
    fn truncated_payload_reports_sizes() {
        let mut bytes = encode_weights(&small()).unwrap();
        bytes.truncate(bytes.len() - 6);
        let err = decode_weights(&bytes).unwrap_err().to_string();
        assert!(err.contains("lm_head"), "{err}");
        assert!(err.contains("expected") && err.contains("found"), "{err}");
    }

    #[test]
    fn span_shape_mismatch_names_tensor() {
        // rewrite the header so `final_norm` claims one value more than it holds
        let m = small();
        let bytes = encode_weights(&m).unwrap();
        let hlen = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let mut header: WeightHeader = serde_json::from_slice(&bytes[12..12 + hlen]).unwrap();
        let i = header.tensors.iter().position(|t| t.name == "final_norm").unwrap();
        header.tensors[i + 1].offset -= 4;
        let h = serde_json::to_vec(&header).unwrap();
        let mut out = bytes[..8].to_vec();
        out.extend_from_slice(&(h.len() as u32).to_le_bytes());
        out.extend_from_slice(&h);
        out.extend_from_slice(&bytes[12 + hlen..]);
        let err = decode_weights(&out).unwrap_err();
        match err {
            Error::WeightFile { tensor, .. } => assert!(tensor == "final_norm" || tensor == "lm_head"),
            e => panic!("unexpected {e}"),
        }
    }
}
