// SPDX-License-Identifier: MIT OR Apache-2.0

//! Binary checkpoint format.
//!
//! Layout: magic `HFCK`, a little-endian `u64` header length, a JSON header
//! (config, tokenizer, parameter manifest with byte offsets), then every
//! parameter as little-endian `f64` in manifest order.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ModelBundle, ModelConfig};
use crate::error::{ForgeError, Result};
use crate::numerics::{Params, Tensor};
use crate::vocab::Tokenizer;

const MAGIC: &[u8; 4] = b"HFCK";

#[derive(Serialize, Deserialize)]
struct Header {
    format_version: u32,
    config: ModelConfig,
    tokenizer: Tokenizer,
    params: Vec<Entry>,
}

#[derive(Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    len: usize,
}

fn parse_err(source_name: &str, detail: impl Into<String>) -> ForgeError {
    ForgeError::Parse {
        source_name: source_name.to_string(),
        detail: detail.into(),
    }
}

/// Serialize a model into `out`.
pub fn write_checkpoint(model: &ModelBundle, mut out: impl Write) -> Result<()> {
    model.validate()?;
    let mut entries = Vec::with_capacity(model.params.len());
    let mut offset = 0;
    for (name, shape) in ModelBundle::manifest(&model.config) {
        let len = shape.iter().product::<usize>();
        entries.push(Entry {
            name,
            shape,
            offset,
            len,
        });
        offset += len * 8;
    }
    let header = serde_json::to_vec(&Header {
        format_version: 1,
        config: model.config.clone(),
        tokenizer: model.tokenizer.clone(),
        params: entries,
    })?;
    out.write_all(MAGIC)?;
    out.write_all(&(header.len() as u64).to_le_bytes())?;
    out.write_all(&header)?;
    let mut blob = Vec::with_capacity(offset);
    for (name, _) in ModelBundle::manifest(&model.config) {
        for v in model.param(&name).data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    out.write_all(&blob)?;
    Ok(())
}

/// Deserialize a model; `source_name` labels parse errors.
pub fn read_checkpoint(mut input: impl Read, source_name: &str) -> Result<ModelBundle> {
    let mut bytes = Vec::new();
    input.read_to_end(&mut bytes)?;
    if bytes.len() < 12 || &bytes[..4] != MAGIC {
        return Err(parse_err(source_name, "not a checkpoint (bad magic)"));
    }
    let header_len = u64::from_le_bytes(bytes[4..12].try_into().expect("8 bytes")) as usize;
    let body_start = 12usize
        .checked_add(header_len)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| parse_err(source_name, "truncated header"))?;
    let header: Header = serde_json::from_slice(&bytes[12..body_start])
        .map_err(|e| parse_err(source_name, format!("bad header: {e}")))?;
    if header.format_version != 1 {
        return Err(parse_err(
            source_name,
            format!("unsupported format version {}", header.format_version),
        ));
    }
    let body = &bytes[body_start..];
    let mut params = Params::new();
    for e in &header.params {
        let end = e
            .offset
            .checked_add(e.len * 8)
            .filter(|&end| end <= body.len())
            .ok_or_else(|| parse_err(source_name, format!("parameter {} is truncated", e.name)))?;
        let data: Vec<f64> = body[e.offset..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let t = Tensor::new(e.shape.clone(), data)
            .map_err(|err| parse_err(source_name, format!("parameter {}: {err}", e.name)))?;
        params.insert(e.name.clone(), t);
    }
    let model = ModelBundle {
        config: header.config,
        params,
        tokenizer: header.tokenizer,
    };
    model
        .validate()
        .map_err(|err| parse_err(source_name, err.to_string()))?;
    Ok(model)
}

pub fn save_checkpoint(model: &ModelBundle, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let mut buf = Vec::new();
    write_checkpoint(model, &mut buf)?;
    fs::write(path, buf)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<ModelBundle> {
    let file = fs::File::open(path)?;
    read_checkpoint(std::io::BufReader::new(file), &path.display().to_string())
}
