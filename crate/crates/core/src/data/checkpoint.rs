//! Checkpoint persistence: a textual manifest (format version, precision,
//! model configuration, one line per parameter with shape and checksum)
//! followed by raw little-endian float32 blobs in manifest order.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{DepthModel, ModelConfig};
use crate::scalar::{Precision, Scalar};
use crate::tensor::Tensor;

const MAGIC: &str = "skipdepth-checkpoint";
const VERSION: u32 = 1;

fn ckpt_err(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

fn blob_digest(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    hex_string(&hasher.finalize())
}

fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Serialize every parameter (converted to f32) plus the model config.
pub fn save_checkpoint<T: Scalar>(
    path: &Path,
    model: &DepthModel<T>,
    precision: Precision,
) -> Result<()> {
    let config_text = toml::to_string(&model.config).expect("model config serializes");

    let mut manifest = String::new();
    manifest.push_str(&format!("{MAGIC} {VERSION}\n"));
    manifest.push_str(&format!("precision {}\n", precision.name()));
    manifest.push_str(&format!("config_bytes {}\n", config_text.len()));
    manifest.push_str(&config_text);

    let mut blobs: Vec<u8> = Vec::new();
    model.visit_parameters(&mut |p| {
        let mut bytes = Vec::with_capacity(p.tensor.numel() * 4);
        for v in p.tensor.data() {
            bytes.extend_from_slice(&(v.to_f64() as f32).to_le_bytes());
        }
        let shape = p
            .tensor
            .shape()
            .iter()
            .map(|d| d.to_string())
            .collect::<Vec<_>>()
            .join("x");
        manifest.push_str(&format!("param {} {} {}\n", p.name, shape, blob_digest(&bytes)));
        blobs.extend_from_slice(&bytes);
    });
    manifest.push_str("end\n");

    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)
                .map_err(|e| Error::io(parent.display().to_string(), e))?;
        }
    }
    let mut file =
        std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    file.write_all(manifest.as_bytes())
        .and_then(|_| file.write_all(&blobs))
        .map_err(|e| Error::io(path.display().to_string(), e))
}

struct ManifestEntry {
    shape: Vec<usize>,
    digest: String,
}

/// Restore a model: version and per-blob checksums are validated, every
/// model parameter must be present, and stray manifest entries are errors.
pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<(DepthModel<T>, Precision)> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path.display().to_string(), e))?;

    let mut pos = 0usize;
    let read_line = |bytes: &[u8], pos: &mut usize| -> Result<String> {
        let start = *pos;
        while *pos < bytes.len() && bytes[*pos] != b'\n' {
            *pos += 1;
        }
        if *pos >= bytes.len() {
            return Err(ckpt_err("unexpected end of manifest"));
        }
        let line = String::from_utf8(bytes[start..*pos].to_vec())
            .map_err(|_| ckpt_err("manifest is not UTF-8"))?;
        *pos += 1;
        Ok(line)
    };

    let header = read_line(&bytes, &mut pos)?;
    let mut fields = header.split_whitespace();
    if fields.next() != Some(MAGIC) {
        return Err(ckpt_err(format!("not a checkpoint: {header:?}")));
    }
    let version: u32 = fields
        .next()
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| ckpt_err("missing format version"))?;
    if version != VERSION {
        return Err(ckpt_err(format!("unknown format version {version} (expected {VERSION})")));
    }

    let precision_line = read_line(&bytes, &mut pos)?;
    let precision: Precision = precision_line
        .strip_prefix("precision ")
        .and_then(|p| p.parse().ok())
        .ok_or_else(|| ckpt_err(format!("bad precision line {precision_line:?}")))?;

    let config_line = read_line(&bytes, &mut pos)?;
    let config_len: usize = config_line
        .strip_prefix("config_bytes ")
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| ckpt_err(format!("bad config_bytes line {config_line:?}")))?;
    if pos + config_len > bytes.len() {
        return Err(ckpt_err("truncated model config"));
    }
    let config_text = std::str::from_utf8(&bytes[pos..pos + config_len])
        .map_err(|_| ckpt_err("model config is not UTF-8"))?;
    let config: ModelConfig =
        toml::from_str(config_text).map_err(|e| ckpt_err(format!("bad model config: {e}")))?;
    pos += config_len;

    let mut entries: Vec<(String, ManifestEntry)> = Vec::new();
    loop {
        let line = read_line(&bytes, &mut pos)?;
        if line == "end" {
            break;
        }
        let mut fields = line.split_whitespace();
        match (fields.next(), fields.next(), fields.next(), fields.next()) {
            (Some("param"), Some(name), Some(shape), Some(digest)) => {
                let shape: Vec<usize> = if shape.is_empty() {
                    vec![]
                } else {
                    shape
                        .split('x')
                        .map(|d| d.parse().map_err(|_| ckpt_err(format!("bad shape in {line:?}"))))
                        .collect::<Result<_>>()?
                };
                entries.push((name.to_string(), ManifestEntry { shape, digest: digest.to_string() }));
            }
            _ => return Err(ckpt_err(format!("bad manifest line {line:?}"))),
        }
    }

    // blobs follow in manifest order
    let mut params: HashMap<String, (Vec<usize>, Vec<f32>)> = HashMap::new();
    for (name, entry) in entries {
        let count: usize = entry.shape.iter().product();
        let nbytes = count * 4;
        if pos + nbytes > bytes.len() {
            return Err(ckpt_err(format!(
                "blob for {name} truncated: checksum cannot be validated"
            )));
        }
        let blob = &bytes[pos..pos + nbytes];
        if blob_digest(blob) != entry.digest {
            return Err(ckpt_err(format!("checksum mismatch for {name}")));
        }
        let values = blob
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if params.insert(name.clone(), (entry.shape, values)).is_some() {
            return Err(ckpt_err(format!("duplicate parameter {name}")));
        }
        pos += nbytes;
    }
    if pos != bytes.len() {
        return Err(ckpt_err(format!("{} trailing bytes after blobs", bytes.len() - pos)));
    }

    let mut model = DepthModel::<T>::init(config, 0)?;
    let mut missing = Vec::new();
    model.visit_parameters_mut(&mut |p| {
        match params.remove(&p.name) {
            Some((shape, values)) if shape == p.tensor.shape() => {
                p.tensor = Tensor::leaf(
                    &shape,
                    values.into_iter().map(|v| T::from_f64(v as f64)).collect(),
                )
                .expect("shape matches blob");
            }
            Some((shape, _)) => missing.push(format!(
                "{}: shape {:?} in file, {:?} in model",
                p.name,
                shape,
                p.tensor.shape()
            )),
            None => missing.push(format!("{}: missing from checkpoint", p.name)),
        }
    });
    if !missing.is_empty() {
        return Err(ckpt_err(format!("parameter mismatch: {}", missing.join("; "))));
    }
    if !params.is_empty() {
        let stray: Vec<String> = params.into_keys().collect();
        return Err(ckpt_err(format!("checkpoint has unknown parameters: {}", stray.join(", "))));
    }
    Ok((model, precision))
}
