//! Checkpoint files: a single JSON manifest line, a newline, then every
//! parameter as little-endian `f64` in manifest order.

use std::fs;
use std::io::Write;
use std::path::Path;

use geomformer_core::model::{Model, ModelConfig};
use geomformer_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

pub const FORMAT: &str = "geomformer-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the blob.
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub config: ModelConfig,
    /// Epoch the parameters were taken from, when saved by the trainer.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epoch: Option<usize>,
    pub params: Vec<ParamEntry>,
    pub blob_len: usize,
}

pub fn manifest_of(model: &Model, epoch: Option<usize>) -> Manifest {
    let mut offset = 0;
    let params = model
        .params()
        .iter()
        .map(|(name, t)| {
            let e = ParamEntry {
                name: name.to_string(),
                shape: t.shape().to_vec(),
                offset,
            };
            offset += t.len() * 8;
            e
        })
        .collect();
    Manifest {
        format: FORMAT.into(),
        version: VERSION,
        config: model.config().clone(),
        epoch,
        params,
        blob_len: offset,
    }
}

pub fn encode(model: &Model, epoch: Option<usize>) -> Vec<u8> {
    let manifest = manifest_of(model, epoch);
    let mut out = serde_json::to_vec(&manifest).expect("manifest serializes");
    out.push(b'\n');
    out.reserve(manifest.blob_len);
    for t in model.params().tensors() {
        for x in t.data() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    out
}

/// Splits off and parses the manifest line.
pub fn read_manifest(bytes: &[u8]) -> Result<(Manifest, &[u8])> {
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| CliError::Format("checkpoint has no manifest line".into()))?;
    let manifest: Manifest = serde_json::from_slice(&bytes[..nl])
        .map_err(|e| CliError::Format(format!("checkpoint manifest: {e}")))?;
    if manifest.format != FORMAT || manifest.version != VERSION {
        return Err(CliError::Format(format!(
            "checkpoint manifest: format {:?} v{} (expected {FORMAT:?} v{VERSION})",
            manifest.format, manifest.version
        )));
    }
    Ok((manifest, &bytes[nl + 1..]))
}

/// Parses a checkpoint. Every manifest entry is checked against the blob and
/// against the layout its config implies; the first inconsistent entry is
/// named in the error.
pub fn decode(bytes: &[u8]) -> Result<(Model, Manifest)> {
    let (manifest, blob) = read_manifest(bytes)?;
    let mut values = Vec::with_capacity(manifest.params.len());
    let mut expected_offset = 0;
    for (i, e) in manifest.params.iter().enumerate() {
        let len: usize = e.shape.iter().product();
        let end = e.offset + len * 8;
        if e.offset != expected_offset || end > blob.len() {
            return Err(CliError::Format(format!(
                "manifest entry {i} ({}): offset {} length {} does not fit the {}-byte blob",
                e.name,
                e.offset,
                len * 8,
                blob.len()
            )));
        }
        expected_offset = end;
        let data = blob[e.offset..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let t = Tensor::new(&e.shape, data).map_err(|err| CliError::Format(format!("manifest entry {i} ({}): {err}", e.name)))?;
        values.push((e.name.clone(), t));
    }
    if expected_offset != blob.len() || manifest.blob_len != blob.len() {
        return Err(CliError::Format(format!(
            "blob is {} bytes, manifest declares {} and its entries cover {expected_offset}",
            blob.len(),
            manifest.blob_len
        )));
    }
    let model = Model::from_params(manifest.config.clone(), values).map_err(|e| match e {
        geomformer_core::Error::Format(m) => CliError::Format(m),
        other => CliError::Format(format!("checkpoint config: {other}")),
    })?;
    Ok((model, manifest))
}

pub fn save(model: &Model, epoch: Option<usize>, path: &Path) -> Result<()> {
    let bytes = encode(model, epoch);
    let mut f = fs::File::create(path).map_err(|e| CliError::io(path, e))?;
    f.write_all(&bytes).map_err(|e| CliError::io(path, e))
}

pub fn load(path: &Path) -> Result<(Model, Manifest)> {
    let bytes = fs::read(path).map_err(|e| CliError::Config(format!("cannot read checkpoint {}: {e}", path.display())))?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> Model {
        Model::random(ModelConfig::tiny(), 4).unwrap()
    }

    #[test]
    fn round_trip_is_byte_exact() {
        let m = tiny();
        let bytes = encode(&m, Some(3));
        let (back, manifest) = decode(&bytes).unwrap();
        assert_eq!(back.params(), m.params());
        assert_eq!(back.config(), m.config());
        assert_eq!(manifest.epoch, Some(3));
        assert_eq!(encode(&back, Some(3)), bytes);
    }

    #[test]
    fn offsets_are_cumulative_bytes() {
        let man = manifest_of(&tiny(), None);
        let mut off = 0;
        for e in &man.params {
            assert_eq!(e.offset, off);
            off += e.shape.iter().product::<usize>() * 8;
        }
        assert_eq!(off, man.blob_len);
    }

    fn with_manifest(bytes: &[u8], edit: impl FnOnce(&mut Manifest)) -> Vec<u8> {
        let (mut man, blob) = read_manifest(bytes).unwrap();
        edit(&mut man);
        let mut out = serde_json::to_vec(&man).unwrap();
        out.push(b'\n');
        out.extend_from_slice(blob);
        out
    }

    fn format_message(bytes: &[u8]) -> String {
        match decode(bytes) {
            Err(CliError::Format(m)) => m,
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn corrupt_entries_are_named() {
        let bytes = encode(&tiny(), None);
        let renamed = with_manifest(&bytes, |m| m.params[5].name = "bogus".into());
        let msg = format_message(&renamed);
        assert!(msg.contains("bogus"), "{msg}");

        let reshaped = with_manifest(&bytes, |m| m.params[2].shape = vec![1, 1]);
        let msg = format_message(&reshaped);
        let name = manifest_of(&tiny(), None).params[3].name.clone();
        assert!(msg.contains(&name), "{msg}");

        let truncated = &bytes[..bytes.len() - 16];
        let msg = format_message(truncated);
        let last = manifest_of(&tiny(), None).params.last().unwrap().name.clone();
        assert!(msg.contains(&last), "{msg}");

        assert!(matches!(decode(b"not json\n"), Err(CliError::Format(_))));
        assert!(matches!(decode(b"{}"), Err(CliError::Format(_))));
    }

    #[test]
    fn config_mismatch_is_a_format_error() {
        let bytes = encode(&tiny(), None);
        let wider = with_manifest(&bytes, |m| m.config.width = 16);
        assert!(matches!(decode(&wider), Err(CliError::Format(_))));
    }
}
