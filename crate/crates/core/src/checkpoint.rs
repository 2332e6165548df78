//! Weights checkpoint file: a text manifest (stream kind, spec echo, seed,
//! iteration count, name -> blob offset table) followed by one tensor blob
//! per parameter.

use crate::blob;
use crate::error::{Error, Result};
use crate::model::{Ablation, NetworkSpec, StreamKind, StreamWeights};
use crate::tensor::Scalar;
use std::io::Write;
use std::path::Path;

const MAGIC_LINE: &str = "GTCKPT v1";

#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct CheckpointMeta {
    pub kind: StreamKind,
    pub ablation: Option<Ablation>,
    pub seed: u64,
    pub iterations: usize,
    pub spec: NetworkSpec,
}

#[derive(serde::Serialize, serde::Deserialize)]
struct ParamEntry {
    name: String,
    offset: usize,
    bytes: usize,
    shape: Vec<usize>,
}

#[derive(serde::Serialize, serde::Deserialize)]
struct Header {
    kind: StreamKind,
    ablation: Option<Ablation>,
    seed: u64,
    iterations: usize,
    spec: NetworkSpec,
    params: Vec<ParamEntry>,
}

/// Writes the weights with their metadata. Values are stored as f32 blobs
/// regardless of the run precision.
pub fn save<S: Scalar>(path: &Path, weights: &StreamWeights<S>, meta: &CheckpointMeta) -> Result<()> {
    let mut blobs: Vec<u8> = Vec::new();
    let mut entries = Vec::with_capacity(weights.store.len());
    for p in weights.store.iter() {
        let data: Vec<f32> = p.value.iter().map(|v| v.as_f32()).collect();
        let encoded = blob::encode(&p.shape, &data);
        entries.push(ParamEntry {
            name: p.name.clone(),
            offset: blobs.len(),
            bytes: encoded.len(),
            shape: p.shape.clone(),
        });
        blobs.extend_from_slice(&encoded);
    }
    let header = Header {
        kind: meta.kind,
        ablation: meta.ablation,
        seed: meta.seed,
        iterations: meta.iterations,
        spec: meta.spec.clone(),
        params: entries,
    };
    let header_text =
        toml::to_string(&header).map_err(|e| Error::Config(format!("checkpoint header: {e}")))?;
    let mut f = std::fs::File::create(path)?;
    writeln!(f, "{MAGIC_LINE} header={}", header_text.len())?;
    f.write_all(header_text.as_bytes())?;
    f.write_all(&blobs)?;
    Ok(())
}

/// Reads a checkpoint back into a freshly constructed stream.
pub fn load<S: Scalar>(path: &Path) -> Result<(StreamWeights<S>, CheckpointMeta)> {
    let bytes = std::fs::read(path)?;
    let newline = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::corrupt(path, "missing header line"))?;
    let first = std::str::from_utf8(&bytes[..newline])
        .map_err(|_| Error::corrupt(path, "header line is not utf-8"))?;
    let rest = first
        .strip_prefix(MAGIC_LINE)
        .ok_or_else(|| Error::corrupt(path, format!("bad magic line '{first}'")))?;
    let header_len: usize = rest
        .trim()
        .strip_prefix("header=")
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| Error::corrupt(path, "bad header length field"))?;
    let header_start = newline + 1;
    let blob_start = header_start + header_len;
    if bytes.len() < blob_start {
        return Err(Error::corrupt(path, "truncated header"));
    }
    let header_text = std::str::from_utf8(&bytes[header_start..blob_start])
        .map_err(|_| Error::corrupt(path, "header is not utf-8"))?;
    let header: Header =
        toml::from_str(header_text).map_err(|e| Error::corrupt(path, format!("bad header: {e}")))?;

    let mut weights = StreamWeights::<S>::init(header.kind, &header.spec, 0)?;
    if header.params.len() != weights.store.len() {
        return Err(Error::corrupt(
            path,
            format!(
                "checkpoint has {} parameters, spec requires {}",
                header.params.len(),
                weights.store.len()
            ),
        ));
    }
    let blob_section = &bytes[blob_start..];
    for entry in &header.params {
        let id = weights
            .store
            .id_by_name(&entry.name)
            .ok_or_else(|| Error::corrupt(path, format!("unknown parameter '{}'", entry.name)))?;
        let end = entry.offset + entry.bytes;
        if end > blob_section.len() {
            return Err(Error::corrupt(path, format!("parameter '{}' blob truncated", entry.name)));
        }
        let (shape, data) = blob::decode(&blob_section[entry.offset..end])
            .map_err(|reason| Error::corrupt(path, format!("parameter '{}': {reason}", entry.name)))?;
        if shape != entry.shape || shape != weights.store.param(id).shape {
            return Err(Error::corrupt(path, format!("parameter '{}' shape mismatch", entry.name)));
        }
        let dst = weights.store.value_mut(id);
        for (d, v) in dst.iter_mut().zip(data.iter()) {
            *d = S::from_f32(*v);
        }
    }
    let meta = CheckpointMeta {
        kind: header.kind,
        ablation: header.ablation,
        seed: header.seed,
        iterations: header.iterations,
        spec: header.spec,
    };
    Ok((weights, meta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::StreamKind;

    fn small_spec() -> NetworkSpec {
        NetworkSpec {
            classes: 2,
            gt_modules: 1,
            stem_channels: 2,
            block_channels: vec![2],
            frames: 2,
            channels: 1,
            height: 8,
            width: 8,
            locnet_hidden1: 2,
            locnet_hidden2: 2,
            ..NetworkSpec::default()
        }
    }

    #[test]
    fn roundtrip_preserves_values_and_meta() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.ckpt");
        let spec = small_spec();
        let weights = StreamWeights::<f32>::init(StreamKind::Fisheye, &spec, 77).unwrap();
        let meta = CheckpointMeta {
            kind: StreamKind::Fisheye,
            ablation: Some(Ablation::Full),
            seed: 77,
            iterations: 123,
            spec: spec.clone(),
        };
        save(&path, &weights, &meta).unwrap();
        let (loaded, meta2) = load::<f32>(&path).unwrap();
        assert_eq!(meta2.seed, 77);
        assert_eq!(meta2.iterations, 123);
        assert_eq!(meta2.ablation, Some(Ablation::Full));
        assert_eq!(meta2.spec, spec);
        for (a, b) in weights.store.iter().zip(loaded.store.iter()) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.value, b.value);
        }
    }

    #[test]
    fn saving_twice_is_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let spec = small_spec();
        let weights = StreamWeights::<f32>::init(StreamKind::Rgb, &spec, 5).unwrap();
        let meta = CheckpointMeta {
            kind: StreamKind::Rgb,
            ablation: None,
            seed: 5,
            iterations: 0,
            spec,
        };
        let pa = dir.path().join("a.ckpt");
        let pb = dir.path().join("b.ckpt");
        save(&pa, &weights, &meta).unwrap();
        save(&pb, &weights, &meta).unwrap();
        assert_eq!(std::fs::read(pa).unwrap(), std::fs::read(pb).unwrap());
    }

    #[test]
    fn corrupted_checkpoint_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.ckpt");
        let spec = small_spec();
        let weights = StreamWeights::<f32>::init(StreamKind::Rgb, &spec, 5).unwrap();
        let meta = CheckpointMeta {
            kind: StreamKind::Rgb,
            ablation: None,
            seed: 5,
            iterations: 0,
            spec,
        };
        save(&path, &weights, &meta).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        let err = load::<f32>(&path).unwrap_err();
        assert_eq!(err.exit_code(), 5);
        std::fs::write(&path, b"not a checkpoint").unwrap();
        assert_eq!(load::<f32>(&path).unwrap_err().exit_code(), 5);
    }
}
