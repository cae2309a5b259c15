//! Single-file parameter snapshots: magic, version, a JSON manifest, then
//! little-endian f64 blobs in manifest order. Encoding is canonical (blobs
//! packed back to back, manifest fields in a fixed order), so
//! save -> load -> save reproduces the file byte for byte.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::ParamList;
use crate::tensor::TensorError;

pub type Result<T> = std::result::Result<T, CheckpointError>;

const MAGIC: &[u8; 8] = b"ADPTCKPT";
const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("bad magic; not a checkpoint file")]
    BadMagic,
    #[error("unsupported checkpoint version {got}")]
    UnsupportedVersion { got: u32 },
    #[error("file truncated: need {need} bytes, have {have}")]
    Truncated { need: usize, have: usize },
    #[error("manifest: {0}")]
    BadManifest(String),
    #[error("entry {name}: blob offset breaks canonical packing")]
    NonCanonical { name: String },
    #[error("duplicate entry name {name}")]
    DuplicateName { name: String },
    #[error("entry {name}: shape {shape:?} does not match {len} values")]
    EntryLength {
        name: String,
        shape: Vec<usize>,
        len: usize,
    },
    #[error("checkpoint is missing parameter {name}")]
    MissingParam { name: String },
    #[error("checkpoint holds {got} entries, model has {want} parameters")]
    EntryCount { want: usize, got: usize },
    #[error("entry {name}: shape {got:?} does not match parameter shape {want:?}")]
    ShapeMismatch {
        name: String,
        want: Vec<usize>,
        got: Vec<usize>,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    entries: Vec<EntryMeta>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EntryMeta {
    name: String,
    shape: Vec<usize>,
    /// Offset into the payload, in f64 words.
    offset: u64,
}

fn numel(shape: &[usize]) -> Option<usize> {
    shape.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d))
}

pub fn encode_checkpoint(entries: &[CheckpointEntry]) -> Result<Vec<u8>> {
    let mut seen = std::collections::BTreeSet::new();
    let mut metas = Vec::with_capacity(entries.len());
    let mut offset = 0u64;
    for e in entries {
        if !seen.insert(e.name.as_str()) {
            return Err(CheckpointError::DuplicateName { name: e.name.clone() });
        }
        let n = numel(&e.shape).filter(|&n| n == e.data.len()).ok_or_else(|| {
            CheckpointError::EntryLength {
                name: e.name.clone(),
                shape: e.shape.clone(),
                len: e.data.len(),
            }
        })?;
        metas.push(EntryMeta { name: e.name.clone(), shape: e.shape.clone(), offset });
        offset += n as u64;
    }
    let manifest = serde_json::to_vec(&Manifest { entries: metas })
        .map_err(|e| CheckpointError::BadManifest(e.to_string()))?;

    let mut out = Vec::with_capacity(8 + 4 + 8 + manifest.len() + offset as usize * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
    out.extend_from_slice(&manifest);
    for e in entries {
        for v in &e.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Vec<CheckpointEntry>> {
    let need_header = 8 + 4 + 8;
    if bytes.len() < need_header {
        return Err(CheckpointError::Truncated { need: need_header, have: bytes.len() });
    }
    if &bytes[..8] != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != VERSION {
        return Err(CheckpointError::UnsupportedVersion { got: version });
    }
    let manifest_len = u64::from_le_bytes(bytes[12..20].try_into().unwrap());
    let manifest_len = usize::try_from(manifest_len)
        .map_err(|_| CheckpointError::BadManifest("manifest length overflow".into()))?;
    let payload_start = need_header
        .checked_add(manifest_len)
        .ok_or_else(|| CheckpointError::BadManifest("manifest length overflow".into()))?;
    if bytes.len() < payload_start {
        return Err(CheckpointError::Truncated { need: payload_start, have: bytes.len() });
    }
    let manifest: Manifest = serde_json::from_slice(&bytes[need_header..payload_start])
        .map_err(|e| CheckpointError::BadManifest(e.to_string()))?;

    let payload = &bytes[payload_start..];
    if payload.len() % 8 != 0 {
        return Err(CheckpointError::Truncated {
            need: payload_start + payload.len().next_multiple_of(8),
            have: bytes.len(),
        });
    }
    let total_words = payload.len() / 8;

    let mut seen = std::collections::BTreeSet::new();
    let mut entries = Vec::with_capacity(manifest.entries.len());
    let mut expected_offset = 0usize;
    for meta in manifest.entries {
        if !seen.insert(meta.name.clone()) {
            return Err(CheckpointError::DuplicateName { name: meta.name });
        }
        let n = numel(&meta.shape).ok_or_else(|| CheckpointError::EntryLength {
            name: meta.name.clone(),
            shape: meta.shape.clone(),
            len: usize::MAX,
        })?;
        if meta.offset != expected_offset as u64 {
            return Err(CheckpointError::NonCanonical { name: meta.name });
        }
        let end = expected_offset.checked_add(n).filter(|&e| e <= total_words);
        let Some(end) = end else {
            return Err(CheckpointError::Truncated {
                need: payload_start
                    .saturating_add(expected_offset.saturating_add(n).saturating_mul(8)),
                have: bytes.len(),
            });
        };
        let mut data = Vec::with_capacity(n);
        for i in expected_offset..end {
            data.push(f64::from_le_bytes(payload[i * 8..(i + 1) * 8].try_into().unwrap()));
        }
        entries.push(CheckpointEntry { name: meta.name, shape: meta.shape, data });
        expected_offset = end;
    }
    if expected_offset != total_words {
        return Err(CheckpointError::BadManifest(format!(
            "payload holds {total_words} words, manifest covers {expected_offset}"
        )));
    }
    Ok(entries)
}

pub fn save_checkpoint(path: &Path, entries: &[CheckpointEntry]) -> Result<()> {
    Ok(std::fs::write(path, encode_checkpoint(entries)?)?)
}

pub fn load_checkpoint(path: &Path) -> Result<Vec<CheckpointEntry>> {
    decode_checkpoint(&std::fs::read(path)?)
}

pub fn params_to_entries(params: &ParamList) -> Vec<CheckpointEntry> {
    params
        .iter()
        .map(|(name, t)| CheckpointEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            data: t.to_vec(),
        })
        .collect()
}

/// Copy checkpoint values into live parameters, matching by exact name and
/// requiring the two sets to agree exactly.
pub fn load_into_params(entries: &[CheckpointEntry], params: &ParamList) -> Result<()> {
    if entries.len() != params.len() {
        return Err(CheckpointError::EntryCount { want: params.len(), got: entries.len() });
    }
    let by_name: std::collections::BTreeMap<&str, &CheckpointEntry> =
        entries.iter().map(|e| (e.name.as_str(), e)).collect();
    if by_name.len() != entries.len() {
        let dup = entries
            .iter()
            .find(|e| entries.iter().filter(|o| o.name == e.name).count() > 1)
            .unwrap();
        return Err(CheckpointError::DuplicateName { name: dup.name.clone() });
    }
    for (name, t) in params {
        let entry = by_name
            .get(name.as_str())
            .ok_or_else(|| CheckpointError::MissingParam { name: name.clone() })?;
        if entry.shape != t.shape() {
            return Err(CheckpointError::ShapeMismatch {
                name: name.clone(),
                want: t.shape().to_vec(),
                got: entry.shape.clone(),
            });
        }
        t.set_data(&entry.data)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn sample_entries() -> Vec<CheckpointEntry> {
        vec![
            CheckpointEntry {
                name: "a.w".into(),
                shape: vec![2, 3],
                data: vec![1.0, -0.0, 1e-308, f64::MAX, 0.1 + 0.2, -5.5],
            },
            CheckpointEntry { name: "a.b".into(), shape: vec![3], data: vec![0.0, 1.0, 2.0] },
            CheckpointEntry { name: "stats.mean".into(), shape: vec![1], data: vec![42.0] },
        ]
    }

    #[test]
    fn roundtrip_preserves_every_bit() {
        let entries = sample_entries();
        let bytes = encode_checkpoint(&entries).unwrap();
        let back = decode_checkpoint(&bytes).unwrap();
        assert_eq!(back.len(), entries.len());
        for (e, b) in entries.iter().zip(&back) {
            assert_eq!(e.name, b.name);
            assert_eq!(e.shape, b.shape);
            let eb: Vec<u64> = e.data.iter().map(|v| v.to_bits()).collect();
            let bb: Vec<u64> = b.data.iter().map(|v| v.to_bits()).collect();
            assert_eq!(eb, bb);
        }
        // save -> load -> save is byte-identical
        let again = encode_checkpoint(&back).unwrap();
        assert_eq!(bytes, again);
    }

    #[test]
    fn nan_payloads_survive_bit_exactly() {
        let quiet = f64::from_bits(0x7ff8_0000_0000_0001);
        let entries = vec![CheckpointEntry {
            name: "odd".into(),
            shape: vec![2],
            data: vec![quiet, f64::NEG_INFINITY],
        }];
        let back = decode_checkpoint(&encode_checkpoint(&entries).unwrap()).unwrap();
        assert_eq!(back[0].data[0].to_bits(), quiet.to_bits());
        assert_eq!(back[0].data[1], f64::NEG_INFINITY);
    }

    #[test]
    fn structural_corruption_is_rejected() {
        let bytes = encode_checkpoint(&sample_entries()).unwrap();

        let mut bad_magic = bytes.clone();
        bad_magic[0] ^= 0xFF;
        assert!(matches!(decode_checkpoint(&bad_magic), Err(CheckpointError::BadMagic)));

        let mut bad_version = bytes.clone();
        bad_version[8] = 99;
        assert!(matches!(
            decode_checkpoint(&bad_version),
            Err(CheckpointError::UnsupportedVersion { got: 99 })
        ));

        assert!(decode_checkpoint(&bytes[..bytes.len() - 8]).is_err());
        assert!(decode_checkpoint(&bytes[..10]).is_err());
        assert!(decode_checkpoint(&bytes[..25]).is_err());

        let mut extra = bytes.clone();
        extra.extend_from_slice(&[0u8; 8]);
        assert!(decode_checkpoint(&extra).is_err(), "trailing payload must fail");
    }

    #[test]
    fn absurd_manifest_shapes_are_rejected_without_overflow() {
        // hand-built container whose second entry claims usize::MAX elements
        let manifest = format!(
            concat!(
                r#"{{"entries":[{{"name":"a","shape":[1],"offset":0}},"#,
                r#"{{"name":"b","shape":[{}],"offset":1}}]}}"#
            ),
            u64::MAX
        );
        let mut bytes = Vec::new();
        bytes.extend_from_slice(MAGIC);
        bytes.extend_from_slice(&VERSION.to_le_bytes());
        bytes.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
        bytes.extend_from_slice(manifest.as_bytes());
        bytes.extend_from_slice(&[0u8; 16]);
        assert!(matches!(
            decode_checkpoint(&bytes),
            Err(CheckpointError::Truncated { .. })
        ));
    }

    #[test]
    fn duplicate_and_oversized_entries_fail_encoding() {
        let mut entries = sample_entries();
        entries.push(entries[0].clone());
        assert!(matches!(
            encode_checkpoint(&entries),
            Err(CheckpointError::DuplicateName { .. })
        ));

        let wrong = vec![CheckpointEntry { name: "x".into(), shape: vec![3], data: vec![1.0] }];
        assert!(matches!(encode_checkpoint(&wrong), Err(CheckpointError::EntryLength { .. })));
    }

    #[test]
    fn params_load_by_name_with_strict_matching() {
        let w = Tensor::param(vec![0.0; 6], &[2, 3]).unwrap();
        let b = Tensor::param(vec![0.0; 3], &[3]).unwrap();
        let params: ParamList = vec![("a.w".into(), w.clone()), ("a.b".into(), b.clone())];

        let entries = vec![
            CheckpointEntry { name: "a.b".into(), shape: vec![3], data: vec![7.0, 8.0, 9.0] },
            CheckpointEntry {
                name: "a.w".into(),
                shape: vec![2, 3],
                data: vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0],
            },
        ];
        load_into_params(&entries, &params).unwrap();
        assert_eq!(w.to_vec(), vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert_eq!(b.to_vec(), vec![7.0, 8.0, 9.0]);

        let missing = vec![entries[0].clone()];
        assert!(matches!(
            load_into_params(&missing, &params),
            Err(CheckpointError::EntryCount { .. })
        ));

        let mut wrong_shape = entries.clone();
        wrong_shape[1].shape = vec![3, 2];
        assert!(matches!(
            load_into_params(&wrong_shape, &params),
            Err(CheckpointError::ShapeMismatch { .. })
        ));

        let mut wrong_name = entries;
        wrong_name[0].name = "a.bias".into();
        assert!(matches!(
            load_into_params(&wrong_name, &params),
            Err(CheckpointError::MissingParam { .. })
        ));
    }

    #[test]
    fn file_roundtrip_via_tempdir() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let entries = sample_entries();
        save_checkpoint(&path, &entries).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back, entries);
    }
}
