//! Checkpoint files: one line of JSON header followed by the raw
//! little-endian `f64` payload of every array, in header order.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::array::Array;
use super::params::ParamStore;
use crate::error::{Error, Result};

pub const FORMAT: &str = "blocktraj-checkpoint-v1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArrayEntry {
    pub name: String,
    pub shape: [usize; 2],
    pub dtype: String,
    pub byte_offset: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format: String,
    pub config_hash: String,
    pub network_hash: String,
    pub vocab_size: usize,
    pub step: u64,
    /// Model configuration, stored verbatim for reconstruction.
    pub config: serde_json::Value,
    pub arrays: Vec<ArrayEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointMeta {
    pub config_hash: String,
    pub network_hash: String,
    pub vocab_size: usize,
    pub step: u64,
    pub config: serde_json::Value,
}

pub fn save(path: &Path, store: &ParamStore, meta: &CheckpointMeta) -> Result<()> {
    let mut arrays = Vec::with_capacity(store.len());
    let mut offset = 0u64;
    for id in store.ids() {
        let v = store.value(id);
        arrays.push(ArrayEntry {
            name: store.name(id).to_string(),
            shape: v.shape(),
            dtype: "f64".into(),
            byte_offset: offset,
        });
        offset += 8 * v.len() as u64;
    }
    let header = CheckpointHeader {
        format: FORMAT.into(),
        config_hash: meta.config_hash.clone(),
        network_hash: meta.network_hash.clone(),
        vocab_size: meta.vocab_size,
        step: meta.step,
        config: meta.config.clone(),
        arrays,
    };
    let mut buf = serde_json::to_vec(&header)?;
    buf.push(b'\n');
    for id in store.ids() {
        for v in store.value(id).data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let tmp = path.with_extension("tmp");
    let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(&buf).map_err(|e| Error::io(&tmp, e))?;
    drop(f);
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<(CheckpointHeader, Vec<(String, Array)>)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::Integrity(format!("{}: missing checkpoint header", path.display())))?;
    let header: CheckpointHeader = serde_json::from_slice(&bytes[..nl])
        .map_err(|e| Error::Integrity(format!("{}: bad checkpoint header: {e}", path.display())))?;
    if header.format != FORMAT {
        return Err(Error::Integrity(format!("{}: unknown format {}", path.display(), header.format)));
    }
    let payload = &bytes[nl + 1..];
    let mut arrays = Vec::with_capacity(header.arrays.len());
    for e in &header.arrays {
        if e.dtype != "f64" {
            return Err(Error::Integrity(format!("{}: unsupported dtype {}", e.name, e.dtype)));
        }
        let n = e.shape[0] * e.shape[1];
        let start = e.byte_offset as usize;
        let end = start + 8 * n;
        if end > payload.len() {
            return Err(Error::Integrity(format!("{}: payload truncated", e.name)));
        }
        let data = payload[start..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        arrays.push((e.name.clone(), Array::from_vec(e.shape[0], e.shape[1], data)?));
    }
    Ok((header, arrays))
}

/// Copy loaded arrays into a store with identical names and shapes.
pub fn restore(store: &mut ParamStore, arrays: Vec<(String, Array)>) -> Result<()> {
    if arrays.len() != store.len() {
        return Err(Error::Integrity(format!(
            "checkpoint holds {} arrays, model expects {}",
            arrays.len(),
            store.len()
        )));
    }
    for (name, a) in arrays {
        let id = store
            .id(&name)
            .ok_or_else(|| Error::Integrity(format!("checkpoint array {name} unknown to the model")))?;
        if store.value(id).shape() != a.shape() {
            return Err(Error::Integrity(format!(
                "{name}: checkpoint shape {:?} vs model {:?}",
                a.shape(),
                store.value(id).shape()
            )));
        }
        *store.value_mut(id) = a;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let mut s = ParamStore::new();
        let mut rng = crate::rng::stream(1, "ck");
        s.add_normal("a.w", 3, 2, 1.0, &mut rng).unwrap();
        s.add_normal("rne.b", 1, 5, 1.0, &mut rng).unwrap();
        let meta = CheckpointMeta {
            config_hash: "c".into(),
            network_hash: "n".into(),
            vocab_size: 9,
            step: 4,
            config: serde_json::json!({"d": 3}),
        };
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        save(&p, &s, &meta).unwrap();
        let (h, arrays) = load(&p).unwrap();
        assert_eq!(h.vocab_size, 9);
        assert_eq!(h.arrays[1].byte_offset, 48);
        let mut t = s.clone();
        for id in t.ids().collect::<Vec<_>>() {
            t.value_mut(id).data_mut().fill(0.0);
        }
        restore(&mut t, arrays).unwrap();
        for id in s.ids() {
            assert_eq!(s.value(id), t.value(id));
        }
        let mut bytes = std::fs::read(&p).unwrap();
        bytes.truncate(bytes.len() - 3);
        std::fs::write(&p, bytes).unwrap();
        assert!(matches!(load(&p), Err(Error::Integrity(_))));
    }
}
