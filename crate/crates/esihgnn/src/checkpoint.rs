//! Parameter checkpoints: a flat container of named arrays.
//!
//! File layout:
//! - 8 bytes: little-endian u64, byte length of the JSON manifest
//! - manifest: `{"arrays": [{"name", "shape", "offset"}]}` where
//!   `offset` is the byte offset of the array within the data section
//! - data section: all arrays back to back as little-endian 32-bit
//!   floats, in manifest order

use crate::error::{Error, Result};
use crate::tape::ParamStore;
use crate::tensor::{Real, Tensor};
use serde::{Deserialize, Serialize};
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

#[derive(Serialize, Deserialize)]
struct Manifest {
    arrays: Vec<ArrayEntry>,
}

#[derive(Serialize, Deserialize)]
struct ArrayEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

/// Write every parameter in store order.
pub fn save<T: Real>(store: &ParamStore<T>, path: &Path) -> Result<()> {
    let mut arrays = Vec::new();
    let mut data: Vec<u8> = Vec::new();
    for id in store.ids() {
        let t = store.value(id);
        arrays.push(ArrayEntry {
            name: store.name(id).to_string(),
            shape: t.shape().to_vec(),
            offset: data.len(),
        });
        for &v in t.data() {
            data.extend_from_slice(&v.to_f32().to_le_bytes());
        }
    }
    let manifest = serde_json::to_vec(&Manifest { arrays })?;
    let mut f = File::create(path)?;
    f.write_all(&(manifest.len() as u64).to_le_bytes())?;
    f.write_all(&manifest)?;
    f.write_all(&data)?;
    Ok(())
}

/// Load a checkpoint into an existing store. Names and shapes must match
/// the store's layout exactly.
pub fn load<T: Real>(store: &mut ParamStore<T>, path: &Path) -> Result<()> {
    let mut bytes = Vec::new();
    File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 8 {
        return Err(Error::Parse { line: 0, detail: "checkpoint too short".into() });
    }
    let mlen = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
    if bytes.len() < 8 + mlen {
        return Err(Error::Parse { line: 0, detail: "truncated manifest".into() });
    }
    let manifest: Manifest = serde_json::from_slice(&bytes[8..8 + mlen])?;
    let data = &bytes[8 + mlen..];

    if manifest.arrays.len() != store.len() {
        return Err(Error::Parse {
            line: 0,
            detail: format!(
                "checkpoint has {} arrays, model expects {}",
                manifest.arrays.len(),
                store.len()
            ),
        });
    }
    for (entry, id) in manifest.arrays.iter().zip(store.ids().collect::<Vec<_>>()) {
        if entry.name != store.name(id) || entry.shape != store.value(id).shape() {
            return Err(Error::Parse {
                line: 0,
                detail: format!("array '{}' does not match model layout", entry.name),
            });
        }
        let count: usize = entry.shape.iter().product();
        let end = entry.offset + 4 * count;
        if end > data.len() {
            return Err(Error::Parse {
                line: 0,
                detail: format!("array '{}' out of range", entry.name),
            });
        }
        let values: Vec<T> = data[entry.offset..end]
            .chunks_exact(4)
            .map(|c| T::from_f32(f32::from_le_bytes([c[0], c[1], c[2], c[3]])))
            .collect();
        *store.value_mut(id) = Tensor::new(entry.shape.clone(), values)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    #[test]
    fn round_trip_preserves_values() {
        let mut store = ParamStore::<f32>::new();
        store.register("a", Tensor::vector(vec![1.5, -2.25]));
        store.register("b", Tensor::matrix(2, 2, vec![0.1, 0.2, 0.3, 0.4]).unwrap());
        let dir = tempdir().unwrap();
        let p = dir.path().join("ckpt.bin");
        save(&store, &p).unwrap();

        let mut other = ParamStore::<f32>::new();
        let a = other.register("a", Tensor::zeros(vec![2]));
        let b = other.register("b", Tensor::zeros(vec![2, 2]));
        load(&mut other, &p).unwrap();
        assert_eq!(other.value(a).data(), &[1.5, -2.25]);
        assert_eq!(other.value(b).at2(1, 1), 0.4);
    }

    #[test]
    fn layout_mismatch_rejected() {
        let mut store = ParamStore::<f32>::new();
        store.register("a", Tensor::vector(vec![1.0]));
        let dir = tempdir().unwrap();
        let p = dir.path().join("ckpt.bin");
        save(&store, &p).unwrap();

        let mut other = ParamStore::<f32>::new();
        other.register("wrong_name", Tensor::zeros(vec![1]));
        assert!(load(&mut other, &p).is_err());
    }

    #[test]
    fn save_is_deterministic() {
        let make = || {
            let mut s = ParamStore::<f32>::new();
            s.register("x", Tensor::vector(vec![0.25, 0.5, 0.75]));
            s
        };
        let dir = tempdir().unwrap();
        let p1 = dir.path().join("a.bin");
        let p2 = dir.path().join("b.bin");
        save(&make(), &p1).unwrap();
        save(&make(), &p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }
}
