//! Checkpoint file: versioned binary manifest of named parameters plus an
//! arbitrary JSON metadata blob. Round-trips are bit-exact.
//!
//! Layout (all integers little-endian):
//!   magic "PLMK" | u32 version | u64 meta_len | meta JSON bytes |
//!   u64 count | entries
//! Entry: u16 name_len | name utf8 | u8 ndims | u64 dims.. | f64 data..

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::nn::ParamStore;
use crate::TensorError;

const MAGIC: &[u8; 4] = b"PLMK";
const VERSION: u32 = 1;

pub fn save(
    store: &ParamStore,
    meta: &serde_json::Value,
    path: &Path,
) -> Result<(), TensorError> {
    let f = File::create(path).map_err(|e| TensorError::Io(path.display().to_string(), e.to_string()))?;
    let mut w = BufWriter::new(f);
    let werr = |e: std::io::Error| TensorError::Io(path.display().to_string(), e.to_string());

    w.write_all(MAGIC).map_err(werr)?;
    w.write_all(&VERSION.to_le_bytes()).map_err(werr)?;
    let meta_bytes = serde_json::to_vec(meta).expect("meta serializes");
    w.write_all(&(meta_bytes.len() as u64).to_le_bytes()).map_err(werr)?;
    w.write_all(&meta_bytes).map_err(werr)?;

    let names: Vec<String> = store.names().cloned().collect();
    w.write_all(&(names.len() as u64).to_le_bytes()).map_err(werr)?;
    for name in &names {
        let p = store.get(name).unwrap();
        w.write_all(&(name.len() as u16).to_le_bytes()).map_err(werr)?;
        w.write_all(name.as_bytes()).map_err(werr)?;
        let shape = p.shape();
        w.write_all(&[shape.len() as u8]).map_err(werr)?;
        for d in &shape {
            w.write_all(&(*d as u64).to_le_bytes()).map_err(werr)?;
        }
        for v in p.value() {
            w.write_all(&v.to_le_bytes()).map_err(werr)?;
        }
    }
    w.flush().map_err(werr)
}

pub struct Loaded {
    pub meta: serde_json::Value,
    pub params: BTreeMap<String, (Vec<usize>, Vec<f64>)>,
}

pub fn load(path: &Path) -> Result<Loaded, TensorError> {
    let f = File::open(path).map_err(|e| TensorError::Io(path.display().to_string(), e.to_string()))?;
    let mut r = BufReader::new(f);
    let rerr = |e: std::io::Error| TensorError::Io(path.display().to_string(), e.to_string());

    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(rerr)?;
    if &magic != MAGIC {
        return Err(TensorError::Parse(format!(
            "{}: bad checkpoint magic",
            path.display()
        )));
    }
    let mut b4 = [0u8; 4];
    r.read_exact(&mut b4).map_err(rerr)?;
    let version = u32::from_le_bytes(b4);
    if version != VERSION {
        return Err(TensorError::Parse(format!(
            "{}: unsupported checkpoint version {version}",
            path.display()
        )));
    }
    let mut b8 = [0u8; 8];
    r.read_exact(&mut b8).map_err(rerr)?;
    let meta_len = u64::from_le_bytes(b8) as usize;
    let mut meta_bytes = vec![0u8; meta_len];
    r.read_exact(&mut meta_bytes).map_err(rerr)?;
    let meta: serde_json::Value = serde_json::from_slice(&meta_bytes)
        .map_err(|e| TensorError::Parse(format!("{}: meta: {e}", path.display())))?;

    r.read_exact(&mut b8).map_err(rerr)?;
    let count = u64::from_le_bytes(b8) as usize;
    let mut params = BTreeMap::new();
    for _ in 0..count {
        let mut b2 = [0u8; 2];
        r.read_exact(&mut b2).map_err(rerr)?;
        let name_len = u16::from_le_bytes(b2) as usize;
        let mut name_bytes = vec![0u8; name_len];
        r.read_exact(&mut name_bytes).map_err(rerr)?;
        let name = String::from_utf8(name_bytes)
            .map_err(|e| TensorError::Parse(format!("{}: name: {e}", path.display())))?;
        let mut b1 = [0u8; 1];
        r.read_exact(&mut b1).map_err(rerr)?;
        let ndims = b1[0] as usize;
        let mut shape = Vec::with_capacity(ndims);
        for _ in 0..ndims {
            r.read_exact(&mut b8).map_err(rerr)?;
            shape.push(u64::from_le_bytes(b8) as usize);
        }
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            r.read_exact(&mut b8).map_err(rerr)?;
            data.push(f64::from_le_bytes(b8));
        }
        params.insert(name, (shape, data));
    }
    Ok(Loaded { meta, params })
}

/// Copy loaded values into an existing store. Every store parameter must be
/// present with a matching shape.
pub fn restore(store: &ParamStore, loaded: &Loaded) -> Result<(), TensorError> {
    for name in store.names() {
        let p = store.get(name).unwrap();
        let (shape, data) = loaded.params.get(name).ok_or_else(|| {
            TensorError::Parse(format!("checkpoint missing parameter {name}"))
        })?;
        if *shape != p.shape() {
            return Err(TensorError::Parse(format!(
                "checkpoint shape mismatch for {name}: {:?} vs {:?}",
                shape,
                p.shape()
            )));
        }
        p.set_value(data.clone());
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamStore;

    #[test]
    fn roundtrip_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.bin");
        let mut store = ParamStore::new();
        store.register("a.w", vec![2, 2], vec![1.0, -2.5, 3.25e-300, f64::MIN_POSITIVE]);
        store.register("b", vec![3], vec![0.1, 0.2, 0.3]);
        let meta = serde_json::json!({"seed": 7, "note": "test"});
        save(&store, &meta, &path).unwrap();
        let loaded = load(&path).unwrap();
        assert_eq!(loaded.meta["seed"], 7);
        let (shape, data) = &loaded.params["a.w"];
        assert_eq!(shape, &vec![2, 2]);
        // bit-exact comparison
        let orig = store.get("a.w").unwrap().value();
        assert!(data.iter().zip(&orig).all(|(a, b)| a.to_bits() == b.to_bits()));
        restore(&store, &loaded).unwrap();
    }

    #[test]
    fn corrupted_magic_is_parse_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.bin");
        std::fs::write(&path, b"NOPE0000000000000000").unwrap();
        assert!(matches!(load(&path), Err(TensorError::Parse(_))));
    }
}
