//! Binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic        8 bytes  "TDCKPT\0\0"
//! version      u32      FORMAT_VERSION
//! manifest     u32 length + UTF-8 JSON
//! record count u32
//! record*      u32 name length + UTF-8 name
//!              u8  dtype tag (1 = f64)
//!              u32 rank, then rank × u64 extents
//!              product(extents) × 8-byte IEEE-754 payload
//! ```
//!
//! Optimizer moments are stored as ordinary records named `adam.m/<param>`
//! and `adam.v/<param>`; the optimizer step count lives in the manifest
//! under `optimizer_step`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde_json::Value;

use crate::array::Array;
use crate::error::{Result, TensorError};
use crate::params::ParameterStore;

pub const MAGIC: &[u8; 8] = b"TDCKPT\0\0";
pub const FORMAT_VERSION: u32 = 1;
const DTYPE_F64: u8 = 1;
const MOMENT_M: &str = "adam.m/";
const MOMENT_V: &str = "adam.v/";

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub manifest: Value,
    pub records: Vec<(String, Array)>,
}

fn bad(msg: impl Into<String>) -> TensorError {
    TensorError::Checkpoint(msg.into())
}

pub fn write_checkpoint<W: Write>(mut w: W, ckpt: &Checkpoint) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    let manifest = serde_json::to_vec(&ckpt.manifest).map_err(|e| bad(e.to_string()))?;
    w.write_all(&(manifest.len() as u32).to_le_bytes())?;
    w.write_all(&manifest)?;
    w.write_all(&(ckpt.records.len() as u32).to_le_bytes())?;
    for (name, array) in &ckpt.records {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&[DTYPE_F64])?;
        w.write_all(&(array.ndim() as u32).to_le_bytes())?;
        for &d in array.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for v in array.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_string<R: Read>(r: &mut R, len: usize) -> Result<String> {
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|_| bad("name is not valid UTF-8"))
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Checkpoint> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(bad("not a checkpoint file (bad magic)"));
    }
    let version = read_u32(&mut r)?;
    if version != FORMAT_VERSION {
        return Err(bad(format!("unsupported format version {version}")));
    }
    let mlen = read_u32(&mut r)? as usize;
    let manifest_text = read_string(&mut r, mlen)?;
    let manifest: Value = serde_json::from_str(&manifest_text).map_err(|e| bad(format!("manifest: {e}")))?;
    let count = read_u32(&mut r)?;
    let mut records = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let nlen = read_u32(&mut r)? as usize;
        let name = read_string(&mut r, nlen)?;
        let mut tag = [0u8; 1];
        r.read_exact(&mut tag)?;
        if tag[0] != DTYPE_F64 {
            return Err(bad(format!("record `{name}` has unsupported dtype tag {}", tag[0])));
        }
        let rank = read_u32(&mut r)? as usize;
        let shape = (0..rank)
            .map(|_| read_u64(&mut r).map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let mut payload = vec![0u8; n * 8];
        r.read_exact(&mut payload)?;
        let data = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        records.push((name, Array::new(shape, data)?));
    }
    Ok(Checkpoint { manifest, records })
}

/// Writes `store` (values, moments and step) with `manifest` to `path`.
pub fn save_store(path: &Path, store: &ParameterStore, manifest: Value) -> Result<()> {
    let mut manifest = manifest;
    if let Value::Object(map) = &mut manifest {
        map.insert("optimizer_step".into(), Value::from(store.step()));
    }
    let mut records = Vec::with_capacity(store.len() * 3);
    for (name, value) in store.iter() {
        records.push((name.to_string(), value.clone()));
    }
    for (name, value) in store.iter() {
        let (m, v) = store.moments(name).expect("parameter listed by iter");
        records.push((format!("{MOMENT_M}{name}"), Array::new(value.shape().to_vec(), m.to_vec())?));
        records.push((format!("{MOMENT_V}{name}"), Array::new(value.shape().to_vec(), v.to_vec())?));
    }
    let file = File::create(path)?;
    write_checkpoint(BufWriter::new(file), &Checkpoint { manifest, records })
}

/// Reads a store written by [`save_store`], returning it with its manifest.
pub fn load_store(path: &Path) -> Result<(ParameterStore, Value)> {
    let file = File::open(path)?;
    let ckpt = read_checkpoint(BufReader::new(file))?;
    let mut store = ParameterStore::new();
    let mut moments = Vec::new();
    for (name, value) in ckpt.records {
        if name.starts_with(MOMENT_M) || name.starts_with(MOMENT_V) {
            moments.push((name, value));
        } else {
            store.insert(&name, value)?;
        }
    }
    let mut pending: std::collections::HashMap<String, (Option<Vec<f64>>, Option<Vec<f64>>)> = Default::default();
    for (name, value) in moments {
        if let Some(p) = name.strip_prefix(MOMENT_M) {
            pending.entry(p.to_string()).or_default().0 = Some(value.into_vec());
        } else if let Some(p) = name.strip_prefix(MOMENT_V) {
            pending.entry(p.to_string()).or_default().1 = Some(value.into_vec());
        }
    }
    for (name, (m, v)) in pending {
        match (m, v) {
            (Some(m), Some(v)) => store.set_moments(&name, m, v)?,
            _ => return Err(bad(format!("incomplete optimizer moments for `{name}`"))),
        }
    }
    let step = ckpt.manifest.get("optimizer_step").and_then(Value::as_u64).unwrap_or(0);
    store.set_step(step);
    Ok((store, ckpt.manifest))
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeMap;

    use super::*;
    use crate::params::{AdamW, Init, ParamSpec};

    #[test]
    fn store_round_trip_preserves_values_moments_and_step() {
        let specs = [
            ParamSpec::new("enc.w", &[3, 4], Init::Uniform { fan_in: 3 }),
            ParamSpec::new("enc.b", &[4], Init::Zeros),
        ];
        let mut store = ParameterStore::initialize(&specs, 1).unwrap();
        let grads: BTreeMap<String, Array> = store
            .iter()
            .map(|(n, v)| (n.to_string(), v.map(|x| x * 0.5 + 0.1)))
            .collect();
        store.adamw_step(&grads, &AdamW::default()).unwrap();

        let dir = std::env::temp_dir().join(format!("tdckpt-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("a.ckpt");
        save_store(&path, &store, serde_json::json!({"kind": "test"})).unwrap();
        let (loaded, manifest) = load_store(&path).unwrap();
        assert_eq!(manifest["kind"], "test");
        assert_eq!(loaded.step(), 1);
        for (name, value) in store.iter() {
            assert_eq!(loaded.get(name).unwrap(), value);
            assert_eq!(loaded.moments(name), store.moments(name));
        }
        loaded.validate(&specs).unwrap();
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn header_is_little_endian_and_versioned() {
        let ckpt = Checkpoint {
            manifest: serde_json::json!({}),
            records: vec![("x".into(), Array::new(vec![2], vec![1.0, -2.0]).unwrap())],
        };
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &ckpt).unwrap();
        assert_eq!(&buf[..8], MAGIC);
        assert_eq!(&buf[8..12], &1u32.to_le_bytes());
        let tail = &buf[buf.len() - 16..];
        assert_eq!(tail, [1.0f64.to_le_bytes(), (-2.0f64).to_le_bytes()].concat());
        let back = read_checkpoint(buf.as_slice()).unwrap();
        assert_eq!(back.records[0].1.data(), &[1.0, -2.0]);

        let mut corrupt = buf.clone();
        corrupt[0] = b'X';
        assert!(read_checkpoint(corrupt.as_slice()).is_err());
        assert!(read_checkpoint(&buf[..buf.len() - 3]).is_err());
    }
}
