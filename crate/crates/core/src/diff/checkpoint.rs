//! Binary checkpoint format.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! b"MLAT" | version: u32 | count: u32 |
//!   count × ( name_len: u32 | name: UTF-8 | rank: u32 | extents: rank × u64 | values: f64 × Π extents )
//! ```
//!
//! Optimizer moments are stored under `opt/m/<param>` and `opt/v/<param>`,
//! the step counter as the scalar `opt/step`. Entries under `meta/` carry
//! caller-defined metadata and are not loaded as parameters.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{DiffError, ParamStore, Tensor};

const MAGIC: &[u8; 4] = b"MLAT";
pub const CHECKPOINT_VERSION: u32 = 1;
const OPT_PREFIX: &str = "opt/";
const META_PREFIX: &str = "meta/";

pub fn write_checkpoint<'t, W: Write>(
    w: &mut W,
    entries: impl IntoIterator<Item = (&'t str, &'t Tensor)>,
) -> Result<(), DiffError> {
    let entries: Vec<_> = entries.into_iter().collect();
    w.write_all(MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    w.write_all(&(entries.len() as u32).to_le_bytes())?;
    for (name, t) in entries {
        let bytes = name.as_bytes();
        w.write_all(&(bytes.len() as u32).to_le_bytes())?;
        w.write_all(bytes)?;
        w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
        for &e in t.shape() {
            w.write_all(&(e as u64).to_le_bytes())?;
        }
        for v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32, DiffError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64, DiffError> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

pub fn read_checkpoint<R: Read>(r: &mut R) -> Result<Vec<(String, Tensor)>, DiffError> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(DiffError::Checkpoint(format!("bad magic {magic:?}")));
    }
    let version = read_u32(r)?;
    if version != CHECKPOINT_VERSION {
        return Err(DiffError::Checkpoint(format!("unsupported version {version}")));
    }
    let count = read_u32(r)? as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let len = read_u32(r)? as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|e| DiffError::Checkpoint(e.to_string()))?;
        let rank = read_u32(r)? as usize;
        let shape = (0..rank).map(|_| read_u64(r).map(|v| v as usize)).collect::<Result<Vec<_>, _>>()?;
        let n: usize = shape.iter().product();
        let mut buf = vec![0u8; n * 8];
        r.read_exact(&mut buf)?;
        let data = buf.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        out.push((name, Tensor::new(shape, data)?));
    }
    Ok(out)
}

/// Writes parameters, optimizer state and `meta` entries to `path`.
pub fn save_checkpoint(path: &Path, store: &ParamStore, meta: &BTreeMap<String, Tensor>) -> Result<(), DiffError> {
    let mut entries: Vec<(String, &Tensor)> = store.iter().map(|(k, v)| (k.clone(), v)).collect();
    for (k, v) in &store.opt.m {
        entries.push((format!("{OPT_PREFIX}m/{k}"), v));
    }
    for (k, v) in &store.opt.v {
        entries.push((format!("{OPT_PREFIX}v/{k}"), v));
    }
    let step = Tensor::scalar(store.opt.step as f64);
    entries.push((format!("{OPT_PREFIX}step"), &step));
    for (k, v) in meta {
        entries.push((format!("{META_PREFIX}{k}"), v));
    }
    let mut w = BufWriter::new(File::create(path)?);
    write_checkpoint(&mut w, entries.iter().map(|(k, v)| (k.as_str(), *v)))?;
    w.flush()?;
    Ok(())
}

/// Inverse of [`save_checkpoint`].
pub fn load_checkpoint(path: &Path) -> Result<(ParamStore, BTreeMap<String, Tensor>), DiffError> {
    let mut r = BufReader::new(File::open(path)?);
    let entries = read_checkpoint(&mut r)?;
    let mut store = ParamStore::new();
    let mut meta = BTreeMap::new();
    for (name, t) in entries {
        if let Some(rest) = name.strip_prefix(META_PREFIX) {
            meta.insert(rest.to_string(), t);
        } else if let Some(rest) = name.strip_prefix(OPT_PREFIX) {
            if rest == "step" {
                store.opt.step = t.item() as u64;
            } else if let Some(p) = rest.strip_prefix("m/") {
                store.opt.m.insert(p.to_string(), t);
            } else if let Some(p) = rest.strip_prefix("v/") {
                store.opt.v.insert(p.to_string(), t);
            } else {
                return Err(DiffError::Checkpoint(format!("unknown optimizer entry `{name}`")));
            }
        } else {
            store.insert(name, t);
        }
    }
    Ok((store, meta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diff::{AdamW, Graph};

    #[test]
    fn header_bytes_are_exact() {
        let t = Tensor::from_vec(1, 2, vec![1.0, -2.5]);
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, [("ab", &t)]).unwrap();
        let mut expect = b"MLAT".to_vec();
        expect.extend(1u32.to_le_bytes());
        expect.extend(1u32.to_le_bytes());
        expect.extend(2u32.to_le_bytes());
        expect.extend(b"ab");
        expect.extend(2u32.to_le_bytes());
        expect.extend(1u64.to_le_bytes());
        expect.extend(2u64.to_le_bytes());
        expect.extend(1.0f64.to_le_bytes());
        expect.extend((-2.5f64).to_le_bytes());
        assert_eq!(buf, expect);
    }

    #[test]
    fn save_load_preserves_params_and_optimizer() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::from_vec(2, 2, vec![0.1, 0.2, 0.3, 0.4]));
        let grads = {
            let mut g = Graph::new(&store);
            let w = g.param("w").unwrap();
            let s = g.sum(w);
            g.backward(s).unwrap()
        };
        AdamW::default().step(&mut store, &grads, 0.01).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.ckpt");
        let mut meta = BTreeMap::new();
        meta.insert("note".to_string(), Tensor::scalar(7.0));
        save_checkpoint(&path, &store, &meta).unwrap();
        let (loaded, m) = load_checkpoint(&path).unwrap();
        assert_eq!(loaded.get("w"), store.get("w"));
        assert_eq!(loaded.step(), 1);
        assert_eq!(loaded.opt.m, store.opt.m);
        assert_eq!(m["note"].item(), 7.0);
    }

    #[test]
    fn rejects_bad_magic() {
        let mut r: &[u8] = b"NOPE\x01\x00\x00\x00";
        assert!(read_checkpoint(&mut r).is_err());
    }
}
