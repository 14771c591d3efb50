//! Checkpoint file format.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic  "PRNCKPT1"                      8 bytes
//! count  u32                             number of entries
//! entry  u32 name_len, name (UTF-8), u8 dtype (0=f32,1=f64,2=u8),
//!        u32 ndim, ndim×u64 dims, raw element data
//! ```
//!
//! Masks are stored as separate u8 entries named `<param>.mask`. Store
//! metadata (architecture id, creation seed, class count) travels as
//! reserved `__meta__.*` u8 entries.

use crate::arch::{build_architecture, Architecture};
use crate::error::{Error, Result};
use crate::store::ParamStore;
use crate::tensor::{Dtype, Element, Tensor};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

pub const MAGIC: &[u8; 8] = b"PRNCKPT1";

const META_ARCH: &str = "__meta__.arch";
const META_SEED: &str = "__meta__.seed";
const META_CLASSES: &str = "__meta__.classes";

/// One decoded checkpoint entry.
#[derive(Debug, Clone, PartialEq)]
pub struct RawEntry {
    pub name: String,
    pub dtype: Dtype,
    pub dims: Vec<usize>,
    pub bytes: Vec<u8>,
}

impl RawEntry {
    pub fn elems(&self) -> usize {
        self.dims.iter().product()
    }
}

pub fn write_entries(path: &Path, entries: &[RawEntry]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&(entries.len() as u32).to_le_bytes())?;
    for e in entries {
        w.write_all(&(e.name.len() as u32).to_le_bytes())?;
        w.write_all(e.name.as_bytes())?;
        w.write_all(&[e.dtype.tag()])?;
        w.write_all(&(e.dims.len() as u32).to_le_bytes())?;
        for &d in &e.dims {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        w.write_all(&e.bytes)?;
    }
    w.flush()?;
    Ok(())
}

struct Cursor<R> {
    inner: R,
    offset: u64,
}

impl<R: Read> Cursor<R> {
    fn take(&mut self, n: usize, what: &str) -> Result<Vec<u8>> {
        let mut buf = vec![0u8; n];
        self.inner.read_exact(&mut buf).map_err(|_| Error::Parse {
            offset: self.offset,
            msg: format!("truncated while reading {what}"),
        })?;
        self.offset += n as u64;
        Ok(buf)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        let b = self.take(8, what)?;
        Ok(u64::from_le_bytes([b[0], b[1], b[2], b[3], b[4], b[5], b[6], b[7]]))
    }
}

pub fn read_entries(path: &Path) -> Result<Vec<RawEntry>> {
    let mut c = Cursor {
        inner: BufReader::new(File::open(path)?),
        offset: 0,
    };
    let magic = c.take(8, "magic")?;
    if magic != MAGIC {
        return Err(Error::Parse {
            offset: 0,
            msg: "bad magic (not a checkpoint file)".into(),
        });
    }
    let count = c.u32("entry count")?;
    let mut entries = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let name_len = c.u32("name length")? as usize;
        let name_off = c.offset;
        let name = String::from_utf8(c.take(name_len, "name")?).map_err(|_| Error::Parse {
            offset: name_off,
            msg: "entry name is not UTF-8".into(),
        })?;
        let tag_off = c.offset;
        let tag = c.take(1, "dtype tag")?[0];
        let dtype = Dtype::from_tag(tag).ok_or(Error::Parse {
            offset: tag_off,
            msg: format!("unknown dtype tag {tag}"),
        })?;
        let ndim = c.u32("ndim")? as usize;
        let mut dims = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            dims.push(c.u64("dim")? as usize);
        }
        let elems: usize = dims.iter().product();
        let elem_size = match dtype {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
            Dtype::U8 => 1,
        };
        let bytes = c.take(elems * elem_size, &format!("data of '{name}'"))?;
        entries.push(RawEntry {
            name,
            dtype,
            dims,
            bytes,
        });
    }
    // must be at EOF now
    let mut probe = [0u8; 1];
    if c.inner.read(&mut probe)? != 0 {
        return Err(Error::Parse {
            offset: c.offset,
            msg: "trailing bytes after final entry".into(),
        });
    }
    Ok(entries)
}

/// Serialize a store: every weight tensor, every mask (as `<name>.mask`),
/// and the reserved metadata entries.
pub fn save<E: Element>(store: &ParamStore<E>, classes: usize, path: &Path) -> Result<()> {
    let mut entries = Vec::new();
    entries.push(RawEntry {
        name: META_ARCH.into(),
        dtype: Dtype::U8,
        dims: vec![store.arch_id.len()],
        bytes: store.arch_id.as_bytes().to_vec(),
    });
    entries.push(RawEntry {
        name: META_SEED.into(),
        dtype: Dtype::U8,
        dims: vec![8],
        bytes: store.seed.to_le_bytes().to_vec(),
    });
    entries.push(RawEntry {
        name: META_CLASSES.into(),
        dtype: Dtype::U8,
        dims: vec![8],
        bytes: (classes as u64).to_le_bytes().to_vec(),
    });
    for e in store.entries() {
        entries.push(RawEntry {
            name: e.name.clone(),
            dtype: E::DTYPE,
            dims: e.weight.shape().to_vec(),
            bytes: E::to_le_bytes_vec(e.weight.data()),
        });
        entries.push(RawEntry {
            name: format!("{}.mask", e.name),
            dtype: Dtype::U8,
            dims: e.weight.shape().to_vec(),
            bytes: e.mask.clone(),
        });
    }
    write_entries(path, &entries)
}

/// Load a store saved by [`save`]. Returns the store, its architecture and
/// the class count. Gradients and momentum come back zeroed.
pub fn load<E: Element>(path: &Path) -> Result<(ParamStore<E>, Architecture, usize)> {
    let entries = read_entries(path)?;
    let find = |name: &str| -> Result<&RawEntry> {
        entries
            .iter()
            .find(|e| e.name == name)
            .ok_or_else(|| Error::Data(format!("checkpoint missing entry '{name}'")))
    };
    let arch_id = String::from_utf8(find(META_ARCH)?.bytes.clone())
        .map_err(|_| Error::Data("architecture id is not UTF-8".into()))?;
    let seed_bytes = &find(META_SEED)?.bytes;
    let seed = u64::from_le_bytes(seed_bytes[..8].try_into().map_err(|_| {
        Error::Data("seed entry must hold 8 bytes".into())
    })?);
    let classes_bytes = &find(META_CLASSES)?.bytes;
    let classes = u64::from_le_bytes(classes_bytes[..8].try_into().map_err(|_| {
        Error::Data("classes entry must hold 8 bytes".into())
    })?) as usize;

    let arch = build_architecture(&arch_id, classes)?;
    let mut store = ParamStore::<E>::init(&arch, seed)?;
    for decl in arch.param_decls() {
        let (name, shape, _) = decl;
        let raw = find(&name)?;
        if raw.dims != shape {
            return Err(Error::Shape(format!(
                "checkpoint entry '{name}' has dims {:?}, expected {:?}",
                raw.dims, shape
            )));
        }
        if raw.dtype != E::DTYPE {
            return Err(Error::Data(format!(
                "checkpoint entry '{name}' has dtype {:?}, expected {:?}",
                raw.dtype,
                E::DTYPE
            )));
        }
        let data = E::from_le_bytes_vec(&raw.bytes)
            .ok_or_else(|| Error::Data(format!("entry '{name}' has misaligned data")))?;
        let entry = store.get_mut(&name)?;
        entry.weight = Tensor::from_vec(&shape, data)?;
        let mask_raw = find(&format!("{name}.mask"))?;
        if mask_raw.elems() != entry.mask.len() {
            return Err(Error::Shape(format!("mask size mismatch for '{name}'")));
        }
        if mask_raw.bytes.iter().any(|&b| b > 1) {
            return Err(Error::Data(format!("mask for '{name}' has non-binary values")));
        }
        entry.mask = mask_raw.bytes.clone();
    }
    Ok((store, arch, classes))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::build_architecture;
    use tempfile::tempdir;

    #[test]
    fn roundtrip_preserves_weights_bitwise() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("a.ckpt");
        let arch = build_architecture("mlp-small", 2).unwrap();
        let mut store = ParamStore::<f32>::init(&arch, 42).unwrap();
        store.get_mut("fc1.weight").unwrap().mask[3] = 0;
        store.get_mut("fc1.weight").unwrap().enforce_mask();
        crate::optim::reset_state(&mut store);
        save(&store, 2, &path).unwrap();
        let (loaded, arch2, classes) = load::<f32>(&path).unwrap();
        assert_eq!(classes, 2);
        assert_eq!(arch2.id, "mlp-small");
        for (a, b) in store.entries().iter().zip(loaded.entries()) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.weight.data(), b.weight.data(), "weights must be bitwise equal");
            assert_eq!(a.mask, b.mask);
        }
        assert_eq!(loaded.seed, 42);
    }

    #[test]
    fn truncated_file_reports_offset() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("b.ckpt");
        std::fs::write(&path, &MAGIC[..6]).unwrap();
        match read_entries(&path) {
            Err(Error::Parse { offset, .. }) => assert_eq!(offset, 0),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn bad_magic_rejected() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("c.ckpt");
        std::fs::write(&path, b"NOTCKPT0\x00\x00\x00\x00").unwrap();
        assert!(matches!(read_entries(&path), Err(Error::Parse { .. })));
    }
}
