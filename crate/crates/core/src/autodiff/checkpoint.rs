//! Flat binary checkpoint container: versioned header, then named f64
//! tensors. Round trips are bit-exact.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use super::{Array, ParamStore};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"SPSEPCKP";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn save_store(store: &ParamStore, path: &Path) -> Result<()> {
    let mut out: Vec<u8> = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for (name, value) in store.iter() {
        let nb = name.as_bytes();
        out.extend_from_slice(&(nb.len() as u32).to_le_bytes());
        out.extend_from_slice(nb);
        out.extend_from_slice(&(value.shape().len() as u32).to_le_bytes());
        for &d in value.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(format!("create {}", path.display()), e))?;
    f.write_all(&out)
        .map_err(|e| Error::io(format!("write {}", path.display()), e))
}

pub fn load_store(path: &Path) -> Result<ParamStore> {
    let bytes = fs::read(path).map_err(|e| Error::io(format!("read {}", path.display()), e))?;
    let bad = |what: &str| Error::BadCheckpoint(format!("{}: {what}", path.display()));
    if bytes.len() < 16 || &bytes[0..8] != MAGIC {
        return Err(bad("missing magic"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(bad(&format!("unsupported version {version}")));
    }
    let count = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    let mut pos = 16;
    let mut store = ParamStore::new();
    let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
        if *pos + n > bytes.len() {
            return Err(bad("truncated"));
        }
        let s = &bytes[*pos..*pos + n];
        *pos += n;
        Ok(s)
    };
    for _ in 0..count {
        let name_len = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
        let name = std::str::from_utf8(take(&mut pos, name_len)?)
            .map_err(|_| bad("name is not UTF-8"))?
            .to_string();
        let ndim = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(u64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap()) as usize);
        }
        let len: usize = shape.iter().product();
        let raw = take(&mut pos, len * 8)?;
        let data: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        store.add(&name, Array::from_vec(&shape, data)?)?;
    }
    if pos != bytes.len() {
        return Err(bad("trailing bytes"));
    }
    Ok(store)
}
