//! Binary checkpoint format: named f64 parameter table plus optional
//! optimizer moments and an embedded JSON config blob. Round-trips are
//! bit-exact.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use super::adamw::{ParamStore, Parameter};
use super::tensor::{NnError, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"ROLL";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn save_checkpoint(
    store: &ParamStore,
    config_json: &str,
    with_moments: bool,
    path: &Path,
) -> Result<(), NnError> {
    let cerr = |e: std::io::Error| NnError::Checkpoint(format!("{}: {e}", path.display()));
    let file = File::create(path).map_err(cerr)?;
    let mut w = BufWriter::new(file);
    let mut put = |bytes: &[u8]| w.write_all(bytes).map_err(cerr);
    put(CHECKPOINT_MAGIC)?;
    put(&CHECKPOINT_VERSION.to_le_bytes())?;
    put(&(config_json.len() as u32).to_le_bytes())?;
    put(config_json.as_bytes())?;
    put(&(store.len() as u32).to_le_bytes())?;
    for p in store.iter() {
        put(&(p.name.len() as u32).to_le_bytes())?;
        put(p.name.as_bytes())?;
        put(&(p.value.shape.len() as u32).to_le_bytes())?;
        for d in &p.value.shape {
            put(&(*d as u32).to_le_bytes())?;
        }
        for v in &p.value.data {
            put(&v.to_le_bytes())?;
        }
    }
    put(&[u8::from(with_moments)])?;
    if with_moments {
        for p in store.iter() {
            put(&p.step.to_le_bytes())?;
            for v in p.m.iter().chain(&p.v) {
                put(&v.to_le_bytes())?;
            }
        }
    }
    w.flush().map_err(cerr)
}

/// Loaded checkpoint: the parameter table and the embedded config blob.
pub struct Checkpoint {
    pub store: ParamStore,
    pub config_json: String,
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, NnError> {
    let cerr = |e: std::io::Error| NnError::Checkpoint(format!("{}: {e}", path.display()));
    let mut buf = Vec::new();
    File::open(path)
        .map_err(cerr)?
        .read_to_end(&mut buf)
        .map_err(cerr)?;
    let mut cur = Cursor {
        buf: &buf,
        pos: 0,
        path,
    };
    let magic = cur.take(4)?;
    if magic != CHECKPOINT_MAGIC {
        return Err(cur.err("bad magic, expected ROLL"));
    }
    let version = cur.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(cur.err(&format!("unsupported checkpoint version {version}")));
    }
    let cfg_len = cur.u32()? as usize;
    let config_json = String::from_utf8(cur.take(cfg_len)?.to_vec())
        .map_err(|_| cur.err("config blob is not UTF-8"))?;
    let count = cur.u32()? as usize;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let name_len = cur.u32()? as usize;
        let name = String::from_utf8(cur.take(name_len)?.to_vec())
            .map_err(|_| cur.err("parameter name is not UTF-8"))?;
        let rank = cur.u32()? as usize;
        if rank > 4 {
            return Err(cur.err(&format!("parameter '{name}' has rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(cur.u32()? as usize);
        }
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            data.push(cur.f64()?);
        }
        store.insert(Parameter::new(name, Tensor::new(shape, data)));
    }
    let has_moments = cur.take(1)?[0] != 0;
    if has_moments {
        for p in store.iter_mut() {
            p.step = u64::from_le_bytes(
                cur.take(8)?
                    .try_into()
                    .expect("take(8) returns 8 bytes"),
            );
            for i in 0..p.m.len() {
                p.m[i] = cur.f64()?;
            }
            for i in 0..p.v.len() {
                p.v[i] = cur.f64()?;
            }
        }
    }
    Ok(Checkpoint { store, config_json })
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn err(&self, msg: &str) -> NnError {
        NnError::Checkpoint(format!("{}: byte {}: {msg}", self.path.display(), self.pos))
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], NnError> {
        if self.pos + n > self.buf.len() {
            return Err(self.err(&format!("truncated: need {n} more bytes")));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, NnError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64, NnError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}
