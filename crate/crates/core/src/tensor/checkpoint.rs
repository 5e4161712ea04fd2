//! Binary parameter checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic        8 bytes  "DYNPCKPT"
//! version      u32
//! config_hash  u64
//! count        u64
//! count × record:
//!     path_len u32, path bytes (UTF-8)
//!     rank     u32, dims u64 × rank
//!     payload  f64 × product(dims)
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{ParamStore, Tensor};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"DYNPCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub version: u32,
    pub config_hash: u64,
    pub records: Vec<(String, Tensor)>,
}

pub fn write_checkpoint<W: Write>(mut w: W, store: &ParamStore, config_hash: u64) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    w.write_all(&config_hash.to_le_bytes())?;
    w.write_all(&(store.len() as u64).to_le_bytes())?;
    for id in store.ids() {
        let path = store.path(id).as_bytes();
        let t = store.get(id);
        w.write_all(&(path.len() as u32).to_le_bytes())?;
        w.write_all(path)?;
        w.write_all(&(t.rank() as u32).to_le_bytes())?;
        for &d in t.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn save_checkpoint(path: &Path, store: &ParamStore, config_hash: u64) -> Result<()> {
    write_checkpoint(BufWriter::new(File::create(path)?), store, config_hash)
}

struct Cursor<R> {
    inner: R,
    offset: u64,
}

impl<R: Read> Cursor<R> {
    fn bytes<const N: usize>(&mut self, what: &str) -> Result<[u8; N]> {
        let mut buf = [0u8; N];
        self.fill(&mut buf, what)?;
        Ok(buf)
    }

    fn fill(&mut self, buf: &mut [u8], what: &str) -> Result<()> {
        self.inner.read_exact(buf).map_err(|e| match e.kind() {
            std::io::ErrorKind::UnexpectedEof => Error::format(self.offset, format!("truncated while reading {what}")),
            _ => Error::Io(e),
        })?;
        self.offset += buf.len() as u64;
        Ok(())
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes(what)?))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.bytes(what)?))
    }
}

pub fn read_checkpoint<R: Read>(r: R) -> Result<Checkpoint> {
    let mut c = Cursor { inner: r, offset: 0 };
    let magic: [u8; 8] = c.bytes("magic")?;
    if &magic != MAGIC {
        return Err(Error::format(0, "not a checkpoint file (bad magic)"));
    }
    let version = c.u32("version")?;
    if version != FORMAT_VERSION {
        return Err(Error::format(8, format!("unsupported checkpoint version {version}")));
    }
    let config_hash = c.u64("config hash")?;
    let count = c.u64("record count")?;
    let mut records = Vec::new();
    for _ in 0..count {
        let start = c.offset;
        let len = c.u32("path length")? as usize;
        let mut path = vec![0u8; len];
        c.fill(&mut path, "path")?;
        let path = String::from_utf8(path).map_err(|_| Error::format(start + 4, "path is not UTF-8"))?;
        let rank = c.u32("rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(c.u64("dimension")? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        for _ in 0..numel {
            data.push(f64::from_le_bytes(c.bytes("payload")?));
        }
        let t = Tensor::new(shape, data).map_err(|e| Error::format(start, e))?;
        records.push((path, t));
    }
    Ok(Checkpoint { version, config_hash, records })
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    read_checkpoint(BufReader::new(File::open(path)?))
}

impl Checkpoint {
    /// Copy every record into the matching parameter of `store`.
    pub fn restore(&self, store: &mut ParamStore, expected_hash: u64) -> Result<()> {
        if self.config_hash != expected_hash {
            return Err(Error::contract(format!(
                "checkpoint was written for config hash {:#018x}, model has {:#018x}",
                self.config_hash, expected_hash
            )));
        }
        if self.records.len() != store.len() {
            return Err(Error::contract(format!(
                "checkpoint has {} tensors, model has {}",
                self.records.len(),
                store.len()
            )));
        }
        for (path, t) in &self.records {
            let id = store
                .find(path)
                .ok_or_else(|| Error::contract(format!("checkpoint tensor `{path}` not in model")))?;
            if store.get(id).shape() != t.shape() {
                return Err(Error::shapes(path, store.get(id).shape(), t.shape()));
            }
            store.set_data(id, t.data())?;
        }
        Ok(())
    }
}
