//! Little-endian binary parameter checkpoints.
//!
//! Layout: magic `MCM1`, `u32` version, `u32` parameter count, then for each
//! parameter a `u32` name length, UTF-8 name, `u32` rank, `rank × u32` dims
//! and the raw `f64` payload.

use std::io::{Read, Write};
use std::path::Path;

use super::{ParamStore, Tensor};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"MCM1";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn write_checkpoint(store: &ParamStore, mut w: impl Write) -> std::io::Result<()> {
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    w.write_all(&(store.len() as u32).to_le_bytes())?;
    for p in store.iter() {
        let name = p.name.as_bytes();
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name)?;
        let shape = p.value.shape();
        w.write_all(&(shape.len() as u32).to_le_bytes())?;
        for &d in shape {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        for &v in p.value.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

struct Cursor<'a> {
    file: &'a Path,
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Parse {
                file: self.file.to_path_buf(),
                offset: self.pos,
                msg: format!("truncated while reading {what}"),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")))
    }

    fn err(&self, offset: usize, msg: String) -> Error {
        Error::Parse {
            file: self.file.to_path_buf(),
            offset,
            msg,
        }
    }
}

/// Parses a checkpoint. `file` is only used in error messages.
pub fn read_checkpoint(file: &Path, mut r: impl Read) -> Result<Vec<(String, Tensor)>> {
    let mut buf = Vec::new();
    r.read_to_end(&mut buf).map_err(|e| Error::io(file, e))?;
    let mut c = Cursor { file, buf: &buf, pos: 0 };
    let magic = c.take(4, "magic")?;
    if magic != CHECKPOINT_MAGIC {
        return Err(c.err(0, format!("bad magic {magic:?}")));
    }
    let version = c.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(c.err(4, format!("unsupported version {version}")));
    }
    let count = c.u32("parameter count")? as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let at = c.pos;
        let len = c.u32("name length")? as usize;
        let name = std::str::from_utf8(c.take(len, "name")?)
            .map_err(|_| c.err(at + 4, "name is not UTF-8".into()))?
            .to_string();
        let rank = c.u32("rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(c.u32("dim")? as usize);
        }
        let n: usize = shape.iter().product();
        let at = c.pos;
        let payload = c.take(n * 8, "payload")?;
        let data = payload
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
            .collect();
        let t = Tensor::new(&shape, data).map_err(|e| c.err(at, e.to_string()))?;
        out.push((name, t));
    }
    if c.pos != buf.len() {
        return Err(c.err(c.pos, "trailing bytes".into()));
    }
    Ok(out)
}

impl ParamStore {
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut bytes = Vec::new();
        write_checkpoint(self, &mut bytes).map_err(|e| Error::io(path, e))?;
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    /// Loads values by name; every parameter in the store must be present
    /// with a matching shape.
    pub fn load(&mut self, path: &Path) -> Result<()> {
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let entries = read_checkpoint(path, f)?;
        self.load_entries(entries)
    }

    pub fn load_entries(&mut self, entries: Vec<(String, Tensor)>) -> Result<()> {
        if entries.len() != self.len() {
            return Err(Error::contract(format!(
                "checkpoint has {} parameters, model expects {}",
                entries.len(),
                self.len()
            )));
        }
        for (name, t) in entries {
            let id = self
                .id(&name)
                .ok_or_else(|| Error::contract(format!("unknown parameter {name:?} in checkpoint")))?;
            self.set_value(id, t)?;
        }
        Ok(())
    }
}
