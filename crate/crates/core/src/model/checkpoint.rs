//! Checkpoint files: a UTF-8 header of `key=value` lines ended by a blank
//! line, followed by little-endian tensor blocks.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::Tensor;

use super::{Model, ModelConfig, ModelParams};

pub const MODEL_MAGIC: &str = "SENTORDER-MODEL 1";

/// Writes `magic`, the header lines, a blank line, then every tensor.
pub fn write_tensor_file(path: &Path, magic: &str, header: &str, tensors: &[(&str, &Tensor)]) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(magic.as_bytes());
    buf.push(b'\n');
    buf.extend_from_slice(header.as_bytes());
    if !header.is_empty() && !header.ends_with('\n') {
        buf.push(b'\n');
    }
    buf.push(b'\n');
    buf.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &x in t.data() {
            buf.extend_from_slice(&x.to_le_bytes());
        }
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
    what: &'a str,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::format(self.what, "truncated tensor data"));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

/// Returns the header text (without magic) and the named tensors.
pub fn read_tensor_file(path: &Path, magic: &str) -> Result<(String, Vec<(String, Tensor)>)> {
    let what = path.display().to_string();
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    let first = magic.len() + 1;
    if bytes.len() < first || &bytes[..magic.len()] != magic.as_bytes() || bytes[magic.len()] != b'\n' {
        return Err(Error::format(what, format!("missing {magic:?} header")));
    }
    // An empty header puts the terminating blank line right after the magic.
    let end = if bytes.get(first) == Some(&b'\n') {
        first
    } else {
        bytes[first..]
            .windows(2)
            .position(|w| w == b"\n\n")
            .map(|i| first + i + 1)
            .ok_or_else(|| Error::format(what.clone(), "header is not terminated by a blank line"))?
    };
    let header = std::str::from_utf8(&bytes[first..end])
        .map_err(|_| Error::format(what.clone(), "header is not UTF-8"))?
        .to_string();
    let mut c = Cursor { buf: &bytes, pos: end + 1, what: &what };
    let count = c.u32()? as usize;
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let n = c.u32()? as usize;
        let name = std::str::from_utf8(c.take(n)?)
            .map_err(|_| Error::format(what.clone(), "tensor name is not UTF-8"))?
            .to_string();
        let ndim = c.u32()? as usize;
        let shape = (0..ndim).map(|_| c.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let len: usize = shape.iter().product();
        let raw = c.take(len.checked_mul(8).ok_or_else(|| Error::format(what.clone(), "tensor too large"))?)?;
        let data = raw.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes"))).collect();
        tensors.push((name, Tensor::new(shape, data)));
    }
    if c.pos != bytes.len() {
        return Err(Error::format(what, "trailing bytes after tensors"));
    }
    Ok((header, tensors))
}

impl Model {
    pub fn save(&self, path: &Path) -> Result<()> {
        let tensors: Vec<(&str, &Tensor)> = self.params.iter().collect();
        write_tensor_file(path, MODEL_MAGIC, &self.config.to_kv(), &tensors)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (header, tensors) = read_tensor_file(path, MODEL_MAGIC)?;
        let config = ModelConfig::from_kv(&header)?;
        let params = ModelParams::from_entries(tensors)?;
        params.check_against(&config)?;
        Ok(Self { config, params })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("sub/model.bin");
        let m = Model::new(ModelConfig::tiny(30, 5), 11).unwrap();
        m.save(&p).unwrap();
        assert_eq!(Model::load(&p).unwrap(), m);
    }

    #[test]
    fn rejects_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("model.bin");
        Model::new(ModelConfig::tiny(30, 2), 1).unwrap().save(&p).unwrap();
        let bytes = fs::read(&p).unwrap();
        fs::write(&p, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(Model::load(&p), Err(Error::Format { .. })));
        fs::write(&p, b"not a model\n\n").unwrap();
        assert!(matches!(Model::load(&p), Err(Error::Format { .. })));
    }

    #[test]
    fn rejects_shape_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("model.bin");
        let m = Model::new(ModelConfig::tiny(30, 2), 1).unwrap();
        let mut header = m.config.clone();
        header.num_order_classes = 3;
        let tensors: Vec<(&str, &Tensor)> = m.params.iter().collect();
        write_tensor_file(&p, MODEL_MAGIC, &header.to_kv(), &tensors).unwrap();
        assert!(Model::load(&p).is_err());
    }
}
