//! Checkpoint files.
//!
//! ```text
//! magic "FLCK" | version u8 = 1
//! spec_len u32 | model spec as JSON (spec_len bytes)
//! tensor_count u32
//! per tensor: name_len u16 | name | ndim u8 | dims u32 × ndim
//! element_count u64 | element_count × f32
//! ```
//! All integers and floats are little-endian.

use std::path::Path;

use super::{ModelError, ModelSpec, ParamVector, Result, TensorSpec};

const MAGIC: &[u8; 4] = b"FLCK";
const VERSION: u8 = 1;

pub fn write_checkpoint(params: &ParamVector, spec: &ModelSpec) -> Result<Vec<u8>> {
    params.check_spec(spec)?;
    let spec_json = serde_json::to_vec(spec).expect("model spec serializes");
    let mut out = Vec::with_capacity(64 + params.len() * 4);
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.extend_from_slice(&(spec_json.len() as u32).to_le_bytes());
    out.extend_from_slice(&spec_json);
    out.extend_from_slice(&(params.layout().len() as u32).to_le_bytes());
    for t in params.layout() {
        out.extend_from_slice(&(t.name.len() as u16).to_le_bytes());
        out.extend_from_slice(t.name.as_bytes());
        out.push(t.shape.len() as u8);
        for &d in &t.shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
    }
    out.extend_from_slice(&(params.len() as u64).to_le_bytes());
    for v in params.values() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        match end {
            Some(end) => {
                let s = &self.buf[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(ModelError::Checkpoint(format!("truncated while reading {what}"))),
        }
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

pub fn read_checkpoint(bytes: &[u8]) -> Result<(ParamVector, ModelSpec)> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(ModelError::Checkpoint("bad magic".into()));
    }
    let version = r.u8("version")?;
    if version != VERSION {
        return Err(ModelError::Checkpoint(format!("unsupported version {version}")));
    }
    let spec_len = r.u32("spec length")? as usize;
    let spec: ModelSpec = serde_json::from_slice(r.take(spec_len, "spec")?)
        .map_err(|e| ModelError::Checkpoint(format!("model spec: {e}")))?;
    spec.validate()?;
    let count = r.u32("tensor count")? as usize;
    let mut layout = Vec::with_capacity(count.min(64));
    for _ in 0..count {
        let name_len = r.u16("tensor name length")? as usize;
        let name = String::from_utf8(r.take(name_len, "tensor name")?.to_vec())
            .map_err(|_| ModelError::Checkpoint("tensor name is not utf-8".into()))?;
        let ndim = r.u8("ndim")? as usize;
        let shape = (0..ndim).map(|_| r.u32("dim").map(|d| d as usize)).collect::<Result<_>>()?;
        layout.push(TensorSpec { name, shape });
    }
    if layout != spec.layout() {
        return Err(ModelError::Checkpoint("tensor layout does not match the stored model spec".into()));
    }
    let n = r.u64("element count")? as usize;
    let payload = r.take(n.checked_mul(4).ok_or_else(|| ModelError::Checkpoint("element count overflow".into()))?, "payload")?;
    if r.pos != bytes.len() {
        return Err(ModelError::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    let values = payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
    let params = ParamVector::new(values, layout).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
    Ok((params, spec))
}

pub fn save_checkpoint(path: &Path, params: &ParamVector, spec: &ModelSpec) -> Result<()> {
    let bytes = write_checkpoint(params, spec)?;
    std::fs::write(path, bytes).map_err(|source| ModelError::Io { path: path.display().to_string(), source })
}

pub fn load_checkpoint(path: &Path) -> Result<(ParamVector, ModelSpec)> {
    let bytes = std::fs::read(path).map_err(|source| ModelError::Io { path: path.display().to_string(), source })?;
    read_checkpoint(&bytes)
}
