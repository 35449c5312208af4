//! Named-tensor table shared by scene files and checkpoints.
//!
//! ```text
//! u32 count
//! count x { u32 name_len, name (utf-8), u8 dtype (0 = f32), u32 rank, u32 dims[rank], u64 offset }
//! payloads: little-endian f32, each starting at its absolute byte `offset` in the file
//! ```
//! All integers are little-endian.

use std::path::Path;

use far_tensor::Tensor;

use crate::error::{FarError, Result};

const DTYPE_F32: u8 = 0;

fn table_len(tensors: &[(&str, &Tensor)]) -> usize {
    4 + tensors
        .iter()
        .map(|(name, t)| 4 + name.len() + 1 + 4 + 4 * t.shape().len() + 8)
        .sum::<usize>()
}

/// Appends the table and payloads to `out`; offsets are absolute within `out`.
pub fn write_table(out: &mut Vec<u8>, tensors: &[(&str, &Tensor)]) {
    let mut offset = (out.len() + table_len(tensors)) as u64;
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(DTYPE_F32);
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        out.extend_from_slice(&offset.to_le_bytes());
        offset += 4 * t.numel() as u64;
    }
    for (_, t) in tensors {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
}

/// Little-endian cursor that reports truncation against a file name.
pub(crate) struct Reader<'a> {
    pub bytes: &'a [u8],
    pub pos: usize,
    pub file: &'a Path,
}

impl<'a> Reader<'a> {
    pub fn new(bytes: &'a [u8], file: &'a Path) -> Self {
        Reader {
            bytes,
            pos: 0,
            file,
        }
    }

    pub fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(FarError::Truncated {
                file: self.file.to_path_buf(),
                msg: format!("need {n} bytes for {what} at offset {}", self.pos),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    pub fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    pub fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    pub fn format_err(&self, msg: impl Into<String>) -> FarError {
        FarError::Format {
            file: self.file.to_path_buf(),
            msg: msg.into(),
        }
    }

    /// Checks a 4-byte magic followed by a u32 version.
    pub fn header(&mut self, magic: &[u8; 4], version: u32) -> Result<()> {
        let m = self.take(4, "magic")?;
        if m != magic {
            return Err(self.format_err(format!(
                "bad magic {:?}, expected {:?}",
                String::from_utf8_lossy(m),
                String::from_utf8_lossy(magic)
            )));
        }
        let found = self.u32("version")?;
        if found != version {
            return Err(FarError::Version {
                file: self.file.to_path_buf(),
                found,
                expected: version,
            });
        }
        Ok(())
    }

    pub fn table(&mut self) -> Result<Vec<(String, Tensor)>> {
        let count = self.u32("tensor count")? as usize;
        let mut entries = Vec::with_capacity(count);
        for _ in 0..count {
            let len = self.u32("name length")? as usize;
            let name = String::from_utf8(self.take(len, "tensor name")?.to_vec())
                .map_err(|_| self.format_err("tensor name is not utf-8"))?;
            let dtype = self.u8("dtype")?;
            if dtype != DTYPE_F32 {
                return Err(self.format_err(format!("tensor `{name}` has unknown dtype {dtype}")));
            }
            let rank = self.u32("rank")? as usize;
            let dims = (0..rank)
                .map(|_| self.u32("dims").map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let offset = self.u64("offset")? as usize;
            entries.push((name, dims, offset));
        }
        let mut out = Vec::with_capacity(count);
        for (name, dims, offset) in entries {
            let n: usize = dims.iter().product();
            if offset + 4 * n > self.bytes.len() {
                return Err(FarError::Truncated {
                    file: self.file.to_path_buf(),
                    msg: format!(
                        "tensor `{name}` needs bytes {offset}..{} but file has {}",
                        offset + 4 * n,
                        self.bytes.len()
                    ),
                });
            }
            let data = self.bytes[offset..offset + 4 * n]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let t = Tensor::new(dims, data)
                .map_err(|e| self.format_err(format!("tensor `{name}`: {e}")))?;
            out.push((name, t));
        }
        Ok(out)
    }
}

/// Looks up a tensor by name, reporting a format error naming the file when missing.
pub(crate) fn take_named(
    tensors: &mut Vec<(String, Tensor)>,
    name: &str,
    file: &Path,
) -> Result<Tensor> {
    let pos = tensors
        .iter()
        .position(|(n, _)| n == name)
        .ok_or_else(|| FarError::Format {
            file: file.to_path_buf(),
            msg: format!("missing tensor `{name}`"),
        })?;
    Ok(tensors.swap_remove(pos).1)
}
