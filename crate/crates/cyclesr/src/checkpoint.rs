//! Single-file parameter/checkpoint format.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic   b"CYSR"
//! version u32 (currently 1)
//! meta    u32 length + UTF-8 "key=value" lines
//! config  u32 length + UTF-8 TOML (may be empty)
//! count   u32
//! entry*  name (u16 length + bytes), dtype u8 (0 = f64, 1 = f32),
//!         ndims u8, dims u32*
//! payload raw little-endian scalars, entries in manifest order
//! check   u64 FNV-1a over every preceding byte
//! ```
//!
//! Training state defaults to f64 payloads so that resuming reproduces loss
//! trajectories bitwise; f32 is available for compact parameter exports.

use std::collections::BTreeMap;
use std::io::Read;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"CYSR";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F64,
    F32,
}

#[derive(Debug, Clone, Default)]
pub struct CheckpointFile {
    pub meta: BTreeMap<String, String>,
    pub config_text: String,
    pub tensors: Vec<(String, Tensor)>,
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

pub fn write_checkpoint_file(path: &Path, file: &CheckpointFile, dtype: Dtype) -> Result<()> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());

    let mut meta = String::new();
    for (k, v) in &file.meta {
        if k.contains(['\n', '=']) || v.contains('\n') {
            return Err(Error::Checkpoint(format!("illegal meta entry {k}")));
        }
        meta.push_str(k);
        meta.push('=');
        meta.push_str(v);
        meta.push('\n');
    }
    buf.extend_from_slice(&(meta.len() as u32).to_le_bytes());
    buf.extend_from_slice(meta.as_bytes());
    buf.extend_from_slice(&(file.config_text.len() as u32).to_le_bytes());
    buf.extend_from_slice(file.config_text.as_bytes());

    buf.extend_from_slice(&(file.tensors.len() as u32).to_le_bytes());
    for (name, tensor) in &file.tensors {
        let name_bytes = name.as_bytes();
        if name_bytes.len() > u16::MAX as usize {
            return Err(Error::Checkpoint(format!("tensor name too long: {name}")));
        }
        buf.extend_from_slice(&(name_bytes.len() as u16).to_le_bytes());
        buf.extend_from_slice(name_bytes);
        buf.push(match dtype {
            Dtype::F64 => 0,
            Dtype::F32 => 1,
        });
        let dims = tensor.dims();
        if dims.len() > u8::MAX as usize {
            return Err(Error::Checkpoint("tensor rank too large".into()));
        }
        buf.push(dims.len() as u8);
        for &d in dims {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
    }
    for (_, tensor) in &file.tensors {
        match dtype {
            Dtype::F64 => {
                for &v in tensor.data() {
                    buf.extend_from_slice(&v.to_le_bytes());
                }
            }
            Dtype::F32 => {
                for &v in tensor.data() {
                    buf.extend_from_slice(&(v as f32).to_le_bytes());
                }
            }
        }
    }
    let checksum = fnv1a(&buf);
    buf.extend_from_slice(&checksum.to_le_bytes());
    std::fs::write(path, buf)?;
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Checkpoint("unexpected end of file".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn read_checkpoint_file(path: &Path) -> Result<CheckpointFile> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < MAGIC.len() + 4 + 8 {
        return Err(Error::Checkpoint("file too short".into()));
    }
    let (body, check) = bytes.split_at(bytes.len() - 8);
    let stored = u64::from_le_bytes(check.try_into().unwrap());
    if fnv1a(body) != stored {
        return Err(Error::Checkpoint("checksum mismatch (corrupt or truncated file)".into()));
    }
    let mut r = Reader { bytes: body, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported version {version} (expected {VERSION})"
        )));
    }
    let meta_len = r.u32()? as usize;
    let meta_text = std::str::from_utf8(r.take(meta_len)?)
        .map_err(|_| Error::Checkpoint("meta is not UTF-8".into()))?;
    let mut meta = BTreeMap::new();
    for line in meta_text.lines() {
        if let Some((k, v)) = line.split_once('=') {
            meta.insert(k.to_string(), v.to_string());
        }
    }
    let config_len = r.u32()? as usize;
    let config_text = std::str::from_utf8(r.take(config_len)?)
        .map_err(|_| Error::Checkpoint("config is not UTF-8".into()))?
        .to_string();

    let count = r.u32()? as usize;
    let mut manifest: Vec<(String, Dtype, Vec<usize>)> = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| Error::Checkpoint("name is not UTF-8".into()))?
            .to_string();
        let dtype = match r.u8()? {
            0 => Dtype::F64,
            1 => Dtype::F32,
            x => return Err(Error::Checkpoint(format!("unknown dtype tag {x}"))),
        };
        let ndims = r.u8()? as usize;
        let mut dims = Vec::with_capacity(ndims);
        for _ in 0..ndims {
            dims.push(r.u32()? as usize);
        }
        manifest.push((name, dtype, dims));
    }
    let mut tensors = Vec::with_capacity(count);
    for (name, dtype, dims) in manifest {
        let n: usize = dims.iter().product();
        let mut data = Vec::with_capacity(n);
        match dtype {
            Dtype::F64 => {
                let raw = r.take(n * 8)?;
                for chunk in raw.chunks_exact(8) {
                    data.push(f64::from_le_bytes(chunk.try_into().unwrap()));
                }
            }
            Dtype::F32 => {
                let raw = r.take(n * 4)?;
                for chunk in raw.chunks_exact(4) {
                    data.push(f64::from(f32::from_le_bytes(chunk.try_into().unwrap())));
                }
            }
        }
        tensors.push((name, Tensor::from_vec(&dims, data)?));
    }
    if r.pos != body.len() {
        return Err(Error::Checkpoint("trailing bytes after payload".into()));
    }
    Ok(CheckpointFile { meta, config_text, tensors })
}

/// Convenience for parameter-only files (pretrained encoder weights).
pub fn read_named_tensors(path: &Path) -> Result<Vec<(String, Tensor)>> {
    Ok(read_checkpoint_file(path)?.tensors)
}

pub fn write_named_tensors(path: &Path, tensors: Vec<(String, Tensor)>, dtype: Dtype) -> Result<()> {
    let file = CheckpointFile { meta: BTreeMap::new(), config_text: String::new(), tensors };
    write_checkpoint_file(path, &file, dtype)
}
