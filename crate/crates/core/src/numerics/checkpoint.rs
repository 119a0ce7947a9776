//! Flat parameter container.
//!
//! Layout:
//!
//! ```text
//! MTLSWIN-CKPT v1\n
//! meta <nbytes>\n<nbytes of key=value lines>
//! tensor <name> <dtype> <d0,d1,..> <trainable 0|1>\n<little-endian values>
//! ...
//! end\n
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use super::params::ParamStore;
use super::tensor::{numel, Real, Tensor};
use crate::error::{Error, Result};

pub const CHECKPOINT_HEADER: &str = "MTLSWIN-CKPT v1";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T: Real> {
    pub meta: BTreeMap<String, String>,
    pub tensors: Vec<(String, Tensor<T>, bool)>,
}

pub fn encode_checkpoint<T: Real>(store: &ParamStore<T>, meta: &BTreeMap<String, String>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_HEADER.as_bytes());
    out.push(b'\n');
    let meta_text: String = meta.iter().map(|(k, v)| format!("{k}={v}\n")).collect();
    out.extend_from_slice(format!("meta {}\n", meta_text.len()).as_bytes());
    out.extend_from_slice(meta_text.as_bytes());
    for (_, p) in store.iter() {
        let dims: Vec<String> = p.value.shape().iter().map(|d| d.to_string()).collect();
        let line = format!("tensor {} {} {} {}\n", p.name, T::DTYPE, dims.join(","), u8::from(p.trainable));
        out.extend_from_slice(line.as_bytes());
        for &v in p.value.data() {
            v.write_le(&mut out);
        }
    }
    out.extend_from_slice(b"end\n");
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn line(&mut self) -> Result<&'a str> {
        let rest = &self.bytes[self.pos..];
        let end = rest.iter().position(|&b| b == b'\n').ok_or_else(|| Error::Checkpoint("truncated record header".into()))?;
        self.pos += end + 1;
        std::str::from_utf8(&rest[..end]).map_err(|_| Error::Checkpoint("non-utf8 record header".into()))
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Checkpoint("truncated payload".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
}

pub fn decode_checkpoint<T: Real>(bytes: &[u8]) -> Result<Checkpoint<T>> {
    let mut c = Cursor { bytes, pos: 0 };
    if c.line()? != CHECKPOINT_HEADER {
        return Err(Error::Checkpoint(format!("missing `{CHECKPOINT_HEADER}` header")));
    }
    let meta_line = c.line()?;
    let meta_len: usize = meta_line
        .strip_prefix("meta ")
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::Checkpoint(format!("bad meta record `{meta_line}`")))?;
    let meta_text = std::str::from_utf8(c.take(meta_len)?).map_err(|_| Error::Checkpoint("non-utf8 meta".into()))?;
    let mut meta = BTreeMap::new();
    for l in meta_text.lines() {
        let (k, v) = l.split_once('=').ok_or_else(|| Error::Checkpoint(format!("bad meta line `{l}`")))?;
        meta.insert(k.to_string(), v.to_string());
    }
    let mut tensors = Vec::new();
    loop {
        let line = c.line()?;
        if line == "end" {
            break;
        }
        let parts: Vec<&str> = line.split(' ').collect();
        let [tag, name, dtype, dims, trainable] = parts[..] else {
            return Err(Error::Checkpoint(format!("bad tensor record `{line}`")));
        };
        if tag != "tensor" {
            return Err(Error::Checkpoint(format!("unexpected record `{tag}`")));
        }
        if dtype != T::DTYPE {
            return Err(Error::Checkpoint(format!("{name}: stored as {dtype}, expected {}", T::DTYPE)));
        }
        let shape: Vec<usize> = if dims.is_empty() {
            vec![]
        } else {
            dims.split(',')
                .map(|d| d.parse().map_err(|_| Error::Checkpoint(format!("{name}: bad extent `{d}`"))))
                .collect::<Result<_>>()?
        };
        let n = numel(&shape);
        let raw = c.take(n * T::BYTES)?;
        let data = raw.chunks_exact(T::BYTES).map(T::read_le).collect();
        let t = Tensor::new(shape, data).map_err(|e| Error::Checkpoint(format!("{name}: {e}")))?;
        tensors.push((name.to_string(), t, trainable == "1"));
    }
    if c.pos != bytes.len() {
        return Err(Error::Checkpoint("trailing bytes after end record".into()));
    }
    Ok(Checkpoint { meta, tensors })
}

pub fn save_checkpoint<T: Real>(store: &ParamStore<T>, meta: &BTreeMap<String, String>, path: &Path) -> Result<()> {
    std::fs::write(path, encode_checkpoint(store, meta)).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint<T: Real>(path: &Path) -> Result<Checkpoint<T>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}

impl<T: Real> Checkpoint<T> {
    /// Overwrites values of `store` from this checkpoint. Every stored tensor
    /// whose name begins with `from_prefix` must exist in `store` under
    /// `to_prefix` with the same shape.
    pub fn load_into(&self, store: &mut ParamStore<T>, from_prefix: &str, to_prefix: &str) -> Result<usize> {
        let mut n = 0;
        for (name, t, _) in self.tensors.iter().filter(|(n, _, _)| n.starts_with(from_prefix)) {
            let target = format!("{to_prefix}{}", &name[from_prefix.len()..]);
            let id = store.id(&target).ok_or_else(|| Error::Checkpoint(format!("model has no parameter `{target}`")))?;
            let p = store.get_mut(id);
            if p.value.shape() != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "`{target}`: checkpoint shape {:?} vs model {:?}",
                    t.shape(),
                    p.value.shape()
                )));
            }
            p.value = t.clone();
            n += 1;
        }
        Ok(n)
    }
}
