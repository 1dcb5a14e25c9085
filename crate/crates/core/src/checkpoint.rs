//! Versioned binary parameter container.
//!
//! Layout: magic `TEDCKPT1`, a u32 format version, canonical key=value
//! metadata text, then named parameter blobs (name, dtype tag, shape,
//! little-endian raw data). Floats are stored as raw bits, so a save/load
//! cycle is bit-exact.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::scalar::{DType, Scalar};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"TEDCKPT1";
const VERSION: u32 = 1;

#[derive(Debug, Clone)]
struct Entry {
    name: String,
    dtype: DType,
    shape: Vec<usize>,
    bytes: Vec<u8>,
}

/// In-memory checkpoint: sorted metadata plus named tensors.
#[derive(Debug, Clone, Default)]
pub struct Checkpoint {
    meta: BTreeMap<String, String>,
    tensors: Vec<Entry>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Checkpoint::default()
    }

    pub fn put_meta(&mut self, key: &str, value: impl ToString) -> Result<()> {
        let value = value.to_string();
        if key.contains(['\n', '=']) || value.contains('\n') {
            return Err(Error::Format(format!(
                "metadata key/value may not contain newlines or '=' in key: {key:?}"
            )));
        }
        self.meta.insert(key.to_string(), value);
        Ok(())
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        self.meta.get(key).map(|s| s.as_str())
    }

    pub fn require_meta(&self, key: &str) -> Result<&str> {
        self.meta(key)
            .ok_or_else(|| Error::Format(format!("missing metadata key {key:?}")))
    }

    pub fn parse_meta<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        self.require_meta(key)?
            .parse::<T>()
            .map_err(|_| Error::Format(format!("metadata key {key:?} has unexpected format")))
    }

    pub fn meta_entries(&self) -> impl Iterator<Item = (&str, &str)> {
        self.meta.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }

    pub fn put_tensor<S: Scalar>(&mut self, name: &str, t: &Tensor<S>) -> Result<()> {
        if self.tensors.iter().any(|e| e.name == name) {
            return Err(Error::Format(format!("duplicate tensor name {name:?}")));
        }
        let mut bytes = Vec::with_capacity(t.numel() * S::DTYPE.size());
        for &v in t.data().iter() {
            v.write_le(&mut bytes);
        }
        self.tensors.push(Entry {
            name: name.to_string(),
            dtype: S::DTYPE,
            shape: t.shape().to_vec(),
            bytes,
        });
        Ok(())
    }

    pub fn tensor<S: Scalar>(&self, name: &str) -> Result<Tensor<S>> {
        let entry = self
            .tensors
            .iter()
            .find(|e| e.name == name)
            .ok_or_else(|| Error::Format(format!("tensor {name:?} not in checkpoint")))?;
        if entry.dtype != S::DTYPE {
            return Err(Error::Format(format!(
                "tensor {name:?} has dtype {:?}, requested {:?}",
                entry.dtype,
                S::DTYPE
            )));
        }
        let size = entry.dtype.size();
        let data: Vec<S> = entry
            .bytes
            .chunks_exact(size)
            .map(S::read_le)
            .collect();
        Tensor::from_vec(&entry.shape, data)
    }

    pub fn tensor_names(&self) -> Vec<&str> {
        self.tensors.iter().map(|e| e.name.as_str()).collect()
    }

    pub fn has_tensor(&self, name: &str) -> bool {
        self.tensors.iter().any(|e| e.name == name)
    }

    pub fn tensor_shape(&self, name: &str) -> Option<&[usize]> {
        self.tensors
            .iter()
            .find(|e| e.name == name)
            .map(|e| e.shape.as_slice())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let mut meta_text = String::new();
        for (k, v) in &self.meta {
            meta_text.push_str(k);
            meta_text.push('=');
            meta_text.push_str(v);
            meta_text.push('\n');
        }
        out.extend_from_slice(&(meta_text.len() as u32).to_le_bytes());
        out.extend_from_slice(meta_text.as_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for e in &self.tensors {
            out.extend_from_slice(&(e.name.len() as u16).to_le_bytes());
            out.extend_from_slice(e.name.as_bytes());
            out.push(e.dtype.tag());
            out.push(e.shape.len() as u8);
            for &d in &e.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            out.extend_from_slice(&e.bytes);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(8)?;
        if magic != MAGIC {
            return Err(Error::Format("bad magic bytes".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported version {version}")));
        }
        let meta_len = r.u32()? as usize;
        let meta_text = std::str::from_utf8(r.take(meta_len)?)
            .map_err(|_| Error::Format("metadata is not utf-8".into()))?;
        let mut meta = BTreeMap::new();
        for line in meta_text.lines() {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Format(format!("bad metadata line {line:?}")))?;
            meta.insert(k.to_string(), v.to_string());
        }
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count);
        for _ in 0..count {
            let name_len = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| Error::Format("tensor name is not utf-8".into()))?
                .to_string();
            let dtype = DType::from_tag(r.u8()?)?;
            let rank = r.u8()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u64()? as usize);
            }
            let numel: usize = shape.iter().product();
            let bytes = r.take(numel * dtype.size())?.to_vec();
            tensors.push(Entry {
                name,
                dtype,
                shape,
                bytes,
            });
        }
        if r.pos != bytes.len() {
            return Err(Error::Format("trailing bytes after last tensor".into()));
        }
        Ok(Checkpoint { meta, tensors })
    }

    pub fn write_to(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes();
        let mut f = std::fs::File::create(path)?;
        f.write_all(&bytes)?;
        Ok(())
    }

    pub fn read_from(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Format(msg) => Error::Format(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn sha256_hex(&self) -> String {
        hex(&Sha256::digest(self.to_bytes()))
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Format("unexpected end of file".into()));
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

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn file_sha256_hex(path: &Path) -> Result<String> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    Ok(hex(&Sha256::digest(&bytes)))
}

pub fn string_sha256_hex(s: &str) -> String {
    hex(&Sha256::digest(s.as_bytes()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn roundtrip_is_bit_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let t32 = Tensor::<f32>::randn(&[3, 4], 1.0, &mut rng);
        let t64 = Tensor::<f64>::randn(&[2], 1.0, &mut rng);
        let scalar = Tensor::<f32>::scalar(-0.0);

        let mut ck = Checkpoint::new();
        ck.put_meta("kind", "test").unwrap();
        ck.put_meta("answer", 42).unwrap();
        ck.put_tensor("block.0.w", &t32).unwrap();
        ck.put_tensor("bias", &t64).unwrap();
        ck.put_tensor("neg_zero", &scalar).unwrap();

        let bytes = ck.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back.meta("kind"), Some("test"));
        assert_eq!(back.parse_meta::<u32>("answer").unwrap(), 42);

        let r32: Tensor<f32> = back.tensor("block.0.w").unwrap();
        assert_eq!(r32.shape(), t32.shape());
        assert_eq!(
            r32.to_vec().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            t32.to_vec().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
        let r64: Tensor<f64> = back.tensor("bias").unwrap();
        assert_eq!(
            r64.to_vec().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            t64.to_vec().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
        // -0.0 survives as -0.0
        let rz: Tensor<f32> = back.tensor("neg_zero").unwrap();
        assert_eq!(rz.to_vec()[0].to_bits(), (-0.0f32).to_bits());

        // Serialization is deterministic.
        assert_eq!(bytes, back.to_bytes());
    }

    #[test]
    fn dtype_mismatch_is_an_error() {
        let mut ck = Checkpoint::new();
        ck.put_tensor("x", &Tensor::<f32>::zeros(&[2])).unwrap();
        assert!(matches!(
            ck.tensor::<f64>("x"),
            Err(Error::Format(_))
        ));
    }

    #[test]
    fn truncated_file_is_rejected() {
        let mut ck = Checkpoint::new();
        ck.put_tensor("x", &Tensor::<f32>::zeros(&[8])).unwrap();
        let bytes = ck.to_bytes();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        assert!(Checkpoint::from_bytes(b"NOTMAGIC").is_err());
    }
}
