//! Binary checkpoint format.
//!
//! ```text
//! MAPLCKPT1\n
//! key=value\n            (UTF-8 header, any number of lines)
//! \n                     (blank line ends the header)
//! repeated until EOF:
//!   u32 LE name length, name bytes,
//!   u32 LE rank, rank x u32 LE dims,
//!   prod(dims) x f64 LE payload
//! ```

use std::path::Path;

use super::{ParameterSet, Tensor};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &str = "MAPLCKPT1";

/// Header key controlling the frozen flag of every loaded entry.
const FROZEN_KEY: &str = "frozen";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub header: Vec<(String, String)>,
    pub params: ParameterSet,
}

impl Checkpoint {
    /// Wraps a parameter set, recording its frozen state in the header.
    pub fn new(params: ParameterSet) -> Self {
        let frozen = params.iter().all(|(_, p)| p.frozen) && !params.is_empty();
        Self {
            header: vec![(FROZEN_KEY.to_string(), frozen.to_string())],
            params,
        }
    }

    pub fn with(mut self, key: impl Into<String>, value: impl ToString) -> Self {
        self.set(key, value);
        self
    }

    pub fn set(&mut self, key: impl Into<String>, value: impl ToString) {
        let key = key.into();
        let value = value.to_string();
        match self.header.iter_mut().find(|(k, _)| *k == key) {
            Some(slot) => slot.1 = value,
            None => self.header.push((key, value)),
        }
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.header
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC.as_bytes());
        out.push(b'\n');
        for (k, v) in &self.header {
            if k.is_empty() || k.contains(['=', '\n']) || v.contains('\n') {
                return Err(Error::Checkpoint(format!("unencodable header entry `{k}`")));
            }
            out.extend_from_slice(k.as_bytes());
            out.push(b'=');
            out.extend_from_slice(v.as_bytes());
            out.push(b'\n');
        }
        out.push(b'\n');
        for (name, p) in self.params.iter() {
            let t = &p.tensor;
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |msg: &str| Error::Checkpoint(msg.to_string());
        let mut pos = 0;
        let next_line = |pos: &mut usize| -> Result<String> {
            let rest = &bytes[*pos..];
            let end = rest
                .iter()
                .position(|&b| b == b'\n')
                .ok_or_else(|| bad("unterminated header"))?;
            let line = std::str::from_utf8(&rest[..end])
                .map_err(|_| bad("header is not UTF-8"))?
                .to_string();
            *pos += end + 1;
            Ok(line)
        };
        if next_line(&mut pos)? != CHECKPOINT_MAGIC {
            return Err(bad("missing MAPLCKPT1 magic"));
        }
        let mut header = Vec::new();
        loop {
            let line = next_line(&mut pos)?;
            if line.is_empty() {
                break;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Checkpoint(format!("header line without `=`: {line}")))?;
            header.push((k.to_string(), v.to_string()));
        }
        let frozen = header
            .iter()
            .any(|(k, v)| k == FROZEN_KEY && v == "true");

        let read_u32 = |pos: &mut usize| -> Result<usize> {
            let chunk = bytes
                .get(*pos..*pos + 4)
                .ok_or_else(|| bad("truncated record"))?;
            *pos += 4;
            Ok(u32::from_le_bytes(chunk.try_into().unwrap()) as usize)
        };
        let mut params = ParameterSet::new();
        while pos < bytes.len() {
            let name_len = read_u32(&mut pos)?;
            let name = bytes
                .get(pos..pos + name_len)
                .ok_or_else(|| bad("truncated name"))?;
            let name = std::str::from_utf8(name)
                .map_err(|_| bad("parameter name is not UTF-8"))?
                .to_string();
            pos += name_len;
            let rank = read_u32(&mut pos)?;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(read_u32(&mut pos)?);
            }
            let n: usize = shape.iter().product();
            let payload = bytes
                .get(pos..pos + 8 * n)
                .ok_or_else(|| Error::Checkpoint(format!("truncated payload for `{name}`")))?;
            pos += 8 * n;
            let data = payload
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            params.insert(name, Tensor::new(shape, data)?, frozen)?;
        }
        Ok(Self { header, params })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn byte_exact_round_trip(
            tensors in prop::collection::vec(
                (prop::collection::vec(1usize..4, 1..4), any::<u64>()), 1..5),
            frozen in any::<bool>(),
        ) {
            let mut ps = ParameterSet::new();
            for (i, (shape, seed)) in tensors.iter().enumerate() {
                let n: usize = shape.iter().product();
                let data = (0..n)
                    .map(|j| f64::from_bits(seed.wrapping_mul(j as u64 + 1) >> 2))
                    .collect();
                ps.insert(format!("p{i}.w"), Tensor::new(shape.clone(), data).unwrap(), frozen)
                    .unwrap();
            }
            let ck = Checkpoint::new(ps).with("component", "lm").with("note", "a=b");
            let bytes = ck.to_bytes().unwrap();
            let back = Checkpoint::from_bytes(&bytes).unwrap();
            prop_assert_eq!(back.to_bytes().unwrap(), bytes);
            prop_assert_eq!(back.get("component"), Some("lm"));
            prop_assert_eq!(back.get("note"), Some("a=b"));
            for (_, p) in back.params.iter() {
                prop_assert_eq!(p.frozen, frozen);
            }
        }
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        assert!(Checkpoint::from_bytes(b"NOPE\n\n").is_err());
        let mut ps = ParameterSet::new();
        ps.insert("w", Tensor::full(&[2, 2], 1.5), false).unwrap();
        let bytes = Checkpoint::new(ps).to_bytes().unwrap();
        assert!(bytes.starts_with(b"MAPLCKPT1\nfrozen=false\n\n"));
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
    }
}
