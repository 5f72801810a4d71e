//! Little-endian binary checkpoint.
//!
//! ```text
//! "MCLK1"  u32 version  u32 len  <config JSON>
//! repeated until EOF:
//!   u32 name_len  <name>  u32 rank  u64 dims[rank]  f64 data[prod(dims)]
//! ```

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 5] = b"MCLK1";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointFile {
    pub version: u32,
    pub config_json: String,
    pub tensors: Vec<(String, Tensor)>,
}

impl CheckpointFile {
    pub fn new(config_json: String) -> Self {
        Self {
            version: VERSION,
            config_json,
            tensors: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.push((name.into(), t));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&self.version.to_le_bytes());
        out.extend_from_slice(&(self.config_json.len() as u32).to_le_bytes());
        out.extend_from_slice(self.config_json.as_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &x in t.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(MAGIC.len())? != MAGIC {
            return Err(Error::Format("bad magic".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported version {version}")));
        }
        let len = r.u32()? as usize;
        let config_json = String::from_utf8(r.take(len)?.to_vec())
            .map_err(|_| Error::Format("config block is not UTF-8".into()))?;
        let mut tensors = Vec::new();
        while r.pos < bytes.len() {
            let len = r.u32()? as usize;
            let name = String::from_utf8(r.take(len)?.to_vec())
                .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
            let rank = r.u32()? as usize;
            if !(1..=3).contains(&rank) {
                return Err(Error::Format(format!("{name}: unsupported rank {rank}")));
            }
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(usize::try_from(r.u64()?).map_err(|_| Error::Format("dimension overflow".into()))?);
            }
            let n = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .filter(|&n| n.checked_mul(8).is_some_and(|b| b <= bytes.len() - r.pos))
                .ok_or_else(|| Error::Format(format!("{name}: truncated data for shape {shape:?}")))?;
            let data = r
                .take(n * 8)?
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            tensors.push((name, Tensor::new(&shape, data)?));
        }
        Ok(Self {
            version,
            config_json,
            tensors,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Format(format!("unexpected end of file at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn byte_layout() {
        let mut c = CheckpointFile::new("{}".into());
        c.push("a", Tensor::new(&[1], vec![1.0]).unwrap());
        let b = c.to_bytes();
        let mut want = b"MCLK1".to_vec();
        want.extend([1, 0, 0, 0, 2, 0, 0, 0, b'{', b'}']);
        want.extend([1, 0, 0, 0, b'a', 1, 0, 0, 0]);
        want.extend(1u64.to_le_bytes());
        want.extend(1f64.to_le_bytes());
        assert_eq!(b, want);
    }

    fn bits(t: &Tensor) -> Vec<u64> {
        t.data().iter().map(|x| x.to_bits()).collect()
    }

    proptest::proptest! {
        #[test]
        fn round_trip_preserves_bits(
            config in "[ -~]{0,40}",
            entries in proptest::collection::vec(
                ("[a-z/._0-9]{1,12}", proptest::collection::vec(1usize..4, 1..4), proptest::num::f64::ANY),
                0..5,
            ),
        ) {
            let mut c = CheckpointFile::new(config);
            for (name, shape, seed) in entries {
                let n: usize = shape.iter().product();
                // Every bit pattern, NaN payloads and signed zeros included.
                let data = (0..n).map(|i| f64::from_bits(seed.to_bits().rotate_left(i as u32 * 7))).collect();
                c.push(&name, Tensor::new(&shape, data).unwrap());
            }
            let back = CheckpointFile::from_bytes(&c.to_bytes()).unwrap();
            proptest::prop_assert_eq!(&back.config_json, &c.config_json);
            proptest::prop_assert_eq!(back.tensors.len(), c.tensors.len());
            for ((na, ta), (nb, tb)) in back.tensors.iter().zip(&c.tensors) {
                proptest::prop_assert_eq!(na, nb);
                proptest::prop_assert_eq!(ta.shape(), tb.shape());
                proptest::prop_assert_eq!(bits(ta), bits(tb));
            }
        }
    }


    #[test]
    fn rejects_corruption() {
        let mut c = CheckpointFile::new("{}".into());
        c.push("w", Tensor::zeros(&[4]));
        let b = c.to_bytes();
        assert!(CheckpointFile::from_bytes(&b[..b.len() - 3]).is_err());
        let mut bad = b.clone();
        bad[0] = b'X';
        assert!(CheckpointFile::from_bytes(&bad).is_err());
        let mut bad = b;
        bad[5] = 9;
        assert!(CheckpointFile::from_bytes(&bad).is_err());
    }
}
