//! Binary query/target tensor files.
//!
//! Layout, all little-endian:
//!
//! ```text
//! "NDGT"            magic
//! u32               version (= 1)
//! u32               N
//! u8 × N            role tags
//! u64               count
//! f32 × count × N   queries
//! f32 × count × 3   targets
//! ```

use std::fs;
use std::path::Path;

use super::DimRole;
use crate::error::{Error, Result};

pub const TENSOR_MAGIC: [u8; 4] = *b"NDGT";
pub const TENSOR_VERSION: u32 = 1;

/// Contents of a tensor file.
#[derive(Clone, Debug, PartialEq)]
pub struct TensorData {
    pub n_dims: usize,
    pub roles: Vec<DimRole>,
    /// Row-major, `n_dims` per sample.
    pub queries: Vec<f32>,
    pub targets: Vec<[f32; 3]>,
}

impl TensorData {
    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let n = self.n_dims;
        let mut out = Vec::with_capacity(24 + n + self.queries.len() * 4 + self.targets.len() * 12);
        out.extend_from_slice(&TENSOR_MAGIC);
        out.extend_from_slice(&TENSOR_VERSION.to_le_bytes());
        out.extend_from_slice(&(n as u32).to_le_bytes());
        out.extend(self.roles.iter().map(|r| r.tag()));
        out.extend_from_slice(&(self.targets.len() as u64).to_le_bytes());
        for q in &self.queries {
            out.extend_from_slice(&q.to_le_bytes());
        }
        for t in &self.targets {
            for v in t {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(4, "magic")?;
        if magic != TENSOR_MAGIC {
            let mut swapped = TENSOR_MAGIC;
            swapped.reverse();
            let message = if magic == swapped {
                "byte-swapped magic: file was written big-endian".to_string()
            } else {
                format!("bad magic {magic:?}")
            };
            return Err(Error::Parse { offset: 0, message });
        }
        let version_at = r.pos;
        let version = r.u32("version")?;
        if version != TENSOR_VERSION {
            return Err(Error::Parse {
                offset: version_at as u64,
                message: format!("unsupported version {version}"),
            });
        }
        let n_at = r.pos;
        let n = r.u32("dimension")? as usize;
        if n == 0 {
            return Err(Error::Parse {
                offset: n_at as u64,
                message: "zero dimensions".into(),
            });
        }
        let tags = r.take(n, "role tags")?;
        let mut roles = Vec::with_capacity(n);
        for (i, &t) in tags.iter().enumerate() {
            roles.push(DimRole::from_tag(t).ok_or_else(|| Error::Parse {
                offset: (r.pos - n + i) as u64,
                message: format!("unknown role tag {t}"),
            })?);
        }
        let count_at = r.pos;
        let count = r.u64("count")?;
        let need = count
            .checked_mul((n as u64 + 3) * 4)
            .filter(|&b| b <= (bytes.len() - r.pos) as u64);
        if need.is_none() {
            return Err(Error::Parse {
                offset: bytes.len() as u64,
                message: format!(
                    "truncated: header at offset {count_at} declares {count} samples of {n} dims"
                ),
            });
        }
        let count = count as usize;
        let queries = r
            .take(count * n * 4, "queries")?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let targets = r
            .take(count * 12, "targets")?
            .chunks_exact(12)
            .map(|c| {
                let f = |k: usize| f32::from_le_bytes(c[k * 4..k * 4 + 4].try_into().unwrap());
                [f(0), f(1), f(2)]
            })
            .collect();
        if r.pos != bytes.len() {
            return Err(Error::Parse {
                offset: r.pos as u64,
                message: format!("{} trailing bytes", bytes.len() - r.pos),
            });
        }
        Ok(Self {
            n_dims: n,
            roles,
            queries,
            targets,
        })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, len: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < len {
            return Err(Error::Parse {
                offset: self.bytes.len() as u64,
                message: format!("truncated while reading {what} at offset {}", self.pos),
            });
        }
        let s = &self.bytes[self.pos..self.pos + len];
        self.pos += len;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

pub fn write_tensor_file(path: impl AsRef<Path>, data: &TensorData) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, data.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn read_tensor_file(path: impl AsRef<Path>) -> Result<TensorData> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    TensorData::from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample() -> TensorData {
        TensorData {
            n_dims: 2,
            roles: vec![DimRole::Position, DimRole::Direction],
            queries: vec![0.25, -1.5, f32::MIN_POSITIVE, 3.0],
            targets: vec![[1.0, 2.0, 3.0], [0.0, -0.0, 1e-20]],
        }
    }

    #[test]
    fn header_layout() {
        let b = sample().to_bytes();
        assert_eq!(&b[..4], b"NDGT");
        assert_eq!(u32::from_le_bytes(b[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(b[8..12].try_into().unwrap()), 2);
        assert_eq!(&b[12..14], &[0, 1]);
        assert_eq!(u64::from_le_bytes(b[14..22].try_into().unwrap()), 2);
        assert_eq!(b.len(), 22 + 2 * 2 * 4 + 2 * 12);
    }

    #[test]
    fn file_round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.ndgt");
        write_tensor_file(&path, &sample()).unwrap();
        let back = read_tensor_file(&path).unwrap();
        assert_eq!(back.to_bytes(), sample().to_bytes());
    }

    #[test]
    fn truncated_file_reports_offset() {
        let b = sample().to_bytes();
        let cut = &b[..b.len() - 5];
        match TensorData::from_bytes(cut) {
            Err(Error::Parse { offset, .. }) => assert_eq!(offset, cut.len() as u64),
            other => panic!("{other:?}"),
        }
        match TensorData::from_bytes(&b[..10]) {
            Err(Error::Parse { offset, .. }) => assert_eq!(offset, 10),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn big_endian_file_fails_magic() {
        let mut b = sample().to_bytes();
        b[..4].reverse();
        match TensorData::from_bytes(&b) {
            Err(Error::Parse { offset, message }) => {
                assert_eq!(offset, 0);
                assert!(message.contains("big-endian"));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn bad_version_and_trailing_bytes() {
        let mut b = sample().to_bytes();
        b[4] = 2;
        assert!(matches!(TensorData::from_bytes(&b), Err(Error::Parse { offset: 4, .. })));
        let mut b = sample().to_bytes();
        b.push(0);
        assert!(TensorData::from_bytes(&b).is_err());
    }

    proptest! {
        #[test]
        fn bytes_round_trip(n in 1usize..5, rows in prop::collection::vec(prop::num::f32::ANY, 0..40)) {
            let count = rows.len() / (n + 3);
            let queries = rows[..count * n].to_vec();
            let targets = rows[count * n..count * (n + 3)]
                .chunks_exact(3)
                .map(|c| [c[0], c[1], c[2]])
                .collect();
            let data = TensorData { n_dims: n, roles: vec![DimRole::Variable; n], queries, targets };
            let bytes = data.to_bytes();
            let back = TensorData::from_bytes(&bytes).unwrap();
            prop_assert_eq!(back.to_bytes(), bytes);
        }
    }
}
