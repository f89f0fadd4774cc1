//! Named-tensor archive used for checkpoints and datasets.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic      5 bytes   "SLED1"
//! version    u32
//! meta_len   u32, then meta_len bytes of UTF-8 JSON metadata
//! count      u32
//! entries    count × { name_len u32, name bytes, ndim u32, dims u64 × ndim, offset u64 }
//! data_len   u64
//! payload    data_len bytes of f64 values; offsets are relative to its start
//! ```

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde_json::Value;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 5] = b"SLED1";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct TensorArchive {
    pub metadata: Value,
    tensors: BTreeMap<String, Tensor>,
}

impl TensorArchive {
    pub fn new(metadata: Value) -> Self {
        Self {
            metadata,
            tensors: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<()> {
        let name = name.into();
        if self.tensors.contains_key(&name) {
            return Err(Error::Archive(format!("duplicate entry `{name}`")));
        }
        self.tensors.insert(name, tensor);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Archive(format!("missing entry `{name}`")))
    }

    pub fn take(&mut self, name: &str) -> Result<Tensor> {
        self.tensors
            .remove(name)
            .ok_or_else(|| Error::Archive(format!("missing entry `{name}`")))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn into_tensors(self) -> BTreeMap<String, Tensor> {
        self.tensors
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let meta = serde_json::to_vec(&self.metadata)?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&len_u32(meta.len())?.to_le_bytes());
        out.extend_from_slice(&meta);
        out.extend_from_slice(&len_u32(self.tensors.len())?.to_le_bytes());
        let mut offset = 0u64;
        for (name, t) in &self.tensors {
            out.extend_from_slice(&len_u32(name.len())?.to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&len_u32(t.shape().len())?.to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            out.extend_from_slice(&offset.to_le_bytes());
            offset += 8 * t.len() as u64;
        }
        out.extend_from_slice(&offset.to_le_bytes());
        for t in self.tensors.values() {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, at: 0 };
        if r.take(MAGIC.len())? != MAGIC {
            return Err(Error::Archive("bad magic bytes".into()));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Archive(format!(
                "unsupported format version {version} (expected {FORMAT_VERSION})"
            )));
        }
        let meta_len = r.u32()? as usize;
        let metadata: Value = serde_json::from_slice(r.take(meta_len)?)?;
        let count = r.u32()? as usize;
        let mut entries = Vec::new();
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| Error::Archive("entry name is not UTF-8".into()))?
                .to_owned();
            let ndim = r.u32()? as usize;
            let mut shape = Vec::new();
            let mut elems = 1u64;
            for _ in 0..ndim {
                let d = r.u64()?;
                elems = elems
                    .checked_mul(d)
                    .ok_or_else(|| Error::Archive(format!("shape of `{name}` overflows")))?;
                shape.push(d as usize);
            }
            let offset = r.u64()?;
            entries.push((name, shape, offset, elems));
        }
        let data_len = r.u64()?;
        let payload = r.rest();
        if (payload.len() as u64) < data_len {
            return Err(Error::Archive(format!(
                "truncated payload: header declares {data_len} bytes, found {}",
                payload.len()
            )));
        }
        if payload.len() as u64 > data_len {
            return Err(Error::Archive("trailing bytes after payload".into()));
        }

        let mut spans: Vec<(u64, u64)> = Vec::with_capacity(entries.len());
        let mut archive = TensorArchive::new(metadata);
        for (name, shape, offset, elems) in entries {
            let end = elems
                .checked_mul(8)
                .and_then(|n| offset.checked_add(n))
                .filter(|&end| end <= data_len)
                .ok_or_else(|| Error::Archive(format!("entry `{name}` runs past the payload")))?;
            spans.push((offset, end));
            let data = payload[offset as usize..end as usize]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
                .collect();
            let tensor = Tensor::new(shape, data)
                .map_err(|e| Error::Archive(format!("entry `{name}`: {e}")))?;
            archive.insert(name, tensor)?;
        }
        spans.sort_unstable();
        if spans.windows(2).any(|w| w[0].1 > w[1].0) {
            return Err(Error::Archive("overlapping entry offsets".into()));
        }
        Ok(archive)
    }

    /// Writes atomically: a sibling temp file is renamed into place.
    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// Fails unless the entry names are exactly `expected`.
    pub fn expect_names<'a>(&self, expected: impl IntoIterator<Item = &'a str>) -> Result<()> {
        let expected: std::collections::BTreeSet<&str> = expected.into_iter().collect();
        let present: std::collections::BTreeSet<&str> = self.names().collect();
        if let Some(extra) = present.difference(&expected).next() {
            return Err(Error::Archive(format!("unknown entry `{extra}`")));
        }
        if let Some(missing) = expected.difference(&present).next() {
            return Err(Error::Archive(format!("missing entry `{missing}`")));
        }
        Ok(())
    }
}

/// Writes `bytes` to `path` via a temp file in the same directory.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::Archive(format!("{} has no file name", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp-{}", file_name.to_string_lossy(), std::process::id()));
    let result = (|| {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        std::fs::rename(&tmp, path)
    })();
    if result.is_err() {
        let _ = std::fs::remove_file(&tmp);
    }
    Ok(result?)
}

/// Values that persist as a [`TensorArchive`].
pub trait Checkpoint: Sized {
    fn to_archive(&self) -> Result<TensorArchive>;
    fn from_archive(archive: TensorArchive) -> Result<Self>;
}

pub fn save_checkpoint<C: Checkpoint>(value: &C, path: &Path) -> Result<()> {
    value.to_archive()?.save(path)
}

pub fn load_checkpoint<C: Checkpoint>(path: &Path) -> Result<C> {
    C::from_archive(TensorArchive::load(path)?)
}

fn len_u32(n: usize) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::Archive(format!("length {n} does not fit in u32")))
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .at
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Archive("truncated header".into()))?;
        let out = &self.bytes[self.at..end];
        self.at = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn rest(&mut self) -> &'a [u8] {
        let out = &self.bytes[self.at..];
        self.at = self.bytes.len();
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use serde_json::json;

    fn sample() -> TensorArchive {
        let mut a = TensorArchive::new(json!({"kind": "test", "n": 2}));
        a.insert("w", Tensor::new([2, 3], vec![1.0, -2.5, 3.25, 0.0, 1e-300, -7.0]).unwrap())
            .unwrap();
        a.insert("b", Tensor::new([1], vec![0.1]).unwrap()).unwrap();
        a
    }

    #[test]
    fn layout_is_fixed() {
        let mut a = TensorArchive::new(json!(null));
        a.insert("x", Tensor::new([1], vec![1.0]).unwrap()).unwrap();
        let bytes = a.to_bytes().unwrap();
        let mut want = b"SLED1".to_vec();
        want.extend(1u32.to_le_bytes());
        want.extend(4u32.to_le_bytes());
        want.extend(b"null");
        want.extend(1u32.to_le_bytes());
        want.extend(1u32.to_le_bytes());
        want.extend(b"x");
        want.extend(1u32.to_le_bytes());
        want.extend(1u64.to_le_bytes());
        want.extend(0u64.to_le_bytes());
        want.extend(8u64.to_le_bytes());
        want.extend(1.0f64.to_le_bytes());
        assert_eq!(bytes, want);
    }

    #[test]
    fn round_trip_is_lossless() {
        let a = sample();
        let b = TensorArchive::from_bytes(&a.to_bytes().unwrap()).unwrap();
        assert_eq!(a, b);
        for (name, t) in a.iter() {
            assert!(t.bit_eq(b.get(name).unwrap()));
        }
    }

    #[test]
    fn corrupt_inputs_are_typed_errors() {
        let bytes = sample().to_bytes().unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(TensorArchive::from_bytes(&bad), Err(Error::Archive(m)) if m.contains("magic")));
        let mut bad = bytes.clone();
        bad[5] = 9;
        assert!(matches!(TensorArchive::from_bytes(&bad), Err(Error::Archive(m)) if m.contains("version")));
        let short = &bytes[..bytes.len() - 3];
        assert!(matches!(TensorArchive::from_bytes(short), Err(Error::Archive(m)) if m.contains("truncated")));
        for cut in 0..40 {
            assert!(TensorArchive::from_bytes(&bytes[..cut]).is_err());
        }
    }

    #[test]
    fn duplicate_and_unknown_names() {
        let mut a = sample();
        assert!(a.insert("w", Tensor::zeros([1])).is_err());
        assert!(a.expect_names(["w", "b"]).is_ok());
        assert!(a.expect_names(["w"]).is_err());
        assert!(a.expect_names(["w", "b", "c"]).is_err());
    }

    #[test]
    fn save_load_and_atomic_write() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.sled");
        sample().save(&path).unwrap();
        assert_eq!(TensorArchive::load(&path).unwrap(), sample());
        let leftovers: Vec<_> = std::fs::read_dir(dir.path()).unwrap().collect();
        assert_eq!(leftovers.len(), 1);
    }

    proptest! {
        #[test]
        fn random_archives_round_trip(shapes in prop::collection::vec(prop::collection::vec(1usize..4, 1..3), 0..5),
                                      seed in any::<u64>()) {
            use rand::SeedableRng;
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let mut a = TensorArchive::new(json!({"seed": seed}));
            for (i, s) in shapes.iter().enumerate() {
                a.insert(format!("t{i}"), Tensor::randn(s.clone(), 3.0, &mut rng)).unwrap();
            }
            let b = TensorArchive::from_bytes(&a.to_bytes().unwrap()).unwrap();
            prop_assert_eq!(a, b);
        }
    }
}
