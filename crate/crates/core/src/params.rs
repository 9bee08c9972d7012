//! Named parameter storage and a byte-stable checkpoint container.
//!
//! Parameters live in a name-ordered map so that iteration order, the
//! content digest, and the serialized layout are all independent of
//! insertion order. The container format is fixed little-endian binary:
//!
//! ```text
//! magic "UIEC" | version u32 | config length u32 + UTF-8 bytes |
//! step u64 | entry count u32 | entries sorted by name
//! entry: name len u32 + bytes | trainable u8 | ndim u32 + dims u64 |
//!        values f64 | has-moments u8 | [m f64s | v f64s]
//! ```

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Result, UieError};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"UIEC";
const VERSION: u32 = 1;

/// One named tensor with a trainability flag.
#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub value: Tensor,
    pub trainable: bool,
}

/// Name-ordered collection of parameters.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParameterStore {
    entries: BTreeMap<String, Param>,
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Insert a trainable parameter; panics on duplicate names, which
    /// indicate a network construction bug.
    pub fn insert(&mut self, name: &str, value: Tensor) {
        self.insert_with(name, value, true);
    }

    pub fn insert_with(&mut self, name: &str, value: Tensor, trainable: bool) {
        let prev = self
            .entries
            .insert(name.to_string(), Param { value, trainable });
        assert!(prev.is_none(), "duplicate parameter name {name}");
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name).map(|p| &p.value)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries.get_mut(name).map(|p| &mut p.value)
    }

    pub fn is_trainable(&self, name: &str) -> bool {
        self.entries.get(name).map(|p| p.trainable).unwrap_or(false)
    }

    pub fn set_trainable(&mut self, name: &str, trainable: bool) {
        if let Some(p) = self.entries.get_mut(name) {
            p.trainable = trainable;
        }
    }

    /// Freeze every parameter (used for fixed scorers and extractors).
    pub fn freeze_all(&mut self) {
        for p in self.entries.values_mut() {
            p.trainable = false;
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar values across all parameters.
    pub fn scalar_count(&self) -> usize {
        self.entries.values().map(|p| p.value.len()).sum()
    }

    /// Names in sorted order.
    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(|s| s.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    /// SHA-256 over names, shapes and raw values in name order. Two
    /// stores with identical content produce identical digests
    /// regardless of construction history.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for (name, p) in &self.entries {
            h.update(name.as_bytes());
            h.update([0u8]);
            for &d in p.value.shape() {
                h.update((d as u64).to_le_bytes());
            }
            for &v in p.value.data() {
                h.update(v.to_le_bytes());
            }
        }
        hex(&h.finalize())
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Full training state: parameters, optimizer moments, progress counter
/// and an echo of the configuration the run was started with.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub config_echo: String,
    pub step: u64,
    pub params: ParameterStore,
    /// First and second optimizer moments, keyed like `params`.
    pub moments: BTreeMap<String, (Tensor, Tensor)>,
}

impl Checkpoint {
    pub fn new(params: ParameterStore, config_echo: &str) -> Self {
        Self {
            config_echo: config_echo.to_string(),
            step: 0,
            params,
            moments: BTreeMap::new(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf: Vec<u8> = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        let cfg = self.config_echo.as_bytes();
        buf.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
        buf.extend_from_slice(cfg);
        buf.extend_from_slice(&self.step.to_le_bytes());
        buf.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (name, p) in self.params.iter() {
            buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
            buf.extend_from_slice(name.as_bytes());
            buf.push(p.trainable as u8);
            buf.extend_from_slice(&(p.value.shape().len() as u32).to_le_bytes());
            for &d in p.value.shape() {
                buf.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in p.value.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            match self.moments.get(name) {
                Some((m, v)) => {
                    buf.push(1);
                    for &x in m.data() {
                        buf.extend_from_slice(&x.to_le_bytes());
                    }
                    for &x in v.data() {
                        buf.extend_from_slice(&x.to_le_bytes());
                    }
                }
                None => buf.push(0),
            }
        }
        let mut f = std::fs::File::create(path).map_err(|e| UieError::io(path, e))?;
        f.write_all(&buf).map_err(|e| UieError::io(path, e))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .map_err(|e| UieError::io(path, e))?
            .read_to_end(&mut bytes)
            .map_err(|e| UieError::io(path, e))?;
        let mut r = Reader { bytes: &bytes, pos: 0 };
        let magic = r.take(4)?;
        if magic != MAGIC {
            return Err(UieError::Format(format!(
                "{}: not a checkpoint container (bad magic)",
                path.display()
            )));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(UieError::Version { found: version, expected: VERSION });
        }
        let cfg_len = r.u32()? as usize;
        let config_echo = String::from_utf8(r.take(cfg_len)?.to_vec())
            .map_err(|_| UieError::Format("config echo is not UTF-8".into()))?;
        let step = r.u64()?;
        let n = r.u32()? as usize;
        let mut params = ParameterStore::new();
        let mut moments = BTreeMap::new();
        for _ in 0..n {
            let name_len = r.u32()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|_| UieError::Format("parameter name is not UTF-8".into()))?;
            let trainable = r.u8()? != 0;
            let ndim = r.u32()? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(r.u64()? as usize);
            }
            let count: usize = shape.iter().product();
            let value = Tensor::from_vec(&shape, r.f64s(count)?)
                .map_err(|e| UieError::Format(format!("parameter {name}: {e}")))?;
            params.insert_with(&name, value, trainable);
            if r.u8()? != 0 {
                let m = Tensor::from_vec(&shape, r.f64s(count)?)
                    .map_err(|e| UieError::Format(format!("moment {name}: {e}")))?;
                let v = Tensor::from_vec(&shape, r.f64s(count)?)
                    .map_err(|e| UieError::Format(format!("moment {name}: {e}")))?;
                moments.insert(name, (m, v));
            }
        }
        Ok(Self { config_echo, step, params, moments })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(UieError::Format(format!(
                "container truncated at byte {} (wanted {n} more)",
                self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n * 8)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    fn sample_store() -> ParameterStore {
        let mut s = ParameterStore::new();
        s.insert("net.w", Tensor::from_vec(&[2, 2], vec![1.0, -2.0, 3.5, 0.25]).unwrap());
        s.insert_with("net.frozen", Tensor::from_vec(&[3], vec![0.1, 0.2, 0.3]).unwrap(), false);
        s
    }

    #[test]
    fn digest_is_order_independent_and_content_sensitive() {
        let a = sample_store();
        let mut b = ParameterStore::new();
        b.insert_with("net.frozen", Tensor::from_vec(&[3], vec![0.1, 0.2, 0.3]).unwrap(), false);
        b.insert("net.w", Tensor::from_vec(&[2, 2], vec![1.0, -2.0, 3.5, 0.25]).unwrap());
        assert_eq!(a.digest(), b.digest());

        let mut c = sample_store();
        c.get_mut("net.w").unwrap().data_mut()[0] += 1e-12;
        assert_ne!(a.digest(), c.digest());
    }

    #[test]
    fn checkpoint_roundtrip_preserves_everything() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("ck.bin");
        let mut ck = Checkpoint::new(sample_store(), "lr=0.001\nsteps=10");
        ck.step = 7;
        ck.moments.insert(
            "net.w".into(),
            (
                Tensor::from_vec(&[2, 2], vec![0.0, 0.1, 0.2, 0.3]).unwrap(),
                Tensor::from_vec(&[2, 2], vec![1.0, 1.1, 1.2, 1.3]).unwrap(),
            ),
        );
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back, ck);
        assert!(!back.params.is_trainable("net.frozen"));
        assert!(back.params.is_trainable("net.w"));
    }

    #[test]
    fn save_is_byte_stable() {
        let dir = tempdir().unwrap();
        let p1 = dir.path().join("a.bin");
        let p2 = dir.path().join("b.bin");
        let ck = Checkpoint::new(sample_store(), "cfg");
        ck.save(&p1).unwrap();
        ck.save(&p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn truncated_container_is_a_format_error() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("ck.bin");
        Checkpoint::new(sample_store(), "cfg").save(&path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 5]).unwrap();
        match Checkpoint::load(&path) {
            Err(UieError::Format(_)) => {}
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn bad_magic_is_a_format_error() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("ck.bin");
        std::fs::write(&path, b"NOPE____________").unwrap();
        assert!(matches!(Checkpoint::load(&path), Err(UieError::Format(_))));
    }

    #[test]
    fn version_mismatch_is_reported() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("ck.bin");
        Checkpoint::new(sample_store(), "cfg").save(&path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[4..8].copy_from_slice(&99u32.to_le_bytes());
        std::fs::write(&path, &bytes).unwrap();
        match Checkpoint::load(&path) {
            Err(UieError::Version { found: 99, expected: 1 }) => {}
            other => panic!("expected version error, got {other:?}"),
        }
    }
}
