//! Named-tensor checkpoint files.
//!
//! Layout (all little-endian): magic "POCK", version u16, tensor count u32; per tensor
//! a u16 name length plus UTF-8 name, rank u8, one u64 per dimension, then f32 data
//! row-major; after the last tensor a u32 length plus UTF-8 config snapshot.
//!
//! Training state is f32-representable by construction (parameters and optimizer
//! moments round through f32 every step), so save then load is bit-identical.

use std::fs;
use std::path::Path;

use crate::datagen::io_err;
use crate::numerics::Tensor;
use crate::{Error, Result};

const MAGIC: &[u8; 4] = b"POCK";
const VERSION: u16 = 1;

/// A named-tensor container plus the config text that produced it.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub tensors: Vec<(String, Tensor)>,
    pub config: String,
}

impl Checkpoint {
    pub fn new(tensors: Vec<(String, Tensor)>, config: impl Into<String>) -> Checkpoint {
        Checkpoint { tensors, config: config.into() }
    }

    /// Looks up one tensor by exact name; the error names near misses.
    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        if let Some((_, t)) = self.tensors.iter().find(|(n, _)| n == name) {
            return Ok(t);
        }
        let prefix: String = name.chars().take(8).collect();
        let mut near: Vec<&str> = self
            .tensors
            .iter()
            .map(|(n, _)| n.as_str())
            .filter(|n| n.starts_with(&prefix))
            .take(4)
            .collect();
        if near.is_empty() {
            near = self.tensors.iter().map(|(n, _)| n.as_str()).take(4).collect();
        }
        Err(Error::Format(format!(
            "checkpoint has no tensor '{name}' ({} stored, e.g. {})",
            self.tensors.len(),
            near.join(", ")
        )))
    }

    /// Lookup closure for the `load_state(prefix, find)` loaders.
    pub fn finder(&self) -> impl Fn(&str) -> Option<Tensor> + '_ {
        move |name: &str| {
            self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t.clone())
        }
    }

    fn encode(&self) -> Result<Vec<u8>> {
        if self.tensors.len() > u32::MAX as usize {
            return Err(Error::InvalidParameter("too many tensors for one checkpoint".into()));
        }
        let mut buf: Vec<u8> = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        buf.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            let bytes = name.as_bytes();
            if bytes.is_empty() || bytes.len() > u16::MAX as usize {
                return Err(Error::InvalidParameter(format!(
                    "tensor name '{name}' length {} unsupported",
                    bytes.len()
                )));
            }
            if t.rank() > u8::MAX as usize {
                return Err(Error::InvalidParameter(format!(
                    "tensor '{name}' rank {} unsupported",
                    t.rank()
                )));
            }
            buf.extend_from_slice(&(bytes.len() as u16).to_le_bytes());
            buf.extend_from_slice(bytes);
            buf.push(t.rank() as u8);
            for &d in t.shape() {
                buf.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &x in t.data() {
                buf.extend_from_slice(&(x as f32).to_le_bytes());
            }
        }
        let cfg = self.config.as_bytes();
        if cfg.len() > u32::MAX as usize {
            return Err(Error::InvalidParameter("config snapshot too large".into()));
        }
        buf.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
        buf.extend_from_slice(cfg);
        Ok(buf)
    }

    /// Saves atomically: writes a sibling temp file, then renames over the target.
    pub fn save(&self, path: &Path) -> Result<()> {
        let buf = self.encode()?;
        let mut tmp = path.as_os_str().to_owned();
        tmp.push(".tmp");
        let tmp = std::path::PathBuf::from(tmp);
        fs::write(&tmp, &buf).map_err(|e| io_err(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| io_err(path, e))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let buf = fs::read(path).map_err(|e| io_err(path, e))?;
        let mut c = Reader { buf: &buf, at: 0, path };
        let magic = c.take(4, "magic")?;
        if magic != MAGIC {
            return Err(Error::Format(format!(
                "{}: bad magic {magic:02x?} at byte 0, expected \"POCK\"",
                path.display()
            )));
        }
        let version = c.u16("version")?;
        if version != VERSION {
            return Err(Error::Format(format!(
                "{}: unsupported checkpoint version {version} at byte 4",
                path.display()
            )));
        }
        let count = c.u32("tensor count")? as usize;
        let mut tensors = Vec::with_capacity(count.min(4096));
        for i in 0..count {
            let name_len = c.u16("name length")? as usize;
            let name_at = c.at;
            let name = std::str::from_utf8(c.take(name_len, "tensor name")?)
                .map_err(|_| {
                    Error::Format(format!(
                        "{}: tensor {i} name is not UTF-8 at byte {name_at}",
                        path.display()
                    ))
                })?
                .to_string();
            let rank = c.u8("rank")? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(c.u64("dimension")? as usize);
            }
            let len: usize = shape.iter().product();
            let mut data = Vec::with_capacity(len);
            for _ in 0..len {
                data.push(c.f32("tensor data")? as f64);
            }
            tensors.push((name, Tensor::new(&shape, data)?));
        }
        let cfg_len = c.u32("config length")? as usize;
        let cfg_at = c.at;
        let config = std::str::from_utf8(c.take(cfg_len, "config text")?)
            .map_err(|_| {
                Error::Format(format!(
                    "{}: config snapshot is not UTF-8 at byte {cfg_at}",
                    path.display()
                ))
            })?
            .to_string();
        if c.at != buf.len() {
            return Err(Error::Format(format!(
                "{}: {} trailing bytes at byte {}",
                path.display(),
                buf.len() - c.at,
                c.at
            )));
        }
        Ok(Checkpoint { tensors, config })
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    at: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.at + n > self.buf.len() {
            return Err(Error::Format(format!(
                "{}: truncated checkpoint, {what} needs {n} bytes at byte {}, file has {}",
                self.path.display(),
                self.at,
                self.buf.len()
            )));
        }
        let s = &self.buf[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn f32(&mut self, what: &str) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        Checkpoint::new(
            vec![
                ("enc.w".into(), Tensor::new(&[2, 3], vec![0.5, -1.25, 3.0, 0.0, 7.5, -0.125]).unwrap()),
                ("enc.b".into(), Tensor::new(&[3], vec![1.0, 2.0, 3.0]).unwrap()),
                ("step".into(), Tensor::scalar(42.0)),
                ("cube".into(), Tensor::new(&[2, 1, 2], vec![1.5, 2.5, 3.5, 4.5]).unwrap()),
            ],
            "[train]\nlr = 0.001\nnote = \"строка\"\n",
        )
    }

    #[test]
    fn round_trip_is_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.pock");
        let ck = sample();
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back.config, ck.config);
        assert_eq!(back.tensors.len(), ck.tensors.len());
        for ((na, ta), (nb, tb)) in back.tensors.iter().zip(&ck.tensors) {
            assert_eq!(na, nb);
            assert_eq!(ta.shape(), tb.shape());
            for (a, b) in ta.data().iter().zip(tb.data()) {
                assert_eq!(a.to_bits(), b.to_bits());
            }
        }
        // Saving the loaded copy reproduces the bytes exactly.
        let path2 = dir.path().join("model2.pock");
        back.save(&path2).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }

    #[test]
    fn lookup_errors_name_near_misses() {
        let ck = sample();
        assert_eq!(ck.tensor("enc.b").unwrap().shape(), &[3]);
        let err = ck.tensor("enc.missing").unwrap_err().to_string();
        assert!(err.contains("enc.missing") && err.contains("enc.w"), "{err}");
    }

    #[test]
    fn corrupted_files_are_rejected_with_offsets() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ok.pock");
        sample().save(&path).unwrap();
        let bytes = std::fs::read(&path).unwrap();

        let bad = dir.path().join("magic.pock");
        let mut b = bytes.clone();
        b[0] = b'X';
        std::fs::write(&bad, &b).unwrap();
        assert!(Checkpoint::load(&bad).unwrap_err().to_string().contains("magic"));

        let bad = dir.path().join("version.pock");
        let mut b = bytes.clone();
        b[4] = 9;
        std::fs::write(&bad, &b).unwrap();
        assert!(Checkpoint::load(&bad).unwrap_err().to_string().contains("version 9"));

        let bad = dir.path().join("trunc.pock");
        std::fs::write(&bad, &bytes[..bytes.len() - 7]).unwrap();
        let err = Checkpoint::load(&bad).unwrap_err().to_string();
        assert!(err.contains("at byte"), "{err}");

        let bad = dir.path().join("trail.pock");
        let mut b = bytes.clone();
        b.push(0);
        std::fs::write(&bad, &b).unwrap();
        assert!(Checkpoint::load(&bad).unwrap_err().to_string().contains("trailing"));
    }

    #[test]
    fn save_replaces_existing_file_atomically() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.pock");
        sample().save(&path).unwrap();
        let small = Checkpoint::new(vec![("x".into(), Tensor::scalar(1.0))], "v2");
        small.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back.config, "v2");
        assert_eq!(back.tensors.len(), 1);
        assert!(!dir.path().join("model.pock.tmp").exists(), "temp file must not linger");
    }

    #[test]
    fn finder_feeds_state_loaders() {
        let ck = sample();
        let find = ck.finder();
        assert!(find("enc.w").is_some());
        assert!(find("nope").is_none());
    }
}
