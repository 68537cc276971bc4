//! Binary checkpoint format.
//!
//! ```text
//! magic "HRMZCKPT" | version u32 | payload length u64 | SHA-256(payload)
//! payload: config block length u64 | config text (UTF-8)
//!          array count u32 | arrays...
//! array:   name length u32 | name | ndim u32 | dims u64... | f32 LE data
//! ```
//! All integers are little-endian.

use std::fs;
use std::io::Write;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::config::TrainConfig;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"HRMZCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;
const HEADER_LEN: usize = 8 + 4 + 8 + 32;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    /// Optimizer steps taken so far. Together with the seed this fixes the
    /// data order of every later step.
    pub step: u64,
    /// Parameters, buffers and optimizer moments, by name.
    pub arrays: Vec<(String, Tensor<f32>)>,
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::CorruptCheckpoint(format!("payload ends early at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::CorruptCheckpoint("length overflows usize".into()))
    }
}

impl Checkpoint {
    fn meta_text(&self) -> String {
        format!("{}step = {}\n", self.config.to_text(), self.step)
    }

    pub fn array(&self, name: &str) -> Option<&Tensor<f32>> {
        self.arrays.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut payload = Vec::new();
        let meta = self.meta_text();
        payload.extend_from_slice(&(meta.len() as u64).to_le_bytes());
        payload.extend_from_slice(meta.as_bytes());
        payload.extend_from_slice(&(self.arrays.len() as u32).to_le_bytes());
        for (name, t) in &self.arrays {
            payload.extend_from_slice(&(name.len() as u32).to_le_bytes());
            payload.extend_from_slice(name.as_bytes());
            payload.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                payload.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                payload.extend_from_slice(&v.to_le_bytes());
            }
        }
        let mut out = Vec::with_capacity(HEADER_LEN + payload.len());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
        out.extend_from_slice(&Sha256::digest(&payload));
        out.extend_from_slice(&payload);
        out
    }

    /// Validates magic, version, length and checksum before decoding anything.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_LEN {
            return Err(Error::CorruptCheckpoint(format!("file is {} bytes, shorter than the header", bytes.len())));
        }
        if &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(Error::CorruptCheckpoint("bad magic bytes".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(Error::CheckpointVersion { found: version, expected: CHECKPOINT_VERSION });
        }
        let declared = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes"));
        let payload = &bytes[HEADER_LEN..];
        if declared != payload.len() as u64 {
            return Err(Error::CorruptCheckpoint(format!(
                "payload is {} bytes, header declares {declared}",
                payload.len()
            )));
        }
        if Sha256::digest(payload).as_slice() != &bytes[20..52] {
            return Err(Error::CorruptCheckpoint("checksum mismatch".into()));
        }

        let mut r = Reader { buf: payload, pos: 0 };
        let meta_len = r.len()?;
        let meta = std::str::from_utf8(r.take(meta_len)?)
            .map_err(|_| Error::CorruptCheckpoint("config block is not UTF-8".into()))?;
        let mut config = TrainConfig::default();
        let mut step = None;
        let mut rest = String::new();
        for line in meta.lines() {
            match line.split_once('=') {
                Some((k, v)) if k.trim() == "step" => {
                    step = Some(v.trim().parse().map_err(|_| Error::CorruptCheckpoint(format!("bad step `{v}`")))?)
                }
                _ => {
                    rest.push_str(line);
                    rest.push('\n');
                }
            }
        }
        config.apply_text(&rest)?;
        let step = step.ok_or_else(|| Error::CorruptCheckpoint("config block lacks a step".into()))?;

        let count = r.u32()? as usize;
        let mut arrays = Vec::with_capacity(count);
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| Error::CorruptCheckpoint("array name is not UTF-8".into()))?
                .to_string();
            let ndim = r.u32()? as usize;
            let dims = (0..ndim).map(|_| r.len()).collect::<Result<Vec<usize>>>()?;
            let numel = dims
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| Error::CorruptCheckpoint(format!("array `{name}` is too large")))?;
            let raw = r.take(numel.checked_mul(4).ok_or_else(|| Error::CorruptCheckpoint("size overflow".into()))?)?;
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
            let t = Tensor::new(dims, data).map_err(|e| Error::CorruptCheckpoint(format!("array `{name}`: {e}")))?;
            arrays.push((name, t));
        }
        if r.pos != payload.len() {
            return Err(Error::CorruptCheckpoint("trailing bytes after last array".into()));
        }
        Ok(Self { config, step, arrays })
    }

    /// Writes to a sibling temp file, syncs, then renames over `path`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
        fs::create_dir_all(dir)?;
        let file_name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        let tmp = dir.join(format!(".{file_name}.tmp"));
        {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&self.to_bytes())?;
            f.sync_all()?;
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        Checkpoint {
            config: TrainConfig::default(),
            step: 42,
            arrays: vec![
                ("a.weight".into(), Tensor::from_fn(vec![2, 3], |i| i as f32 * 0.5 - 1.0)),
                ("b".into(), Tensor::scalar(7.25)),
            ],
        }
    }

    #[test]
    fn bytes_round_trip() {
        let c = sample();
        let bytes = c.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn truncation_and_tampering_rejected() {
        let bytes = sample().to_bytes();
        for cut in [0, 10, HEADER_LEN, bytes.len() - 1] {
            assert!(matches!(Checkpoint::from_bytes(&bytes[..cut]), Err(Error::CorruptCheckpoint(_))));
        }
        let mut flipped = bytes.clone();
        *flipped.last_mut().unwrap() ^= 1;
        assert!(matches!(Checkpoint::from_bytes(&flipped), Err(Error::CorruptCheckpoint(_))));
        let mut versioned = bytes;
        versioned[8] = 9;
        assert!(matches!(Checkpoint::from_bytes(&versioned), Err(Error::CheckpointVersion { found: 9, .. })));
    }
}
