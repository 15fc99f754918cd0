//! Little-endian checkpoint files.
//!
//! Layout: `SYMN`, u32 version, u32 header length, JSON header (config, step,
//! class names, RNG state), then records until end of file. A record is u32
//! name length, name bytes, u8 dtype tag, u32 rank, u64 extents, raw values.
//! Momentum buffers are stored as `momentum/<param>` records.

use std::fs;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use symnet_tensor::{DType, Real, Tensor};

use crate::config::Config;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"SYMN";
pub const VERSION: u32 = 1;
pub const MOMENTUM_PREFIX: &str = "momentum/";
pub const TEXT_RECORD: &str = "text.embeddings";

/// Position of a ChaCha stream, enough to continue it exactly.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub word_pos: u128,
    pub stream: u64,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            word_pos: rng.get_word_pos(),
            stream: rng.get_stream(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    config: Config,
    step: u64,
    class_names: Vec<String>,
    rng_seed: String,
    rng_word_pos: String,
    rng_stream: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T> {
    pub config: Config,
    pub step: u64,
    pub class_names: Vec<String>,
    pub rng: RngState,
    /// Parameters, the text table and momentum buffers in file order.
    pub records: Vec<(String, Tensor<T>)>,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn unhex(s: &str) -> Option<[u8; 32]> {
    if s.len() != 64 {
        return None;
    }
    let mut out = [0u8; 32];
    for (i, o) in out.iter_mut().enumerate() {
        *o = u8::from_str_radix(s.get(2 * i..2 * i + 2)?, 16).ok()?;
    }
    Some(out)
}

impl<T: Real> Checkpoint<T> {
    pub fn record(&self, name: &str) -> Option<&Tensor<T>> {
        self.records.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            config: self.config.clone(),
            step: self.step,
            class_names: self.class_names.clone(),
            rng_seed: hex(&self.rng.seed),
            rng_word_pos: self.rng.word_pos.to_string(),
            rng_stream: self.rng.stream,
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        for (name, t) in &self.records {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(T::DTYPE.tag());
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &e in t.shape() {
                out.extend_from_slice(&(e as u64).to_le_bytes());
            }
            for &v in t.data() {
                v.write_le(&mut out);
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let (header, seed, word_pos) = read_header(&mut r)?;

        let mut records = Vec::new();
        while r.pos < bytes.len() {
            let start = r.pos;
            let n = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(n)?)
                .map_err(|_| r.error_at(start, "record name is not UTF-8"))?
                .to_string();
            let tag_at = r.pos;
            let tag = r.take(1)?[0];
            if tag != T::DTYPE.tag() {
                let want = match T::DTYPE {
                    DType::F32 => "f32",
                    DType::F64 => "f64",
                };
                return Err(r.error_at(tag_at, &format!("record {name}: dtype tag {tag}, expected {want}")));
            }
            let rank = r.u32()? as usize;
            if rank == 0 || rank > 8 {
                return Err(r.error_at(tag_at + 1, &format!("record {name}: rank {rank}")));
            }
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u64()? as usize);
            }
            let count = shape.iter().try_fold(1usize, |a, &e| a.checked_mul(e));
            let size = T::DTYPE.size_of();
            let Some(count) = count.filter(|&c| c > 0 && c.checked_mul(size).is_some()) else {
                return Err(r.error_at(start, &format!("record {name}: bad extents {shape:?}")));
            };
            let raw = r.take(count * size)?;
            let data = raw.chunks(size).map(T::read_le).collect();
            let t = Tensor::new(shape, data).map_err(|e| r.error_at(start, &e.to_string()))?;
            records.push((name, t));
        }
        Ok(Self {
            config: header.config,
            step: header.step,
            class_names: header.class_names,
            rng: RngState {
                seed,
                word_pos,
                stream: header.rng_stream,
            },
            records,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Ok(fs::write(path, self.to_bytes())?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::NotFound(format!("{}: {e}", path.display())))?;
        Self::from_bytes(&bytes)
    }
}

/// Configuration from a checkpoint header, without reading any records.
pub fn read_config(path: &Path) -> Result<Config> {
    let bytes = fs::read(path).map_err(|e| Error::NotFound(format!("{}: {e}", path.display())))?;
    let mut r = Reader { bytes: &bytes, pos: 0 };
    Ok(read_header(&mut r)?.0.config)
}

fn read_header(r: &mut Reader<'_>) -> Result<(Header, [u8; 32], u128)> {
    if r.take(4)? != MAGIC {
        return Err(r.error_at(0, "bad magic, not a checkpoint"));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Version {
            found: version,
            expected: VERSION,
        });
    }
    let len = r.u32()? as usize;
    let at = r.pos;
    let header: Header =
        serde_json::from_slice(r.take(len)?).map_err(|e| r.error_at(at, &format!("header: {e}")))?;
    let seed = unhex(&header.rng_seed).ok_or_else(|| r.error_at(at, "header: bad RNG seed"))?;
    let word_pos = header
        .rng_word_pos
        .parse()
        .map_err(|_| r.error_at(at, "header: bad RNG position"))?;
    header.config.validate()?;
    Ok((header, seed, word_pos))
}

struct Reader<'b> {
    bytes: &'b [u8],
    pos: usize,
}

impl<'b> Reader<'b> {
    fn error_at(&self, offset: usize, message: &str) -> Error {
        Error::Format {
            offset: offset as u64,
            message: message.to_string(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'b [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(self.error_at(self.pos, &format!("truncated: wanted {n} bytes")));
        };
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
