//! Binary checkpoints.
//!
//! Layout, all integers and floats little-endian:
//!
//! ```text
//! "MZUCKPT1"
//! u32 version
//! str config echo                  (str = u32 byte length + UTF-8)
//! u64 step, f64 best validation BPC
//! u32 count, then per parameter:   str name, u32 rank, u32 extents, f32 data
//! u32 count, then per parameter:   str name, u64 step, tensor m, tensor v
//! u32 count, then per extra state: str name, tensor
//! str "chacha8", 32 seed bytes, u64 stream, u128 word position
//! ```
//!
//! `tensor` is `u32 rank, u32 extents, f32 data` as in the parameter block.

use std::fs;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

use crate::error::{Error, Result};
use crate::numerics::{ParamStore, Slots, Tensor};

pub const MAGIC: &[u8; 8] = b"MZUCKPT1";
pub const VERSION: u32 = 1;
const RNG_TAG: &str = "chacha8";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    /// `key=value` lines describing the model and run.
    pub config: String,
    pub step: u64,
    pub best_valid_bpc: f64,
    pub params: ParamStore<f32>,
    /// Named non-parameter state, e.g. the carried recurrent state.
    pub extras: Vec<(String, Tensor<f32>)>,
    pub rng: ChaCha8Rng,
}

impl Checkpoint {
    pub fn extra(&self, name: &str) -> Option<&Tensor<f32>> {
        self.extras.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer(Vec::new());
        w.0.extend_from_slice(MAGIC);
        w.u32(VERSION);
        w.str(&self.config);
        w.u64(self.step);
        w.0.extend_from_slice(&self.best_valid_bpc.to_le_bytes());
        w.u32(self.params.len() as u32);
        for (name, t) in self.params.iter() {
            w.str(name);
            w.tensor(t);
        }
        w.u32(self.params.len() as u32);
        for name in self.params.names() {
            let s = self.params.slots(name).expect("every parameter has slots");
            w.str(name);
            w.u64(s.step);
            w.tensor(&s.m);
            w.tensor(&s.v);
        }
        w.u32(self.extras.len() as u32);
        for (name, t) in &self.extras {
            w.str(name);
            w.tensor(t);
        }
        w.str(RNG_TAG);
        w.0.extend_from_slice(&self.rng.get_seed());
        w.u64(self.rng.get_stream());
        w.0.extend_from_slice(&self.rng.get_word_pos().to_le_bytes());
        w.0
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { buf: bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Format("bad magic, not an MZU checkpoint".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Format(format!("version {version}, expected {VERSION}")));
        }
        let config = r.str()?;
        let step = r.u64()?;
        let best_valid_bpc = f64::from_le_bytes(r.array()?);
        let mut params = ParamStore::new();
        for _ in 0..r.u32()? {
            let name = r.str()?;
            let t = r.tensor()?;
            params
                .insert(name, t)
                .map_err(|e| Error::Format(e.to_string()))?;
        }
        let slot_count = r.u32()? as usize;
        if slot_count != params.len() {
            return Err(Error::Format(format!("{slot_count} slot entries for {} parameters", params.len())));
        }
        for _ in 0..slot_count {
            let name = r.str()?;
            let step = r.u64()?;
            let m = r.tensor()?;
            let v = r.tensor()?;
            params
                .set_slots(&name, Slots { m, v, step })
                .map_err(|e| Error::Format(e.to_string()))?;
        }
        let mut extras = Vec::new();
        for _ in 0..r.u32()? {
            let name = r.str()?;
            extras.push((name, r.tensor()?));
        }
        let tag = r.str()?;
        if tag != RNG_TAG {
            return Err(Error::Format(format!("unknown generator `{tag}`")));
        }
        let seed: [u8; 32] = r.array()?;
        let stream = r.u64()?;
        let word_pos = u128::from_le_bytes(r.array()?);
        if r.pos != bytes.len() {
            return Err(Error::Format(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(stream);
        rng.set_word_pos(word_pos);
        Ok(Checkpoint {
            config,
            step,
            best_valid_bpc,
            params,
            extras,
            rng,
        })
    }
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, ckpt.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes)
}

struct Writer(Vec<u8>);

impl Writer {
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.0.extend_from_slice(s.as_bytes());
    }

    fn tensor(&mut self, t: &Tensor<f32>) {
        self.u32(t.rank() as u32);
        for &d in t.shape() {
            self.u32(d as u32);
        }
        for v in t.data() {
            self.0.extend_from_slice(&v.to_le_bytes());
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Format(format!("truncated at byte {}", self.pos)))?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }

    fn str(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Format("name is not UTF-8".into()))
    }

    fn tensor(&mut self) -> Result<Tensor<f32>> {
        let rank = self.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(self.u32()? as usize);
        }
        let n = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::Format("tensor extents overflow".into()))?;
        let raw = self.take(n.checked_mul(4).ok_or_else(|| Error::Format("tensor too large".into()))?)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        Tensor::new(&shape, data).map_err(|e| Error::Format(e.to_string()))
    }
}
