//! Binary checkpoint format.
//!
//! ```text
//! "ADMX"  u8 version
//! u64 config_len  config bytes (UTF-8 key=value text)
//! u64 tensor_count  tensor records
//! u64 step  f64 lr  f64 beta1  f64 beta2  f64 eps
//! u64 m_count  m records  u64 v_count  v records
//! [u8; 32] rng seed  u64 rng stream  u128 rng word position
//! u64 epoch  f64 best_val
//! u32 CRC-32 of every preceding byte
//! ```
//!
//! A tensor record is `u64 name_len, name, u64 ndim, u64 dims…, f64 values…`.
//! All integers and floats are little-endian.

use std::path::Path;

use indexmap::IndexMap;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::{AdaMixT, ModelConfig};
use crate::numerics::{AdamState, ParamStore, Real, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"ADMX";
pub const CHECKPOINT_VERSION: u8 = 1;

/// Serializable position of a ChaCha8 stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
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

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    /// Canonical configuration text the model was trained with.
    pub config: String,
    pub tensors: IndexMap<String, Tensor>,
    pub adam: AdamState,
    pub rng: RngState,
    pub epoch: u64,
    pub best_val: f64,
}

impl Checkpoint {
    pub fn new(config: String, model: &AdaMixT, adam: AdamState, rng: RngState, epoch: u64, best_val: f64) -> Self {
        Self {
            config,
            tensors: model
                .params()
                .iter()
                .map(|(n, p)| (n.to_owned(), p.value.clone()))
                .collect(),
            adam,
            rng,
            epoch,
            best_val,
        }
    }

    /// Rebuilds the model; fails with a mismatch error when the stored
    /// tensors do not fit `config`.
    pub fn restore_model(&self, config: &ModelConfig) -> Result<AdaMixT> {
        let mut store = ParamStore::new();
        for (name, t) in &self.tensors {
            store.insert(name.clone(), t.clone(), true);
        }
        AdaMixT::from_params(config.clone(), store)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Vec::new();
        w.extend_from_slice(CHECKPOINT_MAGIC);
        w.push(CHECKPOINT_VERSION);
        put_u64(&mut w, self.config.len() as u64);
        w.extend_from_slice(self.config.as_bytes());
        put_records(&mut w, &self.tensors);
        put_u64(&mut w, self.adam.step_count);
        for v in [self.adam.lr, self.adam.beta1, self.adam.beta2, self.adam.eps] {
            put_f64(&mut w, v);
        }
        put_records(&mut w, &self.adam.m);
        put_records(&mut w, &self.adam.v);
        w.extend_from_slice(&self.rng.seed);
        put_u64(&mut w, self.rng.stream);
        w.extend_from_slice(&self.rng.word_pos.to_le_bytes());
        put_u64(&mut w, self.epoch);
        put_f64(&mut w, self.best_val);
        let crc = crc32fast::hash(&w);
        w.extend_from_slice(&crc.to_le_bytes());
        w
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 5 || &bytes[..4] != CHECKPOINT_MAGIC {
            return Err(Error::Format("missing ADMX magic bytes".into()));
        }
        if bytes[4] != CHECKPOINT_VERSION {
            return Err(Error::Version {
                found: bytes[4],
                expected: CHECKPOINT_VERSION,
            });
        }
        let mut r = Reader { bytes, pos: 5 };
        let config_len = r.len("config")?;
        let config = String::from_utf8(r.take(config_len, "config")?.to_vec())
            .map_err(|_| Error::Format("config blob is not UTF-8".into()))?;
        let tensors = r.records("tensors")?;
        let step_count = r.u64("optimizer step")?;
        let lr = r.f64("optimizer")?;
        let beta1 = r.f64("optimizer")?;
        let beta2 = r.f64("optimizer")?;
        let eps = r.f64("optimizer")?;
        let m = r.records("first moments")?;
        let v = r.records("second moments")?;
        let seed: [u8; 32] = r.take(32, "rng seed")?.try_into().unwrap();
        let stream = r.u64("rng stream")?;
        let word_pos = u128::from_le_bytes(r.take(16, "rng position")?.try_into().unwrap());
        let epoch = r.u64("epoch")?;
        let best_val = r.f64("best validation")?;
        let body_end = r.pos;
        let stored = u32::from_le_bytes(r.take(4, "checksum")?.try_into().unwrap());
        if r.pos != bytes.len() {
            return Err(Error::Format(format!("{} trailing bytes after checksum", bytes.len() - r.pos)));
        }
        if crc32fast::hash(&bytes[..body_end]) != stored {
            return Err(Error::Format("CRC-32 mismatch".into()));
        }
        Ok(Self {
            config,
            tensors,
            adam: AdamState {
                step_count,
                lr,
                beta1,
                beta2,
                eps,
                m,
                v,
            },
            rng: RngState { seed, stream, word_pos },
            epoch,
            best_val,
        })
    }
}

fn put_u64(w: &mut Vec<u8>, v: u64) {
    w.extend_from_slice(&v.to_le_bytes());
}

fn put_f64(w: &mut Vec<u8>, v: f64) {
    w.extend_from_slice(&v.to_le_bytes());
}

fn put_records(w: &mut Vec<u8>, records: &IndexMap<String, Tensor>) {
    put_u64(w, records.len() as u64);
    for (name, t) in records {
        put_u64(w, name.len() as u64);
        w.extend_from_slice(name.as_bytes());
        put_u64(w, t.rank() as u64);
        for &d in t.shape() {
            put_u64(w, d as u64);
        }
        for &v in t.data() {
            put_f64(w, v as f64);
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Truncated(format!("file ends inside {what} at byte {}", self.pos)))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    /// A length that must fit in the remaining bytes.
    fn len(&mut self, what: &str) -> Result<usize> {
        let n = self.u64(what)?;
        let remaining = (self.bytes.len() - self.pos) as u64;
        if n > remaining {
            return Err(Error::Truncated(format!("{what} claims {n} bytes, {remaining} remain")));
        }
        Ok(n as usize)
    }

    fn records(&mut self, what: &str) -> Result<IndexMap<String, Tensor>> {
        let count = self.u64(what)?;
        let mut out = IndexMap::new();
        for _ in 0..count {
            let name_len = self.len(what)?;
            let name = std::str::from_utf8(self.take(name_len, what)?)
                .map_err(|_| Error::Format(format!("non UTF-8 tensor name in {what}")))?
                .to_owned();
            let ndim = self.u64(what)?;
            if ndim == 0 || ndim > 8 {
                return Err(Error::Format(format!("tensor `{name}` has {ndim} dimensions")));
            }
            let mut dims = Vec::with_capacity(ndim as usize);
            let mut numel: u64 = 1;
            for _ in 0..ndim {
                let d = self.u64(what)?;
                numel = numel
                    .checked_mul(d)
                    .ok_or_else(|| Error::Format(format!("tensor `{name}` dimensions overflow")))?;
                dims.push(d as usize);
            }
            let raw = self.take(
                usize::try_from(numel.saturating_mul(8)).unwrap_or(usize::MAX),
                &format!("tensor `{name}`"),
            )?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()) as Real)
                .collect();
            let t = Tensor::new(dims, data).map_err(|e| Error::Format(format!("tensor `{name}`: {e}")))?;
            if out.insert(name.clone(), t).is_some() {
                return Err(Error::Format(format!("duplicate tensor `{name}`")));
            }
        }
        Ok(out)
    }
}

pub fn save_checkpoint(path: impl AsRef<Path>, ckpt: &Checkpoint) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, ckpt.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes)
}
