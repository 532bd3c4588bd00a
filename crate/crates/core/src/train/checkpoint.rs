//! `ZSCK` checkpoints: magic, version, a length-prefixed `key=value`
//! metadata block, then named little-endian `f32` tensors until EOF.

use super::{Counters, Optimizers, TrainConfig};
use crate::binio::{put_f32s, put_len, put_u32, Reader};
use crate::error::{Error, Result};
use crate::model::{Block, ModelParams};
use crate::tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;
use std::path::Path;

const MAGIC: &[u8; 4] = b"ZSCK";
pub const CHECKPOINT_VERSION: u32 = 1;
const OPT_PREFIX: &str = "rmsprop.";

/// Exact position of the training random stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RngPosition {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngPosition {
    pub fn of(rng: &ChaCha8Rng) -> Self {
        RngPosition {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub config: TrainConfig,
    pub counters: Counters,
    pub optim: Optimizers,
    pub rng: RngPosition,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn unhex(s: &str) -> Option<[u8; 32]> {
    if s.len() != 64 || !s.is_ascii() {
        return None;
    }
    let mut out = [0u8; 32];
    for (i, o) in out.iter_mut().enumerate() {
        *o = u8::from_str_radix(&s[2 * i..2 * i + 2], 16).ok()?;
    }
    Some(out)
}

impl Checkpoint {
    fn metadata(&self) -> String {
        let d = self.params.dims;
        let c = &self.counters;
        let mut s = format!(
            "format=zscrgan\nd_t={}\nd_i={}\nouter_done={}\nd_updates={}\ng_updates={}\ncsem_updates={}\n\
             rng_seed={}\nrng_stream={}\nrng_word_pos={}\n",
            d.d_t,
            d.d_i,
            c.outer_done,
            c.d_updates,
            c.g_updates,
            c.csem_updates,
            hex(&self.rng.seed),
            self.rng.stream,
            self.rng.word_pos
        );
        s.push_str(&self.config.to_kv_text());
        s
    }

    fn tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = self.params.named_tensors();
        for b in Block::ALL {
            let names = ModelParams::tensor_names(b, self.params.block(b).len());
            for (n, s) in names.into_iter().zip(&self.optim.get(b).s) {
                out.push((format!("{OPT_PREFIX}{n}"), s));
            }
        }
        out
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, CHECKPOINT_VERSION);
        let meta = self.metadata();
        put_len(&mut out, meta.len(), "metadata")?;
        out.extend_from_slice(meta.as_bytes());
        for (name, t) in self.tensors() {
            put_len(&mut out, name.len(), "tensor name")?;
            out.extend_from_slice(name.as_bytes());
            put_len(&mut out, t.rank(), "rank")?;
            for &d in t.shape() {
                put_len(&mut out, d, "dimension")?;
            }
            put_f32s(&mut out, t.data());
        }
        Ok(out)
    }

    pub fn decode(buf: &[u8]) -> Result<Self> {
        let mut r = Reader::new(buf);
        r.magic(MAGIC)?;
        let version = r.u32("version")?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::VersionMismatch {
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let meta_len = r.len("metadata length")?;
        let meta = std::str::from_utf8(r.bytes(meta_len, "metadata")?)
            .map_err(|_| Error::Format("metadata is not UTF-8".into()))?;

        let mut fields: BTreeMap<&str, &str> = BTreeMap::new();
        let mut config = TrainConfig::default();
        for line in meta.lines().filter(|l| !l.is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Format(format!("bad metadata line `{line}`")))?;
            if TrainConfig::keys().any(|c| c == k) {
                config
                    .set(k, v)
                    .map_err(|e| Error::Format(format!("metadata: {e}")))?;
            } else {
                fields.insert(k, v);
            }
        }
        let field = |k: &str| -> Result<&str> {
            fields
                .get(k)
                .copied()
                .ok_or_else(|| Error::Format(format!("metadata lacks `{k}`")))
        };
        let num = |k: &str| -> Result<u128> {
            field(k)?
                .parse()
                .map_err(|_| Error::Format(format!("metadata `{k}` is not a number")))
        };
        let dims = config.dims(num("d_t")? as usize, num("d_i")? as usize);
        dims.validate()
            .map_err(|e| Error::Format(format!("metadata: {e}")))?;
        let counters = Counters {
            outer_done: num("outer_done")? as usize,
            d_updates: num("d_updates")? as usize,
            g_updates: num("g_updates")? as usize,
            csem_updates: num("csem_updates")? as usize,
        };
        let rng = RngPosition {
            seed: unhex(field("rng_seed")?)
                .ok_or_else(|| Error::Format("metadata `rng_seed` is not 32 hex bytes".into()))?,
            stream: num("rng_stream")? as u64,
            word_pos: num("rng_word_pos")?,
        };

        let mut stored: BTreeMap<String, Tensor> = BTreeMap::new();
        while !r.at_end() {
            let n = r.len("tensor name length")?;
            let name = String::from_utf8(r.bytes(n, "tensor name")?.to_vec())
                .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
            let rank = r.len("rank")?;
            if rank > 8 {
                return Err(Error::Format(format!("{name}: implausible rank {rank}")));
            }
            let shape = (0..rank).map(|_| r.len("dimension")).collect::<Result<Vec<_>>>()?;
            let count = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| Error::Format(format!("{name}: size overflow")))?;
            let data = r.f32s(count, &name)?;
            let t = Tensor::new(shape, data).map_err(|e| Error::Format(format!("{name}: {e}")))?;
            if stored.insert(name.clone(), t).is_some() {
                return Err(Error::Format(format!("tensor {name} appears twice")));
            }
        }

        let mut params = ModelParams::zeros(dims, config.leaky_slope);
        let mut optim = Optimizers::new(&params, config.rho, config.eps);
        for (name, slot) in params.named_tensors_mut() {
            fill(&mut stored, &name, slot)?;
        }
        for b in Block::ALL {
            let names = ModelParams::tensor_names(b, params.block(b).len());
            for (n, slot) in names.into_iter().zip(optim.get_mut(b).s.iter_mut()) {
                fill(&mut stored, &format!("{OPT_PREFIX}{n}"), slot)?;
            }
        }
        if let Some(extra) = stored.keys().next() {
            return Err(Error::Format(format!("unexpected tensor {extra}")));
        }
        params.validate()?;
        Ok(Checkpoint {
            params,
            config,
            counters,
            optim,
            rng,
        })
    }
}

fn fill(stored: &mut BTreeMap<String, Tensor>, name: &str, slot: &mut Tensor) -> Result<()> {
    let t = stored
        .remove(name)
        .ok_or_else(|| Error::Format(format!("missing tensor {name}")))?;
    if t.shape() != slot.shape() {
        return Err(Error::Format(format!(
            "tensor {name} has shape {:?}, expected {:?}",
            t.shape(),
            slot.shape()
        )));
    }
    *slot = t;
    Ok(())
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    std::fs::write(path, ckpt.encode()?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::decode(&std::fs::read(path)?)
}
