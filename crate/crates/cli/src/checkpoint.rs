//! OCN1 checkpoints: a flat list of named f32 tensors, little-endian.
//!
//! Layout: `b"OCN1"`, version (u32), tensor count (u32), then per tensor the
//! name length (u32), the UTF-8 name, the rank (u32), one u32 per dim and the
//! raw f32 values. Model slots come first in their canonical order, then the
//! optimizer velocities under `__opt__/`, then the run state under `__state__/`.
//! Integers in the run state are split into 32-bit halves whose bit patterns
//! are stored as f32 values.

use std::path::Path;

use ocnet_core::model::SegModel;
use ocnet_core::nn::Parameterized;
use ocnet_core::training::{Sgd, Trainer};

use crate::{CliError, Result};

pub const MAGIC: &[u8; 4] = b"OCN1";
pub const VERSION: u32 = 1;
pub const OPT_PREFIX: &str = "__opt__/";
pub const ITERATION: &str = "__state__/iteration";
/// Data order and augmentation are pure functions of this seed and the
/// iteration, so it is the whole random state of a run.
pub const RNG_SEED: &str = "__state__/rng_seed";

#[derive(Debug, Clone)]
pub struct Entry {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub version: u32,
    pub entries: Vec<Entry>,
}

fn bad(msg: impl Into<String>) -> CliError {
    CliError::Checkpoint(msg.into())
}

fn encode_u64(v: u64) -> Vec<f32> {
    vec![f32::from_bits(v as u32), f32::from_bits((v >> 32) as u32)]
}

fn decode_u64(data: &[f32]) -> Option<u64> {
    match data {
        [lo, hi] => Some(lo.to_bits() as u64 | (hi.to_bits() as u64) << 32),
        _ => None,
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| bad(format!("truncated at byte {}", self.pos)))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = MAGIC.to_vec();
        out.extend(self.version.to_le_bytes());
        out.extend((self.entries.len() as u32).to_le_bytes());
        for e in &self.entries {
            out.extend((e.name.len() as u32).to_le_bytes());
            out.extend(e.name.as_bytes());
            out.extend((e.dims.len() as u32).to_le_bytes());
            for &d in &e.dims {
                out.extend((d as u32).to_le_bytes());
            }
            for v in &e.data {
                out.extend(v.to_bits().to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(bad("not an OCN1 checkpoint"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(bad(format!("unsupported format version {version}")));
        }
        let count = r.u32()? as usize;
        let mut entries = Vec::new();
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| bad("tensor name is not UTF-8"))?
                .to_string();
            let rank = r.u32()? as usize;
            let dims = (0..rank).map(|_| Ok(r.u32()? as usize)).collect::<Result<Vec<_>>>()?;
            let n = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
            let n = n.ok_or_else(|| bad(format!("{name}: dims {dims:?} overflow")))?;
            let raw = r.take(n.checked_mul(4).ok_or_else(|| bad("tensor too large"))?)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_bits(u32::from_le_bytes(c.try_into().expect("4 bytes"))))
                .collect();
            entries.push(Entry { name, dims, data });
        }
        if r.pos != bytes.len() {
            return Err(bad(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Checkpoint { version, entries })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| ocnet_core::Error::io(path, e).into())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| ocnet_core::Error::io(path, e))?;
        Checkpoint::from_bytes(&bytes).map_err(|e| bad(format!("{}: {e}", path.display())))
    }

    /// Model slots only; a fresh model checkpoint.
    pub fn of_model(model: &SegModel<f32>) -> Self {
        let entries = model
            .slots()
            .into_iter()
            .map(|(name, slot)| Entry {
                name,
                dims: slot.shape(),
                data: slot.get().to_vec(),
            })
            .collect();
        Checkpoint {
            version: VERSION,
            entries,
        }
    }

    /// Model, optimizer velocities, iteration and seed of a run.
    pub fn of_trainer(t: &Trainer<f32>) -> Self {
        let mut ck = Checkpoint::of_model(&t.model);
        let slots = t.model.slots();
        for (name, v) in &t.optimizer.velocity {
            let dims = slots
                .iter()
                .find(|(n, _)| n == name)
                .map_or_else(|| vec![v.len()], |(_, s)| s.shape());
            ck.entries.push(Entry {
                name: format!("{OPT_PREFIX}{name}"),
                dims,
                data: v.clone(),
            });
        }
        ck.entries.push(Entry {
            name: ITERATION.into(),
            dims: vec![2],
            data: encode_u64(t.iteration as u64),
        });
        ck.entries.push(Entry {
            name: RNG_SEED.into(),
            dims: vec![2],
            data: encode_u64(t.config.seed),
        });
        ck
    }

    pub fn get(&self, name: &str) -> Option<&Entry> {
        self.entries.iter().find(|e| e.name == name)
    }

    fn state(&self, name: &str) -> Result<Option<u64>> {
        self.get(name)
            .map(|e| decode_u64(&e.data).ok_or_else(|| bad(format!("{name} must hold 2 values"))))
            .transpose()
    }

    /// Completed iterations; 0 for a model-only checkpoint.
    pub fn iteration(&self) -> Result<usize> {
        Ok(self.state(ITERATION)?.unwrap_or(0) as usize)
    }

    pub fn seed(&self) -> Result<Option<u64>> {
        self.state(RNG_SEED)
    }

    /// Classes predicted by the stored classifier.
    pub fn num_classes(&self) -> Result<usize> {
        self.get("classifier.weight")
            .and_then(|e| e.dims.first().copied())
            .ok_or_else(|| bad("no classifier.weight tensor"))
    }

    /// Copies every model slot out of the checkpoint. Names and shapes must
    /// match exactly, with nothing left over.
    pub fn restore_model(&self, model: &SegModel<f32>) -> Result<()> {
        let slots = model.slots();
        let stored = self
            .entries
            .iter()
            .filter(|e| !e.name.starts_with("__"))
            .count();
        if stored != slots.len() {
            return Err(bad(format!(
                "checkpoint holds {stored} model tensors, the configured model has {}",
                slots.len()
            )));
        }
        for (name, slot) in slots {
            let e = self
                .get(&name)
                .ok_or_else(|| bad(format!("missing tensor {name}; does the config match?")))?;
            if e.dims != slot.shape() {
                return Err(bad(format!(
                    "{name} is {:?} in the checkpoint but {:?} in the model",
                    e.dims,
                    slot.shape()
                )));
            }
            slot.set_data(e.data.clone())?;
        }
        Ok(())
    }

    /// Restores model, optimizer and iteration so training continues exactly
    /// where the saved run stopped.
    pub fn restore_trainer(&self, t: &mut Trainer<f32>) -> Result<()> {
        if let Some(seed) = self.seed()? {
            if seed != t.config.seed {
                return Err(bad(format!(
                    "checkpoint was trained with seed {seed}, resuming with {}",
                    t.config.seed
                )));
            }
        }
        self.restore_model(&t.model)?;
        let mut opt = Sgd::new(t.optimizer.momentum, t.optimizer.weight_decay);
        for e in &self.entries {
            if let Some(name) = e.name.strip_prefix(OPT_PREFIX) {
                opt.velocity.push((name.to_string(), e.data.clone()));
            }
        }
        t.optimizer = opt;
        t.iteration = self.iteration()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bytes_round_trip() {
        let ck = Checkpoint {
            version: VERSION,
            entries: vec![
                Entry {
                    name: "a.b".into(),
                    dims: vec![2, 1],
                    data: vec![1.5, -0.0],
                },
                Entry {
                    name: ITERATION.into(),
                    dims: vec![2],
                    data: encode_u64(u64::MAX - 5),
                },
            ],
        };
        let bytes = ck.to_bytes();
        assert_eq!(&bytes[..4], b"OCN1");
        assert_eq!(&bytes[4..12], &[1, 0, 0, 0, 2, 0, 0, 0]);
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes(), bytes);
        assert_eq!(back.iteration().unwrap(), (u64::MAX - 5) as usize);
    }

    #[test]
    fn corrupt_input_rejected() {
        let ck = Checkpoint {
            version: VERSION,
            entries: vec![Entry {
                name: "w".into(),
                dims: vec![3],
                data: vec![1.0, 2.0, 3.0],
            }],
        };
        let bytes = ck.to_bytes();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(Checkpoint::from_bytes(&extra).is_err());
        let mut wrong = bytes;
        wrong[0] = b'X';
        assert!(Checkpoint::from_bytes(&wrong).is_err());
    }

    #[test]
    fn u64_halves() {
        for v in [0, 1, 0x7fc0_0001, u64::MAX, 0xdead_beef_0000_0001] {
            assert_eq!(decode_u64(&encode_u64(v)), Some(v));
        }
    }
}
