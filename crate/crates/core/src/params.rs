// SPDX-License-Identifier: Apache-2.0

//! Named parameters, their gradients and Adam state, plus the `SNDW`
//! checkpoint format.
//!
//! Checkpoint layout (all integers little-endian):
//!
//! ```text
//! "SNDW" | version: u16 | record*
//! record = name_len: u32 | name: utf-8 | rank: u32 | dims: u32 * rank | values: f64 * prod(dims)
//! ```

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Result, SndError};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SNDW";
pub const CHECKPOINT_VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq)]
struct Slot {
    value: Tensor,
    grad: Tensor,
    m: Tensor,
    v: Tensor,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParameterStore {
    slots: BTreeMap<String, Slot>,
    step: u64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled (AdamW) weight decay.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds or replaces a parameter; gradient and moments start at zero.
    pub fn insert(&mut self, name: &str, value: Tensor) {
        let zeros = Tensor::zeros(value.shape());
        self.slots.insert(
            name.to_string(),
            Slot {
                grad: zeros.clone(),
                m: zeros.clone(),
                v: zeros,
                value,
            },
        );
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.slots.get(name).map(|s| &s.value)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.slots.get_mut(name).map(|s| &mut s.value)
    }

    pub fn grad(&self, name: &str) -> Option<&Tensor> {
        self.slots.get(name).map(|s| &s.grad)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.slots.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.slots.values().map(|s| s.value.len()).sum()
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn zero_grads(&mut self) {
        for s in self.slots.values_mut() {
            s.grad.data_mut().fill(0.0);
        }
    }

    pub(crate) fn accumulate_grad(&mut self, name: &str, g: &Tensor) -> Result<()> {
        let slot = self
            .slots
            .get_mut(name)
            .ok_or_else(|| SndError::Contract(format!("gradient for unknown parameter {name}")))?;
        slot.grad.add_assign(g)
    }

    /// Copies every parameter value from `other` that exists here with the
    /// same shape. Returns how many were copied.
    pub fn load_values_from(&mut self, other: &ParameterStore) -> usize {
        let mut copied = 0;
        for (name, slot) in &mut self.slots {
            if let Some(src) = other.get(name) {
                if src.shape() == slot.value.shape() {
                    slot.value = src.clone();
                    copied += 1;
                }
            }
        }
        copied
    }

    /// Bias-corrected adaptive-moment update of every parameter.
    pub fn adam_step(&mut self, cfg: &AdamConfig) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - cfg.beta1.powi(t);
        let c2 = 1.0 - cfg.beta2.powi(t);
        for s in self.slots.values_mut() {
            let (value, grad, m, v) = (
                s.value.data_mut(),
                s.grad.data(),
                s.m.data_mut(),
                s.v.data_mut(),
            );
            for i in 0..value.len() {
                let g = grad[i];
                m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
                v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
                let mhat = m[i] / c1;
                let vhat = v[i] / c2;
                value[i] -= cfg.lr * (mhat / (vhat.sqrt() + cfg.eps) + cfg.weight_decay * value[i]);
            }
        }
    }

    pub fn write_checkpoint<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        for (name, slot) in &self.slots {
            let shape = slot.value.shape();
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&(shape.len() as u32).to_le_bytes())?;
            for &dim in shape {
                w.write_all(&(dim as u32).to_le_bytes())?;
            }
            for v in slot.value.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    /// Parameters only; gradients and optimizer state start fresh.
    pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Self> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        let mut cur = Cursor { bytes: &bytes, pos: 0 };
        if cur.take(4)? != CHECKPOINT_MAGIC {
            return Err(SndError::Checkpoint("bad magic".into()));
        }
        let version = u16::from_le_bytes(cur.take(2)?.try_into().expect("2 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(SndError::Checkpoint(format!("unsupported version {version}")));
        }
        let mut store = ParameterStore::new();
        while cur.pos < bytes.len() {
            let name_len = cur.u32()? as usize;
            let name = std::str::from_utf8(cur.take(name_len)?)
                .map_err(|_| SndError::Checkpoint("parameter name is not utf-8".into()))?
                .to_string();
            let rank = cur.u32()? as usize;
            let dims = (0..rank)
                .map(|_| cur.u32().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let count = dims
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| SndError::Checkpoint("tensor size overflows".into()))?;
            let raw = cur.take(count.checked_mul(8).ok_or_else(|| {
                SndError::Checkpoint("tensor size overflows".into())
            })?)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            store.insert(&name, Tensor::new(dims, data)?);
        }
        Ok(store)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path)?;
        let mut w = std::io::BufWriter::new(file);
        self.write_checkpoint(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_checkpoint(std::fs::File::open(path)?)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| SndError::Checkpoint("truncated checkpoint".into()))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngState;
    use proptest::prelude::*;

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut store = ParameterStore::new();
        store.insert("w", Tensor::vector(vec![0.3, -1.2]));
        store.adam_step(&AdamConfig::default());
        assert_eq!(store.get("w").unwrap().data(), &[0.3, -1.2]);
        assert_eq!(store.step(), 1);
    }

    #[test]
    fn first_step_is_lr_times_sign() {
        let mut store = ParameterStore::new();
        store.insert("w", Tensor::vector(vec![1.0, 1.0]));
        store
            .accumulate_grad("w", &Tensor::vector(vec![0.5, -2.0]))
            .unwrap();
        let cfg = AdamConfig {
            lr: 0.01,
            ..AdamConfig::default()
        };
        store.adam_step(&cfg);
        let w = store.get("w").unwrap().data();
        let expect0 = 1.0 - 0.01 * 0.5 / (0.5 + 1e-8);
        let expect1 = 1.0 + 0.01 * 2.0 / (2.0 + 1e-8);
        assert!((w[0] - expect0).abs() < 1e-15);
        assert!((w[1] - expect1).abs() < 1e-15);
    }

    #[test]
    fn three_steps_match_unrolled_recurrence() {
        // Minimize (w - 3)^2 from w = 0 with hand-unrolled Adam.
        let cfg = AdamConfig {
            lr: 0.1,
            ..AdamConfig::default()
        };
        let mut store = ParameterStore::new();
        store.insert("w", Tensor::scalar(0.0));

        let (mut w, mut m, mut v) = (0.0f64, 0.0f64, 0.0f64);
        for t in 1..=3 {
            let g = 2.0 * (w - 3.0);
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let mhat = m / (1.0 - 0.9f64.powi(t));
            let vhat = v / (1.0 - 0.999f64.powi(t));
            w -= 0.1 * mhat / (vhat.sqrt() + 1e-8);

            let cur = store.get("w").unwrap().data()[0];
            store.zero_grads();
            store
                .accumulate_grad("w", &Tensor::scalar(2.0 * (cur - 3.0)))
                .unwrap();
            store.adam_step(&cfg);
        }
        assert!((store.get("w").unwrap().data()[0] - w).abs() < 1e-12);
        assert_eq!(store.step(), 3);
    }

    #[test]
    fn weight_decay_shrinks_without_gradient() {
        let mut store = ParameterStore::new();
        store.insert("w", Tensor::scalar(2.0));
        store.adam_step(&AdamConfig {
            lr: 0.1,
            weight_decay: 0.5,
            ..AdamConfig::default()
        });
        assert!((store.get("w").unwrap().data()[0] - 1.9).abs() < 1e-15);
    }

    #[test]
    fn checkpoint_rejects_bad_magic_and_truncation() {
        let mut store = ParameterStore::new();
        store.insert("a", Tensor::vector(vec![1.0, 2.0]));
        let mut bytes = Vec::new();
        store.write_checkpoint(&mut bytes).unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(ParameterStore::read_checkpoint(&bad[..]).is_err());
        assert!(ParameterStore::read_checkpoint(&bytes[..bytes.len() - 3]).is_err());
    }

    #[test]
    fn checkpoint_header_layout() {
        let mut store = ParameterStore::new();
        store.insert("w", Tensor::matrix(1, 2, vec![1.0, -0.0]).unwrap());
        let mut bytes = Vec::new();
        store.write_checkpoint(&mut bytes).unwrap();
        assert_eq!(&bytes[..4], b"SNDW");
        assert_eq!(&bytes[4..6], &[1, 0]);
        assert_eq!(&bytes[6..10], &[1, 0, 0, 0]);
        assert_eq!(bytes[10], b'w');
        assert_eq!(&bytes[11..15], &[2, 0, 0, 0]);
        assert_eq!(bytes.len(), 6 + 4 + 1 + 4 + 8 + 16);
    }

    proptest! {
        #[test]
        fn checkpoint_round_trip_is_bit_exact(
            seed in any::<u64>(),
            shapes in proptest::collection::vec(proptest::collection::vec(1usize..5, 0..3), 1..5),
        ) {
            let mut rng = RngState::new(seed);
            let mut store = ParameterStore::new();
            for (i, shape) in shapes.iter().enumerate() {
                store.insert(&format!("p{i}.w"), Tensor::randn(shape, 1.0, &mut rng));
            }
            let mut bytes = Vec::new();
            store.write_checkpoint(&mut bytes).unwrap();
            let back = ParameterStore::read_checkpoint(&bytes[..]).unwrap();
            let mut again = Vec::new();
            back.write_checkpoint(&mut again).unwrap();
            prop_assert_eq!(bytes, again);
            for name in store.names() {
                let a = store.get(name).unwrap();
                let b = back.get(name).unwrap();
                prop_assert_eq!(a.shape(), b.shape());
                for (x, y) in a.data().iter().zip(b.data()) {
                    prop_assert_eq!(x.to_bits(), y.to_bits());
                }
            }
        }
    }
}
