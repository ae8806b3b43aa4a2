//! Named parameter storage and the GRCW checkpoint format.
//!
//! Parameters persist across training steps as raw buffers; each forward pass
//! binds them onto a fresh tape through a [`Binder`], which remembers the
//! binding so gradients can be read back after `backward`.
//!
//! Checkpoint layout (little-endian throughout):
//!
//! ```text
//! magic   b"GRCW"
//! version u32
//! count   u32
//! then per parameter, in sorted name order:
//!   name_len u16, name utf-8, rank u8, dims u32 x rank, payload f64 x numel
//! ```

use crate::error::{Error, Result};
use crate::rng::SplitMix64;
use crate::tensor::{DiffTensor, Tape};
use std::cell::RefCell;
use std::collections::BTreeMap;
use std::io::{Read, Write};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"GRCW";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone)]
pub struct Param {
    pub data: Vec<f64>,
    pub shape: Vec<usize>,
    /// Non-trainable entries (running normalization statistics, momentum
    /// buffers) are skipped by the optimizer but still serialized.
    pub trainable: bool,
}

/// Ordered name -> parameter map. Iteration order is sorted by name, so every
/// pass over the store is deterministic.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    map: BTreeMap<String, Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, data: Vec<f64>, shape: &[usize], trainable: bool) {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.map.insert(
            name.to_string(),
            Param {
                data,
                shape: shape.to_vec(),
                trainable,
            },
        );
    }

    /// Kaiming-style uniform init scaled by fan-in.
    pub fn insert_uniform(&mut self, name: &str, shape: &[usize], rng: &mut SplitMix64) {
        let numel: usize = shape.iter().product();
        let fan_in = if shape.len() >= 2 {
            shape[..shape.len() - 1].iter().product::<usize>()
        } else {
            numel
        };
        let bound = (1.0 / fan_in.max(1) as f64).sqrt();
        let data = (0..numel).map(|_| rng.uniform(-bound, bound)).collect();
        self.insert(name, data, shape, true);
    }

    pub fn insert_zeros(&mut self, name: &str, shape: &[usize], trainable: bool) {
        let numel = shape.iter().product();
        self.insert(name, vec![0.0; numel], shape, trainable);
    }

    pub fn insert_full(&mut self, name: &str, shape: &[usize], v: f64, trainable: bool) {
        let numel = shape.iter().product();
        self.insert(name, vec![v; numel], shape, trainable);
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.map.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param> {
        self.map.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param)> {
        self.map.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Param)> {
        self.map.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.map.keys()
    }

    pub fn trainable_count(&self) -> usize {
        self.map.values().filter(|p| p.trainable).count()
    }

    pub fn total_elements(&self) -> usize {
        self.map.values().map(|p| p.data.len()).sum()
    }

    // ---- GRCW serialization ----

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        w.write_all(&(self.map.len() as u32).to_le_bytes())?;
        for (name, p) in &self.map {
            let bytes = name.as_bytes();
            if bytes.len() > u16::MAX as usize {
                return Err(Error::Checkpoint(format!("parameter name too long: {name}")));
            }
            if p.shape.len() > u8::MAX as usize {
                return Err(Error::Checkpoint(format!("rank too large for {name}")));
            }
            w.write_all(&(bytes.len() as u16).to_le_bytes())?;
            w.write_all(bytes)?;
            w.write_all(&[p.shape.len() as u8])?;
            for &d in &p.shape {
                w.write_all(&(d as u32).to_le_bytes())?;
            }
            for &v in &p.data {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint(format!(
                "bad magic {magic:?}, expected {CHECKPOINT_MAGIC:?}"
            )));
        }
        let mut u32buf = [0u8; 4];
        r.read_exact(&mut u32buf)?;
        let version = u32::from_le_bytes(u32buf);
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported version {version}, expected {CHECKPOINT_VERSION}"
            )));
        }
        r.read_exact(&mut u32buf)?;
        let count = u32::from_le_bytes(u32buf);
        let mut store = ParamStore::new();
        for _ in 0..count {
            let mut u16buf = [0u8; 2];
            r.read_exact(&mut u16buf)?;
            let name_len = u16::from_le_bytes(u16buf) as usize;
            let mut name_bytes = vec![0u8; name_len];
            r.read_exact(&mut name_bytes)?;
            let name = String::from_utf8(name_bytes)
                .map_err(|e| Error::Checkpoint(format!("non-utf8 parameter name: {e}")))?;
            let mut rank_buf = [0u8; 1];
            r.read_exact(&mut rank_buf)?;
            let rank = rank_buf[0] as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                r.read_exact(&mut u32buf)?;
                shape.push(u32::from_le_bytes(u32buf) as usize);
            }
            let numel: usize = shape.iter().product();
            let mut data = vec![0.0f64; numel];
            let mut f64buf = [0u8; 8];
            for v in data.iter_mut() {
                r.read_exact(&mut f64buf)?;
                *v = f64::from_le_bytes(f64buf);
            }
            // Trainability is a model-structure property, re-derived on load.
            store.insert(&name, data, &shape, !name.starts_with("__"));
        }
        Ok(store)
    }
}

/// Binds store parameters onto one tape for a single forward/backward pass.
pub struct Binder<'a> {
    tape: Tape,
    store: &'a ParamStore,
    bound: RefCell<BTreeMap<String, DiffTensor>>,
}

impl<'a> Binder<'a> {
    pub fn new(tape: &Tape, store: &'a ParamStore) -> Self {
        Binder {
            tape: tape.clone(),
            store,
            bound: RefCell::new(BTreeMap::new()),
        }
    }

    pub fn tape(&self) -> &Tape {
        &self.tape
    }

    /// Leaf tensor for a named parameter; bound once per pass.
    pub fn get(&self, name: &str) -> Result<DiffTensor> {
        if let Some(t) = self.bound.borrow().get(name) {
            return Ok(t.clone());
        }
        let p = self
            .store
            .get(name)
            .ok_or_else(|| Error::Config(format!("unknown parameter: {name}")))?;
        let t = self.tape.leaf(p.data.clone(), &p.shape)?;
        self.bound.borrow_mut().insert(name.to_string(), t.clone());
        Ok(t)
    }

    /// Gradients of all bound parameters, keyed by name.
    pub fn grads(&self) -> BTreeMap<String, Vec<f64>> {
        self.bound
            .borrow()
            .iter()
            .map(|(n, t)| (n.clone(), t.grad()))
            .collect()
    }
}
