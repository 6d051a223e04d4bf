use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use super::graph::BufferUpdate;
use super::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    Trainable,
    /// Non-trainable state such as batch-norm running statistics.
    Buffer,
}

#[derive(Clone, Debug)]
pub struct Entry<T> {
    pub tensor: Tensor<T>,
    pub kind: ParamKind,
}

/// Named tensors of one network, ordered by name.
#[derive(Clone, Debug)]
pub struct ParamStore<T> {
    id: String,
    entries: BTreeMap<String, Entry<T>>,
}

/// A store as seen by one forward pass.
pub struct Bind<'a, T> {
    pub store: &'a ParamStore<T>,
    pub trainable: bool,
}

impl<T> Bind<'_, T> {
    pub fn key(&self, name: &str) -> String {
        format!("{}/{}", self.store.id, name)
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new(id: impl Into<String>) -> Self {
        ParamStore {
            id: id.into(),
            entries: BTreeMap::new(),
        }
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn bind(&self, trainable: bool) -> Bind<'_, T> {
        Bind { store: self, trainable }
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<T>, kind: ParamKind) {
        self.entries.insert(name.into(), Entry { tensor, kind });
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.entries.get(name).map(|e| &e.tensor)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.entries.get_mut(name).map(|e| &mut e.tensor)
    }

    pub fn kind(&self, name: &str) -> Option<ParamKind> {
        self.entries.get(name).map(|e| e.kind)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Entry<T>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn trainable_names(&self) -> Vec<String> {
        self.entries
            .iter()
            .filter(|(_, e)| e.kind == ParamKind::Trainable)
            .map(|(k, _)| k.clone())
            .collect()
    }

    /// Total number of trainable scalars.
    pub fn num_trainable(&self) -> usize {
        self.entries
            .values()
            .filter(|e| e.kind == ParamKind::Trainable)
            .map(|e| e.tensor.numel())
            .sum()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn apply_updates(&mut self, updates: Vec<BufferUpdate<T>>) {
        for u in updates {
            match self.entries.get_mut(&u.name) {
                Some(e) => e.tensor = u.value,
                None => panic!("update for unknown buffer {}", u.name),
            }
        }
    }

    /// SHA-256 over names, kinds, shapes and the exact bit patterns of every value.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for (name, e) in &self.entries {
            h.update(name.as_bytes());
            h.update([e.kind as u8]);
            for d in e.tensor.shape() {
                h.update((d as u64).to_le_bytes());
            }
            for v in e.tensor.data() {
                h.update(v.as_f64().to_bits().to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            id: self.id.clone(),
            entries: self
                .entries
                .iter()
                .map(|(k, e)| {
                    (
                        k.clone(),
                        Entry {
                            tensor: e.tensor.cast(),
                            kind: e.kind,
                        },
                    )
                })
                .collect(),
        }
    }
}

/// Stable 64-bit FNV-1a, used to derive per-name seeds.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h = Fnv::new();
    h.bytes(bytes);
    h.finish()
}

pub(crate) struct Fnv(u64);

impl Fnv {
    pub(crate) fn new() -> Self {
        Fnv(0xcbf29ce484222325)
    }

    pub(crate) fn byte(&mut self, b: u8) {
        self.0 ^= b as u64;
        self.0 = self.0.wrapping_mul(0x100000001b3);
    }

    pub(crate) fn bytes(&mut self, bytes: &[u8]) {
        bytes.iter().for_each(|&b| self.byte(b));
    }

    pub(crate) fn finish(&self) -> u64 {
        self.0
    }
}

/// Gaussian tensor whose values depend only on `(seed, name)`.
pub fn seeded_normal<T: Scalar>(seed: u64, name: &str, shape: [usize; 4], std: f64) -> Tensor<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ fnv1a(name.as_bytes()));
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            T::of(z * std)
        })
        .collect();
    Tensor::from_vec(shape, data)
}
