use std::io::{Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::{self, Metadata};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

use super::INIT_STD;

/// Per-layer key and value prompt tokens, each stored as `[L, pl, d_model]`.
/// `pl = 0` is the empty prompt.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptSet {
    pub key: Tensor,
    pub value: Tensor,
}

pub const KEY_NAME: &str = "prompt.key";
pub const VALUE_NAME: &str = "prompt.value";

impl PromptSet {
    pub fn new(key: Tensor, value: Tensor) -> Result<Self> {
        if key.shape().len() != 3 || key.shape() != value.shape() {
            return Err(Error::ShapeMismatch {
                op: "prompt set",
                left: key.shape().to_vec(),
                right: value.shape().to_vec(),
            });
        }
        Ok(Self { key, value })
    }

    pub fn zeros(layers: usize, pl: usize, d_model: usize) -> Self {
        Self {
            key: Tensor::zeros(&[layers, pl, d_model]),
            value: Tensor::zeros(&[layers, pl, d_model]),
        }
    }

    /// Normal(0, 0.02) initialization.
    pub fn random(layers: usize, pl: usize, d_model: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let key = Tensor::randn(&[layers, pl, d_model], INIT_STD, &mut rng);
        let value = Tensor::randn(&[layers, pl, d_model], INIT_STD, &mut rng);
        Self { key, value }
    }

    pub fn layers(&self) -> usize {
        self.key.shape()[0]
    }

    /// Prompt length `pl`.
    pub fn len(&self) -> usize {
        self.key.shape()[1]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn d_model(&self) -> usize {
        self.key.shape()[2]
    }

    pub fn numel(&self) -> usize {
        self.key.numel() + self.value.numel()
    }

    /// Both tensors as a trainable parameter store (`prompt.key`, `prompt.value`).
    pub fn to_store(&self) -> ParamStore {
        let mut s = ParamStore::new();
        s.insert(KEY_NAME, self.key.clone());
        s.insert(VALUE_NAME, self.value.clone());
        s
    }

    pub fn from_store(store: &ParamStore) -> Result<Self> {
        let mut key = store.get(KEY_NAME)?.clone();
        let mut value = store.get(VALUE_NAME)?.clone();
        key.clear_grad();
        value.clear_grad();
        Self::new(key, value)
    }

    pub fn digest(&self) -> String {
        self.to_store().digest()
    }

    /// Per-layer tensors named `prompt.key.{i}` / `prompt.value.{i}`, each `[pl, d]`.
    pub fn to_layer_store(&self) -> ParamStore {
        let (l, pl, d) = (self.layers(), self.len(), self.d_model());
        let mut s = ParamStore::new();
        for (base, t) in [(KEY_NAME, &self.key), (VALUE_NAME, &self.value)] {
            for i in 0..l {
                let slice = t.data()[i * pl * d..(i + 1) * pl * d].to_vec();
                s.insert(
                    format!("{base}.{i}"),
                    Tensor::new(vec![pl, d], slice).expect("slice shape"),
                );
            }
        }
        s
    }

    pub fn from_layer_store(store: &ParamStore) -> Result<Self> {
        let layers = store.names().filter(|n| n.starts_with("prompt.key.")).count();
        if layers == 0 {
            return Err(Error::Checkpoint("no prompt.key.* entries".into()));
        }
        let first = store.get("prompt.key.0")?.shape().to_vec();
        if first.len() != 2 {
            return Err(Error::Checkpoint("prompt tensors must be [pl, d]".into()));
        }
        let (pl, d) = (first[0], first[1]);
        let mut key = Vec::with_capacity(layers * pl * d);
        let mut value = Vec::with_capacity(layers * pl * d);
        for i in 0..layers {
            for (base, out) in [(KEY_NAME, &mut key), (VALUE_NAME, &mut value)] {
                let t = store.get(&format!("{base}.{i}"))?;
                if t.shape() != [pl, d] {
                    return Err(Error::Checkpoint(format!("{base}.{i} has shape {:?}", t.shape())));
                }
                out.extend_from_slice(t.data());
            }
        }
        Self::new(
            Tensor::new(vec![layers, pl, d], key)?,
            Tensor::new(vec![layers, pl, d], value)?,
        )
    }

    fn metadata(&self) -> Metadata {
        let mut m = Metadata::new();
        m.insert("kind".into(), "prompt".into());
        m.insert("layers".into(), self.layers().to_string());
        m.insert("prompt_len".into(), self.len().to_string());
        m.insert("d_model".into(), self.d_model().to_string());
        m
    }

    pub fn write_to<W: Write>(&self, w: W) -> Result<()> {
        checkpoint::write_to(w, &self.metadata(), &self.to_layer_store())
    }

    pub fn read_from<R: Read>(r: R) -> Result<Self> {
        let (_, store) = checkpoint::read_from(r)?;
        Self::from_layer_store(&store)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        checkpoint::save(path, &self.metadata(), &self.to_layer_store())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let (_, store) = checkpoint::load(path)?;
        Self::from_layer_store(&store)
    }
}
