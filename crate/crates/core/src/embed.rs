//! Text embedding sources for generated prompts.
//!
//! Real mode looks prompts up verbatim in a text store whose ids are the
//! prompt strings. Synthetic mode composes an embedding from per-value
//! directions of the prompt's assignment.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::path::Path;

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::prompts::Prompt;
use crate::store::{EmbeddingStore, Modality};

pub trait TextEmbedder: Sync {
    fn dim(&self) -> usize;

    /// One row per prompt, in order.
    fn embed(&self, prompts: &[Prompt]) -> Result<DMatrix<f64>>;
}

/// Looks prompts up by exact string in a text store keyed by id.
#[derive(Debug, Clone)]
pub struct StoreEmbedder {
    store: EmbeddingStore,
    index: HashMap<String, usize>,
}

impl StoreEmbedder {
    pub fn new(store: EmbeddingStore) -> Result<Self> {
        if store.modality() == Modality::Image {
            return Err(Error::Config("prompt lookup needs a text store".into()));
        }
        let ids = store
            .meta()
            .ids
            .as_ref()
            .ok_or_else(|| Error::Config("text store has no ids to key prompts by".into()))?;
        let mut index = HashMap::with_capacity(ids.len());
        for (i, id) in ids.iter().enumerate() {
            if index.insert(id.clone(), i).is_some() {
                return Err(Error::InvalidStore(format!("duplicate prompt id {id:?}")));
            }
        }
        Ok(StoreEmbedder { store, index })
    }

    pub fn store(&self) -> &EmbeddingStore {
        &self.store
    }
}

impl TextEmbedder for StoreEmbedder {
    fn dim(&self) -> usize {
        self.store.dim()
    }

    fn embed(&self, prompts: &[Prompt]) -> Result<DMatrix<f64>> {
        let missing: BTreeSet<&str> = prompts
            .iter()
            .filter(|p| !self.index.contains_key(&p.text))
            .map(|p| p.text.as_str())
            .collect();
        if !missing.is_empty() {
            return Err(Error::MissingPrompts(
                missing.into_iter().map(str::to_string).collect(),
            ));
        }
        let m = self.store.matrix();
        Ok(DMatrix::from_fn(prompts.len(), self.dim(), |r, c| {
            m[(self.index[&prompts[r].text], c)]
        }))
    }
}

/// Sum of per-(family, value) directions plus a constant offset, with
/// optional Gaussian noise seeded by the prompt text. Unassigned families
/// contribute nothing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdditiveEmbedder {
    pub dim: usize,
    pub directions: BTreeMap<String, BTreeMap<String, Vec<f64>>>,
    pub offset: Vec<f64>,
    pub noise: f64,
    pub seed: u64,
}

impl AdditiveEmbedder {
    pub fn validate(&self) -> Result<()> {
        if self.offset.len() != self.dim {
            return Err(Error::Shape(format!(
                "offset has {} entries, dim is {}",
                self.offset.len(),
                self.dim
            )));
        }
        for (fam, values) in &self.directions {
            for (val, v) in values {
                if v.len() != self.dim {
                    return Err(Error::Shape(format!(
                        "direction {fam}={val} has {} entries, dim is {}",
                        v.len(),
                        self.dim
                    )));
                }
            }
        }
        if !(self.noise >= 0.0) {
            return Err(Error::Config(format!(
                "noise must be >= 0, got {}",
                self.noise
            )));
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let e: AdditiveEmbedder =
            serde_json::from_str(&text).map_err(|e| Error::json(path.display().to_string(), e))?;
        e.validate()?;
        Ok(e)
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::json("text model", e))
    }

    pub fn embed_one(&self, prompt: &Prompt) -> Result<Vec<f64>> {
        let mut v = self.offset.clone();
        for (fam, val) in &prompt.assignment {
            let dir = self
                .directions
                .get(fam)
                .and_then(|vals| vals.get(val))
                .ok_or_else(|| Error::Schema(format!("no direction for {fam}={val}")))?;
            for (a, b) in v.iter_mut().zip(dir) {
                *a += b;
            }
        }
        if self.noise > 0.0 {
            let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ fnv1a(prompt.text.as_bytes()));
            for a in v.iter_mut() {
                let z: f64 = StandardNormal.sample(&mut rng);
                *a += self.noise * z;
            }
        }
        Ok(v)
    }
}

impl TextEmbedder for AdditiveEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, prompts: &[Prompt]) -> Result<DMatrix<f64>> {
        let mut out = DMatrix::zeros(prompts.len(), self.dim);
        for (r, p) in prompts.iter().enumerate() {
            for (c, v) in self.embed_one(p)?.into_iter().enumerate() {
                out[(r, c)] = v;
            }
        }
        Ok(out)
    }
}

/// 64-bit FNV-1a, stable across platforms and releases.
fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}
