//! Seeded epoch permutations over a mixed real/synthetic index.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::schema::DomainLabel;
use crate::seed::mix;

#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub indices: Vec<usize>,
    pub domains: Vec<DomainLabel>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// Every epoch is a fresh permutation of all records cut into batches; the
/// last batch may be short. Natural domain proportions are kept (balancing
/// happens in the loss).
#[derive(Debug, Clone)]
pub struct HybridBatchSampler {
    domains: Vec<DomainLabel>,
    batch_size: usize,
    seed: u64,
}

impl HybridBatchSampler {
    pub fn new(domains: Vec<DomainLabel>, batch_size: usize, seed: u64) -> Result<Self> {
        if batch_size < 2 {
            return Err(Error::Config(format!("batch size must be at least 2, got {batch_size}")));
        }
        if batch_size > domains.len() {
            log::warn!(
                "batch size {batch_size} exceeds dataset size {}; using one batch per epoch",
                domains.len()
            );
        }
        Ok(Self {
            domains,
            batch_size,
            seed,
        })
    }

    pub fn len(&self) -> usize {
        self.domains.len()
    }

    pub fn is_empty(&self) -> bool {
        self.domains.is_empty()
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.domains.len().div_ceil(self.batch_size)
    }

    pub fn epoch(&self, epoch: u64) -> Vec<Batch> {
        let mut order: Vec<usize> = (0..self.domains.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(mix(&[self.seed, epoch]));
        order.shuffle(&mut rng);
        order
            .chunks(self.batch_size)
            .map(|c| Batch {
                indices: c.to_vec(),
                domains: c.iter().map(|&i| self.domains[i]).collect(),
            })
            .collect()
    }

    /// Endless batch stream, epoch after epoch.
    pub fn stream(&self) -> impl Iterator<Item = Batch> + '_ {
        (0u64..).flat_map(move |e| self.epoch(e))
    }
}
