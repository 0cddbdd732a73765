//! Identity-balanced mini-batches: each batch holds `identities` people,
//! each with `reals` real slots followed by `fakes` generated slots.

use std::collections::BTreeMap;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::store::Source;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum BatchError {
    #[error("identities per batch must be at least 1")]
    ZeroIdentities,
    #[error("each identity needs at least one slot (reals + fakes >= 1)")]
    EmptySlots,
    #[error("need at least {needed} identities with real images, found {found}")]
    TooFewIdentities { needed: usize, found: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchSpec {
    /// Distinct identities per batch.
    pub identities: usize,
    /// Real slots per identity.
    pub reals: usize,
    /// Generated slots per identity.
    pub fakes: usize,
    pub seed: u64,
}

impl Default for BatchSpec {
    fn default() -> Self {
        Self {
            identities: 6,
            reals: 9,
            fakes: 3,
            seed: 0,
        }
    }
}

impl BatchSpec {
    pub fn per_identity(&self) -> usize {
        self.reals + self.fakes
    }

    pub fn batch_size(&self) -> usize {
        self.identities * self.per_identity()
    }

    pub fn validate(&self) -> Result<(), BatchError> {
        if self.identities == 0 {
            return Err(BatchError::ZeroIdentities);
        }
        if self.per_identity() == 0 {
            return Err(BatchError::EmptySlots);
        }
        Ok(())
    }
}

/// The slot kind an entry fills. A fake slot holds a real image only when
/// the identity has no kept generated images.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Slot {
    Real,
    Fake,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchEntry {
    pub image_id: String,
    pub identity_id: u32,
    pub source: Source,
    pub slot: Slot,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Batch {
    pub entries: Vec<BatchEntry>,
}

impl Batch {
    /// Identities in order of first appearance.
    pub fn identities(&self) -> Vec<u32> {
        let mut out: Vec<u32> = Vec::new();
        for e in &self.entries {
            if out.last() != Some(&e.identity_id) && !out.contains(&e.identity_id) {
                out.push(e.identity_id);
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchPlan {
    pub epoch: usize,
    pub spec: BatchSpec,
    /// Identity order after the epoch shuffle, including dropped remainder.
    pub identity_order: Vec<u32>,
    pub batches: Vec<Batch>,
}

/// Draws `count` items: without replacement when the pool suffices,
/// with replacement otherwise.
fn draw<'a>(pool: &'a [String], count: usize, rng: &mut ChaCha8Rng) -> Vec<&'a String> {
    if pool.len() >= count {
        pool.choose_multiple(rng, count).collect()
    } else {
        (0..count).map(|_| pool.choose(rng).unwrap()).collect()
    }
}

fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

pub fn plan_epoch(
    real_pool: &BTreeMap<u32, Vec<String>>,
    fake_pool: &BTreeMap<u32, Vec<String>>,
    spec: &BatchSpec,
) -> Result<BatchPlan, BatchError> {
    plan_epoch_n(real_pool, fake_pool, spec, 0)
}

/// Plans epoch number `epoch`; each epoch reshuffles identities.
pub fn plan_epoch_n(
    real_pool: &BTreeMap<u32, Vec<String>>,
    fake_pool: &BTreeMap<u32, Vec<String>>,
    spec: &BatchSpec,
    epoch: usize,
) -> Result<BatchPlan, BatchError> {
    spec.validate()?;
    let mut identities: Vec<u32> = real_pool
        .iter()
        .filter(|(_, ids)| !ids.is_empty())
        .map(|(&id, _)| id)
        .collect();
    if identities.len() < spec.identities {
        return Err(BatchError::TooFewIdentities {
            needed: spec.identities,
            found: identities.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(epoch_seed(spec.seed, epoch));
    identities.shuffle(&mut rng);

    let no_fakes: Vec<String> = Vec::new();
    let batches = identities
        .chunks_exact(spec.identities)
        .map(|group| {
            let mut entries = Vec::with_capacity(spec.batch_size());
            for &identity_id in group {
                let reals = &real_pool[&identity_id];
                let fakes = fake_pool.get(&identity_id).unwrap_or(&no_fakes);
                let entry = |id: &String, source, slot| BatchEntry {
                    image_id: id.clone(),
                    identity_id,
                    source,
                    slot,
                };
                if fakes.is_empty() {
                    let picks = draw(reals, spec.per_identity(), &mut rng);
                    for (i, id) in picks.into_iter().enumerate() {
                        let slot = if i < spec.reals {
                            Slot::Real
                        } else {
                            Slot::Fake
                        };
                        entries.push(entry(id, Source::Real, slot));
                    }
                } else {
                    for id in draw(reals, spec.reals, &mut rng) {
                        entries.push(entry(id, Source::Real, Slot::Real));
                    }
                    for id in draw(fakes, spec.fakes, &mut rng) {
                        entries.push(entry(id, Source::Generated, Slot::Fake));
                    }
                }
            }
            Batch { entries }
        })
        .collect();

    Ok(BatchPlan {
        epoch,
        spec: *spec,
        identity_order: identities,
        batches,
    })
}

pub fn plan_epochs(
    real_pool: &BTreeMap<u32, Vec<String>>,
    fake_pool: &BTreeMap<u32, Vec<String>>,
    spec: &BatchSpec,
    epochs: usize,
) -> Result<Vec<BatchPlan>, BatchError> {
    (0..epochs)
        .map(|e| plan_epoch_n(real_pool, fake_pool, spec, e))
        .collect()
}
