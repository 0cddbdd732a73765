//! Identity centroids, centroid distances, per-identity thresholds and the
//! candidate sets they induce in each space.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::store::{EmbeddingDataset, Source, Space};

#[derive(Debug, Error, PartialEq)]
pub enum MetricError {
    #[error("no centroid for identity {0}")]
    MissingCentroid(u32),
    #[error(
        "identity {identity_id} has an empty {population} population for the {statistic} threshold"
    )]
    EmptyPopulation {
        identity_id: u32,
        statistic: Statistic,
        population: Population,
    },
    #[error("no threshold for identity {0}")]
    MissingThreshold(u32),
}

/// Mean of the real vectors of one identity.
#[derive(Clone, Debug, PartialEq)]
pub struct IdentityCentroid {
    pub identity_id: u32,
    pub space: Space,
    pub center: Vec<f64>,
    pub n_real: usize,
}

pub type Centroids = BTreeMap<u32, IdentityCentroid>;

/// Per-identity thresholds.
pub type Thresholds = BTreeMap<u32, f64>;

/// Averages real vectors per identity. Generated records never contribute.
pub fn compute_centroids(ds: &EmbeddingDataset) -> Centroids {
    let mut sums: BTreeMap<u32, (Vec<f64>, usize)> = BTreeMap::new();
    for r in ds.records().iter().filter(|r| r.source == Source::Real) {
        let (sum, n) = sums
            .entry(r.identity_id)
            .or_insert_with(|| (vec![0.0; ds.dimension()], 0));
        for (s, v) in sum.iter_mut().zip(&r.vector) {
            *s += v;
        }
        *n += 1;
    }
    sums.into_iter()
        .map(|(identity_id, (mut sum, n))| {
            let n_f = n as f64;
            sum.iter_mut().for_each(|s| *s /= n_f);
            let centroid = IdentityCentroid {
                identity_id,
                space: ds.space(),
                center: sum,
                n_real: n,
            };
            (identity_id, centroid)
        })
        .collect()
}

/// Euclidean distance. Shared by every distance computation in the pipeline.
pub fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    squared_euclidean(a, b).sqrt()
}

pub fn squared_euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            let d = x - y;
            d * d
        })
        .sum()
}

#[derive(Clone, Debug, PartialEq)]
pub struct DistanceEntry {
    pub image_id: String,
    pub identity_id: u32,
    pub source: Source,
    pub distance: f64,
}

/// Distance of every record to its identity centroid, in dataset order.
///
/// Real records are included so thresholds may be drawn from any population.
#[derive(Clone, Debug, PartialEq)]
pub struct DistanceTable {
    pub space: Space,
    pub entries: Vec<DistanceEntry>,
}

impl DistanceTable {
    pub fn generated(&self) -> impl Iterator<Item = &DistanceEntry> {
        self.entries
            .iter()
            .filter(|e| e.source == Source::Generated)
    }

    pub fn get(&self, image_id: &str) -> Option<&DistanceEntry> {
        self.entries.iter().find(|e| e.image_id == image_id)
    }

    /// Drops identities that have no generated images.
    pub fn restrict_to_generated_identities(&self) -> DistanceTable {
        let keep: BTreeSet<u32> = self.generated().map(|e| e.identity_id).collect();
        DistanceTable {
            space: self.space,
            entries: self
                .entries
                .iter()
                .filter(|e| keep.contains(&e.identity_id))
                .cloned()
                .collect(),
        }
    }
}

pub fn compute_distances(
    ds: &EmbeddingDataset,
    centroids: &Centroids,
) -> Result<DistanceTable, MetricError> {
    let entries = ds
        .records()
        .par_iter()
        .map(|r| {
            let c = centroids
                .get(&r.identity_id)
                .ok_or(MetricError::MissingCentroid(r.identity_id))?;
            Ok(DistanceEntry {
                image_id: r.image_id.clone(),
                identity_id: r.identity_id,
                source: r.source,
                distance: euclidean(&r.vector, &c.center),
            })
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(DistanceTable {
        space: ds.space(),
        entries,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Statistic {
    Median,
    Mean,
}

impl fmt::Display for Statistic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Statistic::Median => "median",
            Statistic::Mean => "mean",
        })
    }
}

/// Which images of an identity feed its threshold.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Population {
    RealOnly,
    GeneratedOnly,
    All,
}

impl Population {
    fn admits(self, source: Source) -> bool {
        match self {
            Population::RealOnly => source == Source::Real,
            Population::GeneratedOnly => source == Source::Generated,
            Population::All => true,
        }
    }
}

impl fmt::Display for Population {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Population::RealOnly => "real_only",
            Population::GeneratedOnly => "generated_only",
            Population::All => "all",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ThresholdPolicy {
    pub statistic: Statistic,
    pub population: Population,
}

impl Default for ThresholdPolicy {
    fn default() -> Self {
        Self {
            statistic: Statistic::Median,
            population: Population::All,
        }
    }
}

/// Median with the even-count convention of averaging the two middle values.
pub fn median(values: &mut [f64]) -> f64 {
    assert!(!values.is_empty(), "median of empty slice");
    values.sort_unstable_by(f64::total_cmp);
    let mid = values.len() / 2;
    if values.len() % 2 == 1 {
        values[mid]
    } else {
        (values[mid - 1] + values[mid]) / 2.0
    }
}

pub fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// One threshold per identity present in the table.
pub fn compute_thresholds(
    dist: &DistanceTable,
    policy: ThresholdPolicy,
) -> Result<Thresholds, MetricError> {
    let mut groups: BTreeMap<u32, Vec<f64>> = BTreeMap::new();
    for e in &dist.entries {
        let group = groups.entry(e.identity_id).or_default();
        if policy.population.admits(e.source) {
            group.push(e.distance);
        }
    }
    groups
        .into_iter()
        .map(|(identity_id, mut values)| {
            if values.is_empty() {
                return Err(MetricError::EmptyPopulation {
                    identity_id,
                    statistic: policy.statistic,
                    population: policy.population,
                });
            }
            let t = match policy.statistic {
                Statistic::Median => median(&mut values),
                Statistic::Mean => mean(&values),
            };
            Ok((identity_id, t))
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    /// Keep images strictly closer than the threshold.
    Below,
    /// Keep images strictly farther than the threshold.
    Above,
}

impl Direction {
    pub fn admits(self, distance: f64, threshold: f64) -> bool {
        match self {
            Direction::Below => distance < threshold,
            Direction::Above => distance > threshold,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CandidateSet {
    pub space: Space,
    pub direction: Direction,
    pub thresholds: Thresholds,
    pub members: BTreeSet<String>,
}

/// Generated images passing the strict threshold test. Ties are excluded.
pub fn select_candidates(
    dist: &DistanceTable,
    thresholds: &Thresholds,
    direction: Direction,
) -> Result<CandidateSet, MetricError> {
    let mut members = BTreeSet::new();
    for e in dist.generated() {
        let t = *thresholds
            .get(&e.identity_id)
            .ok_or(MetricError::MissingThreshold(e.identity_id))?;
        if direction.admits(e.distance, t) {
            members.insert(e.image_id.clone());
        }
    }
    Ok(CandidateSet {
        space: dist.space,
        direction,
        thresholds: thresholds.clone(),
        members,
    })
}

pub fn intersect(a: &BTreeSet<String>, b: &BTreeSet<String>) -> BTreeSet<String> {
    a.intersection(b).cloned().collect()
}
