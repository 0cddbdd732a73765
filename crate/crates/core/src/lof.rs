//! Local Outlier Factor scores and the seeded high-density drop.
//!
//! Scores follow the usual k-distance / reachability / local reachability
//! density construction with exactly `k` neighbors per point (ties broken
//! by index). Reachability distances are clamped below by
//! [`MIN_REACH_DISTANCE`] so duplicated points keep finite densities.

use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::knn::{knn_neighbors_with, KnnBackend, KnnError};

pub const MIN_REACH_DISTANCE: f64 = 1e-12;

#[derive(Debug, Error, PartialEq)]
pub enum LofError {
    #[error(transparent)]
    Knn(#[from] KnnError),
    #[error("lof.k must be at least 1")]
    ZeroK,
    #[error("lof.theta must be positive and finite, got {0}")]
    Theta(f64),
    #[error("lof.alpha must lie in [0, 1], got {0}")]
    Alpha(f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LofScope {
    /// Score each identity's images separately.
    PerIdentity,
    /// Score all images together.
    Global,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LofConfig {
    /// Neighbor count. Capped at `population - 1` for small scopes.
    pub k: usize,
    /// Images with LOF at or below this are high-density.
    pub theta: f64,
    /// Drop probability for a high-density image.
    pub alpha: f64,
    pub scope: LofScope,
}

impl Default for LofConfig {
    fn default() -> Self {
        Self {
            k: 20,
            theta: 1.0,
            alpha: 0.3,
            scope: LofScope::PerIdentity,
        }
    }
}

impl LofConfig {
    pub fn validate(&self) -> Result<(), LofError> {
        if self.k == 0 {
            return Err(LofError::ZeroK);
        }
        if !(self.theta.is_finite() && self.theta > 0.0) {
            return Err(LofError::Theta(self.theta));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(LofError::Alpha(self.alpha));
        }
        Ok(())
    }

    /// Neighbor count used for a scope of `population` images, or `None`
    /// when the scope is too small to score.
    pub fn effective_k(&self, population: usize) -> Option<usize> {
        (population >= 2).then(|| self.k.min(population - 1))
    }
}

/// LOF for every point, in input order.
pub fn lof_scores<P: AsRef<[f64]> + Sync>(points: &[P], k: usize) -> Result<Vec<f64>, LofError> {
    lof_scores_with(points, k, KnnBackend::Auto)
}

pub fn lof_scores_with<P: AsRef<[f64]> + Sync>(
    points: &[P],
    k: usize,
    backend: KnnBackend,
) -> Result<Vec<f64>, LofError> {
    let neighbors = knn_neighbors_with(points, k, backend)?;
    let k_distance: Vec<f64> = neighbors.iter().map(|nn| nn[k - 1].distance).collect();
    let lrd: Vec<f64> = neighbors
        .par_iter()
        .map(|nn| {
            let total: f64 = nn
                .iter()
                .map(|o| o.distance.max(k_distance[o.index]).max(MIN_REACH_DISTANCE))
                .sum();
            k as f64 / total
        })
        .collect();
    Ok(neighbors
        .par_iter()
        .enumerate()
        .map(|(p, nn)| nn.iter().map(|o| lrd[o.index] / lrd[p]).sum::<f64>() / k as f64)
        .collect())
}

/// Scores keyed by image id.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LofScores {
    pub entries: BTreeMap<String, f64>,
}

impl LofScores {
    /// Scores each group independently; groups too small to score are skipped.
    pub fn from_groups<P: AsRef<[f64]> + Sync>(
        groups: &[(Vec<String>, Vec<P>)],
        config: &LofConfig,
    ) -> Result<Self, LofError> {
        config.validate()?;
        let mut entries = BTreeMap::new();
        for (ids, points) in groups {
            let Some(k) = config.effective_k(points.len()) else {
                continue;
            };
            let scores = lof_scores(points, k)?;
            entries.extend(ids.iter().cloned().zip(scores));
        }
        Ok(Self { entries })
    }
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

fn fnv1a64(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

/// Stateless uniform draw in `[0, 1)` for one image under one seed.
pub fn unit_draw(seed: u64, image_id: &str) -> f64 {
    let h = splitmix64(splitmix64(seed) ^ fnv1a64(image_id.as_bytes()));
    (h >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DropEntry {
    pub lof: f64,
    pub high_density: bool,
    pub dropped: bool,
    pub draw: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct DropTrail {
    pub entries: BTreeMap<String, DropEntry>,
}

impl DropTrail {
    pub fn dropped(&self) -> impl Iterator<Item = &str> {
        self.entries
            .iter()
            .filter(|(_, e)| e.dropped)
            .map(|(id, _)| id.as_str())
    }
}

/// Marks high-density images and drops each with probability `alpha`.
/// Returns the trail and the surviving scored images.
pub fn density_drop(
    scores: &LofScores,
    config: &LofConfig,
    seed: u64,
) -> (DropTrail, BTreeSet<String>) {
    let mut trail = DropTrail::default();
    let mut survivors = BTreeSet::new();
    for (id, &lof) in &scores.entries {
        let high_density = lof <= config.theta;
        let draw = unit_draw(seed, id);
        let dropped = high_density && draw < config.alpha;
        trail.entries.insert(
            id.clone(),
            DropEntry {
                lof,
                high_density,
                dropped,
                draw,
            },
        );
        if !dropped {
            survivors.insert(id.clone());
        }
    }
    (trail, survivors)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(n: usize) -> Vec<Vec<f64>> {
        (0..n * n)
            .map(|i| vec![(i % n) as f64, (i / n) as f64])
            .collect()
    }

    #[test]
    fn identical_points_score_one() {
        let pts = vec![vec![2.0, -1.0, 0.5]; 9];
        for s in lof_scores(&pts, 4).unwrap() {
            assert_eq!(s, 1.0);
        }
    }

    #[test]
    fn grid_interior_and_outlier() {
        let mut pts = grid(10);
        let interior = lof_scores(&pts, 4).unwrap()[5 * 10 + 5];
        assert!((0.95..=1.05).contains(&interior), "{interior}");
        pts.push(vec![29.0, 4.5]);
        let s = lof_scores(&pts, 4).unwrap();
        assert!(s[100] > 1.5, "{}", s[100]);
    }

    #[test]
    fn population_must_exceed_k() {
        assert!(matches!(
            lof_scores(&[vec![0.0], vec![1.0]], 2),
            Err(LofError::Knn(KnnError::PopulationTooSmall { .. }))
        ));
    }

    #[test]
    fn config_validation() {
        let ok = LofConfig::default();
        assert!(ok.validate().is_ok());
        assert_eq!(
            LofConfig { alpha: 1.5, ..ok }.validate(),
            Err(LofError::Alpha(1.5))
        );
        assert_eq!(LofConfig { k: 0, ..ok }.validate(), Err(LofError::ZeroK));
        assert_eq!(ok.effective_k(1), None);
        assert_eq!(ok.effective_k(5), Some(4));
        assert_eq!(ok.effective_k(50), Some(20));
    }

    fn scores(n: usize, value: f64) -> LofScores {
        LofScores {
            entries: (0..n).map(|i| (format!("img_{i}"), value)).collect(),
        }
    }

    #[test]
    fn alpha_extremes() {
        let s = scores(200, 0.9);
        let none = LofConfig {
            alpha: 0.0,
            ..Default::default()
        };
        assert_eq!(density_drop(&s, &none, 1).1.len(), 200);
        let all = LofConfig {
            alpha: 1.0,
            ..Default::default()
        };
        assert!(density_drop(&s, &all, 1).1.is_empty());
    }

    #[test]
    fn low_density_never_dropped() {
        let s = scores(500, 1.2);
        let cfg = LofConfig {
            alpha: 1.0,
            ..Default::default()
        };
        let (trail, survivors) = density_drop(&s, &cfg, 11);
        assert_eq!(survivors.len(), 500);
        assert!(trail
            .entries
            .values()
            .all(|e| !e.high_density && !e.dropped));
    }

    #[test]
    fn draws_are_uniform_in_unit_interval() {
        let draws: Vec<f64> = (0..20_000)
            .map(|i| unit_draw(99, &format!("x{i}")))
            .collect();
        assert!(draws.iter().all(|d| (0.0..1.0).contains(d)));
        let mean = draws.iter().sum::<f64>() / draws.len() as f64;
        assert!((mean - 0.5).abs() < 0.01, "{mean}");
        assert_ne!(unit_draw(1, "a"), unit_draw(2, "a"));
    }
}
