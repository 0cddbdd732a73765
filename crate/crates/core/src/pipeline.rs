//! The full selection: consistency candidates, diversity candidates, and the
//! LOF density monitor over the diversity candidates, recorded image by
//! image in a [`SelectionManifest`].

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::json;
use crate::lof::{density_drop, LofConfig, LofError, LofScope, LofScores};
use crate::metric::{
    compute_centroids, compute_distances, compute_thresholds, intersect, select_candidates,
    Direction, DistanceTable, MetricError, ThresholdPolicy, Thresholds,
};
use crate::store::{Source, SpacePair};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Lof(#[from] LofError),
    #[error("{field} must be finite, got {value}")]
    Override { field: &'static str, value: f64 },
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("manifest: {0}")]
    Format(#[from] serde_json::Error),
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SamplingConfig {
    pub tc_policy: ThresholdPolicy,
    pub td_policy: ThresholdPolicy,
    /// Replaces every per-identity consistency threshold when set.
    pub tc_override: Option<f64>,
    /// Replaces every per-identity diversity threshold when set.
    pub td_override: Option<f64>,
    pub lof: LofConfig,
    pub seed: u64,
}

impl SamplingConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        self.lof.validate()?;
        for (field, value) in [
            ("tc_override", self.tc_override),
            ("td_override", self.td_override),
        ] {
            if let Some(v) = value {
                if !v.is_finite() {
                    return Err(PipelineError::Override { field, value: v });
                }
            }
        }
        Ok(())
    }
}

/// Everything computed for one generated image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageVerdict {
    pub image_id: String,
    pub identity_id: u32,
    pub d_c: f64,
    pub t_c: f64,
    pub d_d: f64,
    pub t_d: f64,
    pub in_consistency: bool,
    pub in_diversity: bool,
    /// Present only for images the density monitor scored.
    pub lof: Option<f64>,
    pub lof_draw: Option<f64>,
    pub high_density: bool,
    pub dropped_by_lof: bool,
    pub kept: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageSummary {
    pub identities: usize,
    pub real_images: usize,
    pub generated_images: usize,
    pub consistency_candidates: usize,
    pub diversity_candidates: usize,
    /// Images passing both threshold stages.
    pub sampled: usize,
    pub lof_scored: usize,
    pub high_density: usize,
    pub lof_dropped: usize,
    /// Diversity candidates not dropped by the density monitor.
    pub lof_survivors: usize,
    pub kept: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionManifest {
    pub config: SamplingConfig,
    /// Sorted by image id.
    pub images: Vec<ImageVerdict>,
    pub summary: StageSummary,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct IdentityCounts {
    pub generated: usize,
    pub kept: usize,
}

impl SelectionManifest {
    fn ids_where(&self, pred: impl Fn(&ImageVerdict) -> bool) -> BTreeSet<String> {
        self.images
            .iter()
            .filter(|v| pred(v))
            .map(|v| v.image_id.clone())
            .collect()
    }

    pub fn consistency_set(&self) -> BTreeSet<String> {
        self.ids_where(|v| v.in_consistency)
    }

    pub fn diversity_set(&self) -> BTreeSet<String> {
        self.ids_where(|v| v.in_diversity)
    }

    pub fn sampled_set(&self) -> BTreeSet<String> {
        self.ids_where(|v| v.in_consistency && v.in_diversity)
    }

    pub fn lof_survivors(&self) -> BTreeSet<String> {
        self.ids_where(|v| v.in_diversity && !v.dropped_by_lof)
    }

    pub fn kept_set(&self) -> BTreeSet<String> {
        self.ids_where(|v| v.kept)
    }

    pub fn per_identity(&self) -> BTreeMap<u32, IdentityCounts> {
        let mut out: BTreeMap<u32, IdentityCounts> = BTreeMap::new();
        for v in &self.images {
            let c = out.entry(v.identity_id).or_default();
            c.generated += 1;
            c.kept += usize::from(v.kept);
        }
        out
    }

    /// Kept image ids grouped by identity.
    pub fn kept_pool(&self) -> BTreeMap<u32, Vec<String>> {
        let mut out: BTreeMap<u32, Vec<String>> = BTreeMap::new();
        for v in self.images.iter().filter(|v| v.kept) {
            out.entry(v.identity_id)
                .or_default()
                .push(v.image_id.clone());
        }
        out
    }

    pub fn to_canonical_string(&self) -> Result<String, PipelineError> {
        Ok(json::to_canonical_string(self)?)
    }

    pub fn from_json_str(s: &str) -> Result<Self, PipelineError> {
        Ok(json::from_str(s)?)
    }
}

pub fn export_selection(
    manifest: &SelectionManifest,
    path: impl AsRef<Path>,
) -> Result<(), PipelineError> {
    fs::write(path, manifest.to_canonical_string()?)?;
    Ok(())
}

pub fn import_selection(path: impl AsRef<Path>) -> Result<SelectionManifest, PipelineError> {
    SelectionManifest::from_json_str(&fs::read_to_string(path)?)
}

fn thresholds_for(
    dist: &DistanceTable,
    policy: ThresholdPolicy,
    override_value: Option<f64>,
) -> Result<Thresholds, MetricError> {
    let restricted = dist.restrict_to_generated_identities();
    match override_value {
        Some(t) => Ok(restricted.generated().map(|e| (e.identity_id, t)).collect()),
        None => compute_thresholds(&restricted, policy),
    }
}

pub fn run_pipeline(
    pair: &SpacePair,
    config: &SamplingConfig,
) -> Result<SelectionManifest, PipelineError> {
    config.validate()?;
    let cons = pair.consistency();
    let div = pair.diversity();

    let dist_c = compute_distances(cons, &compute_centroids(cons))?;
    let dist_d = compute_distances(div, &compute_centroids(div))?;
    let t_c = thresholds_for(&dist_c, config.tc_policy, config.tc_override)?;
    let t_d = thresholds_for(&dist_d, config.td_policy, config.td_override)?;
    let cand_c = select_candidates(&dist_c, &t_c, Direction::Below)?;
    let cand_d = select_candidates(&dist_d, &t_d, Direction::Above)?;
    let sampled = intersect(&cand_c.members, &cand_d.members);

    // Density monitor over the diversity candidates, grouped by scope, in dataset order.
    let mut groups: BTreeMap<u32, (Vec<String>, Vec<&[f64]>)> = BTreeMap::new();
    for r in div
        .generated()
        .filter(|r| cand_d.members.contains(&r.image_id))
    {
        let key = match config.lof.scope {
            LofScope::PerIdentity => r.identity_id,
            LofScope::Global => 0,
        };
        let (ids, points) = groups.entry(key).or_default();
        ids.push(r.image_id.clone());
        points.push(r.vector.as_slice());
    }
    let groups: Vec<_> = groups.into_values().collect();
    let scores = LofScores::from_groups(&groups, &config.lof)?;
    let (trail, _) = density_drop(&scores, &config.lof, config.seed);

    let d_c: HashMap<&str, f64> = dist_c
        .generated()
        .map(|e| (e.image_id.as_str(), e.distance))
        .collect();
    let d_d: HashMap<&str, f64> = dist_d
        .generated()
        .map(|e| (e.image_id.as_str(), e.distance))
        .collect();

    let mut images: Vec<ImageVerdict> = cons
        .generated()
        .map(|r| {
            let id = r.image_id.as_str();
            let in_consistency = cand_c.members.contains(id);
            let in_diversity = cand_d.members.contains(id);
            let drop = trail.entries.get(id);
            let dropped_by_lof = drop.is_some_and(|e| e.dropped);
            ImageVerdict {
                image_id: r.image_id.clone(),
                identity_id: r.identity_id,
                d_c: d_c[id],
                t_c: t_c[&r.identity_id],
                d_d: d_d[id],
                t_d: t_d[&r.identity_id],
                in_consistency,
                in_diversity,
                lof: drop.map(|e| e.lof),
                lof_draw: drop.map(|e| e.draw),
                high_density: drop.is_some_and(|e| e.high_density),
                dropped_by_lof,
                kept: in_consistency && in_diversity && !dropped_by_lof,
            }
        })
        .collect();
    images.sort_by(|a, b| a.image_id.cmp(&b.image_id));

    let identities: BTreeSet<u32> = cons.records().iter().map(|r| r.identity_id).collect();
    let lof_dropped = trail.dropped().count();
    let summary = StageSummary {
        identities: identities.len(),
        real_images: cons.len() - images.len(),
        generated_images: images.len(),
        consistency_candidates: cand_c.members.len(),
        diversity_candidates: cand_d.members.len(),
        sampled: sampled.len(),
        lof_scored: trail.entries.len(),
        high_density: trail.entries.values().filter(|e| e.high_density).count(),
        lof_dropped,
        lof_survivors: cand_d.members.len() - lof_dropped,
        kept: images.iter().filter(|v| v.kept).count(),
    };

    Ok(SelectionManifest {
        config: config.clone(),
        images,
        summary,
    })
}

/// Real image ids of a pair grouped by identity.
pub fn real_pool(pair: &SpacePair) -> BTreeMap<u32, Vec<String>> {
    let mut out: BTreeMap<u32, Vec<String>> = BTreeMap::new();
    for r in pair
        .consistency()
        .records()
        .iter()
        .filter(|r| r.source == Source::Real)
    {
        out.entry(r.identity_id)
            .or_default()
            .push(r.image_id.clone());
    }
    out
}
