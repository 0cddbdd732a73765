//! Synthetic scenes with planted generated images, and a deliberately naive
//! reference selection to check the pipeline against.
//!
//! The reference shares only the input data and [`unit_draw`] with the
//! pipeline; centroids, distances, medians, neighbor search and LOF are all
//! recomputed here from scratch.

use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::lof::{unit_draw, LofConfig, LofScope};
use crate::metric::{Population, Statistic, ThresholdPolicy};
use crate::pipeline::{run_pipeline, PipelineError, SamplingConfig};
use crate::store::{
    align_spaces, EmbeddingDataset, EmbeddingRecord, Source, Space, SpacePair, StoreError,
};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid scene: {0}")]
    Spec(String),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlantFractions {
    pub good: f64,
    pub id_violating: f64,
    pub duplicate: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub num_identities: usize,
    pub reals_per_id: usize,
    pub fakes_per_id: usize,
    pub dim_c: usize,
    pub dim_d: usize,
    pub cluster_spread: f64,
    /// Plant displacement as a multiple of `cluster_spread`.
    pub separation: f64,
    pub fractions: PlantFractions,
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            num_identities: 20,
            reals_per_id: 20,
            fakes_per_id: 20,
            dim_c: 16,
            dim_d: 16,
            cluster_spread: 1.0,
            separation: 10.0,
            fractions: PlantFractions {
                good: 0.5,
                id_violating: 0.25,
                duplicate: 0.25,
            },
            seed: 0,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<(), SynthError> {
        let fail = |m: &str| Err(SynthError::Spec(m.to_string()));
        if self.num_identities == 0 || self.reals_per_id == 0 {
            return fail("num_identities and reals_per_id must be positive");
        }
        if self.dim_c == 0 || self.dim_d == 0 {
            return fail("dimensions must be positive");
        }
        if !(self.cluster_spread > 0.0 && self.cluster_spread.is_finite()) {
            return fail("cluster_spread must be positive");
        }
        if !(self.separation >= 0.0 && self.separation.is_finite()) {
            return fail("separation must be non-negative");
        }
        let f = self.fractions;
        let all = [f.good, f.id_violating, f.duplicate];
        if all.iter().any(|x| !(0.0..=1.0).contains(x)) || all.iter().sum::<f64>() > 1.0 + 1e-12 {
            return fail("plant fractions must lie in [0, 1] and sum to at most 1");
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlantLabel {
    /// Near the identity in consistency space, displaced in diversity space.
    Good,
    /// Displaced in consistency space.
    IdViolating,
    /// A near copy of one real image in both spaces.
    Duplicate,
    /// Drawn like a real image.
    Ordinary,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticScene {
    pub spec: SceneSpec,
    pub pair: SpacePair,
    pub plants: BTreeMap<String, PlantLabel>,
}

fn gaussian(rng: &mut ChaCha8Rng, dim: usize, sd: f64) -> Vec<f64> {
    (0..dim)
        .map(|_| sd * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng))
        .collect()
}

fn unit_vector(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    loop {
        let v = gaussian(rng, dim, 1.0);
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-9 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

fn add(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

fn scale(a: &[f64], s: f64) -> Vec<f64> {
    a.iter().map(|x| x * s).collect()
}

pub fn gen_synthetic(spec: &SceneSpec) -> Result<SyntheticScene, SynthError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let sd = spec.cluster_spread;
    let shift = spec.separation * sd;
    let center_sd = 3.0 * shift.max(sd);
    let tight = 0.25 * sd;
    let jitter = 1e-3 * sd;

    let f = spec.fractions;
    let fakes = spec.fakes_per_id;
    let count =
        |fraction: f64, room: usize| ((fraction * fakes as f64 + 1e-9).floor() as usize).min(room);
    let n_good = count(f.good, fakes);
    let n_viol = count(f.id_violating, fakes - n_good);
    let n_dup = count(f.duplicate, fakes - n_good - n_viol);

    let mut cons = Vec::new();
    let mut div = Vec::new();
    let mut plants = BTreeMap::new();
    for identity in 0..spec.num_identities {
        let identity_id = identity as u32;
        let center_c = gaussian(&mut rng, spec.dim_c, center_sd);
        let center_d = gaussian(&mut rng, spec.dim_d, center_sd);
        let mut reals = Vec::with_capacity(spec.reals_per_id);
        for j in 0..spec.reals_per_id {
            let vc = add(&center_c, &gaussian(&mut rng, spec.dim_c, sd));
            let vd = add(&center_d, &gaussian(&mut rng, spec.dim_d, sd));
            let record = |vector| EmbeddingRecord {
                image_id: format!("id{identity:04}_r{j:03}"),
                identity_id,
                camera_id: (j % 6) as u16,
                source: Source::Real,
                vector,
            };
            cons.push(record(vc.clone()));
            div.push(record(vd.clone()));
            reals.push((vc, vd));
        }
        for j in 0..spec.fakes_per_id {
            let label = if j < n_good {
                PlantLabel::Good
            } else if j < n_good + n_viol {
                PlantLabel::IdViolating
            } else if j < n_good + n_viol + n_dup {
                PlantLabel::Duplicate
            } else {
                PlantLabel::Ordinary
            };
            let displaced = |rng: &mut ChaCha8Rng, center: &[f64]| {
                let dir = unit_vector(rng, center.len());
                add(
                    &add(center, &scale(&dir, shift)),
                    &gaussian(rng, center.len(), sd),
                )
            };
            let (vc, vd) = match label {
                PlantLabel::Good => (
                    add(&center_c, &gaussian(&mut rng, spec.dim_c, tight)),
                    displaced(&mut rng, &center_d),
                ),
                PlantLabel::IdViolating => (
                    displaced(&mut rng, &center_c),
                    displaced(&mut rng, &center_d),
                ),
                PlantLabel::Duplicate => {
                    let (rc, rd) = &reals[rng.random_range(0..reals.len())];
                    (
                        add(rc, &gaussian(&mut rng, spec.dim_c, jitter)),
                        add(rd, &gaussian(&mut rng, spec.dim_d, jitter)),
                    )
                }
                PlantLabel::Ordinary => (
                    add(&center_c, &gaussian(&mut rng, spec.dim_c, sd)),
                    add(&center_d, &gaussian(&mut rng, spec.dim_d, sd)),
                ),
            };
            let image_id = format!("id{identity:04}_g{j:03}");
            let camera_id = rng.random_range(0..6u16);
            let record = |vector| EmbeddingRecord {
                image_id: image_id.clone(),
                identity_id,
                camera_id,
                source: Source::Generated,
                vector,
            };
            cons.push(record(vc));
            div.push(record(vd));
            plants.insert(image_id, label);
        }
    }

    // Vectors pass through f32 so a scene equals its own binary file.
    for r in cons.iter_mut().chain(div.iter_mut()) {
        r.vector.iter_mut().for_each(|v| *v = *v as f32 as f64);
    }
    let pair = align_spaces(
        EmbeddingDataset::new(Space::Consistency, spec.dim_c, cons)?,
        EmbeddingDataset::new(Space::Diversity, spec.dim_d, div)?,
    )?;
    Ok(SyntheticScene {
        spec: spec.clone(),
        pair,
        plants,
    })
}

// ---- reference selection -------------------------------------------------

struct Row<'a> {
    id: &'a str,
    identity: u32,
    generated: bool,
    v: &'a [f64],
}

fn rows(ds: &EmbeddingDataset) -> Vec<Row<'_>> {
    ds.records()
        .iter()
        .map(|r| Row {
            id: &r.image_id,
            identity: r.identity_id,
            generated: r.source == Source::Generated,
            v: &r.vector,
        })
        .collect()
}

fn naive_distance(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..a.len() {
        s += (a[i] - b[i]).powi(2);
    }
    s.sqrt()
}

/// Distance of each generated image to its identity's real mean, plus the
/// thresholds, for one space.
fn naive_space(
    rows: &[Row<'_>],
    policy: ThresholdPolicy,
    override_value: Option<f64>,
) -> (BTreeMap<String, f64>, BTreeMap<u32, f64>) {
    let identities: BTreeSet<u32> = rows.iter().map(|r| r.identity).collect();
    let mut center: BTreeMap<u32, Vec<f64>> = BTreeMap::new();
    for &i in &identities {
        let reals: Vec<&Row> = rows
            .iter()
            .filter(|r| r.identity == i && !r.generated)
            .collect();
        let dim = reals[0].v.len();
        let mut c = vec![0.0; dim];
        for (k, ck) in c.iter_mut().enumerate() {
            for r in &reals {
                *ck += r.v[k];
            }
            *ck /= reals.len() as f64;
        }
        center.insert(i, c);
    }
    let all: Vec<(u32, bool, String, f64)> = rows
        .iter()
        .map(|r| {
            (
                r.identity,
                r.generated,
                r.id.to_string(),
                naive_distance(r.v, &center[&r.identity]),
            )
        })
        .collect();
    let distances = all
        .iter()
        .filter(|x| x.1)
        .map(|x| (x.2.clone(), x.3))
        .collect();
    let mut thresholds = BTreeMap::new();
    for &i in &identities {
        if !all.iter().any(|x| x.0 == i && x.1) {
            continue;
        }
        if let Some(t) = override_value {
            thresholds.insert(i, t);
            continue;
        }
        let mut pop: Vec<f64> = all
            .iter()
            .filter(|x| {
                x.0 == i
                    && match policy.population {
                        Population::All => true,
                        Population::RealOnly => !x.1,
                        Population::GeneratedOnly => x.1,
                    }
            })
            .map(|x| x.3)
            .collect();
        assert!(
            !pop.is_empty(),
            "empty threshold population for identity {i}"
        );
        let t = match policy.statistic {
            Statistic::Mean => pop.iter().sum::<f64>() / pop.len() as f64,
            Statistic::Median => {
                pop.sort_by(|a, b| a.partial_cmp(b).unwrap());
                let n = pop.len();
                if n % 2 == 1 {
                    pop[n / 2]
                } else {
                    (pop[n / 2 - 1] + pop[n / 2]) / 2.0
                }
            }
        };
        thresholds.insert(i, t);
    }
    (distances, thresholds)
}

/// O(n^2) LOF: full distance matrix, full sort per point.
pub fn naive_lof(points: &[&[f64]], k: usize) -> Vec<f64> {
    let n = points.len();
    assert!(k >= 1 && k < n);
    let dm: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            (0..n)
                .map(|j| naive_distance(points[i], points[j]))
                .collect()
        })
        .collect();
    let knn: Vec<Vec<usize>> = (0..n)
        .map(|i| {
            let mut others: Vec<usize> = (0..n).filter(|&j| j != i).collect();
            others.sort_by(|&a, &b| dm[i][a].partial_cmp(&dm[i][b]).unwrap().then(a.cmp(&b)));
            others.truncate(k);
            others
        })
        .collect();
    let kdist: Vec<f64> = (0..n).map(|i| dm[i][knn[i][k - 1]]).collect();
    let lrd: Vec<f64> = (0..n)
        .map(|i| {
            let mean_reach = knn[i]
                .iter()
                .map(|&o| f64::max(f64::max(kdist[o], dm[i][o]), 1e-12))
                .sum::<f64>()
                / k as f64;
            1.0 / mean_reach
        })
        .collect();
    (0..n)
        .map(|i| knn[i].iter().map(|&o| lrd[o] / lrd[i]).sum::<f64>() / k as f64)
        .collect()
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct OracleSelection {
    pub kept: BTreeSet<String>,
    /// Diversity candidates removed by the density drop.
    pub lof_dropped: BTreeSet<String>,
}

/// Reference kept set computed without any pipeline code.
pub fn oracle_select(pair: &SpacePair, config: &SamplingConfig) -> BTreeSet<String> {
    oracle_selection(pair, config).kept
}

pub fn oracle_selection(pair: &SpacePair, config: &SamplingConfig) -> OracleSelection {
    let c_rows = rows(pair.consistency());
    let d_rows = rows(pair.diversity());
    let (dc, tc) = naive_space(&c_rows, config.tc_policy, config.tc_override);
    let (dd, td) = naive_space(&d_rows, config.td_policy, config.td_override);

    let identity_of: BTreeMap<&str, u32> = c_rows.iter().map(|r| (r.id, r.identity)).collect();
    let cons: BTreeSet<String> = dc
        .iter()
        .filter(|(id, d)| **d < tc[&identity_of[id.as_str()]])
        .map(|(id, _)| id.clone())
        .collect();
    let divc: BTreeSet<String> = dd
        .iter()
        .filter(|(id, d)| **d > td[&identity_of[id.as_str()]])
        .map(|(id, _)| id.clone())
        .collect();

    let lof: &LofConfig = &config.lof;
    let mut scopes: BTreeMap<u32, Vec<&Row>> = BTreeMap::new();
    for r in d_rows.iter().filter(|r| r.generated && divc.contains(r.id)) {
        let key = if lof.scope == LofScope::Global {
            0
        } else {
            r.identity
        };
        scopes.entry(key).or_default().push(r);
    }
    let mut dropped = BTreeSet::new();
    for members in scopes.values() {
        if members.len() < 2 {
            continue;
        }
        let k = lof.k.min(members.len() - 1);
        let pts: Vec<&[f64]> = members.iter().map(|r| r.v).collect();
        for (r, score) in members.iter().zip(naive_lof(&pts, k)) {
            if score <= lof.theta && unit_draw(config.seed, r.id) < lof.alpha {
                dropped.insert(r.id.to_string());
            }
        }
    }

    let kept = cons
        .intersection(&divc)
        .filter(|id| !dropped.contains(*id))
        .cloned()
        .collect();
    OracleSelection {
        kept,
        lof_dropped: dropped,
    }
}

// ---- randomized verification ---------------------------------------------

pub fn random_scene_spec(rng: &mut impl Rng) -> SceneSpec {
    let good = rng.random_range(0.0..0.6);
    let id_violating = rng.random_range(0.0..(1.0 - good) / 2.0);
    let duplicate = rng.random_range(0.0..(1.0 - good - id_violating));
    SceneSpec {
        num_identities: rng.random_range(2..=50),
        reals_per_id: rng.random_range(1..=12),
        fakes_per_id: rng.random_range(1..=40),
        dim_c: [2, 8, 16][rng.random_range(0..3)],
        dim_d: [2, 16, 32][rng.random_range(0..3)],
        cluster_spread: rng.random_range(0.5..2.0),
        separation: rng.random_range(2.0..12.0),
        fractions: PlantFractions {
            good,
            id_violating,
            duplicate,
        },
        seed: rng.random(),
    }
}

// GeneratedOnly is always usable: thresholds are only taken for identities
// that have generated images.
fn random_policy(rng: &mut impl Rng) -> ThresholdPolicy {
    ThresholdPolicy {
        statistic: if rng.random_bool(0.5) {
            Statistic::Median
        } else {
            Statistic::Mean
        },
        population: [
            Population::All,
            Population::RealOnly,
            Population::GeneratedOnly,
        ][rng.random_range(0..3)],
    }
}

pub fn random_sampling_config(rng: &mut impl Rng) -> SamplingConfig {
    SamplingConfig {
        tc_policy: random_policy(rng),
        td_policy: random_policy(rng),
        tc_override: None,
        td_override: None,
        lof: LofConfig {
            k: [4, 10, 20][rng.random_range(0..3)],
            theta: rng.random_range(0.8..1.3),
            alpha: [0.0, 0.3, 0.7, 1.0][rng.random_range(0..4)],
            scope: if rng.random_bool(0.7) {
                LofScope::PerIdentity
            } else {
                LofScope::Global
            },
        },
        seed: rng.random(),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VerifyOutcome {
    pub scene: SceneSpec,
    pub config: SamplingConfig,
    pub pipeline_kept: usize,
    pub oracle_kept: usize,
    pub lof_dropped: usize,
    /// Kept sets and density-drop decisions both agree.
    pub equal: bool,
}

/// Runs pipeline and reference on `scenes` random scenes derived from `seed`.
pub fn verify_suite(scenes: usize, seed: u64) -> Result<Vec<VerifyOutcome>, SynthError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..scenes)
        .map(|_| {
            let spec = random_scene_spec(&mut rng);
            let config = random_sampling_config(&mut rng);
            let scene = gen_synthetic(&spec)?;
            let manifest = run_pipeline(&scene.pair, &config)?;
            let kept = manifest.kept_set();
            let dropped: BTreeSet<String> = manifest
                .images
                .iter()
                .filter(|v| v.dropped_by_lof)
                .map(|v| v.image_id.clone())
                .collect();
            let oracle = oracle_selection(&scene.pair, &config);
            Ok(VerifyOutcome {
                pipeline_kept: kept.len(),
                oracle_kept: oracle.kept.len(),
                lof_dropped: dropped.len(),
                equal: kept == oracle.kept && dropped == oracle.lof_dropped,
                scene: spec,
                config,
            })
        })
        .collect()
}
