//! Central finite-difference checks of the analytic loss gradients on
//! random instances. Triplet instances near hinge kinks or mining ties are
//! rejected and redrawn.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::loss::{batch_hard_triplet, ce_lsr, hard_pairs, lsr_targets, TripletConfig};
use crate::metric::euclidean;

pub const STEP: f64 = 1e-6;
pub const TOLERANCE: f64 = 1e-5;
/// Minimum distance from any kink or tie for an accepted triplet instance.
pub const KINK_CLEARANCE: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq)]
pub struct SuiteReport {
    pub name: &'static str,
    pub instances: usize,
    pub max_relative_error: f64,
    pub failures: usize,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.failures == 0
    }
}

/// `||a - b|| / max(||a||, ||b||)`, with a floor on the denominator.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &mut dyn Iterator<Item = f64>| v.map(|x| x * x).sum::<f64>().sqrt();
    let diff = norm(&mut analytic.iter().zip(numeric).map(|(a, b)| a - b));
    let scale = norm(&mut analytic.iter().copied()).max(norm(&mut numeric.iter().copied()));
    diff / scale.max(1e-12)
}

/// Central differences of `f` at `x`.
pub fn numeric_gradient(x: &[f64], step: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + step;
            let up = f(&probe);
            probe[i] = orig - step;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * step)
        })
        .collect()
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

pub struct CeInstance {
    pub logits: Vec<f64>,
    pub target: Vec<f64>,
}

pub fn random_ce_instance(rng: &mut ChaCha8Rng) -> CeInstance {
    let classes = rng.random_range(2..=20);
    let logits = (0..classes).map(|_| 3.0 * normal(rng)).collect();
    let epsilon = [0.0, 0.1, 0.3, rng.random_range(0.0..0.9)][rng.random_range(0..4)];
    let target = lsr_targets(rng.random_range(0..classes), epsilon, classes).unwrap();
    CeInstance { logits, target }
}

pub struct TripletInstance {
    pub embeddings: Vec<Vec<f64>>,
    pub identities: Vec<u32>,
    pub config: TripletConfig,
}

impl TripletInstance {
    pub fn flat(&self) -> Vec<f64> {
        self.embeddings.iter().flatten().copied().collect()
    }

    pub fn dim(&self) -> usize {
        self.embeddings[0].len()
    }
}

/// True when every anchor is clear of the hinge kink and both mining choices
/// win by a margin, and at least one hinge is active.
pub fn clear_of_kinks(inst: &TripletInstance) -> bool {
    let Ok(pairs) = hard_pairs(&inst.embeddings, &inst.identities, &inst.config) else {
        return false;
    };
    let mut active = false;
    for (a, pair) in pairs.iter().enumerate() {
        if pair.activation.abs() <= KINK_CLEARANCE {
            return false;
        }
        active |= pair.activation > 0.0;
        for (j, e) in inst.embeddings.iter().enumerate() {
            if j == a || j == pair.positive || j == pair.negative {
                continue;
            }
            let d = euclidean(&inst.embeddings[a], e);
            let same = inst.identities[j] == inst.identities[a];
            if same && pair.positive_distance - d <= KINK_CLEARANCE {
                return false;
            }
            if !same && d - pair.negative_distance <= KINK_CLEARANCE {
                return false;
            }
        }
    }
    active
}

pub fn random_triplet_instance(rng: &mut ChaCha8Rng, dim: usize) -> TripletInstance {
    loop {
        let people = rng.random_range(2..=5);
        let mut embeddings = Vec::new();
        let mut identities = Vec::new();
        for id in 0..people {
            let center: Vec<f64> = (0..dim).map(|_| normal(rng)).collect();
            for _ in 0..rng.random_range(2..=4) {
                embeddings.push(center.iter().map(|c| c + 0.8 * normal(rng)).collect());
                identities.push(id as u32);
            }
        }
        let inst = TripletInstance {
            embeddings,
            identities,
            config: TripletConfig {
                margin: rng.random_range(0.2..2.0),
            },
        };
        if clear_of_kinks(&inst) {
            return inst;
        }
    }
}

pub fn check_ce(instances: usize, seed: u64) -> SuiteReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    let mut failures = 0;
    for _ in 0..instances {
        let inst = random_ce_instance(&mut rng);
        let (_, analytic) = ce_lsr(&inst.logits, &inst.target);
        let numeric = numeric_gradient(&inst.logits, STEP, |z| ce_lsr(z, &inst.target).0);
        let err = relative_error(&analytic, &numeric);
        worst = worst.max(err);
        failures += usize::from(err.is_nan() || err >= TOLERANCE);
    }
    SuiteReport {
        name: "ce_lsr",
        instances,
        max_relative_error: worst,
        failures,
    }
}

pub fn check_triplet(instances: usize, seed: u64) -> SuiteReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    let mut failures = 0;
    for _ in 0..instances {
        let inst = random_triplet_instance(&mut rng, 16);
        let dim = inst.dim();
        let (_, grads) =
            batch_hard_triplet(&inst.embeddings, &inst.identities, &inst.config).unwrap();
        let analytic: Vec<f64> = grads.into_iter().flatten().collect();
        let numeric = numeric_gradient(&inst.flat(), STEP, |flat| {
            let rows: Vec<&[f64]> = flat.chunks(dim).collect();
            batch_hard_triplet(&rows, &inst.identities, &inst.config)
                .unwrap()
                .0
        });
        let err = relative_error(&analytic, &numeric);
        worst = worst.max(err);
        failures += usize::from(err.is_nan() || err >= TOLERANCE);
    }
    SuiteReport {
        name: "batch_hard_triplet",
        instances,
        max_relative_error: worst,
        failures,
    }
}
