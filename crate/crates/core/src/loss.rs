//! Training-side loss kernels with analytic gradients: label-smoothed
//! cross-entropy, batch-hard triplet loss, and their combination where
//! generated samples only receive the classification term.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metric::euclidean;
use crate::store::Source;

#[derive(Debug, Error, PartialEq)]
pub enum LossError {
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("epsilon must lie in [0, 1), got {0}")]
    Epsilon(f64),
    #[error("need at least 2 classes, got {0}")]
    Classes(usize),
    #[error("margin must be positive, got {0}")]
    Margin(f64),
    #[error("identity {0} has a single sample in the triplet population")]
    SingletonIdentity(u32),
    #[error("triplet loss needs at least two identities")]
    SingleIdentity,
    #[error("batch is empty")]
    EmptyBatch,
    #[error("batch field {field} has {found} rows, expected {expected}")]
    Ragged {
        field: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelSmoothing {
    pub epsilon_real: f64,
    pub epsilon_fake: f64,
    pub num_classes: usize,
}

impl LabelSmoothing {
    pub fn new(num_classes: usize) -> Self {
        Self {
            epsilon_real: 0.1,
            epsilon_fake: 0.3,
            num_classes,
        }
    }

    pub fn validate(&self) -> Result<(), LossError> {
        if self.num_classes < 2 {
            return Err(LossError::Classes(self.num_classes));
        }
        for eps in [self.epsilon_real, self.epsilon_fake] {
            check_epsilon(eps)?;
        }
        Ok(())
    }

    pub fn epsilon_for(&self, source: Source) -> f64 {
        match source {
            Source::Real => self.epsilon_real,
            Source::Generated => self.epsilon_fake,
        }
    }
}

fn check_epsilon(eps: f64) -> Result<(), LossError> {
    if (0.0..1.0).contains(&eps) {
        Ok(())
    } else {
        Err(LossError::Epsilon(eps))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TripletConfig {
    pub margin: f64,
}

impl Default for TripletConfig {
    fn default() -> Self {
        Self { margin: 0.3 }
    }
}

/// Smoothed one-hot target: `1 - eps + eps/C` at `label`, `eps/C` elsewhere.
pub fn lsr_targets(label: usize, epsilon: f64, classes: usize) -> Result<Vec<f64>, LossError> {
    if classes < 2 {
        return Err(LossError::Classes(classes));
    }
    if label >= classes {
        return Err(LossError::LabelOutOfRange { label, classes });
    }
    check_epsilon(epsilon)?;
    let off = epsilon / classes as f64;
    let mut t = vec![off; classes];
    t[label] = 1.0 - epsilon + off;
    Ok(t)
}

/// Cross-entropy against a soft target, stabilized by the max shift.
/// Returns the loss and its gradient with respect to the logits.
pub fn ce_lsr(logits: &[f64], target: &[f64]) -> (f64, Vec<f64>) {
    assert_eq!(
        logits.len(),
        target.len(),
        "logits and target differ in length"
    );
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum_exp: f64 = logits.iter().map(|z| (z - max).exp()).sum();
    let log_norm = max + sum_exp.ln();
    let loss = -logits
        .iter()
        .zip(target)
        .map(|(z, t)| t * (z - log_norm))
        .sum::<f64>();
    let grad = logits
        .iter()
        .zip(target)
        .map(|(z, t)| (z - log_norm).exp() - t)
        .collect();
    (loss, grad)
}

/// Per-anchor hardest positive and negative, exposed for tie/kink checks.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HardPair {
    pub positive: usize,
    pub positive_distance: f64,
    pub negative: usize,
    pub negative_distance: f64,
    /// `margin + d(a, p) - d(a, n)` before the hinge.
    pub activation: f64,
}

/// Hardest pairs per anchor. Ties go to the lowest sample index.
pub fn hard_pairs<P: AsRef<[f64]>>(
    embeddings: &[P],
    identities: &[u32],
    config: &TripletConfig,
) -> Result<Vec<HardPair>, LossError> {
    if !(config.margin > 0.0 && config.margin.is_finite()) {
        return Err(LossError::Margin(config.margin));
    }
    if embeddings.len() != identities.len() {
        return Err(LossError::Ragged {
            field: "identities",
            expected: embeddings.len(),
            found: identities.len(),
        });
    }
    let mut counts: BTreeMap<u32, usize> = BTreeMap::new();
    for &id in identities {
        *counts.entry(id).or_default() += 1;
    }
    if let Some((&id, _)) = counts.iter().find(|(_, &n)| n < 2) {
        return Err(LossError::SingletonIdentity(id));
    }
    if counts.len() < 2 {
        return Err(LossError::SingleIdentity);
    }

    Ok((0..embeddings.len())
        .map(|a| {
            let anchor = embeddings[a].as_ref();
            let mut pos = (usize::MAX, f64::NEG_INFINITY);
            let mut neg = (usize::MAX, f64::INFINITY);
            for (j, e) in embeddings.iter().enumerate() {
                if j == a {
                    continue;
                }
                let d = euclidean(anchor, e.as_ref());
                if identities[j] == identities[a] {
                    if d > pos.1 {
                        pos = (j, d);
                    }
                } else if d < neg.1 {
                    neg = (j, d);
                }
            }
            HardPair {
                positive: pos.0,
                positive_distance: pos.1,
                negative: neg.0,
                negative_distance: neg.1,
                activation: config.margin + pos.1 - neg.1,
            }
        })
        .collect())
}

/// Mean over anchors of the hinged batch-hard triplet term, with the
/// gradient for every embedding. The hinge contributes no gradient at
/// exactly zero activation; a zero-length pair contributes none either.
pub fn batch_hard_triplet<P: AsRef<[f64]>>(
    embeddings: &[P],
    identities: &[u32],
    config: &TripletConfig,
) -> Result<(f64, Vec<Vec<f64>>), LossError> {
    let pairs = hard_pairs(embeddings, identities, config)?;
    let n = embeddings.len();
    let dim = embeddings[0].as_ref().len();
    let scale = 1.0 / n as f64;
    let mut grads = vec![vec![0.0; dim]; n];
    let mut loss = 0.0;
    for (a, pair) in pairs.iter().enumerate() {
        if pair.activation <= 0.0 {
            continue;
        }
        loss += pair.activation;
        let anchor = embeddings[a].as_ref();
        // d/da ||a - x|| = (a - x) / ||a - x||
        let mut push = |other: usize, dist: f64, sign: f64| {
            if dist == 0.0 {
                return;
            }
            let x = embeddings[other].as_ref();
            for k in 0..dim {
                let g = sign * scale * (anchor[k] - x[k]) / dist;
                grads[a][k] += g;
                grads[other][k] -= g;
            }
        };
        push(pair.positive, pair.positive_distance, 1.0);
        push(pair.negative, pair.negative_distance, -1.0);
    }
    Ok((loss * scale, grads))
}

/// One training batch. Labels double as the identity grouping for the
/// triplet term.
#[derive(Clone, Debug, PartialEq)]
pub struct LogitBatch {
    pub logits: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    pub sources: Vec<Source>,
    pub embeddings: Vec<Vec<f64>>,
}

impl LogitBatch {
    pub fn validate(&self, classes: usize) -> Result<(), LossError> {
        let n = self.logits.len();
        if n == 0 {
            return Err(LossError::EmptyBatch);
        }
        for (field, found) in [
            ("labels", self.labels.len()),
            ("sources", self.sources.len()),
            ("embeddings", self.embeddings.len()),
        ] {
            if found != n {
                return Err(LossError::Ragged {
                    field,
                    expected: n,
                    found,
                });
            }
        }
        for row in &self.logits {
            if row.len() != classes {
                return Err(LossError::Ragged {
                    field: "logits",
                    expected: classes,
                    found: row.len(),
                });
            }
            if row.iter().any(|v| !v.is_finite()) {
                return Err(LossError::NonFinite("logits"));
            }
        }
        if self.embeddings.iter().flatten().any(|v| !v.is_finite()) {
            return Err(LossError::NonFinite("embeddings"));
        }
        if let Some(&label) = self.labels.iter().find(|&&l| l >= classes) {
            return Err(LossError::LabelOutOfRange { label, classes });
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReidLoss {
    pub total: f64,
    /// Mean label-smoothed cross-entropy over real samples.
    pub id_real: f64,
    /// Batch-hard triplet loss over real samples.
    pub triplet: f64,
    /// Mean label-smoothed cross-entropy over generated samples.
    pub id_fake: f64,
    pub logit_grads: Vec<Vec<f64>>,
    pub embedding_grads: Vec<Vec<f64>>,
}

/// Mean real loss (cross-entropy plus triplet) plus mean generated loss
/// (cross-entropy only). Generated samples never enter the triplet term.
pub fn reid_loss(
    batch: &LogitBatch,
    smoothing: &LabelSmoothing,
    triplet: &TripletConfig,
) -> Result<ReidLoss, LossError> {
    smoothing.validate()?;
    batch.validate(smoothing.num_classes)?;
    let n = batch.logits.len();
    let dim = batch.embeddings[0].len();
    let real: Vec<usize> = (0..n)
        .filter(|&i| batch.sources[i] == Source::Real)
        .collect();
    let fake: Vec<usize> = (0..n)
        .filter(|&i| batch.sources[i] == Source::Generated)
        .collect();

    let mut logit_grads = vec![Vec::new(); n];
    let mut id_mean = |members: &[usize], source: Source| -> Result<f64, LossError> {
        let mut total = 0.0;
        let scale = 1.0 / members.len() as f64;
        for &i in members {
            let target = lsr_targets(
                batch.labels[i],
                smoothing.epsilon_for(source),
                smoothing.num_classes,
            )?;
            let (l, g) = ce_lsr(&batch.logits[i], &target);
            total += l;
            logit_grads[i] = g.into_iter().map(|v| v * scale).collect();
        }
        Ok(total * scale)
    };
    let id_real = if real.is_empty() {
        0.0
    } else {
        id_mean(&real, Source::Real)?
    };
    let id_fake = if fake.is_empty() {
        0.0
    } else {
        id_mean(&fake, Source::Generated)?
    };

    let mut embedding_grads = vec![vec![0.0; dim]; n];
    let mut triplet_loss = 0.0;
    if !real.is_empty() {
        let emb: Vec<&[f64]> = real
            .iter()
            .map(|&i| batch.embeddings[i].as_slice())
            .collect();
        let ids: Vec<u32> = real.iter().map(|&i| batch.labels[i] as u32).collect();
        let (l, g) = batch_hard_triplet(&emb, &ids, triplet)?;
        triplet_loss = l;
        for (row, &i) in g.into_iter().zip(&real) {
            embedding_grads[i] = row;
        }
    }

    Ok(ReidLoss {
        total: id_real + triplet_loss + id_fake,
        id_real,
        triplet: triplet_loss,
        id_fake,
        logit_grads,
        embedding_grads,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn smoothed_targets() {
        let t = lsr_targets(3, 0.1, 10).unwrap();
        for (i, v) in t.iter().enumerate() {
            let want = if i == 3 { 0.91 } else { 0.01 };
            assert!((v - want).abs() < 1e-15, "{i}: {v}");
        }
        assert_eq!(lsr_targets(1, 0.0, 3).unwrap(), vec![0.0, 1.0, 0.0]);
        let f = lsr_targets(0, 0.3, 4).unwrap();
        assert!((f[0] - 0.775).abs() < 1e-15 && (f[1] - 0.075).abs() < 1e-15);
        assert!((f.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert_eq!(
            lsr_targets(4, 0.1, 4).unwrap_err(),
            LossError::LabelOutOfRange {
                label: 4,
                classes: 4
            }
        );
        assert_eq!(lsr_targets(0, 1.0, 4).unwrap_err(), LossError::Epsilon(1.0));
    }

    #[test]
    fn uniform_logits_give_log_c() {
        for c in [2usize, 7, 751] {
            let t = lsr_targets(1, 0.3, c).unwrap();
            let (l, _) = ce_lsr(&vec![2.5; c], &t);
            assert!((l - (c as f64).ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn large_logits_stay_finite() {
        let t = lsr_targets(0, 0.1, 3).unwrap();
        let (l, g) = ce_lsr(&[1000.0, -1000.0, 0.0], &t);
        assert!(l.is_finite() && g.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn triplet_hand_examples() {
        let cfg = TripletConfig::default();
        let sep = [[0.0], [1.0], [10.0], [11.0]];
        let (l, g) = batch_hard_triplet(&sep, &[1, 1, 2, 2], &cfg).unwrap();
        assert_eq!(l, 0.0);
        assert!(g.iter().flatten().all(|&v| v == 0.0));
        let mixed = [[0.0], [4.0], [1.0], [5.0]];
        let (l, _) = batch_hard_triplet(&mixed, &[1, 1, 2, 2], &cfg).unwrap();
        assert!((l - 3.3).abs() < 1e-12, "{l}");
    }

    #[test]
    fn triplet_preconditions() {
        let cfg = TripletConfig::default();
        assert_eq!(
            batch_hard_triplet(&[[0.0], [1.0], [2.0]], &[1, 1, 2], &cfg).unwrap_err(),
            LossError::SingletonIdentity(2)
        );
        assert_eq!(
            batch_hard_triplet(&[[0.0], [1.0]], &[1, 1], &cfg).unwrap_err(),
            LossError::SingleIdentity
        );
        assert_eq!(
            batch_hard_triplet(&[[0.0], [1.0]], &[1, 2], &TripletConfig { margin: 0.0 })
                .unwrap_err(),
            LossError::Margin(0.0)
        );
    }

    fn small_batch(sources: &[Source]) -> LogitBatch {
        let n = sources.len();
        LogitBatch {
            logits: (0..n).map(|i| vec![i as f64 * 0.1, -0.2, 0.3]).collect(),
            labels: (0..n).map(|i| i % 2).collect(),
            sources: sources.to_vec(),
            embeddings: (0..n)
                .map(|i| vec![i as f64, (i * i) as f64 * 0.1])
                .collect(),
        }
    }

    #[test]
    fn reid_loss_degenerate_batches() {
        let ls = LabelSmoothing::new(3);
        let tri = TripletConfig::default();
        let reals = small_batch(&[Source::Real; 4]);
        let out = reid_loss(&reals, &ls, &tri).unwrap();
        assert_eq!(out.id_fake, 0.0);
        let labels: Vec<u32> = reals.labels.iter().map(|&l| l as u32).collect();
        let (t, _) = batch_hard_triplet(&reals.embeddings, &labels, &tri).unwrap();
        assert_eq!(out.triplet, t);

        let fakes = small_batch(&[Source::Generated; 3]);
        let out = reid_loss(&fakes, &ls, &tri).unwrap();
        assert_eq!(out.triplet, 0.0);
        assert!(out.embedding_grads.iter().flatten().all(|&v| v == 0.0));
        let mean: f64 = (0..3)
            .map(|i| {
                ce_lsr(
                    &fakes.logits[i],
                    &lsr_targets(fakes.labels[i], 0.3, 3).unwrap(),
                )
                .0
            })
            .sum::<f64>()
            / 3.0;
        assert!((out.total - mean).abs() < 1e-12);
    }

    #[test]
    fn reid_loss_validation() {
        let ls = LabelSmoothing::new(3);
        let mut b = small_batch(&[Source::Real; 4]);
        b.labels[0] = 5;
        assert!(matches!(
            reid_loss(&b, &ls, &TripletConfig::default()),
            Err(LossError::LabelOutOfRange { .. })
        ));
        let mut b = small_batch(&[Source::Real; 4]);
        b.logits[1][0] = f64::NAN;
        assert_eq!(
            reid_loss(&b, &ls, &TripletConfig::default()).unwrap_err(),
            LossError::NonFinite("logits")
        );
    }

    proptest! {
        #[test]
        fn targets_are_distributions(c in 2usize..10_000, eps in 0.0f64..0.99, label_frac in 0.0f64..1.0) {
            let label = ((c as f64 * label_frac) as usize).min(c - 1);
            let t = lsr_targets(label, eps, c).unwrap();
            prop_assert!(t.iter().all(|&v| v >= 0.0));
            prop_assert!((t.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }

        #[test]
        fn ce_shift_invariance(
            logits in proptest::collection::vec(-10.0f64..10.0, 2..12),
            shift in -50.0f64..50.0,
            eps in 0.0f64..0.9,
        ) {
            let t = lsr_targets(0, eps, logits.len()).unwrap();
            let shifted: Vec<f64> = logits.iter().map(|z| z + shift).collect();
            let (a, ga) = ce_lsr(&logits, &t);
            let (b, gb) = ce_lsr(&shifted, &t);
            prop_assert!((a - b).abs() < 1e-12);
            for (x, y) in ga.iter().zip(&gb) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }
    }
}
