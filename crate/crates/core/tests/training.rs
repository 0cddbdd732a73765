use std::collections::BTreeMap;

use augsel::batch::{plan_epoch, plan_epochs, BatchSpec, Slot};
use augsel::loss::{
    batch_hard_triplet, ce_lsr, lsr_targets, reid_loss, LabelSmoothing, LogitBatch, TripletConfig,
};
use augsel::Source;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Cross-entropy straight from the definition, no max shift.
fn plain_ce(logits: &[f64], target: &[f64]) -> f64 {
    let z: f64 = logits.iter().map(|l| l.exp()).sum();
    -logits
        .iter()
        .zip(target)
        .map(|(l, t)| t * (l.exp() / z).ln())
        .sum::<f64>()
}

#[test]
fn ce_matches_unstabilized_formula() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..200 {
        let logits: Vec<f64> = (0..8).map(|_| rng.random_range(-10.0..10.0)).collect();
        let target = lsr_targets(rng.random_range(0..8), 0.1, 8).unwrap();
        let (loss, _) = ce_lsr(&logits, &target);
        assert!((loss - plain_ce(&logits, &target)).abs() <= 1e-12);
    }
}

#[test]
fn reid_loss_is_sum_of_kernel_means() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let classes = 10;
    let (mut logits, mut labels, mut sources, mut embeddings) = (vec![], vec![], vec![], vec![]);
    for person in 0..6 {
        for slot in 0..12 {
            logits.push(
                (0..classes)
                    .map(|_| rng.random_range(-4.0..4.0))
                    .collect::<Vec<f64>>(),
            );
            labels.push(person);
            sources.push(if slot < 9 {
                Source::Real
            } else {
                Source::Generated
            });
            embeddings.push(
                (0..16)
                    .map(|_| rng.random_range(-1.0..1.0))
                    .collect::<Vec<f64>>(),
            );
        }
    }
    let batch = LogitBatch {
        logits,
        labels,
        sources,
        embeddings,
    };
    let smoothing = LabelSmoothing::new(classes);
    let triplet = TripletConfig::default();
    let got = reid_loss(&batch, &smoothing, &triplet).unwrap();

    let mut real_ce = Vec::new();
    let mut fake_ce = Vec::new();
    let mut real_emb = Vec::new();
    let mut real_ids = Vec::new();
    for i in 0..batch.logits.len() {
        let (eps, bucket) = match batch.sources[i] {
            Source::Real => (0.1, &mut real_ce),
            Source::Generated => (0.3, &mut fake_ce),
        };
        let target = lsr_targets(batch.labels[i], eps, classes).unwrap();
        bucket.push(ce_lsr(&batch.logits[i], &target).0);
        if batch.sources[i] == Source::Real {
            real_emb.push(batch.embeddings[i].clone());
            real_ids.push(batch.labels[i] as u32);
        }
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (tri, _) = batch_hard_triplet(&real_emb, &real_ids, &triplet).unwrap();
    let want = mean(&real_ce) + tri + mean(&fake_ce);
    assert_eq!(real_ce.len(), 54);
    assert_eq!(fake_ce.len(), 18);
    assert!((got.total - want).abs() <= 1e-12, "{} vs {want}", got.total);
    assert!((got.triplet - tri).abs() <= 1e-12);
    for (i, g) in got.embedding_grads.iter().enumerate() {
        if batch.sources[i] == Source::Generated {
            assert!(g.iter().all(|v| *v == 0.0));
        }
    }
}

fn pools(
    identities: u32,
    reals: usize,
    fakes: usize,
) -> (BTreeMap<u32, Vec<String>>, BTreeMap<u32, Vec<String>>) {
    let make = |tag: &str, n: usize| {
        (0..identities)
            .map(|i| (i, (0..n).map(|j| format!("{i}_{tag}{j}")).collect()))
            .collect()
    };
    (make("r", reals), make("g", fakes))
}

#[test]
fn batches_draw_from_the_right_pools() {
    let (real, fake) = pools(30, 12, 4);
    let plans = plan_epochs(&real, &fake, &BatchSpec::default(), 3).unwrap();
    for plan in &plans {
        assert_eq!(plan.batches.len(), 5);
        for batch in &plan.batches {
            assert_eq!(batch.entries.len(), 72);
            let ids = batch.identities();
            assert_eq!(ids.len(), 6);
            for id in ids {
                let of = |slot| {
                    batch
                        .entries
                        .iter()
                        .filter(move |e| e.identity_id == id && e.slot == slot)
                };
                assert_eq!(of(Slot::Real).count(), 9);
                assert_eq!(of(Slot::Fake).count(), 3);
                assert!(of(Slot::Real)
                    .all(|e| e.source == Source::Real && real[&id].contains(&e.image_id)));
                assert!(of(Slot::Fake)
                    .all(|e| e.source == Source::Generated && fake[&id].contains(&e.image_id)));
                // Pools are large enough, so no image repeats within an identity.
                let mut seen: Vec<&String> = of(Slot::Real).map(|e| &e.image_id).collect();
                seen.sort();
                seen.dedup();
                assert_eq!(seen.len(), 9);
            }
        }
    }
    assert_ne!(plans[0].identity_order, plans[1].identity_order);
}

#[test]
fn large_pool_permutation_depends_on_seed() {
    let (real, fake) = pools(100, 9, 3);
    let spec = |seed| BatchSpec {
        seed,
        ..BatchSpec::default()
    };
    let a = plan_epoch(&real, &fake, &spec(1)).unwrap();
    assert_eq!(a, plan_epoch(&real, &fake, &spec(1)).unwrap());
    assert_ne!(
        a.identity_order,
        plan_epoch(&real, &fake, &spec(2)).unwrap().identity_order
    );
}
