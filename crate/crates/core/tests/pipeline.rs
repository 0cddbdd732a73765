use std::collections::BTreeSet;

use augsel::metric::{compute_centroids, compute_distances, intersect};
use augsel::pipeline::{export_selection, import_selection, SamplingConfig};
use augsel::store::{EmbeddingDataset, EmbeddingRecord};
use augsel::synth::{gen_synthetic, oracle_select, PlantLabel, SceneSpec};
use augsel::{align_spaces, run_pipeline, Source, Space, SpacePair};

fn rec(id: &str, identity: u32, source: Source, v: &[f64]) -> EmbeddingRecord {
    EmbeddingRecord {
        image_id: id.into(),
        identity_id: identity,
        camera_id: 0,
        source,
        vector: v.to_vec(),
    }
}

/// Eight reals on a ring of radius 1, identical in both spaces.
fn hand_scene(generated: &[(&str, [f64; 2], [f64; 2])]) -> SpacePair {
    let mut c = Vec::new();
    let mut d = Vec::new();
    for i in 0..8 {
        let a = i as f64 * std::f64::consts::FRAC_PI_4;
        let v = [a.cos(), a.sin()];
        c.push(rec(&format!("r{i}"), 3, Source::Real, &v));
        d.push(rec(&format!("r{i}"), 3, Source::Real, &v));
    }
    for (id, vc, vd) in generated {
        c.push(rec(id, 3, Source::Generated, vc));
        d.push(rec(id, 3, Source::Generated, vd));
    }
    align_spaces(
        EmbeddingDataset::new(Space::Consistency, 2, c).unwrap(),
        EmbeddingDataset::new(Space::Diversity, 2, d).unwrap(),
    )
    .unwrap()
}

#[test]
fn planted_points_against_reference() {
    let mut generated = vec![
        ("centered", [0.0, 0.0], [0.0, 9.0]),
        ("off_identity", [4.0, 0.0], [0.0, -9.0]),
    ];
    let dups: Vec<String> = (0..6).map(|i| format!("dup{i}")).collect();
    for id in &dups {
        generated.push((id.as_str(), [0.1, 0.1], [8.0, 0.0]));
    }
    let pair = hand_scene(&generated);
    let mut config = SamplingConfig {
        tc_override: Some(1.0),
        td_override: Some(2.0),
        ..Default::default()
    };
    config.lof.k = 3;
    config.lof.alpha = 1.0;
    let m = run_pipeline(&pair, &config).unwrap();
    assert_eq!(m.kept_set(), oracle_select(&pair, &config));

    let get = |id: &str| m.images.iter().find(|v| v.image_id == id).unwrap();
    let centered = get("centered");
    assert!(centered.kept && centered.lof.unwrap() > config.lof.theta);

    let off = get("off_identity");
    assert!(!off.in_consistency && !off.kept);
    assert!(off.in_diversity);

    for id in &dups {
        let v = get(id);
        assert!(v.in_consistency && v.in_diversity);
        assert_eq!(v.lof, Some(1.0));
        assert!(v.high_density && v.dropped_by_lof && !v.kept);
    }
    assert_eq!(m.kept_set(), BTreeSet::from(["centered".to_string()]));
}

#[test]
fn export_is_deterministic_and_round_trips() {
    let scene = gen_synthetic(&SceneSpec::default()).unwrap();
    let config = SamplingConfig {
        seed: 42,
        ..Default::default()
    };
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.json"), dir.path().join("b.json"));
    let first = run_pipeline(&scene.pair, &config).unwrap();
    export_selection(&first, &a).unwrap();
    export_selection(&run_pipeline(&scene.pair, &config).unwrap(), &b).unwrap();
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    assert_eq!(import_selection(&a).unwrap(), first);
}

#[test]
fn seed_changes_only_drop_fields() {
    let scene = gen_synthetic(&SceneSpec::default()).unwrap();
    let text = |seed| {
        let config = SamplingConfig {
            seed,
            ..Default::default()
        };
        run_pipeline(&scene.pair, &config)
            .unwrap()
            .to_canonical_string()
            .unwrap()
    };
    let (a, b) = (text(1), text(2));
    let allowed = [
        "\"seed\"",
        "\"lof_draw\"",
        "\"dropped_by_lof\"",
        "\"kept\"",
        "\"lof_dropped\"",
        "\"lof_survivors\"",
    ];
    let (la, lb): (Vec<&str>, Vec<&str>) = (a.lines().collect(), b.lines().collect());
    assert_eq!(la.len(), lb.len());
    let mut differing = 0;
    for (x, y) in la.iter().zip(&lb) {
        if x != y {
            differing += 1;
            let key = x.trim_start().split(':').next().unwrap();
            assert!(allowed.contains(&key), "unexpected change: {x} / {y}");
        }
    }
    assert!(differing > 1);
}

#[test]
fn planted_distance_distributions_are_disjoint() {
    let scene = gen_synthetic(&SceneSpec::default()).unwrap();
    let table = |ds: &EmbeddingDataset| compute_distances(ds, &compute_centroids(ds)).unwrap();
    let (dc, dd) = (
        table(scene.pair.consistency()),
        table(scene.pair.diversity()),
    );
    for identity in 0..scene.spec.num_identities as u32 {
        let of = |label: PlantLabel, t: &augsel::metric::DistanceTable| -> Vec<f64> {
            t.entries
                .iter()
                .filter(|e| {
                    e.identity_id == identity && scene.plants.get(&e.image_id) == Some(&label)
                })
                .map(|e| e.distance)
                .collect()
        };
        let max = |v: &[f64]| v.iter().copied().fold(f64::MIN, f64::max);
        let min = |v: &[f64]| v.iter().copied().fold(f64::MAX, f64::min);
        let good_c = of(PlantLabel::Good, &dc);
        let good_d = of(PlantLabel::Good, &dd);
        assert!(
            max(&good_c) < min(&of(PlantLabel::IdViolating, &dc)),
            "identity {identity}"
        );
        assert!(
            max(&of(PlantLabel::Duplicate, &dd)) < min(&good_d),
            "identity {identity}"
        );
    }
}

#[test]
fn without_density_drop_reference_is_candidate_intersection() {
    let scene = gen_synthetic(&SceneSpec {
        seed: 9,
        ..SceneSpec::default()
    })
    .unwrap();
    let mut config = SamplingConfig::default();
    config.lof.alpha = 0.0;
    config.lof.theta = 1e-9;
    let m = run_pipeline(&scene.pair, &config).unwrap();
    let sampled = intersect(&m.consistency_set(), &m.diversity_set());
    assert_eq!(oracle_select(&scene.pair, &config), sampled);
    assert_eq!(m.kept_set(), sampled);
}
