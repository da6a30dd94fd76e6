use proptest::prelude::*;
use statrs::distribution::{ChiSquared, ContinuousCDF};

use super::*;
use crate::train::TrainConfig;

#[test]
fn smallest_spec_yields_one_valid_flow() {
    let mut spec = SynthSpec::shared_vocabulary(1, 1, 0);
    spec.packets_per_flow = (1, 1);
    let flows = generate(&spec, 3).unwrap();
    assert_eq!(flows.len(), 1);
    assert_eq!(flows[0].packets.len(), 1);
    flows[0].validate().unwrap();
    assert_eq!(flows[0].packets[0].header_bytes.len(), 36);
}

#[test]
fn generation_is_deterministic() {
    let spec = SynthSpec::shared_vocabulary(3, 5, 1);
    assert_eq!(generate(&spec, 9).unwrap(), generate(&spec, 9).unwrap());
    assert_ne!(generate(&spec, 9).unwrap(), generate(&spec, 10).unwrap());
}

#[test]
fn invalid_specs_are_rejected() {
    let mut spec = SynthSpec::shared_vocabulary(2, 1, 0);
    spec.packets_per_flow = (0, 3);
    assert!(generate(&spec, 0).is_err());
    let mut spec = SynthSpec::shared_vocabulary(2, 1, 0);
    spec.recipes[1] = spec.recipes[0].clone();
    assert!(spec.validate().is_err());
    let mut spec = SynthSpec::shared_vocabulary(2, 1, 0);
    spec.recipes[0].noise_rate = 1.0;
    assert!(spec.validate().is_err());
}

fn payload_histogram(flows: &[TrafficFlow], class: usize) -> [u64; 256] {
    let mut h = [0u64; 256];
    for f in flows.iter().filter(|f| f.label == class) {
        for p in &f.packets {
            for &b in &p.payload_bytes {
                h[b as usize] += 1;
            }
        }
    }
    h
}

#[test]
fn seeds_share_per_class_byte_distribution() {
    let spec = SynthSpec::shared_vocabulary(3, 60, 4);
    let a = generate(&spec, 1).unwrap();
    let b = generate(&spec, 2).unwrap();
    assert_ne!(a, b);
    for class in 0..3 {
        let (ha, hb) = (payload_histogram(&a, class), payload_histogram(&b, class));
        let (na, nb) = (ha.iter().sum::<u64>() as f64, hb.iter().sum::<u64>() as f64);
        let mut stat = 0.0;
        let mut bins = 0;
        for v in 0..256 {
            let pooled = (ha[v] + hb[v]) as f64;
            if pooled == 0.0 {
                continue;
            }
            bins += 1;
            let ea = pooled * na / (na + nb);
            let eb = pooled * nb / (na + nb);
            stat += (ha[v] as f64 - ea).powi(2) / ea + (hb[v] as f64 - eb).powi(2) / eb;
        }
        let p = 1.0 - ChiSquared::new((bins - 1) as f64).unwrap().cdf(stat);
        assert!(p > 1e-3, "class {class}: chi2 {stat} over {bins} bins, p = {p}");
    }
}

#[test]
fn disjoint_vocabularies_are_separable_by_unigram_counts() {
    let spec = SynthSpec::disjoint_vocabulary(4, 30, 2);
    let flows = generate(&spec, 5).unwrap();
    let vocab: Vec<BTreeSet<u8>> = spec
        .recipes
        .iter()
        .map(|r| r.ngrams.iter().flatten().copied().collect())
        .collect();
    for f in &flows {
        for p in &f.packets {
            let scores: Vec<usize> = vocab
                .iter()
                .map(|v| p.payload_bytes.iter().filter(|b| v.contains(b)).count())
                .collect();
            let best = (0..scores.len()).max_by_key(|&c| (scores[c], std::cmp::Reverse(c))).unwrap();
            assert_eq!(best, f.label);
        }
    }
}

use std::collections::BTreeSet;

#[test]
fn ablation_axes_enumerate_points() {
    let base = TrainConfig::default();
    assert_eq!(AblationAxis::Views.points(&base).len(), 5);
    assert_eq!(AblationAxis::Pairs.points(&base).len(), 10);
    let hetero = AblationAxis::Hetero.points(&base);
    assert_eq!(hetero.len(), 2);
    assert!(hetero[0].1.heterogeneous && !hetero[1].1.heterogeneous);
    assert_eq!(AblationAxis::Alpha(vec![0.0, 0.5, 1.0]).points(&base).len(), 3);
    assert_eq!(
        AblationAxis::Pairs.views_needed(&base).into_iter().collect::<Vec<_>>(),
        vec![2, 4, 6, 8, 10]
    );
    let table = AblationTable {
        rows: vec![AblationRow {
            axis: "hetero".into(),
            point: "homogeneous".into(),
            metrics: crate::train::Metrics::from_predictions(&[0, 1], &[0, 1], &[0], &[0]),
            best_epoch: 2,
            wall_clock_secs: 1.5,
        }],
    };
    let csv = table.to_csv();
    assert_eq!(csv.lines().count(), 2);
    assert!(csv.lines().nth(1).unwrap().starts_with("hetero,homogeneous,1,1,1,1,2,"));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn generated_flows_pass_ingest_invariants(seed in any::<u64>(), classes in 1usize..5, per_class in 1usize..4) {
        let spec = SynthSpec::shared_vocabulary(classes, per_class, seed);
        let flows = generate(&spec, seed).unwrap();
        prop_assert_eq!(flows.len(), classes * per_class);
        for f in &flows {
            prop_assert!(f.validate().is_ok());
            prop_assert!((5..=10).contains(&f.packets.len()));
            prop_assert!(f.packets.iter().all(|p| (16..=32).contains(&p.payload_bytes.len())));
        }
    }
}
