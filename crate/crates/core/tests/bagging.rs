use std::collections::HashSet;

use amilpath::bagging::{build_bags, split_cohorts, BagConfig, CohortSize, SplitConfig};
use amilpath::ingest::AlnLabel;

fn cohort(n: usize, n_pos: usize) -> Vec<(String, AlnLabel)> {
    (0..n)
        .map(|i| {
            (
                format!("slide{i:04}"),
                if i < n_pos {
                    AlnLabel::Low
                } else {
                    AlnLabel::N0
                },
            )
        })
        .collect()
}

#[test]
fn full_cohort_split_sizes() {
    let cfg = SplitConfig {
        test: CohortSize::Count(218),
        val_of_train: CohortSize::Ratio(0.25),
        seed: 3,
        stratify: true,
    };
    let s = split_cohorts(&cohort(1058, 403), &cfg).unwrap();
    assert_eq!(s.test.len(), 218);
    assert_eq!(s.train.len() + s.val.len(), 840);
    assert_eq!((s.train.len(), s.val.len()), (630, 210));
    let all: HashSet<&String> = s.train.iter().chain(&s.val).chain(&s.test).collect();
    assert_eq!(all.len(), 1058);
}

#[test]
fn ratio_split_of_full_cohort() {
    let cfg = SplitConfig {
        seed: 3,
        ..SplitConfig::default()
    };
    let s = split_cohorts(&cohort(1058, 403), &cfg).unwrap();
    assert!(s.test.len() == 211 || s.test.len() == 212, "{}", s.test.len());
    assert_eq!(s.train.len() + s.val.len() + s.test.len(), 1058);
}

#[test]
fn small_split_is_deterministic() {
    let slides = cohort(5, 2);
    let cfg = SplitConfig {
        stratify: false,
        seed: 11,
        ..SplitConfig::default()
    };
    let a = split_cohorts(&slides, &cfg).unwrap();
    let b = split_cohorts(&slides, &cfg).unwrap();
    assert_eq!(a, b);
}

/// P(all k items seen in n uniform draws), by inclusion-exclusion.
fn coverage_probability(k: usize, n: i32) -> f64 {
    let mut binom = 1.0;
    let mut p = 0.0;
    for j in 0..=k {
        if j > 0 {
            binom = binom * (k - j + 1) as f64 / j as f64;
        }
        let sign = if j % 2 == 0 { 1.0 } else { -1.0 };
        p += sign * binom * ((k - j) as f64 / k as f64).powi(n);
    }
    p
}

#[test]
fn replacement_coverage_matches_coupon_collector() {
    let refs: Vec<String> = (0..6).map(|i| format!("p{i}")).collect();
    let trials = 1000;
    let mut covered = 0;
    for t in 0..trials {
        let cfg = BagConfig {
            instances: 10,
            bags_per_slide: Some(1),
            seed: t,
            attach_clinical: false,
        };
        let bag = &build_bags("s", &refs, None, None, &cfg).unwrap()[0];
        assert_eq!(bag.instance_refs.len(), 10);
        let seen: HashSet<&String> = bag.instance_refs.iter().collect();
        if seen.len() == 6 {
            covered += 1;
        }
    }
    let p = coverage_probability(6, 10);
    let freq = f64::from(covered) / trials as f64;
    let se = (p * (1.0 - p) / trials as f64).sqrt();
    assert!((freq - p).abs() < 4.0 * se, "freq {freq} vs {p}");
}

#[test]
fn coupon_formula_sanity() {
    assert!((coverage_probability(2, 3) - 0.75).abs() < 1e-12);
    assert!((coverage_probability(6, 6) - 720.0 / 46656.0).abs() < 1e-12);
}
