//! Property tests for fold assignment and sampling: no subject leakage,
//! balanced sizes, determinism, and inclusion uniformity.

use aupt_core::manifest::Gender;
use aupt_core::splits::{sample_by_images, sample_by_subjects, subject_kfold};
use aupt_core::synth::{manifest_skeleton, SynthSpec};
use proptest::prelude::*;
use std::collections::HashSet;

fn spec(n_subjects: usize, images: usize) -> SynthSpec {
    SynthSpec {
        n_subjects,
        images_per_subject: images,
        n_labels: 3,
        label_noise_rate: 0.1,
        image_size: 16,
        seed: 9,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn kfold_partitions_without_leakage(
        n_subjects in 3usize..40,
        images in 1usize..6,
        k in 2usize..6,
        seed in 0u64..1000,
    ) {
        prop_assume!(n_subjects >= k);
        let (manifest, _) = manifest_skeleton(&spec(n_subjects, images), ".").unwrap();
        let folds = subject_kfold(&manifest, k, seed).unwrap();

        let sizes = folds.fold_sizes();
        prop_assert_eq!(sizes.iter().sum::<usize>(), n_subjects);
        prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);

        for fold in 0..k {
            let test: HashSet<_> = folds.test_subjects(fold).into_iter().collect();
            let train: HashSet<_> = folds.train_subjects(fold).into_iter().collect();
            prop_assert!(test.is_disjoint(&train));
            prop_assert_eq!(test.len() + train.len(), n_subjects);
        }
    }

    #[test]
    fn balanced_image_sampling_holds_the_gender_budget(
        n_subjects in 4usize..30,
        images in 2usize..8,
        seed in 0u64..500,
    ) {
        let (manifest, _) = manifest_skeleton(&spec(n_subjects, images), ".").unwrap();
        let male_rows = manifest.records.iter().filter(|r| r.gender == Gender::Male).count();
        let female_rows = manifest.len() - male_rows;
        let n = 2 * male_rows.min(female_rows).min(10);
        prop_assume!(n >= 2);

        let s = sample_by_images(&manifest, n, true, seed).unwrap();
        prop_assert_eq!(s.len(), n);
        let m = s.records.iter().filter(|r| r.gender == Gender::Male).count();
        let f = s.len() - m;
        prop_assert!(m.abs_diff(f) <= 1);
    }

    #[test]
    fn subject_sampling_is_exact_and_balanced(
        n_subjects in 6usize..30,
        seed in 0u64..500,
    ) {
        let (manifest, _) = manifest_skeleton(&spec(n_subjects, 3), ".").unwrap();
        let n = (n_subjects / 2).max(2);
        let s = sample_by_subjects(&manifest, n, true, seed, None).unwrap();
        let subjects = s.subjects();
        prop_assert_eq!(subjects.len(), n);
        let m = subjects
            .iter()
            .filter(|id| s.records.iter().find(|r| &&r.subject_id == id).unwrap().gender == Gender::Male)
            .count();
        prop_assert!(m.abs_diff(n - m) <= 1);
        // All images of each chosen subject come along.
        prop_assert_eq!(s.len(), n * 3);
    }
}

#[test]
fn distinct_seeds_give_distinct_assignments() {
    let (manifest, _) = manifest_skeleton(&spec(30, 2), ".").unwrap();
    let mut seen = HashSet::new();
    for seed in 0..100u64 {
        let folds = subject_kfold(&manifest, 3, seed).unwrap();
        let key: Vec<usize> = manifest.subjects().iter().map(|s| folds.fold_of_subject[s]).collect();
        seen.insert(key);
    }
    // 30 subjects over 3 folds: collisions across 100 seeds would indicate
    // a broken shuffle.
    assert!(seen.len() >= 99, "only {} distinct assignments", seen.len());
}

#[test]
fn image_sampling_inclusion_is_binomially_uniform() {
    // Every record's inclusion count over many seeds stays within 5-sigma
    // binomial bounds (scaled-down version of the uniformity contract).
    let (manifest, _) = manifest_skeleton(&spec(100, 20), ".").unwrap(); // 2000 rows
    let n = 100usize;
    let trials = 1000u64;
    let mut counts = vec![0u32; manifest.len()];
    let keys: std::collections::HashMap<&str, usize> = manifest
        .records
        .iter()
        .enumerate()
        .map(|(i, r)| (r.image_ref.as_str(), i))
        .collect();
    for seed in 0..trials {
        let s = sample_by_images(&manifest, n, false, seed).unwrap();
        for r in &s.records {
            counts[keys[r.image_ref.as_str()]] += 1;
        }
    }
    let p = n as f64 / manifest.len() as f64;
    let mean = trials as f64 * p;
    let sd = (trials as f64 * p * (1.0 - p)).sqrt();
    let (lo, hi) = (mean - 5.0 * sd, mean + 5.0 * sd);
    for (i, &c) in counts.iter().enumerate() {
        assert!(
            (c as f64) > lo && (c as f64) < hi,
            "record {i} included {c} times, outside [{lo:.1}, {hi:.1}]"
        );
    }
}
