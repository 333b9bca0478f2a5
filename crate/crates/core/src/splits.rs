//! Subject-independent cross-validation folds and the pre-training-set
//! sub-sampling strategies (by image count, by subject count), optionally
//! gender balanced.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::batch::mix_seed;
use crate::error::{Error, Result};
use crate::manifest::{Gender, Manifest};

// Domain tags for deriving independent rng streams from one user seed.
const TAG_KFOLD: u64 = 0x4b464f4c44;
const TAG_IMAGES: u64 = 0x494d47;
const TAG_SUBJECTS: u64 = 0x535542;
const TAG_CAP: u64 = 0x434150;

/// Assignment of every subject to one of k folds.
#[derive(Debug, Clone)]
pub struct FoldAssignment {
    pub k: usize,
    pub fold_of_subject: BTreeMap<String, usize>,
}

impl FoldAssignment {
    pub fn test_subjects(&self, fold: usize) -> Vec<String> {
        self.fold_of_subject
            .iter()
            .filter(|(_, &f)| f == fold)
            .map(|(s, _)| s.clone())
            .collect()
    }

    pub fn train_subjects(&self, fold: usize) -> Vec<String> {
        self.fold_of_subject
            .iter()
            .filter(|(_, &f)| f != fold)
            .map(|(s, _)| s.clone())
            .collect()
    }

    /// Subjects per fold.
    pub fn fold_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0usize; self.k];
        for &f in self.fold_of_subject.values() {
            sizes[f] += 1;
        }
        sizes
    }

    /// Records of the manifest belonging to fold `fold` (the test split).
    pub fn test_split(&self, manifest: &Manifest, fold: usize) -> Manifest {
        manifest.filtered(|r| self.fold_of_subject.get(&r.subject_id) == Some(&fold))
    }

    /// Records of all other folds (the train split).
    pub fn train_split(&self, manifest: &Manifest, fold: usize) -> Manifest {
        manifest.filtered(|r| {
            self.fold_of_subject
                .get(&r.subject_id)
                .map(|&f| f != fold)
                .unwrap_or(false)
        })
    }
}

/// Partition subjects into k folds of sizes differing by at most one,
/// deterministically for a given seed.
pub fn subject_kfold(manifest: &Manifest, k: usize, seed: u64) -> Result<FoldAssignment> {
    if k == 0 {
        return Err(Error::config("k must be >= 1"));
    }
    let mut subjects = manifest.subjects();
    if subjects.len() < k {
        return Err(Error::config(format!(
            "{} distinct subjects but k={k} folds requested",
            subjects.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[seed, TAG_KFOLD]));
    subjects.shuffle(&mut rng);
    let fold_of_subject = subjects
        .into_iter()
        .enumerate()
        .map(|(i, s)| (s, i % k))
        .collect();
    Ok(FoldAssignment { k, fold_of_subject })
}

fn pick<Item: Clone>(pool: &[Item], n: usize, rng: &mut ChaCha8Rng) -> Vec<Item> {
    let mut idx: Vec<usize> = (0..pool.len()).collect();
    idx.shuffle(rng);
    let mut chosen: Vec<usize> = idx.into_iter().take(n).collect();
    chosen.sort_unstable();
    chosen.into_iter().map(|i| pool[i].clone()).collect()
}

/// Uniform image-level subset, ignoring subject identity. When balanced,
/// half the rows come from each gender (any odd remainder goes to the male
/// half) and rows of unknown gender are not eligible.
pub fn sample_by_images(manifest: &Manifest, n_images: usize, gender_balanced: bool, seed: u64) -> Result<Manifest> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[seed, TAG_IMAGES]));
    let selected: Vec<usize> = if gender_balanced {
        let male: Vec<usize> = indices_of(manifest, Gender::Male);
        let female: Vec<usize> = indices_of(manifest, Gender::Female);
        let n_male = n_images / 2 + n_images % 2;
        let n_female = n_images / 2;
        if male.len() < n_male || female.len() < n_female {
            return Err(Error::config(format!(
                "balanced sample of {n_images} images needs {n_male} male / {n_female} female rows, \
                 manifest has {} / {}",
                male.len(),
                female.len()
            )));
        }
        let mut sel = pick(&male, n_male, &mut rng);
        sel.extend(pick(&female, n_female, &mut rng));
        sel.sort_unstable();
        sel
    } else {
        if manifest.len() < n_images {
            return Err(Error::config(format!(
                "cannot sample {n_images} images from {} rows",
                manifest.len()
            )));
        }
        let all: Vec<usize> = (0..manifest.len()).collect();
        pick(&all, n_images, &mut rng)
    };

    Ok(manifest.subset(&selected))
}

/// Select n subjects uniformly (balanced across gender when requested) and
/// emit their images — all of them, or up to `per_subject_cap` each.
pub fn sample_by_subjects(
    manifest: &Manifest,
    n_subjects: usize,
    gender_balanced: bool,
    seed: u64,
    per_subject_cap: Option<usize>,
) -> Result<Manifest> {
    let subjects = manifest.subjects();
    let gender_of = |s: &str| {
        manifest
            .records
            .iter()
            .find(|r| r.subject_id == s)
            .map(|r| r.gender)
            .unwrap_or(Gender::Unknown)
    };

    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[seed, TAG_SUBJECTS]));
    let chosen: Vec<String> = if gender_balanced {
        let male: Vec<String> = subjects.iter().filter(|s| gender_of(s) == Gender::Male).cloned().collect();
        let female: Vec<String> = subjects.iter().filter(|s| gender_of(s) == Gender::Female).cloned().collect();
        let n_male = n_subjects / 2 + n_subjects % 2;
        let n_female = n_subjects / 2;
        if male.len() < n_male || female.len() < n_female {
            return Err(Error::config(format!(
                "balanced sample of {n_subjects} subjects needs {n_male} male / {n_female} female, \
                 manifest has {} / {}",
                male.len(),
                female.len()
            )));
        }
        let mut sel = pick(&male, n_male, &mut rng);
        sel.extend(pick(&female, n_female, &mut rng));
        sel
    } else {
        if subjects.len() < n_subjects {
            return Err(Error::config(format!(
                "cannot sample {n_subjects} subjects from {}",
                subjects.len()
            )));
        }
        pick(&subjects, n_subjects, &mut rng)
    };

    let chosen_set: std::collections::HashSet<&str> = chosen.iter().map(String::as_str).collect();
    let mut keep: Vec<usize> = (0..manifest.len())
        .filter(|&i| chosen_set.contains(manifest.records[i].subject_id.as_str()))
        .collect();

    if let Some(cap) = per_subject_cap {
        let mut by_subject: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
        for &i in &keep {
            by_subject.entry(manifest.records[i].subject_id.as_str()).or_default().push(i);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[seed, TAG_CAP]));
        keep = Vec::new();
        for (_, idxs) in by_subject {
            keep.extend(pick(&idxs, cap.min(idxs.len()), &mut rng));
        }
        keep.sort_unstable();
    }

    Ok(manifest.subset(&keep))
}

fn indices_of(manifest: &Manifest, gender: Gender) -> Vec<usize> {
    (0..manifest.len()).filter(|&i| manifest.records[i].gender == gender).collect()
}

#[cfg(test)]
pub(crate) mod test_support {
    use super::*;
    use crate::manifest::{LabelKind, SampleRecord};

    /// In-memory manifest: `images_per_subject` rows per subject, alternating
    /// gender by subject index.
    pub fn synthetic_manifest(n_subjects: usize, images_per_subject: usize, n_labels: usize) -> Manifest {
        let mut records = Vec::new();
        for s in 0..n_subjects {
            let gender = if s % 2 == 0 { Gender::Male } else { Gender::Female };
            for i in 0..images_per_subject {
                records.push(SampleRecord {
                    image_ref: format!("img/s{s:04}_i{i:04}.png"),
                    subject_id: format!("subj{s:04}"),
                    gender,
                    region: "synth".into(),
                    labels: vec![((s + i) % 2) as u8; n_labels],
                });
            }
        }
        Manifest {
            au_columns: (1..=n_labels).map(|i| format!("AU{i:02}")).collect(),
            label_kind: LabelKind::Binary,
            records,
            base_dir: std::path::PathBuf::from("."),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::test_support::synthetic_manifest;
    use super::*;
    use std::collections::HashSet;

    #[test]
    fn twenty_seven_subjects_three_equal_folds() {
        let m = synthetic_manifest(27, 4, 3);
        let folds = subject_kfold(&m, 3, 0).unwrap();
        assert_eq!(folds.fold_sizes(), vec![9, 9, 9]);
    }

    #[test]
    fn folds_partition_the_manifest() {
        let m = synthetic_manifest(10, 5, 2);
        let folds = subject_kfold(&m, 3, 42).unwrap();
        let mut seen = HashSet::new();
        let mut total = 0usize;
        for f in 0..3 {
            let test = folds.test_split(&m, f);
            let train = folds.train_split(&m, f);
            assert_eq!(test.len() + train.len(), m.len());
            let test_subjects: HashSet<_> = test.records.iter().map(|r| r.subject_id.clone()).collect();
            let train_subjects: HashSet<_> = train.records.iter().map(|r| r.subject_id.clone()).collect();
            assert!(test_subjects.is_disjoint(&train_subjects), "subject leakage in fold {f}");
            for r in &test.records {
                assert!(seen.insert(r.image_ref.clone()), "{} in two folds", r.image_ref);
            }
            total += test.len();
        }
        assert_eq!(total, m.len());
    }

    #[test]
    fn kfold_is_seed_deterministic() {
        let m = synthetic_manifest(30, 2, 2);
        let a = subject_kfold(&m, 3, 7).unwrap();
        let b = subject_kfold(&m, 3, 7).unwrap();
        assert_eq!(a.fold_of_subject, b.fold_of_subject);
        let c = subject_kfold(&m, 3, 8).unwrap();
        assert_ne!(a.fold_of_subject, c.fold_of_subject);
    }

    #[test]
    fn too_few_subjects_is_config_error() {
        let m = synthetic_manifest(2, 3, 1);
        assert!(subject_kfold(&m, 3, 0).is_err());
    }

    #[test]
    fn balanced_thousand_images_is_500_500() {
        let m = synthetic_manifest(100, 40, 2); // 2000 male + 2000 female rows
        let s = sample_by_images(&m, 1000, true, 5).unwrap();
        assert_eq!(s.len(), 1000);
        let male = s.records.iter().filter(|r| r.gender == Gender::Male).count();
        assert_eq!(male, 500);
    }

    #[test]
    fn full_size_sample_is_identity() {
        let m = synthetic_manifest(10, 10, 2);
        let s = sample_by_images(&m, 100, false, 3).unwrap();
        let a: Vec<_> = m.records.iter().map(|r| r.image_ref.clone()).collect();
        let b: Vec<_> = s.records.iter().map(|r| r.image_ref.clone()).collect();
        assert_eq!(a, b);

        let t = sample_by_subjects(&m, 10, false, 3, None).unwrap();
        assert_eq!(t.len(), 100);
    }

    #[test]
    fn insufficient_images_error_reports_counts() {
        let m = synthetic_manifest(4, 2, 1);
        match sample_by_images(&m, 100, false, 0) {
            Err(Error::Config(msg)) => assert!(msg.contains('8'), "message: {msg}"),
            other => panic!("expected config error, got {:?}", other.map(|m| m.len())),
        }
    }

    #[test]
    fn subject_sample_balanced_and_exact() {
        let m = synthetic_manifest(40, 5, 2);
        let s = sample_by_subjects(&m, 12, true, 9, None).unwrap();
        let subjects = s.subjects();
        assert_eq!(subjects.len(), 12);
        let male = subjects
            .iter()
            .filter(|id| s.records.iter().find(|r| &r.subject_id == *id).unwrap().gender == Gender::Male)
            .count();
        assert_eq!(male, 6);
        assert_eq!(s.len(), 12 * 5);
    }

    #[test]
    fn per_subject_cap_limits_rows() {
        let m = synthetic_manifest(10, 8, 1);
        let s = sample_by_subjects(&m, 4, false, 1, Some(3)).unwrap();
        assert_eq!(s.subjects().len(), 4);
        assert_eq!(s.len(), 12);
    }

    #[test]
    fn sampling_is_deterministic_per_seed() {
        let m = synthetic_manifest(50, 10, 2);
        for seed in [0u64, 1, 99] {
            let a = sample_by_images(&m, 50, true, seed).unwrap();
            let b = sample_by_images(&m, 50, true, seed).unwrap();
            let refs = |mm: &Manifest| mm.records.iter().map(|r| r.image_ref.clone()).collect::<Vec<_>>();
            assert_eq!(refs(&a), refs(&b));
        }
    }
}
