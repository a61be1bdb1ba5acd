use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::manifest::ClipRecord;
use super::CorpusError;

#[derive(Clone, Debug, PartialEq)]
pub struct SplitSpec {
    /// Train, validation and test fractions of the distinct key values.
    pub fractions: [f64; 3],
    /// Manifest column whose values may not be shared between splits.
    pub disjoint_key: String,
    pub seed: u64,
}

impl SplitSpec {
    pub fn new(fractions: [f64; 3], disjoint_key: impl Into<String>, seed: u64) -> Self {
        Self {
            fractions,
            disjoint_key: disjoint_key.into(),
            seed,
        }
    }

    pub fn validate(&self) -> Result<(), CorpusError> {
        if self.fractions.iter().any(|f| !(*f > 0.0 && *f < 1.0)) {
            return Err(CorpusError::InvalidConfig(format!(
                "split fractions must lie in (0, 1), got {:?}",
                self.fractions
            )));
        }
        let sum: f64 = self.fractions.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(CorpusError::InvalidConfig(format!(
                "split fractions must sum to 1, got {sum}"
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Splits {
    pub train: Vec<ClipRecord>,
    pub validation: Vec<ClipRecord>,
    pub test: Vec<ClipRecord>,
}

/// Key counts for `n` keys: training is rounded up, validation down and test
/// takes the remainder. Every split keeps at least one key when `n >= 3`.
pub fn split_counts(n: usize, fractions: [f64; 3]) -> [usize; 3] {
    let train = (((n as f64) * fractions[0] - 1e-9).ceil().max(0.0) as usize).min(n);
    let val = (((n as f64) * fractions[1] + 1e-9).floor() as usize).min(n - train);
    let mut counts = [train, val, n - train - val];
    for i in 0..3 {
        if counts[i] == 0 {
            let donor = (0..3).max_by_key(|&j| (counts[j], std::cmp::Reverse(j))).unwrap_or(0);
            if counts[donor] > 1 {
                counts[donor] -= 1;
                counts[i] = 1;
            }
        }
    }
    counts
}

/// Partitions the manifest so that no value of `spec.disjoint_key` appears in
/// more than one split. Records keep their input order within a split.
pub fn split_by_key(records: &[ClipRecord], spec: &SplitSpec) -> Result<Splits, CorpusError> {
    spec.validate()?;
    let mut keys = BTreeSet::new();
    for r in records {
        let k = r.key(&spec.disjoint_key).ok_or_else(|| CorpusError::MissingKey {
            clip_id: r.clip_id.clone(),
            key: spec.disjoint_key.clone(),
        })?;
        keys.insert(k.to_string());
    }
    if keys.len() < 3 {
        return Err(CorpusError::TooFewKeys {
            key: spec.disjoint_key.clone(),
            found: keys.len(),
        });
    }
    let mut order: Vec<String> = keys.into_iter().collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(spec.seed));
    let [n_train, n_val, _] = split_counts(order.len(), spec.fractions);
    let assignment: BTreeMap<String, usize> = order
        .into_iter()
        .enumerate()
        .map(|(i, k)| {
            let part = if i < n_train {
                0
            } else if i < n_train + n_val {
                1
            } else {
                2
            };
            (k, part)
        })
        .collect();

    let mut out = Splits::default();
    for r in records {
        let key = r.key(&spec.disjoint_key).expect("checked above");
        match assignment[key] {
            0 => out.train.push(r.clone()),
            1 => out.validation.push(r.clone()),
            _ => out.test.push(r.clone()),
        }
    }
    Ok(out)
}

/// Keeps at most `cap` records per label, chosen uniformly with a seeded
/// generator. Survivors keep their input order.
pub fn cap_per_class(records: &[ClipRecord], cap: usize, seed: u64) -> Vec<ClipRecord> {
    let mut by_label: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, r) in records.iter().enumerate() {
        by_label.entry(&r.label).or_default().push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut keep = vec![false; records.len()];
    for idx in by_label.values_mut() {
        if idx.len() > cap {
            idx.shuffle(&mut rng);
            idx.truncate(cap);
        }
        for &i in idx.iter() {
            keep[i] = true;
        }
    }
    records
        .iter()
        .zip(keep)
        .filter_map(|(r, k)| k.then(|| r.clone()))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::super::manifest::Gender;
    use super::*;

    fn manifest(n_speakers: usize, per: usize) -> Vec<ClipRecord> {
        (0..n_speakers)
            .flat_map(|s| {
                (0..per).map(move |c| ClipRecord {
                    clip_id: format!("spk{s:03}_{c}"),
                    path: format!("spk{s:03}_{c}.wav"),
                    speaker_id: format!("spk{s:03}"),
                    video_id: format!("vid{}", s / 2),
                    gender: Gender::Male,
                    label: format!("L{}", s % 3),
                    duration_s: 8.0,
                })
            })
            .collect()
    }

    fn speakers(rs: &[ClipRecord]) -> BTreeSet<String> {
        rs.iter().map(|r| r.speaker_id.clone()).collect()
    }

    #[test]
    fn ten_speakers_split_seven_one_two() {
        for seed in 0..20 {
            let m = manifest(10, 3);
            let s = split_by_key(&m, &SplitSpec::new([0.7, 0.15, 0.15], "speaker_id", seed)).unwrap();
            let (a, b, c) = (speakers(&s.train), speakers(&s.validation), speakers(&s.test));
            assert_eq!(a.len(), 7);
            assert!((1..=2).contains(&b.len()) && (1..=2).contains(&c.len()));
            assert!(a.is_disjoint(&b) && a.is_disjoint(&c) && b.is_disjoint(&c));
            assert_eq!(s.train.len() + s.validation.len() + s.test.len(), 30);
        }
    }

    #[test]
    fn hundred_speakers_split_seventy_ten_twenty() {
        let m = manifest(100, 1);
        let s = split_by_key(&m, &SplitSpec::new([0.7, 0.1, 0.2], "speaker_id", 3)).unwrap();
        assert_eq!((s.train.len(), s.validation.len(), s.test.len()), (70, 10, 20));
    }

    #[test]
    fn too_few_keys_and_unknown_keys_error() {
        let m = manifest(2, 4);
        assert!(matches!(
            split_by_key(&m, &SplitSpec::new([0.7, 0.15, 0.15], "speaker_id", 0)),
            Err(CorpusError::TooFewKeys { found: 2, .. })
        ));
        let m = manifest(5, 1);
        assert!(split_by_key(&m, &SplitSpec::new([0.7, 0.15, 0.15], "accent", 0)).is_err());
        assert!(split_by_key(&m, &SplitSpec::new([0.7, 0.2, 0.2], "speaker_id", 0)).is_err());
    }

    #[test]
    fn counts_partition_and_stay_nonempty() {
        for n in 3..200 {
            for f in [[0.7, 0.15, 0.15], [0.7, 0.1, 0.2], [0.98, 0.01, 0.01], [0.01, 0.01, 0.98]] {
                let c = split_counts(n, f);
                assert_eq!(c.iter().sum::<usize>(), n);
                assert!(c.iter().all(|&k| k >= 1), "{n} {f:?} {c:?}");
            }
        }
        assert_eq!(split_counts(10, [0.7, 0.15, 0.15]), [7, 1, 2]);
        assert_eq!(split_counts(100, [0.7, 0.1, 0.2]), [70, 10, 20]);
    }

    #[test]
    fn cap_keeps_at_most_cap_per_label() {
        let m = manifest(30, 2);
        let capped = cap_per_class(&m, 5, 9);
        let mut counts = BTreeMap::new();
        for r in &capped {
            *counts.entry(r.label.clone()).or_insert(0) += 1;
        }
        assert!(counts.values().all(|&c| c == 5));
        assert_eq!(capped, cap_per_class(&m, 5, 9));
        assert_eq!(cap_per_class(&m, 1000, 9), m);
    }
}
