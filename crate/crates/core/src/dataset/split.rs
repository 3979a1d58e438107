use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{DatasetError, Interaction, InteractionDataset};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitKind {
    RandomHoldout,
    LeaveLastTwo,
}

/// Train, validation and test views over one id space. The three are
/// pairwise disjoint on `(user, item)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitBundle {
    pub train: InteractionDataset,
    pub validation: InteractionDataset,
    pub test: InteractionDataset,
    pub kind: SplitKind,
}

impl SplitBundle {
    /// Validates shared ids and pairwise disjointness.
    pub fn new(
        train: InteractionDataset,
        validation: InteractionDataset,
        test: InteractionDataset,
        kind: SplitKind,
    ) -> Result<Self, DatasetError> {
        if !train.shares_ids(&validation) || !train.shares_ids(&test) {
            return Err(DatasetError::IdMapMismatch);
        }
        let train_pairs = train.pair_set();
        let val_pairs = validation.pair_set();
        for (u, i) in validation.pairs().chain(test.pairs()) {
            if train_pairs.contains(&(u, i)) {
                return Err(DatasetError::SplitOverlap {
                    user: train.external_user(u),
                    item: train.external_item(i),
                });
            }
        }
        for (u, i) in test.pairs() {
            if val_pairs.contains(&(u, i)) {
                return Err(DatasetError::SplitOverlap {
                    user: train.external_user(u),
                    item: train.external_item(i),
                });
            }
        }
        Ok(Self {
            train,
            validation,
            test,
            kind,
        })
    }
}

fn assemble(
    ds: &InteractionDataset,
    parts: [Vec<Vec<Interaction>>; 3],
    kind: SplitKind,
) -> Result<SplitBundle, DatasetError> {
    let [train, val, test] = parts;
    let ids = Arc::clone(ds.ids());
    Ok(SplitBundle {
        train: InteractionDataset::from_user_lists(Arc::clone(&ids), train)?,
        validation: InteractionDataset::from_user_lists(Arc::clone(&ids), val)?,
        test: InteractionDataset::from_user_lists(ids, test)?,
        kind,
    })
}

/// Per-user uniform holdout: `round(n * test_fraction)` test and
/// `round(n * val_fraction)` validation interactions, the rest train.
pub fn split_random_holdout(
    ds: &InteractionDataset,
    test_fraction: f64,
    val_fraction: f64,
    seed: u64,
) -> Result<SplitBundle, DatasetError> {
    if !(test_fraction >= 0.0 && val_fraction >= 0.0 && test_fraction + val_fraction < 1.0) {
        return Err(DatasetError::InvalidParameter(format!(
            "split fractions must be nonnegative with sum below 1 (test {test_fraction}, validation {val_fraction})"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut parts: [Vec<Vec<Interaction>>; 3] = Default::default();
    for (u, list) in ds.user_lists().iter().enumerate() {
        let n = list.len();
        let n_test = (n as f64 * test_fraction).round() as usize;
        let n_val = (n as f64 * val_fraction).round() as usize;
        if n < 3 || n_test + n_val >= n {
            return Err(DatasetError::TooFewInteractions {
                user: ds.external_user(u),
                count: n,
                required: (n_test + n_val + 1).max(3),
            });
        }
        let picked = rand::seq::index::sample(&mut rng, n, n_test + n_val).into_vec();
        // 0 = train, 1 = validation, 2 = test
        let mut role = vec![0u8; n];
        for (k, &pos) in picked.iter().enumerate() {
            role[pos] = if k < n_test { 2 } else { 1 };
        }
        let mut buckets: [Vec<Interaction>; 3] = Default::default();
        for (it, r) in list.iter().zip(role) {
            buckets[r as usize].push(*it);
        }
        for (part, bucket) in parts.iter_mut().zip(buckets) {
            part.push(bucket);
        }
    }
    assemble(ds, parts, SplitKind::RandomHoldout)
}

/// Last interaction to test, second-to-last to validation, rest to train.
pub fn split_leave_last_two(ds: &InteractionDataset) -> Result<SplitBundle, DatasetError> {
    if !ds.has_timestamps() {
        return Err(DatasetError::MissingTimestamps);
    }
    let mut parts: [Vec<Vec<Interaction>>; 3] = Default::default();
    for (u, list) in ds.user_lists().iter().enumerate() {
        let n = list.len();
        if n < 3 {
            return Err(DatasetError::TooFewInteractions {
                user: ds.external_user(u),
                count: n,
                required: 3,
            });
        }
        parts[0].push(list[..n - 2].to_vec());
        parts[1].push(vec![list[n - 2]]);
        parts[2].push(vec![list[n - 1]]);
    }
    assemble(ds, parts, SplitKind::LeaveLastTwo)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::collections::HashSet;

    fn timed(user_items: &[(u64, &[u64])]) -> InteractionDataset {
        let mut recs = Vec::new();
        let mut t = 0;
        for (u, items) in user_items {
            for &i in *items {
                t += 1;
                recs.push((*u, i, Some(t)));
            }
        }
        InteractionDataset::from_records(recs)
    }

    #[test]
    fn leave_last_two_sequence() {
        let ds = timed(&[(1, &[10, 11, 12, 13])]);
        let b = split_leave_last_two(&ds).unwrap();
        assert_eq!(b.train.user_items(0), vec![0, 1]);
        assert_eq!(b.validation.user_items(0), vec![2]);
        assert_eq!(b.test.user_items(0), vec![3]);
    }

    #[test]
    fn leave_last_two_three_items() {
        let ds = timed(&[(1, &[10, 11, 12])]);
        let b = split_leave_last_two(&ds).unwrap();
        assert_eq!(b.train.user(0).len(), 1);
    }

    #[test]
    fn leave_last_two_requires_timestamps() {
        let ds = InteractionDataset::from_records((0..4).map(|i| (1, i, None)));
        assert!(matches!(
            split_leave_last_two(&ds),
            Err(DatasetError::MissingTimestamps)
        ));
        let short = timed(&[(1, &[10, 11])]);
        assert!(split_leave_last_two(&short).is_err());
    }

    #[test]
    fn holdout_counts_are_forced() {
        let ds = InteractionDataset::from_records((0..10).map(|i| (1, i, None)));
        let b = split_random_holdout(&ds, 0.2, 0.0, 3).unwrap();
        assert_eq!(b.test.num_interactions(), 2);
        assert_eq!(b.train.num_interactions(), 8);
        assert_eq!(split_random_holdout(&ds, 0.2, 0.0, 3).unwrap(), b);
    }

    #[test]
    fn holdout_rejects_bad_fractions() {
        let ds = InteractionDataset::from_records((0..10).map(|i| (1, i, None)));
        assert!(matches!(
            split_random_holdout(&ds, 0.6, 0.5, 0),
            Err(DatasetError::InvalidParameter(_))
        ));
    }

    #[test]
    fn bundle_constructor_detects_overlap() {
        let ds = timed(&[(1, &[10, 11, 12])]);
        let b = split_leave_last_two(&ds).unwrap();
        let err = SplitBundle::new(b.train.clone(), b.train.clone(), b.test.clone(), b.kind);
        assert!(matches!(err, Err(DatasetError::SplitOverlap { .. })));
    }

    proptest! {
        #[test]
        fn holdout_partitions_every_user(
            sizes in proptest::collection::vec(5usize..20, 1..8),
            seed in any::<u64>(),
        ) {
            let recs: Vec<_> = sizes.iter().enumerate()
                .flat_map(|(u, &n)| (0..n as u64).map(move |i| (u as u64, i, None)))
                .collect();
            let ds = InteractionDataset::from_records(recs);
            let b = split_random_holdout(&ds, 0.2, 0.1, seed).unwrap();
            let tr = b.train.pair_set();
            let va = b.validation.pair_set();
            let te = b.test.pair_set();
            prop_assert!(tr.is_disjoint(&va) && tr.is_disjoint(&te) && va.is_disjoint(&te));
            let union: HashSet<_> = tr.union(&va).chain(te.iter()).copied().collect();
            prop_assert_eq!(union, ds.pair_set());
            prop_assert!(b.train.user_degrees().iter().all(|&d| d >= 1));
        }
    }
}
