//! Seeded synthetic interaction data with known structure.

use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{DatasetError, InteractionDataset, SplitBundle, SplitKind};

pub const USER_ID_BASE: u64 = 1;
pub const ITEM_ID_BASE: u64 = 1001;

/// Users and items partitioned into communities; every interaction stays
/// inside the user's community, with Zipf-weighted item popularity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CommunityConfig {
    pub users: usize,
    pub items: usize,
    pub communities: usize,
    pub train_per_user: usize,
    pub test_per_user: usize,
    /// Weight of the r-th most popular item of a community is `r^-s`.
    pub zipf_exponent: f64,
    pub seed: u64,
}

impl Default for CommunityConfig {
    fn default() -> Self {
        Self {
            users: 200,
            items: 100,
            communities: 2,
            train_per_user: 10,
            test_per_user: 2,
            zipf_exponent: 1.0,
            seed: 0,
        }
    }
}

impl CommunityConfig {
    pub fn user_community(&self, u: usize) -> usize {
        u % self.communities
    }

    pub fn item_community(&self, i: usize) -> usize {
        i * self.communities / self.items
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticData {
    /// Train and test together, timestamped in draw order.
    pub full: InteractionDataset,
    /// Train holds each user's first draws, test the rest; validation is empty.
    pub bundle: SplitBundle,
}

fn invalid(msg: &str) -> DatasetError {
    DatasetError::InvalidParameter(msg.into())
}

/// External ids are `USER_ID_BASE + u` and `ITEM_ID_BASE + i`; internal
/// indices equal `u` and `i`.
pub fn two_community(cfg: &CommunityConfig) -> Result<SyntheticData, DatasetError> {
    if cfg.communities == 0 || cfg.users < cfg.communities || cfg.items < cfg.communities {
        return Err(invalid("need at least one user and one item per community"));
    }
    let per_user = cfg.train_per_user + cfg.test_per_user;
    let smallest = cfg.items / cfg.communities;
    if per_user > smallest || cfg.train_per_user == 0 {
        return Err(invalid("each user needs 1..=community-size interactions"));
    }
    if !(cfg.zipf_exponent >= 0.0 && cfg.zipf_exponent.is_finite()) {
        return Err(invalid("zipf_exponent must be finite and non-negative"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let members: Vec<Vec<usize>> = (0..cfg.communities)
        .map(|c| {
            (0..cfg.items)
                .filter(|&i| cfg.item_community(i) == c)
                .collect()
        })
        .collect();
    // popularity rank is a random permutation within each community
    let ranked: Vec<Vec<usize>> = members
        .iter()
        .map(|m| {
            let mut m = m.clone();
            m.shuffle(&mut rng);
            m
        })
        .collect();
    let mut lists: Vec<Vec<usize>> = Vec::with_capacity(cfg.users);
    for u in 0..cfg.users {
        let pool = &ranked[cfg.user_community(u)];
        let weight = |r: usize| ((r + 1) as f64).powf(-cfg.zipf_exponent);
        let picked = rand::seq::index::sample_weighted(&mut rng, pool.len(), weight, per_user)
            .map_err(|e| invalid(&e.to_string()))?;
        let mut items: Vec<usize> = picked.into_iter().map(|r| pool[r]).collect();
        items.shuffle(&mut rng);
        lists.push(items);
    }
    let record = |u: usize, i: usize, t: usize| {
        (
            USER_ID_BASE + u as u64,
            ITEM_ID_BASE + i as u64,
            Some(t as i64),
        )
    };
    let mut ids = crate::dataset::IdMaps::default();
    for u in 0..cfg.users {
        ids.users.intern(USER_ID_BASE + u as u64);
    }
    for i in 0..cfg.items {
        ids.items.intern(ITEM_ID_BASE + i as u64);
    }
    let ids = Arc::new(ids);
    let full = InteractionDataset::from_records_with_ids(
        Arc::clone(&ids),
        lists
            .iter()
            .enumerate()
            .flat_map(|(u, l)| l.iter().enumerate().map(move |(t, &i)| record(u, i, t))),
    )?;
    let part = |range: std::ops::Range<usize>| {
        InteractionDataset::from_records_with_ids(
            Arc::clone(&ids),
            lists.iter().enumerate().flat_map(|(u, l)| {
                l[range.clone()]
                    .iter()
                    .enumerate()
                    .map(move |(t, &i)| record(u, i, t + range.start))
            }),
        )
    };
    let train = part(0..cfg.train_per_user)?;
    let test = part(cfg.train_per_user..per_user)?;
    let validation = train.empty_like();
    let bundle = SplitBundle::new(train, validation, test, SplitKind::RandomHoldout)?;
    Ok(SyntheticData { full, bundle })
}

/// `users` users with `items_per_user` distinct uniform items each out of
/// `items`, timestamped in draw order.
pub fn toy_dataset(
    users: usize,
    items: usize,
    items_per_user: usize,
    seed: u64,
) -> Result<InteractionDataset, DatasetError> {
    if users == 0 || items_per_user == 0 || items_per_user > items {
        return Err(invalid("need users > 0 and 1 <= items_per_user <= items"));
    }
    let mut ids = crate::dataset::IdMaps::default();
    for u in 0..users {
        ids.users.intern(USER_ID_BASE + u as u64);
    }
    for i in 0..items {
        ids.items.intern(ITEM_ID_BASE + i as u64);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut records = Vec::with_capacity(users * items_per_user);
    for u in 0..users {
        let picked = rand::seq::index::sample(&mut rng, items, items_per_user);
        for (t, i) in picked.into_iter().enumerate() {
            records.push((
                USER_ID_BASE + u as u64,
                ITEM_ID_BASE + i as u64,
                Some(t as i64),
            ));
        }
    }
    InteractionDataset::from_records_with_ids(Arc::new(ids), records)
}
