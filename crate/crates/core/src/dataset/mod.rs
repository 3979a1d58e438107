//! Implicit-feedback interaction data: loading, k-core filtering, splitting
//! and summary statistics.
//!
//! An [`InteractionDataset`] stores the binary user–item matrix as one
//! ordered item list per user. External identifiers (whatever integers the
//! source file used) are mapped to dense internal indices through [`IdMaps`];
//! every split derived from a dataset shares the same maps so indices stay
//! comparable across train, validation, test and augmented data.

mod filter;
mod io;
mod split;
mod stats;

use std::collections::{HashMap, HashSet};
use std::sync::Arc;

use thiserror::Error;

pub use filter::k_core_filter;
pub use io::{load_interactions, load_interactions_with_ids, parse_interactions, write_tsv};
pub use split::{split_leave_last_two, split_random_holdout, SplitBundle, SplitKind};
pub use stats::{compute_stats, group_users_by_activity, DatasetStats};

pub type UserIdx = usize;
pub type ItemIdx = usize;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("{source_name}: line {line}: {message}")]
    Malformed {
        source_name: String,
        line: usize,
        message: String,
    },
    #[error("{0}: no interactions")]
    Empty(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("k-core filter with min_count {min_count} removed every interaction")]
    EmptyAfterFilter { min_count: usize },
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("user {user} has {count} interactions, {required} required")]
    TooFewInteractions {
        user: u64,
        count: usize,
        required: usize,
    },
    #[error("dataset has no timestamps")]
    MissingTimestamps,
    #[error("cannot form {groups} groups from {users} users")]
    TooFewUsers { users: usize, groups: usize },
    #[error("unknown user id {0}")]
    UnknownUser(u64),
    #[error("unknown item id {0}")]
    UnknownItem(u64),
    #[error("duplicate external id {0} in id map")]
    DuplicateId(u64),
    #[error("splits overlap on (user {user}, item {item})")]
    SplitOverlap { user: u64, item: u64 },
    #[error("datasets do not share id maps")]
    IdMapMismatch,
}

/// Bijection between external integer identifiers and dense indices.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct IdMap {
    external: Vec<u64>,
    index: HashMap<u64, usize>,
}

impl IdMap {
    pub fn new() -> Self {
        Self::default()
    }

    /// Builds a map where position `k` of `external` receives index `k`.
    pub fn from_externals(external: Vec<u64>) -> Result<Self, DatasetError> {
        let mut index = HashMap::with_capacity(external.len());
        for (k, &ext) in external.iter().enumerate() {
            if index.insert(ext, k).is_some() {
                return Err(DatasetError::DuplicateId(ext));
            }
        }
        Ok(Self { external, index })
    }

    /// Returns the index for `ext`, assigning the next free one if unseen.
    pub fn intern(&mut self, ext: u64) -> usize {
        if let Some(&k) = self.index.get(&ext) {
            return k;
        }
        let k = self.external.len();
        self.external.push(ext);
        self.index.insert(ext, k);
        k
    }

    pub fn get(&self, ext: u64) -> Option<usize> {
        self.index.get(&ext).copied()
    }

    pub fn external(&self, idx: usize) -> u64 {
        self.external[idx]
    }

    pub fn externals(&self) -> &[u64] {
        &self.external
    }

    pub fn len(&self) -> usize {
        self.external.len()
    }

    pub fn is_empty(&self) -> bool {
        self.external.is_empty()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct IdMaps {
    pub users: IdMap,
    pub items: IdMap,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Interaction {
    pub item: ItemIdx,
    pub timestamp: Option<i64>,
}

/// The binary interaction matrix as per-user ordered item lists.
///
/// Immutable once built. Construction collapses duplicate pairs (keeping the
/// earliest timestamp) and, when every interaction is timestamped, orders
/// each user's list by time.
#[derive(Debug, Clone, PartialEq)]
pub struct InteractionDataset {
    ids: Arc<IdMaps>,
    users: Vec<Vec<Interaction>>,
}

impl InteractionDataset {
    /// Interns external ids in first-seen order.
    pub fn from_records<I>(records: I) -> Self
    where
        I: IntoIterator<Item = (u64, u64, Option<i64>)>,
    {
        let mut ids = IdMaps::default();
        let mut raw: Vec<(usize, Interaction)> = Vec::new();
        for (u, i, ts) in records {
            let u = ids.users.intern(u);
            let i = ids.items.intern(i);
            raw.push((
                u,
                Interaction {
                    item: i,
                    timestamp: ts,
                },
            ));
        }
        Self::assemble(Arc::new(ids), raw)
    }

    /// Like [`from_records`](Self::from_records) but against fixed id maps;
    /// unknown ids are an error.
    pub fn from_records_with_ids<I>(ids: Arc<IdMaps>, records: I) -> Result<Self, DatasetError>
    where
        I: IntoIterator<Item = (u64, u64, Option<i64>)>,
    {
        let mut raw = Vec::new();
        for (u, i, ts) in records {
            let uu = ids.users.get(u).ok_or(DatasetError::UnknownUser(u))?;
            let ii = ids.items.get(i).ok_or(DatasetError::UnknownItem(i))?;
            raw.push((
                uu,
                Interaction {
                    item: ii,
                    timestamp: ts,
                },
            ));
        }
        Ok(Self::assemble(ids, raw))
    }

    /// Builds a dataset from per-user lists already expressed in internal
    /// indices. Lists are deduplicated and time-sorted like any other input.
    pub fn from_user_lists(
        ids: Arc<IdMaps>,
        lists: Vec<Vec<Interaction>>,
    ) -> Result<Self, DatasetError> {
        if lists.len() > ids.users.len() {
            return Err(DatasetError::InvalidParameter(format!(
                "{} user lists for {} users",
                lists.len(),
                ids.users.len()
            )));
        }
        let num_items = ids.items.len();
        let mut raw = Vec::new();
        for (u, list) in lists.into_iter().enumerate() {
            for it in list {
                if it.item >= num_items {
                    return Err(DatasetError::InvalidParameter(format!(
                        "item index {} out of range {num_items}",
                        it.item
                    )));
                }
                raw.push((u, it));
            }
        }
        Ok(Self::assemble(ids, raw))
    }

    fn assemble(ids: Arc<IdMaps>, raw: Vec<(usize, Interaction)>) -> Self {
        let mut users: Vec<Vec<Interaction>> = vec![Vec::new(); ids.users.len()];
        let mut seen: HashMap<(usize, usize), usize> = HashMap::new();
        let all_timed = raw.iter().all(|(_, it)| it.timestamp.is_some());
        for (u, it) in raw {
            match seen.get(&(u, it.item)) {
                Some(&pos) => {
                    let kept = &mut users[u][pos];
                    if let (Some(old), Some(new)) = (kept.timestamp, it.timestamp) {
                        kept.timestamp = Some(old.min(new));
                    }
                }
                None => {
                    seen.insert((u, it.item), users[u].len());
                    users[u].push(it);
                }
            }
        }
        if all_timed {
            for list in &mut users {
                list.sort_by_key(|it| it.timestamp);
            }
        }
        Self { ids, users }
    }

    /// An empty dataset over the same id space.
    pub fn empty_like(&self) -> Self {
        Self {
            ids: Arc::clone(&self.ids),
            users: vec![Vec::new(); self.num_users()],
        }
    }

    pub fn ids(&self) -> &Arc<IdMaps> {
        &self.ids
    }

    pub fn shares_ids(&self, other: &InteractionDataset) -> bool {
        Arc::ptr_eq(&self.ids, &other.ids) || *self.ids == *other.ids
    }

    pub fn num_users(&self) -> usize {
        self.ids.users.len()
    }

    pub fn num_items(&self) -> usize {
        self.ids.items.len()
    }

    pub fn num_interactions(&self) -> usize {
        self.users.iter().map(Vec::len).sum()
    }

    pub fn user(&self, u: UserIdx) -> &[Interaction] {
        self.users.get(u).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn user_items(&self, u: UserIdx) -> Vec<ItemIdx> {
        self.user(u).iter().map(|it| it.item).collect()
    }

    pub fn user_item_set(&self, u: UserIdx) -> HashSet<ItemIdx> {
        self.user(u).iter().map(|it| it.item).collect()
    }

    pub fn user_lists(&self) -> &[Vec<Interaction>] {
        &self.users
    }

    pub fn contains(&self, u: UserIdx, i: ItemIdx) -> bool {
        self.user(u).iter().any(|it| it.item == i)
    }

    /// True when the dataset is nonempty and every interaction has a timestamp.
    pub fn has_timestamps(&self) -> bool {
        self.num_interactions() > 0 && self.users.iter().flatten().all(|it| it.timestamp.is_some())
    }

    /// All `(user, item)` pairs in user order, then stored order.
    pub fn pairs(&self) -> impl Iterator<Item = (UserIdx, ItemIdx)> + '_ {
        self.users
            .iter()
            .enumerate()
            .flat_map(|(u, list)| list.iter().map(move |it| (u, it.item)))
    }

    pub fn pair_set(&self) -> HashSet<(UserIdx, ItemIdx)> {
        self.pairs().collect()
    }

    pub fn item_degrees(&self) -> Vec<usize> {
        let mut deg = vec![0; self.num_items()];
        for (_, i) in self.pairs() {
            deg[i] += 1;
        }
        deg
    }

    pub fn user_degrees(&self) -> Vec<usize> {
        self.users.iter().map(Vec::len).collect()
    }

    pub fn external_user(&self, u: UserIdx) -> u64 {
        self.ids.users.external(u)
    }

    pub fn external_item(&self, i: ItemIdx) -> u64 {
        self.ids.items.external(i)
    }
}
