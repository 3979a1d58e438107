//! Merging generated interactions into training data, and composition
//! statistics of the result.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::sync::Arc;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{DatasetError, IdMaps, Interaction, InteractionDataset, ItemIdx, UserIdx};
use crate::parsefilter::ParsedCandidates;

#[derive(Debug, Error)]
pub enum AugmentError {
    #[error("generated pair (user {user}, item {item}) already present in the base data")]
    Overlap { user: u64, item: u64 },
    #[error("target ratio {0} outside [0, 1)")]
    InvalidRatio(f64),
    #[error("cannot place {requested} fake interactions: only {available} unobserved pairs")]
    NotEnoughPairs { requested: usize, available: usize },
    #[error(transparent)]
    Dataset(#[from] DatasetError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GeneratedPair {
    pub user: UserIdx,
    pub item: ItemIdx,
    pub backend: String,
    /// Index of the generation that produced the pair.
    pub generation: usize,
}

/// A set of generated (user, item) pairs in insertion order, each with
/// provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedInteractions {
    ids: Arc<IdMaps>,
    pairs: Vec<GeneratedPair>,
    index: HashSet<(UserIdx, ItemIdx)>,
}

impl GeneratedInteractions {
    pub fn new(ids: Arc<IdMaps>) -> Self {
        Self {
            ids,
            pairs: Vec::new(),
            index: HashSet::new(),
        }
    }

    /// Adds a pair unless it is already present. Returns whether it was added.
    pub fn push(&mut self, user: UserIdx, item: ItemIdx, backend: &str, generation: usize) -> bool {
        assert!(
            user < self.ids.users.len() && item < self.ids.items.len(),
            "index out of range"
        );
        if !self.index.insert((user, item)) {
            return false;
        }
        self.pairs.push(GeneratedPair {
            user,
            item,
            backend: backend.to_string(),
            generation,
        });
        true
    }

    /// Collects the valid IDs of accepted candidates; the generation index is
    /// the candidate's position in `candidates`.
    pub fn from_candidates(
        ids: Arc<IdMaps>,
        candidates: &[ParsedCandidates],
        backend: &str,
    ) -> Self {
        let mut out = Self::new(Arc::clone(&ids));
        for (g, c) in candidates.iter().enumerate().filter(|(_, c)| c.accepted) {
            for item in c.valid_items(&ids.items) {
                out.push(c.user, item, backend, g);
            }
        }
        out
    }

    pub fn ids(&self) -> &Arc<IdMaps> {
        &self.ids
    }

    pub fn pairs(&self) -> &[GeneratedPair] {
        &self.pairs
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn contains(&self, user: UserIdx, item: ItemIdx) -> bool {
        self.index.contains(&(user, item))
    }

    pub fn pair_set(&self) -> &HashSet<(UserIdx, ItemIdx)> {
        &self.index
    }

    fn subset(&self, keep: impl IntoIterator<Item = usize>) -> Self {
        let mut out = Self::new(Arc::clone(&self.ids));
        for k in keep {
            let p = &self.pairs[k];
            out.push(p.user, p.item, &p.backend, p.generation);
        }
        out
    }

    /// Writes `user<TAB>item[<TAB>timestamp]<TAB>source=llm` with external
    /// ids. Timestamps are taken from `merged` when it carries them.
    pub fn write_tsv(
        &self,
        merged: Option<&InteractionDataset>,
        path: &Path,
    ) -> Result<(), AugmentError> {
        let io_err = |e| DatasetError::Io {
            path: path.display().to_string(),
            source: e,
        };
        let mut out = BufWriter::new(File::create(path).map_err(io_err)?);
        for p in &self.pairs {
            let u = self.ids.users.external(p.user);
            let i = self.ids.items.external(p.item);
            let ts = merged.filter(|m| m.has_timestamps()).and_then(|m| {
                m.user(p.user)
                    .iter()
                    .find(|it| it.item == p.item)
                    .and_then(|it| it.timestamp)
            });
            match ts {
                Some(ts) => writeln!(out, "{u}\t{i}\t{ts}\tsource=llm"),
                None => writeln!(out, "{u}\t{i}\tsource=llm"),
            }
            .map_err(io_err)?;
        }
        out.flush().map_err(io_err)?;
        Ok(())
    }
}

/// `R_aug`: the base data with generated pairs appended.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedDataset {
    pub base: InteractionDataset,
    pub generated: GeneratedInteractions,
    pub merged: InteractionDataset,
}

impl AugmentedDataset {
    /// Separates `merged` back into base and generated pairs.
    pub fn split_by_provenance(
        &self,
    ) -> (HashSet<(UserIdx, ItemIdx)>, HashSet<(UserIdx, ItemIdx)>) {
        self.merged
            .pairs()
            .partition(|&(u, i)| !self.generated.contains(u, i))
    }

    pub fn augmentation_ratio(&self) -> f64 {
        ratio(self.generated.len(), self.merged.num_interactions())
    }
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Appends each user's generated items after their base items. When the base
/// data is timestamped, generated items get timestamps counting up from the
/// user's last base timestamp.
pub fn merge(
    base: &InteractionDataset,
    generated: &GeneratedInteractions,
) -> Result<AugmentedDataset, AugmentError> {
    if !Arc::ptr_eq(base.ids(), generated.ids()) && **base.ids() != **generated.ids() {
        return Err(DatasetError::IdMapMismatch.into());
    }
    let timed = base.has_timestamps();
    let mut lists: Vec<Vec<Interaction>> = base.user_lists().to_vec();
    let mut next_ts: Vec<i64> = lists
        .iter()
        .map(|l| {
            l.iter()
                .filter_map(|it| it.timestamp)
                .max()
                .map_or(0, |t| t + 1)
        })
        .collect();
    for p in generated.pairs() {
        if base.contains(p.user, p.item) {
            return Err(AugmentError::Overlap {
                user: base.external_user(p.user),
                item: base.external_item(p.item),
            });
        }
        let timestamp = timed.then(|| {
            let t = next_ts[p.user];
            next_ts[p.user] += 1;
            t
        });
        lists[p.user].push(Interaction {
            item: p.item,
            timestamp,
        });
    }
    let merged = InteractionDataset::from_user_lists(Arc::clone(base.ids()), lists)?;
    Ok(AugmentedDataset {
        base: base.clone(),
        generated: generated.clone(),
        merged,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompositionStats {
    pub base_interactions: usize,
    pub generated_interactions: usize,
    /// `|R_LLM| / |R_aug|`
    pub augmentation_ratio: f64,
    pub test_overlap: usize,
    /// `|R_LLM ∩ test| / |R_LLM|`
    pub test_overlap_ratio: f64,
    /// `|R_LLM ∩ other| / |R_LLM|`, when another generator's output is given.
    pub cross_generator_overlap: Option<f64>,
}

pub fn compute_composition(
    aug: &AugmentedDataset,
    test: &InteractionDataset,
    other: Option<&GeneratedInteractions>,
) -> CompositionStats {
    let gen = aug.generated.pairs();
    let test_overlap = gen.iter().filter(|p| test.contains(p.user, p.item)).count();
    let cross = other.map(|o| {
        let shared = gen.iter().filter(|p| o.contains(p.user, p.item)).count();
        ratio(shared, gen.len())
    });
    CompositionStats {
        base_interactions: aug.base.num_interactions(),
        generated_interactions: gen.len(),
        augmentation_ratio: aug.augmentation_ratio(),
        test_overlap,
        test_overlap_ratio: ratio(test_overlap, gen.len()),
        cross_generator_overlap: cross,
    }
}

/// Largest `k` with `k / (base + k) <= target_ratio`, capped at `available`.
pub fn max_generated_for_ratio(base: usize, available: usize, target_ratio: f64) -> usize {
    let fits = |k: usize| k == 0 || (k as f64) / ((base + k) as f64) <= target_ratio;
    let estimate = if target_ratio <= 0.0 {
        0
    } else {
        ((target_ratio * base as f64) / (1.0 - target_ratio)).floor() as usize
    };
    let mut k = estimate.min(available);
    while k > 0 && !fits(k) {
        k -= 1;
    }
    while k < available && fits(k + 1) {
        k += 1;
    }
    k
}

/// Uniform subsample of `generated` of the maximal size keeping the
/// augmentation ratio at or below `target_ratio`. Kept pairs retain their
/// original order.
pub fn cap_ratio(
    generated: &GeneratedInteractions,
    base: &InteractionDataset,
    target_ratio: f64,
    seed: u64,
) -> Result<GeneratedInteractions, AugmentError> {
    if !(0.0..1.0).contains(&target_ratio) {
        return Err(AugmentError::InvalidRatio(target_ratio));
    }
    let k = max_generated_for_ratio(base.num_interactions(), generated.len(), target_ratio);
    if k == generated.len() {
        return Ok(generated.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut keep = sample(&mut rng, generated.len(), k).into_vec();
    keep.sort_unstable();
    Ok(generated.subset(keep))
}

/// `count` distinct (user, item) pairs drawn uniformly from the pairs absent
/// from `base`, tagged with backend `"random"`.
pub fn uniform_fake_interactions(
    base: &InteractionDataset,
    count: usize,
    seed: u64,
) -> Result<GeneratedInteractions, AugmentError> {
    let (nu, ni) = (base.num_users(), base.num_items());
    let available = nu * ni - base.num_interactions();
    if count > available {
        return Err(AugmentError::NotEnoughPairs {
            requested: count,
            available,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = GeneratedInteractions::new(Arc::clone(base.ids()));
    while out.len() < count {
        let (u, i) = (rng.random_range(0..nu), rng.random_range(0..ni));
        if !base.contains(u, i) {
            let g = out.len();
            out.push(u, i, "random", g);
        }
    }
    Ok(out)
}
