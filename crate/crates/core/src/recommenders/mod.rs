//! ID-only recommenders: BPR matrix factorization, LightGCN propagation with
//! SimGCL contrastive regularization, and a SASRec-style sequential model.

mod bpr;
mod graph;
mod sasrec;
mod simgcl;

use std::collections::HashSet;

use ndarray::{Array1, Array2};
use rand::Rng;
use thiserror::Error;

use crate::checkpoint::CheckpointError;
use crate::dataset::{InteractionDataset, ItemIdx, UserIdx};
use crate::nn::{ParamKind, Parameterized};

pub use bpr::{bpr_loss, train_bpr, BprConfig, BprGrads};
pub use graph::{lightgcn_propagate, NormalizedAdjacency};
pub use sasrec::{
    sasrec_forward, train_sasrec, user_sequences, SasRec, SasRecConfig, SasRecScorer,
};
pub use simgcl::{infonce_loss, simgcl_perturb, train_lightgcn, train_simgcl, SimGclConfig};

#[derive(Debug, Error)]
pub enum RecError {
    #[error("training data has no interactions")]
    EmptyTrain,
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("non-finite value at epoch {epoch}, step {step}")]
    NonFinite { epoch: usize, step: usize },
    #[error("sequence of {len} items exceeds maximum length {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("cannot normalize a zero-norm vector (row {0})")]
    ZeroNorm(usize),
    #[error("contrastive batch needs at least 2 nodes, got {0}")]
    BatchTooSmall(usize),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

/// Anything that can score every item for a user.
pub trait Scorer {
    fn num_items(&self) -> usize;
    fn score_user(&self, user: UserIdx) -> Vec<f64>;
}

/// User and item embedding matrices; the score of (u, i) is their dot product.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    pub users: Array2<f64>,
    pub items: Array2<f64>,
}

impl EmbeddingTable {
    pub fn random<R: Rng + ?Sized>(
        num_users: usize,
        num_items: usize,
        dim: usize,
        std: f64,
        rng: &mut R,
    ) -> Self {
        Self {
            users: crate::nn::normal_matrix(num_users, dim, std, rng),
            items: crate::nn::normal_matrix(num_items, dim, std, rng),
        }
    }

    pub fn zeros(num_users: usize, num_items: usize, dim: usize) -> Self {
        Self {
            users: Array2::zeros((num_users, dim)),
            items: Array2::zeros((num_items, dim)),
        }
    }

    pub fn dim(&self) -> usize {
        self.users.ncols()
    }

    pub fn is_finite(&self) -> bool {
        self.users
            .iter()
            .chain(self.items.iter())
            .all(|v| v.is_finite())
    }

    pub fn save(&self, stem: &std::path::Path, meta: serde_json::Value) -> Result<(), RecError> {
        crate::checkpoint::save(stem, meta, self)?;
        Ok(())
    }

    pub fn load(stem: &std::path::Path) -> Result<Self, RecError> {
        let mut tensors = crate::checkpoint::read_tensors(stem)?;
        let find = |name: &str, t: &mut Vec<(String, Array2<f64>)>| {
            t.iter()
                .position(|(n, _)| n == name)
                .map(|k| t.swap_remove(k).1)
                .ok_or_else(|| CheckpointError::Missing(name.into()))
        };
        let users = find("users", &mut tensors)?;
        let items = find("items", &mut tensors)?;
        Ok(Self { users, items })
    }
}

impl Parameterized for EmbeddingTable {
    fn params(&self) -> Vec<(ParamKind, String, &Array2<f64>)> {
        vec![
            (ParamKind::Base, "users".into(), &self.users),
            (ParamKind::Base, "items".into(), &self.items),
        ]
    }

    fn params_mut(&mut self) -> Vec<(ParamKind, String, &mut Array2<f64>)> {
        vec![
            (ParamKind::Base, "users".into(), &mut self.users),
            (ParamKind::Base, "items".into(), &mut self.items),
        ]
    }
}

impl Scorer for EmbeddingTable {
    fn num_items(&self) -> usize {
        self.items.nrows()
    }

    fn score_user(&self, user: UserIdx) -> Vec<f64> {
        let scores: Array1<f64> = self.items.dot(&self.users.row(user));
        scores.to_vec()
    }
}

/// Top `k` items by (score desc, index asc), skipping `exclude`. Returns
/// fewer than `k` items when not enough remain.
pub fn recommend_topk<S: Scorer + ?Sized>(
    scorer: &S,
    user: UserIdx,
    k: usize,
    exclude: &HashSet<ItemIdx>,
) -> Vec<ItemIdx> {
    top_k_of(&scorer.score_user(user), k, exclude)
}

pub fn top_k_of(scores: &[f64], k: usize, exclude: &HashSet<ItemIdx>) -> Vec<ItemIdx> {
    let mut cand: Vec<ItemIdx> = (0..scores.len()).filter(|i| !exclude.contains(i)).collect();
    let cmp = |a: &ItemIdx, b: &ItemIdx| scores[*b].total_cmp(&scores[*a]).then(a.cmp(b));
    if k < cand.len() {
        cand.select_nth_unstable_by(k, cmp);
        cand.truncate(k);
    }
    cand.sort_by(cmp);
    cand
}

/// Uniform item outside `positives`, resampling on collision. `None` when
/// the user has every item.
pub(crate) fn sample_negative<R: Rng + ?Sized>(
    rng: &mut R,
    num_items: usize,
    positives: &HashSet<ItemIdx>,
) -> Option<ItemIdx> {
    if positives.len() >= num_items {
        return None;
    }
    loop {
        let j = rng.random_range(0..num_items);
        if !positives.contains(&j) {
            return Some(j);
        }
    }
}

pub(crate) fn check_train(train: &InteractionDataset) -> Result<(), RecError> {
    if train.num_interactions() == 0 {
        Err(RecError::EmptyTrain)
    } else {
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    struct Fixed(Vec<f64>);

    impl Scorer for Fixed {
        fn num_items(&self) -> usize {
            self.0.len()
        }
        fn score_user(&self, _: UserIdx) -> Vec<f64> {
            self.0.clone()
        }
    }

    #[test]
    fn topk_examples() {
        let s = Fixed(vec![0.5, 0.9, 0.1]);
        assert_eq!(
            recommend_topk(&s, 0, 2, &[1].into_iter().collect()),
            vec![0, 2]
        );
        let tied = Fixed(vec![0.3, 0.7, 0.3, 0.3]);
        assert_eq!(recommend_topk(&tied, 0, 3, &HashSet::new()), vec![1, 0, 2]);
        assert!(recommend_topk(&s, 0, 2, &[0, 1, 2].into_iter().collect()).is_empty());
        assert_eq!(recommend_topk(&s, 0, 10, &HashSet::new()), vec![1, 0, 2]);
    }

    #[test]
    fn table_checkpoint_roundtrip() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let t = EmbeddingTable::random(3, 4, 5, 0.1, &mut rng);
        let dir = tempfile::tempdir().unwrap();
        let stem = dir.path().join("bpr");
        t.save(&stem, serde_json::json!({"kind": "bpr"})).unwrap();
        let back = EmbeddingTable::load(&stem).unwrap();
        assert_eq!(back.users.dim(), (3, 5));
        assert!((back.items[[2, 1]] - t.items[[2, 1]]).abs() < 1e-7);
    }

    proptest! {
        #[test]
        fn topk_matches_full_sort(
            scores in proptest::collection::vec(-3i32..3, 1..30),
            k in 1usize..12,
            excl in proptest::collection::hash_set(0usize..30, 0..10),
        ) {
            let scores: Vec<f64> = scores.into_iter().map(f64::from).collect();
            let got = top_k_of(&scores, k, &excl);
            let mut all: Vec<usize> = (0..scores.len()).filter(|i| !excl.contains(i)).collect();
            all.sort_by(|a, b| scores[*b].partial_cmp(&scores[*a]).unwrap().then(a.cmp(b)));
            all.truncate(k);
            prop_assert_eq!(got, all);
        }
    }
}
