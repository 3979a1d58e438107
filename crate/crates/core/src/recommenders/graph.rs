use ndarray::Array2;

use super::EmbeddingTable;
use crate::dataset::InteractionDataset;

/// The user–item bipartite graph with symmetric degree normalization,
/// `w(u, i) = 1 / sqrt(|N(u)| |N(i)|)`.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedAdjacency {
    pub user_edges: Vec<Vec<(usize, f64)>>,
    pub item_edges: Vec<Vec<(usize, f64)>>,
}

impl NormalizedAdjacency {
    pub fn from_dataset(train: &InteractionDataset) -> Self {
        let du = train.user_degrees();
        let di = train.item_degrees();
        let mut user_edges = vec![Vec::new(); train.num_users()];
        let mut item_edges = vec![Vec::new(); train.num_items()];
        for (u, i) in train.pairs() {
            let w = 1.0 / ((du[u] * di[i]) as f64).sqrt();
            user_edges[u].push((i, w));
            item_edges[i].push((u, w));
        }
        Self {
            user_edges,
            item_edges,
        }
    }

    /// One application of the normalized adjacency.
    pub fn apply(&self, t: &EmbeddingTable) -> EmbeddingTable {
        let mut out = EmbeddingTable::zeros(t.users.nrows(), t.items.nrows(), t.dim());
        spread(&self.user_edges, &t.items, &mut out.users);
        spread(&self.item_edges, &t.users, &mut out.items);
        out
    }
}

fn spread(edges: &[Vec<(usize, f64)>], from: &Array2<f64>, to: &mut Array2<f64>) {
    for (dst, list) in edges.iter().enumerate() {
        let mut row = to.row_mut(dst);
        for &(src, w) in list {
            row.scaled_add(w, &from.row(src));
        }
    }
}

/// Mean of `A^l E` over `l = 0..=layers`. The operator is symmetric, so it
/// also maps output gradients to input gradients.
pub fn lightgcn_propagate(
    t: &EmbeddingTable,
    adj: &NormalizedAdjacency,
    layers: usize,
) -> EmbeddingTable {
    let mut acc = t.clone();
    let mut cur = t.clone();
    for _ in 0..layers {
        cur = adj.apply(&cur);
        acc.users += &cur.users;
        acc.items += &cur.items;
    }
    let scale = 1.0 / (layers + 1) as f64;
    acc.users *= scale;
    acc.items *= scale;
    acc
}
