use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::bpr::bpr_loss;
use super::graph::{lightgcn_propagate, NormalizedAdjacency};
use super::{check_train, sample_negative, EmbeddingTable, RecError};
use crate::dataset::InteractionDataset;

const NOISE_STREAM: u64 = 0x5eed_c0de;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimGclConfig {
    pub dim: usize,
    pub learning_rate: f64,
    pub l2: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub layers: usize,
    /// Norm of the embedding noise.
    pub eps: f64,
    pub cl_weight: f64,
    pub tau: f64,
}

impl Default for SimGclConfig {
    fn default() -> Self {
        Self {
            dim: 64,
            learning_rate: 10.0,
            l2: 1e-4,
            epochs: 40,
            batch_size: 256,
            seed: 0,
            layers: 2,
            eps: 0.1,
            cl_weight: 0.1,
            tau: 0.2,
        }
    }
}

impl SimGclConfig {
    pub fn validate(&self) -> Result<(), RecError> {
        let bad = |m: &str| Err(RecError::InvalidConfig(m.into()));
        if self.dim == 0 || self.batch_size == 0 || self.layers == 0 {
            return bad("dim, batch_size and layers must be at least 1");
        }
        if !(self.learning_rate > 0.0) || !(self.l2 >= 0.0) || !(self.cl_weight >= 0.0) {
            return bad("need learning_rate > 0, l2 >= 0 and cl_weight >= 0");
        }
        if !(self.eps > 0.0) || !(self.tau > 0.0) {
            return bad("need eps > 0 and tau > 0");
        }
        Ok(())
    }
}

fn perturb_rows<R: Rng + ?Sized>(m: &Array2<f64>, eps: f64, rng: &mut R) -> Array2<f64> {
    let mut out = m.clone();
    for mut row in out.rows_mut() {
        let u: Vec<f64> = (0..row.len()).map(|_| rng.random::<f64>()).collect();
        let norm = u.iter().map(|x| x * x).sum::<f64>().sqrt();
        for (x, n) in row.iter_mut().zip(&u) {
            let sign = if *x > 0.0 {
                1.0
            } else if *x < 0.0 {
                -1.0
            } else {
                0.0
            };
            *x += eps * sign * n / norm;
        }
    }
    out
}

fn perturb_with<R: Rng + ?Sized>(t: &EmbeddingTable, eps: f64, rng: &mut R) -> EmbeddingTable {
    EmbeddingTable {
        users: perturb_rows(&t.users, eps, rng),
        items: perturb_rows(&t.items, eps, rng),
    }
}

/// Adds `eps * sign(e) ⊙ u / |u|` to every row `e`, with `u` uniform on
/// `[0, 1]^d`.
pub fn simgcl_perturb(t: &EmbeddingTable, eps: f64, seed: u64) -> Result<EmbeddingTable, RecError> {
    if !(eps > 0.0) {
        return Err(RecError::InvalidConfig("eps must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(perturb_with(t, eps, &mut rng))
}

/// Mean over `batch` of `-ln softmax_m(cos(z1_k, z2_m) / tau)[k]`, with
/// gradients for both views (zero outside `batch`).
pub fn infonce_loss(
    view1: &Array2<f64>,
    view2: &Array2<f64>,
    tau: f64,
    batch: &[usize],
) -> Result<(f64, Array2<f64>, Array2<f64>), RecError> {
    let b = batch.len();
    if b < 2 {
        return Err(RecError::BatchTooSmall(b));
    }
    let d = view1.ncols();
    let normalize = |v: &Array2<f64>| -> Result<(Array2<f64>, Vec<f64>), RecError> {
        let mut n = Array2::zeros((b, d));
        let mut norms = Vec::with_capacity(b);
        for (k, &row) in batch.iter().enumerate() {
            let r = v.row(row);
            let norm = r.dot(&r).sqrt();
            if norm == 0.0 {
                return Err(RecError::ZeroNorm(row));
            }
            n.row_mut(k).assign(&(&r / norm));
            norms.push(norm);
        }
        Ok((n, norms))
    };
    let (n1, norm1) = normalize(view1)?;
    let (n2, norm2) = normalize(view2)?;
    let s = n1.dot(&n2.t()) / tau;
    let mut loss = 0.0;
    // ds = (softmax(s) - I) / b
    let mut ds = Array2::zeros((b, b));
    for k in 0..b {
        let row = s.row(k);
        let lse = crate::nn::log_sum_exp(row);
        loss += lse - s[[k, k]];
        for m in 0..b {
            ds[[k, m]] = (row[m] - lse).exp();
        }
        ds[[k, k]] -= 1.0;
    }
    ds /= b as f64;
    let dn1 = ds.dot(&n2) / tau;
    let dn2 = ds.t().dot(&n1) / tau;
    let mut g1 = Array2::zeros(view1.raw_dim());
    let mut g2 = Array2::zeros(view2.raw_dim());
    for (k, &row) in batch.iter().enumerate() {
        for (g, n, dn, norm) in [
            (&mut g1, &n1, &dn1, norm1[k]),
            (&mut g2, &n2, &dn2, norm2[k]),
        ] {
            let nk = n.row(k);
            let dk = dn.row(k);
            let proj = nk.dot(&dk);
            let mut grow = g.row_mut(row);
            grow.scaled_add(1.0 / norm, &dk);
            grow.scaled_add(-proj / norm, &nk);
        }
    }
    Ok((loss / b as f64, g1, g2))
}

fn distinct(xs: impl Iterator<Item = usize>) -> Vec<usize> {
    let mut seen = std::collections::HashSet::new();
    xs.filter(|x| seen.insert(*x)).collect()
}

/// Minibatch SGD on mean BPR over propagated embeddings plus
/// `cl_weight` times user and item InfoNCE between two perturbed views.
/// Returns the propagated table used for scoring.
pub fn train_simgcl(
    train: &InteractionDataset,
    cfg: &SimGclConfig,
) -> Result<EmbeddingTable, RecError> {
    check_train(train)?;
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut noise = ChaCha8Rng::seed_from_u64(cfg.seed ^ NOISE_STREAM);
    let mut base =
        EmbeddingTable::random(train.num_users(), train.num_items(), cfg.dim, 0.1, &mut rng);
    let adj = NormalizedAdjacency::from_dataset(train);
    let sets: Vec<_> = (0..train.num_users())
        .map(|u| train.user_item_set(u))
        .collect();
    let mut positives: Vec<(usize, usize)> = train.pairs().collect();
    for epoch in 0..cfg.epochs {
        positives.shuffle(&mut rng);
        for (step, chunk) in positives.chunks(cfg.batch_size).enumerate() {
            let prop = lightgcn_propagate(&base, &adj, cfg.layers);
            let mut gprop = EmbeddingTable::zeros(base.users.nrows(), base.items.nrows(), cfg.dim);
            let mut greg = EmbeddingTable::zeros(base.users.nrows(), base.items.nrows(), cfg.dim);
            let scale = 1.0 / chunk.len() as f64;
            let mut loss = 0.0;
            for &(u, i) in chunk {
                let Some(j) = sample_negative(&mut rng, train.num_items(), &sets[u]) else {
                    continue;
                };
                let (l, g) = bpr_loss(prop.users.row(u), prop.items.row(i), prop.items.row(j), 0.0);
                loss += l * scale;
                gprop.users.row_mut(u).scaled_add(scale, &g.u);
                gprop.items.row_mut(i).scaled_add(scale, &g.i);
                gprop.items.row_mut(j).scaled_add(scale, &g.j);
                let reg = 2.0 * cfg.l2 * scale;
                greg.users.row_mut(u).scaled_add(reg, &base.users.row(u));
                greg.items.row_mut(i).scaled_add(reg, &base.items.row(i));
                greg.items.row_mut(j).scaled_add(reg, &base.items.row(j));
            }
            if cfg.cl_weight > 0.0 {
                let v1 = perturb_with(&prop, cfg.eps, &mut noise);
                let v2 = perturb_with(&prop, cfg.eps, &mut noise);
                let users = distinct(chunk.iter().map(|p| p.0));
                let items = distinct(chunk.iter().map(|p| p.1));
                for (nodes, a, b, g) in [
                    (&users, &v1.users, &v2.users, &mut gprop.users),
                    (&items, &v1.items, &v2.items, &mut gprop.items),
                ] {
                    if nodes.len() < 2 {
                        continue;
                    }
                    let (l, g1, g2) = infonce_loss(a, b, cfg.tau, nodes)?;
                    loss += cfg.cl_weight * l;
                    g.scaled_add(cfg.cl_weight, &g1);
                    g.scaled_add(cfg.cl_weight, &g2);
                }
            }
            if !loss.is_finite() {
                return Err(RecError::NonFinite { epoch, step });
            }
            let gbase = lightgcn_propagate(&gprop, &adj, cfg.layers);
            base.users
                .scaled_add(-cfg.learning_rate, &(gbase.users + greg.users));
            base.items
                .scaled_add(-cfg.learning_rate, &(gbase.items + greg.items));
        }
    }
    let out = lightgcn_propagate(&base, &adj, cfg.layers);
    if !out.is_finite() {
        return Err(RecError::NonFinite {
            epoch: cfg.epochs,
            step: 0,
        });
    }
    Ok(out)
}

/// [`train_simgcl`] with the contrastive term switched off.
pub fn train_lightgcn(
    train: &InteractionDataset,
    cfg: &SimGclConfig,
) -> Result<EmbeddingTable, RecError> {
    train_simgcl(
        train,
        &SimGclConfig {
            cl_weight: 0.0,
            ..cfg.clone()
        },
    )
}
