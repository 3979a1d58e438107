use ndarray::{Array1, ArrayView1};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{check_train, sample_negative, EmbeddingTable, RecError};
use crate::dataset::InteractionDataset;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BprConfig {
    pub dim: usize,
    pub learning_rate: f64,
    pub l2: f64,
    pub epochs: usize,
    pub negatives: usize,
    pub seed: u64,
}

impl Default for BprConfig {
    fn default() -> Self {
        Self {
            dim: 64,
            learning_rate: 0.05,
            l2: 1e-4,
            epochs: 40,
            negatives: 1,
            seed: 0,
        }
    }
}

impl BprConfig {
    pub fn validate(&self) -> Result<(), RecError> {
        if self.dim == 0 || self.negatives == 0 {
            return Err(RecError::InvalidConfig(
                "dim and negatives must be at least 1".into(),
            ));
        }
        if !(self.learning_rate > 0.0) || !(self.l2 >= 0.0) {
            return Err(RecError::InvalidConfig(
                "need learning_rate > 0 and l2 >= 0".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BprGrads {
    pub u: Array1<f64>,
    pub i: Array1<f64>,
    pub j: Array1<f64>,
}

/// `-ln σ(<u,i> - <u,j>) + λ(|u|² + |i|² + |j|²)` and its gradients.
pub fn bpr_loss(
    u: ArrayView1<f64>,
    i: ArrayView1<f64>,
    j: ArrayView1<f64>,
    l2: f64,
) -> (f64, BprGrads) {
    let x = u.dot(&i) - u.dot(&j);
    // -ln σ(x) = softplus(-x)
    let pair = (-x).max(0.0) + (-x.abs()).exp().ln_1p();
    let reg = l2 * (u.dot(&u) + i.dot(&i) + j.dot(&j));
    // d/dx softplus(-x) = -σ(-x)
    let g = -sigmoid(-x);
    let grads = BprGrads {
        u: (&i - &j) * g + &u * (2.0 * l2),
        i: &u * g + &i * (2.0 * l2),
        j: &u * (-g) + &j * (2.0 * l2),
    };
    (pair + reg, grads)
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Per-sample SGD over shuffled positives with uniform negatives.
pub fn train_bpr(train: &InteractionDataset, cfg: &BprConfig) -> Result<EmbeddingTable, RecError> {
    check_train(train)?;
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut table =
        EmbeddingTable::random(train.num_users(), train.num_items(), cfg.dim, 0.1, &mut rng);
    let mut positives: Vec<(usize, usize)> = train.pairs().collect();
    let sets: Vec<_> = (0..train.num_users())
        .map(|u| train.user_item_set(u))
        .collect();
    let lr = cfg.learning_rate;
    for epoch in 0..cfg.epochs {
        positives.shuffle(&mut rng);
        for (step, &(u, i)) in positives.iter().enumerate() {
            for _ in 0..cfg.negatives {
                let Some(j) = sample_negative(&mut rng, train.num_items(), &sets[u]) else {
                    continue;
                };
                let (loss, g) = bpr_loss(
                    table.users.row(u),
                    table.items.row(i),
                    table.items.row(j),
                    cfg.l2,
                );
                if !loss.is_finite() {
                    return Err(RecError::NonFinite { epoch, step });
                }
                table.users.row_mut(u).scaled_add(-lr, &g.u);
                table.items.row_mut(i).scaled_add(-lr, &g.i);
                table.items.row_mut(j).scaled_add(-lr, &g.j);
            }
        }
    }
    if !table.is_finite() {
        return Err(RecError::NonFinite {
            epoch: cfg.epochs,
            step: 0,
        });
    }
    Ok(table)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array1;
    use proptest::prelude::*;
    use rand::Rng;

    #[test]
    fn zero_vectors_give_ln2() {
        let z = Array1::zeros(4);
        let (loss, _) = bpr_loss(z.view(), z.view(), z.view(), 0.0);
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn large_margin_leaves_regularizer() {
        let u = Array1::from(vec![30.0, 0.0]);
        let i = Array1::from(vec![30.0, 0.0]);
        let j = Array1::from(vec![-30.0, 0.0]);
        let (loss, _) = bpr_loss(u.view(), i.view(), j.view(), 0.01);
        assert!((loss - 0.01 * 2700.0).abs() < 1e-9);
        let (loss, g) = bpr_loss(u.view(), j.view(), i.view(), 0.0);
        assert!((loss - 1800.0).abs() < 1e-9);
        assert!(g.u.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let h = 1e-5;
        for _ in 0..20 {
            let v: Vec<Array1<f64>> = (0..3)
                .map(|_| Array1::from_shape_fn(6, |_| rng.random_range(-1.0..1.0)))
                .collect();
            let (_, g) = bpr_loss(v[0].view(), v[1].view(), v[2].view(), 0.05);
            let grads = [&g.u, &g.i, &g.j];
            for which in 0..3 {
                for c in 0..6 {
                    let mut p = v.clone();
                    p[which][c] += h;
                    let mut m = v.clone();
                    m[which][c] -= h;
                    let lp = bpr_loss(p[0].view(), p[1].view(), p[2].view(), 0.05).0;
                    let lm = bpr_loss(m[0].view(), m[1].view(), m[2].view(), 0.05).0;
                    let num = (lp - lm) / (2.0 * h);
                    let ana = grads[which][c];
                    assert!((num - ana).abs() / num.abs().max(ana.abs()).max(1e-6) < 1e-4);
                }
            }
        }
    }

    fn toy() -> InteractionDataset {
        InteractionDataset::from_records(
            (0..20u64).flat_map(|u| (0..4u64).map(move |k| (u, (u % 2) * 10 + (u + k) % 10, None))),
        )
    }

    #[test]
    fn zero_epochs_and_determinism() {
        let ds = toy();
        let cfg = BprConfig {
            dim: 8,
            epochs: 0,
            seed: 5,
            ..Default::default()
        };
        let init = train_bpr(&ds, &cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        assert_eq!(
            init,
            EmbeddingTable::random(ds.num_users(), ds.num_items(), 8, 0.1, &mut rng)
        );
        let cfg = BprConfig { epochs: 3, ..cfg };
        assert_eq!(train_bpr(&ds, &cfg).unwrap(), train_bpr(&ds, &cfg).unwrap());
        assert_ne!(train_bpr(&ds, &cfg).unwrap(), init);
    }

    #[test]
    fn rejects_bad_config_and_empty_data() {
        let ds = toy();
        assert!(train_bpr(
            &ds,
            &BprConfig {
                learning_rate: 0.0,
                ..Default::default()
            }
        )
        .is_err());
        assert!(train_bpr(
            &ds,
            &BprConfig {
                l2: -1.0,
                ..Default::default()
            }
        )
        .is_err());
        assert!(matches!(
            train_bpr(&ds.empty_like(), &BprConfig::default()),
            Err(RecError::EmptyTrain)
        ));
    }

    #[test]
    fn divergence_is_reported() {
        let cfg = BprConfig {
            dim: 4,
            learning_rate: 1e200,
            epochs: 5,
            ..Default::default()
        };
        assert!(matches!(
            train_bpr(&toy(), &cfg),
            Err(RecError::NonFinite { .. })
        ));
    }

    proptest! {
        #[test]
        fn loss_is_nonnegative(x in proptest::collection::vec(-50.0f64..50.0, 9), l2 in 0.0f64..1.0) {
            let a = Array1::from(x[0..3].to_vec());
            let b = Array1::from(x[3..6].to_vec());
            let c = Array1::from(x[6..9].to_vec());
            let (loss, g) = bpr_loss(a.view(), b.view(), c.view(), l2);
            prop_assert!(loss >= 0.0 && loss.is_finite());
            prop_assert!(g.u.iter().chain(g.i.iter()).chain(g.j.iter()).all(|v| v.is_finite()));
        }
    }
}
