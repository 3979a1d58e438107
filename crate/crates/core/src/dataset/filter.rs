use std::sync::Arc;

use super::{DatasetError, IdMap, IdMaps, Interaction, InteractionDataset};

/// Iteratively drops users and items with fewer than `min_count`
/// interactions until every survivor meets the threshold. Surviving ids are
/// recompacted, preserving their relative index order.
pub fn k_core_filter(
    ds: &InteractionDataset,
    min_count: usize,
) -> Result<InteractionDataset, DatasetError> {
    if min_count == 0 {
        return Err(DatasetError::InvalidParameter(
            "min_count must be at least 1".into(),
        ));
    }
    let lists = ds.user_lists();
    let mut user_alive = vec![true; ds.num_users()];
    let mut item_alive = vec![true; ds.num_items()];
    let mut user_deg = ds.user_degrees();
    let mut item_deg = ds.item_degrees();

    loop {
        let mut changed = false;
        for (u, list) in lists.iter().enumerate() {
            if user_alive[u] && user_deg[u] < min_count {
                user_alive[u] = false;
                changed = true;
                for it in list.iter().filter(|it| item_alive[it.item]) {
                    item_deg[it.item] -= 1;
                }
            }
        }
        for (i, alive) in item_alive.iter_mut().enumerate() {
            if *alive && item_deg[i] < min_count {
                *alive = false;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        // Recount user degrees against the surviving item set.
        for (u, list) in lists.iter().enumerate() {
            if user_alive[u] {
                user_deg[u] = list.iter().filter(|it| item_alive[it.item]).count();
            }
        }
        for d in item_deg.iter_mut() {
            *d = 0;
        }
        for (u, list) in lists.iter().enumerate() {
            if user_alive[u] {
                for it in list.iter().filter(|it| item_alive[it.item]) {
                    item_deg[it.item] += 1;
                }
            }
        }
    }

    let mut item_remap = vec![usize::MAX; ds.num_items()];
    let mut items = IdMap::new();
    for (i, alive) in item_alive.iter().enumerate() {
        if *alive {
            item_remap[i] = items.intern(ds.external_item(i));
        }
    }
    let mut users = IdMap::new();
    let mut out_lists = Vec::new();
    for (u, list) in lists.iter().enumerate() {
        if !user_alive[u] {
            continue;
        }
        users.intern(ds.external_user(u));
        out_lists.push(
            list.iter()
                .filter(|it| item_alive[it.item])
                .map(|it| Interaction {
                    item: item_remap[it.item],
                    timestamp: it.timestamp,
                })
                .collect(),
        );
    }
    if out_lists.iter().all(Vec::is_empty) {
        return Err(DatasetError::EmptyAfterFilter { min_count });
    }
    InteractionDataset::from_user_lists(Arc::new(IdMaps { users, items }), out_lists)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::collections::BTreeSet;

    /// Deletes one under-threshold node at a time until none is left.
    fn brute_force_core(edges: &[(u64, u64)], m: usize) -> BTreeSet<(u64, u64)> {
        let mut e: BTreeSet<(u64, u64)> = edges.iter().copied().collect();
        loop {
            let bad_user = e
                .iter()
                .map(|p| p.0)
                .find(|&u| e.iter().filter(|p| p.0 == u).count() < m);
            if let Some(u) = bad_user {
                e.retain(|p| p.0 != u);
                continue;
            }
            let bad_item = e
                .iter()
                .map(|p| p.1)
                .find(|&i| e.iter().filter(|p| p.1 == i).count() < m);
            if let Some(i) = bad_item {
                e.retain(|p| p.1 != i);
                continue;
            }
            return e;
        }
    }

    fn external_pairs(ds: &InteractionDataset) -> BTreeSet<(u64, u64)> {
        ds.pairs()
            .map(|(u, i)| (ds.external_user(u), ds.external_item(i)))
            .collect()
    }

    fn build(edges: &[(u64, u64)]) -> InteractionDataset {
        InteractionDataset::from_records(edges.iter().map(|&(u, i)| (u, i, None)))
    }

    #[test]
    fn single_user_many_singleton_items_empties() {
        let ds = build(&(0..12).map(|i| (1, i)).collect::<Vec<_>>());
        assert!(matches!(
            k_core_filter(&ds, 10),
            Err(DatasetError::EmptyAfterFilter { min_count: 10 })
        ));
    }

    #[test]
    fn clique_is_a_fixpoint() {
        let edges: Vec<_> = (0..10)
            .flat_map(|u| (0..10).map(move |i| (u, 100 + i)))
            .collect();
        let ds = build(&edges);
        assert_eq!(k_core_filter(&ds, 10).unwrap(), ds);
    }

    #[test]
    fn chain_collapses_like_brute_force() {
        // u1 - i1 - u2 - i2
        let edges = [(1, 10), (2, 10), (2, 20)];
        assert!(brute_force_core(&edges, 2).is_empty());
        assert!(k_core_filter(&build(&edges), 2).is_err());
    }

    #[test]
    fn zero_threshold_rejected() {
        assert!(k_core_filter(&build(&[(1, 1)]), 0).is_err());
    }

    proptest! {
        #[test]
        fn matches_brute_force_and_is_idempotent(
            edges in proptest::collection::vec((0u64..8, 0u64..10), 1..60),
            m in 1usize..4,
        ) {
            let ds = build(&edges);
            let expected = brute_force_core(&edges, m);
            match k_core_filter(&ds, m) {
                Ok(core) => {
                    prop_assert_eq!(external_pairs(&core), expected);
                    prop_assert!(core.user_degrees().iter().all(|&d| d >= m));
                    prop_assert!(core.item_degrees().iter().all(|&d| d >= m));
                    let again = k_core_filter(&core, m).unwrap();
                    prop_assert_eq!(again, core);
                }
                Err(DatasetError::EmptyAfterFilter { .. }) => prop_assert!(expected.is_empty()),
                Err(e) => prop_assert!(false, "unexpected error {e}"),
            }
        }
    }
}
