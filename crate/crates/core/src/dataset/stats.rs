use serde::{Deserialize, Serialize};

use super::{DatasetError, InteractionDataset, UserIdx};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub num_users: usize,
    pub num_items: usize,
    pub num_interactions: usize,
    /// interactions / (users * items)
    pub density: f64,
}

impl DatasetStats {
    pub fn from_counts(num_users: usize, num_items: usize, num_interactions: usize) -> Self {
        let cells = num_users as f64 * num_items as f64;
        let density = if cells > 0.0 {
            num_interactions as f64 / cells
        } else {
            0.0
        };
        Self {
            num_users,
            num_items,
            num_interactions,
            density,
        }
    }

    pub fn density_percent(&self) -> f64 {
        self.density * 100.0
    }
}

pub fn compute_stats(ds: &InteractionDataset) -> DatasetStats {
    DatasetStats::from_counts(ds.num_users(), ds.num_items(), ds.num_interactions())
}

/// Splits users into `num_groups` contiguous groups after sorting by
/// (interaction count, user index). Earlier groups absorb the remainder.
pub fn group_users_by_activity(
    ds: &InteractionDataset,
    num_groups: usize,
) -> Result<Vec<Vec<UserIdx>>, DatasetError> {
    let users = ds.num_users();
    if num_groups == 0 || users < num_groups {
        return Err(DatasetError::TooFewUsers {
            users,
            groups: num_groups,
        });
    }
    let degrees = ds.user_degrees();
    let mut order: Vec<UserIdx> = (0..users).collect();
    order.sort_by_key(|&u| (degrees[u], u));
    let base = users / num_groups;
    let extra = users % num_groups;
    let mut groups = Vec::with_capacity(num_groups);
    let mut start = 0;
    for g in 0..num_groups {
        let len = base + usize::from(g < extra);
        groups.push(order[start..start + len].to_vec());
        start += len;
    }
    Ok(groups)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn with_degrees(degrees: &[usize]) -> InteractionDataset {
        let recs: Vec<_> = degrees
            .iter()
            .enumerate()
            .flat_map(|(u, &d)| (0..d as u64).map(move |i| (u as u64, i, None)))
            .collect();
        InteractionDataset::from_records(recs)
    }

    #[test]
    fn published_densities() {
        let pct = |u, i, n| DatasetStats::from_counts(u, i, n).density_percent();
        assert_eq!(format!("{:.3}", pct(31_668, 38_048, 1_561_406)), "0.130");
        assert_eq!(format!("{:.3}", pct(138_333, 98_572, 1_909_965)), "0.014");
        assert_eq!(format!("{:.2}", pct(22_363, 12_092, 198_502)), "0.07");
    }

    #[test]
    fn single_cell_density_is_one() {
        let ds = with_degrees(&[1]);
        assert_eq!(compute_stats(&ds).density, 1.0);
    }

    #[test]
    fn quartiles_of_sorted_counts() {
        let ds = with_degrees(&[5, 3, 1, 7, 2, 8, 4, 6]);
        let groups = group_users_by_activity(&ds, 4).unwrap();
        let deg = ds.user_degrees();
        let as_counts: Vec<Vec<usize>> = groups
            .iter()
            .map(|g| g.iter().map(|&u| deg[u]).collect())
            .collect();
        assert_eq!(
            as_counts,
            vec![vec![1, 2], vec![3, 4], vec![5, 6], vec![7, 8]]
        );
    }

    #[test]
    fn remainder_goes_to_early_groups() {
        let ds = with_degrees(&[1, 1, 1, 1, 1]);
        let sizes: Vec<usize> = group_users_by_activity(&ds, 4)
            .unwrap()
            .iter()
            .map(Vec::len)
            .collect();
        assert_eq!(sizes, vec![2, 1, 1, 1]);
        // ties resolved by user index
        assert_eq!(group_users_by_activity(&ds, 4).unwrap()[0], vec![0, 1]);
    }

    #[test]
    fn too_few_users() {
        assert!(group_users_by_activity(&with_degrees(&[1, 2]), 3).is_err());
    }

    proptest! {
        #[test]
        fn density_matches_matrix_count(
            cells in proptest::collection::vec((0u64..30, 0u64..30), 1..200)
        ) {
            let ds = InteractionDataset::from_records(cells.iter().map(|&(u, i)| (u, i, None)));
            let mut matrix = vec![vec![false; ds.num_items()]; ds.num_users()];
            for (u, i) in ds.pairs() {
                matrix[u][i] = true;
            }
            let ones = matrix.iter().flatten().filter(|&&b| b).count();
            let expected = ones as f64 / (ds.num_users() * ds.num_items()) as f64;
            let stats = compute_stats(&ds);
            prop_assert_eq!(stats.density, expected);
            prop_assert!(stats.density > 0.0 && stats.density <= 1.0);
        }
    }
}
