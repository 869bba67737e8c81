use std::cmp::Ordering;

use crate::error::{NumError, Result};

/// Indices of the `k` largest scores, largest first. Equal scores are
/// ordered by ascending index, so the lowest index wins a tie.
pub fn topk(scores: &[f64], k: usize) -> Result<Vec<usize>> {
    let n = scores.len();
    if k == 0 || k > n {
        return Err(NumError::TopK { k, n });
    }
    let mut order: Vec<usize> = (0..n).collect();
    let by_rank = |&a: &usize, &b: &usize| -> Ordering {
        scores[b].total_cmp(&scores[a]).then(a.cmp(&b))
    };
    if k < n {
        order.select_nth_unstable_by(k - 1, by_rank);
        order.truncate(k);
    }
    order.sort_unstable_by(by_rank);
    Ok(order)
}

/// Index of the largest score, lowest index on ties. `None` for an empty
/// slice.
pub fn argmax(scores: &[f64]) -> Option<usize> {
    topk(scores, 1).ok().map(|v| v[0])
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn picks_largest_in_order() {
        assert_eq!(topk(&[0.3, 0.9, 0.5], 2).unwrap(), vec![1, 2]);
        assert_eq!(topk(&[0.5, 0.5, 0.1], 1).unwrap(), vec![0]);
        assert_eq!(topk(&[0.2, 0.1, 0.3], 3).unwrap(), vec![2, 0, 1]);
        assert_eq!(topk(&[1.0, 1.0, 1.0], 2).unwrap(), vec![0, 1]);
    }

    #[test]
    fn k_out_of_range() {
        assert!(matches!(topk(&[1.0], 0), Err(NumError::TopK { .. })));
        assert!(matches!(topk(&[1.0], 2), Err(NumError::TopK { .. })));
        assert_eq!(argmax(&[]), None);
    }

    proptest! {
        #[test]
        fn shuffling_preserves_selected_values(
            values in prop::collection::vec(-3i32..3, 1..12),
            k_seed in 0usize..100,
            rot in 0usize..12,
        ) {
            let scores: Vec<f64> = values.iter().map(|&v| v as f64).collect();
            let n = scores.len();
            let k = 1 + k_seed % n;
            let picked = topk(&scores, k).unwrap();
            let r = rot % n;
            let shuffled: Vec<f64> = (0..n).map(|i| scores[(i + r) % n]).collect();
            let picked_shuffled: Vec<usize> = topk(&shuffled, k).unwrap()
                .into_iter().map(|i| (i + r) % n).collect();
            let mut a: Vec<f64> = picked.iter().map(|&i| scores[i]).collect();
            let mut b: Vec<f64> = picked_shuffled.iter().map(|&i| scores[i]).collect();
            a.sort_by(f64::total_cmp);
            b.sort_by(f64::total_cmp);
            prop_assert_eq!(a, b);
        }

        #[test]
        fn distinct_scores_give_the_same_index_set_after_permutation(
            n in 1usize..10,
            k_seed in 0usize..100,
            rot in 0usize..10,
        ) {
            let scores: Vec<f64> = (0..n).map(|i| ((i * 7919) % 101) as f64 + i as f64 * 1e-3).collect();
            let k = 1 + k_seed % n;
            let r = rot % n;
            let shuffled: Vec<f64> = (0..n).map(|i| scores[(i + r) % n]).collect();
            let mut direct = topk(&scores, k).unwrap();
            let mut back: Vec<usize> = topk(&shuffled, k).unwrap().into_iter().map(|i| (i + r) % n).collect();
            direct.sort_unstable();
            back.sort_unstable();
            prop_assert_eq!(direct, back);
        }
    }
}
