use crate::error::{Error, Result};

fn discount(pos: usize) -> f64 {
    1.0 / ((pos + 2) as f64).log2()
}

/// `sum_i rel_i / log2(i + 1)` with 1-based `i`.
pub fn dcg(rels_in_order: &[f64]) -> f64 {
    rels_in_order
        .iter()
        .enumerate()
        .map(|(i, r)| r * discount(i))
        .sum()
}

pub fn ideal_dcg(rels: &[f64]) -> f64 {
    let mut sorted = rels.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    dcg(&sorted)
}

/// DCG of the given order over the ideal DCG; an all-zero list scores 1.
pub fn ndcg(rels_in_order: &[f64]) -> Result<f64> {
    if rels_in_order.is_empty() {
        return Err(Error::EmptyBatch("ndcg"));
    }
    if rels_in_order.iter().any(|r| *r < 0.0) {
        return Err(Error::Invalid("negative relevance".into()));
    }
    let ideal = ideal_dcg(rels_in_order);
    if ideal == 0.0 {
        return Ok(1.0);
    }
    Ok(dcg(rels_in_order) / ideal)
}

/// Min-max rescaling to `[0, 1]`; a constant group maps to all zeros.
pub fn relevance(aps: &[f64]) -> Vec<f64> {
    let lo = aps.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = aps.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return vec![0.0; aps.len()];
    }
    aps.iter().map(|a| (a - lo) / (hi - lo)).collect()
}

/// 0-based position of every item when sorted by descending score; ties
/// keep index order.
pub fn predicted_positions(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut pos = vec![0; scores.len()];
    for (p, &item) in order.iter().enumerate() {
        pos[item] = p;
    }
    pos
}

/// NDCG change from swapping the positions of items `i` and `j`, in closed
/// form: only the two swapped terms of the DCG change.
pub fn delta_ndcg(rels: &[f64], positions: &[usize], i: usize, j: usize, ideal: f64) -> f64 {
    if ideal == 0.0 {
        return 0.0;
    }
    let d = (rels[i] - rels[j]) * (discount(positions[i]) - discount(positions[j]));
    d.abs() / ideal
}

/// Same quantity by recomputing NDCG for the list before and after the swap
/// of positions `a` and `b`.
pub fn delta_ndcg_full(rels_in_order: &[f64], a: usize, b: usize) -> Result<f64> {
    let before = ndcg(rels_in_order)?;
    let mut swapped = rels_in_order.to_vec();
    swapped.swap(a, b);
    Ok((ndcg(&swapped)? - before).abs())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn examples() {
        assert_eq!(ndcg(&[1.0, 0.5, 0.0]).unwrap(), 1.0);
        assert!((ndcg(&[0.0, 1.0]).unwrap() - 1.0 / 3f64.log2()).abs() < 1e-15);
        assert!((ndcg(&[0.0, 1.0]).unwrap() - 0.6309).abs() < 1e-4);
        assert_eq!(ndcg(&[0.7]).unwrap(), 1.0);
        assert_eq!(ndcg(&[0.0, 0.0]).unwrap(), 1.0);
        assert!(ndcg(&[]).is_err());
    }

    #[test]
    fn two_item_delta() {
        let rels = [1.0, 0.0];
        let pos = predicted_positions(&[2.0, 0.0]);
        let d = delta_ndcg(&rels, &pos, 0, 1, ideal_dcg(&rels));
        assert!((d - (1.0 - 1.0 / 3f64.log2())).abs() < 1e-15);
        assert!((d - 0.3691).abs() < 1e-4);
    }

    #[test]
    fn relevance_rescales() {
        let r = relevance(&[0.2, 0.6, 0.4]);
        assert_eq!(r[0], 0.0);
        assert_eq!(r[1], 1.0);
        assert!((r[2] - 0.5).abs() < 1e-15);
        assert_eq!(relevance(&[0.3, 0.3]), vec![0.0, 0.0]);
    }

    #[test]
    fn positions_break_ties_by_index() {
        assert_eq!(predicted_positions(&[1.0, 3.0, 1.0]), vec![1, 0, 2]);
    }
}
