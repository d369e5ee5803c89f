use crate::autodiff::{sigmoid, Tape, Tensor, Var};
use crate::error::{Error, Result};

use super::ndcg::{delta_ndcg, ideal_dcg, predicted_positions, relevance};

/// `(i, j, weight)` for every same-group pair with `ap_i > ap_j`, weighted
/// by the NDCG change of swapping them in the score-induced order.
pub fn ranking_pairs(groups: &[usize], aps: &[f64], scores: &[f64]) -> Vec<(usize, usize, f64)> {
    let mut ids: Vec<usize> = groups.to_vec();
    ids.sort_unstable();
    ids.dedup();
    let mut pairs = Vec::new();
    for g in ids {
        let members: Vec<usize> = (0..groups.len()).filter(|&k| groups[k] == g).collect();
        let local_aps: Vec<f64> = members.iter().map(|&k| aps[k]).collect();
        let local_scores: Vec<f64> = members.iter().map(|&k| scores[k]).collect();
        let rels = relevance(&local_aps);
        let pos = predicted_positions(&local_scores);
        let ideal = ideal_dcg(&rels);
        for a in 0..members.len() {
            for b in 0..members.len() {
                if local_aps[a] > local_aps[b] {
                    let w = delta_ndcg(&rels, &pos, a, b, ideal);
                    pairs.push((members[a], members[b], w));
                }
            }
        }
    }
    pairs
}

/// Plain evaluation of the pairwise loss; 0 when no pair exists.
pub fn ranking_loss_value(groups: &[usize], aps: &[f64], scores: &[f64]) -> f64 {
    let pairs = ranking_pairs(groups, aps, scores);
    if pairs.is_empty() {
        return 0.0;
    }
    let total: f64 = pairs
        .iter()
        .map(|&(i, j, w)| -w * sigmoid(scores[i] - scores[j]).ln())
        .sum();
    total / pairs.len() as f64
}

/// Mean over valid pairs of `-ΔNDCG * log σ(s_i - s_j)`. The swap weights
/// are held constant under differentiation; the score order they depend on
/// is folded into the tape fingerprint.
pub fn ranking_loss(tape: &mut Tape, scores: Var, groups: &[usize], aps: &[f64]) -> Result<Var> {
    let s = tape.value(scores).values().to_vec();
    if s.len() != groups.len() || s.len() != aps.len() {
        return Err(Error::Dimension {
            expected: s.len(),
            actual: aps.len(),
        });
    }
    let pairs = ranking_pairs(groups, aps, &s);
    for p in predicted_positions(&s) {
        tape.record_decision(p as u64);
    }
    if pairs.is_empty() {
        return Ok(tape.constant(Tensor::scalar(0.0)));
    }
    let denom = pairs.len() as f64;
    tape.pairwise_logistic(scores, pairs, denom)
}

/// `max(|a - s|^2 - |a - o|^2 + alpha, 0)`.
pub fn triplet_loss(tape: &mut Tape, anchor: Var, same: Var, other: Var, alpha: f64) -> Result<Var> {
    let d_same = tape.sub(anchor, same)?;
    let d_same = tape.sum_squares(d_same)?;
    let d_other = tape.sub(anchor, other)?;
    let d_other = tape.sum_squares(d_other)?;
    let diff = tape.sub(d_same, d_other)?;
    let shifted = tape.offset(diff, alpha)?;
    tape.relu(shifted)
}

pub fn triplet_loss_value(anchor: &[f64], same: &[f64], other: &[f64], alpha: f64) -> f64 {
    let sq = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
    (sq(anchor, same) - sq(anchor, other) + alpha).max(0.0)
}

/// Mean squared error between scores and AP targets.
pub fn mse_loss(tape: &mut Tape, scores: Var, aps: &[f64]) -> Result<Var> {
    tape.mean_squared_error(scores, aps.to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_pair_by_hand() {
        // the better item is also scored higher by 2
        let l = ranking_loss_value(&[0, 0], &[0.9, 0.1], &[2.0, 0.0]);
        let expected = 0.369_070_246_428_542_9 * -(sigmoid(2.0).ln());
        assert!((l - expected).abs() < 1e-12);
        assert!((l - 0.04685).abs() < 1e-5);
    }

    #[test]
    fn equal_scores_give_delta_ln2() {
        let l = ranking_loss_value(&[0, 0], &[0.9, 0.1], &[0.5, 0.5]);
        assert!((l - 0.369_070_246_428_542_9 * 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn distinct_groups_have_no_pairs() {
        assert_eq!(ranking_loss_value(&[0, 1, 2], &[0.1, 0.5, 0.9], &[1.0, 2.0, 3.0]), 0.0);
        let mut t = Tape::new();
        let s = t.constant(Tensor::vector(vec![1.0, 2.0]));
        let l = ranking_loss(&mut t, s, &[0, 1], &[0.1, 0.2]).unwrap();
        assert_eq!(t.scalar(l), 0.0);
    }

    #[test]
    fn tape_matches_plain() {
        let groups = [0, 0, 0, 1, 1];
        let aps = [0.3, 0.8, 0.5, 0.2, 0.4];
        let scores = [0.1, -0.4, 0.9, 1.0, 0.3];
        let mut t = Tape::new();
        let s = t.constant(Tensor::vector(scores.to_vec()));
        let l = ranking_loss(&mut t, s, &groups, &aps).unwrap();
        assert!((t.scalar(l) - ranking_loss_value(&groups, &aps, &scores)).abs() < 1e-15);
    }

    #[test]
    fn triplet_examples() {
        let a = [0.0, 0.0];
        assert!((triplet_loss_value(&a, &a, &[0.3f64.sqrt(), 0.0], 0.5) - 0.2).abs() < 1e-12);
        assert_eq!(triplet_loss_value(&a, &a, &[0.8f64.sqrt(), 0.0], 0.5), 0.0);
        assert_eq!(triplet_loss_value(&a, &[1.0, 2.0], &[1.0, 2.0], 0.5), 0.5);
        let mut t = Tape::new();
        let va = t.constant(Tensor::row(a.to_vec()));
        let vo = t.constant(Tensor::row(vec![0.3f64.sqrt(), 0.0]));
        let l = triplet_loss(&mut t, va, va, vo, 0.5).unwrap();
        assert!((t.scalar(l) - 0.2).abs() < 1e-12);
    }
}
