use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};

/// `100 r / n` where `r` is the 1-based descending rank of `chosen` in
/// `pool`, ties taking their average rank.
pub fn normalized_rank(chosen: f64, pool: &[f64]) -> Result<f64> {
    if pool.is_empty() {
        return Err(Error::EmptyBatch("normalized_rank"));
    }
    let better = pool.iter().filter(|v| **v > chosen).count();
    let equal = pool.iter().filter(|v| **v == chosen).count();
    if equal == 0 {
        return Err(Error::Invalid(format!("value {chosen} is not in the pool")));
    }
    let rank = better as f64 + (equal as f64 + 1.0) / 2.0;
    Ok(100.0 * rank / pool.len() as f64)
}

fn check_budget(n: usize, b: usize) -> Result<()> {
    if b == 0 || b > n {
        return Err(Error::PoolTooSmall { requested: b, available: n });
    }
    Ok(())
}

/// Exact expectation of the best of `b` draws without replacement:
/// `Σ_k a_(k) C(k-1, b-1) / C(n, b)` over ascending order statistics.
pub fn expected_random_best(pool: &[f64], b: usize) -> Result<f64> {
    check_budget(pool.len(), b)?;
    let mut sorted = pool.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    // weight_k = C(k-1, b-1)/C(n, b), built up as a ratio to stay finite
    let mut w = 1.0 / choose_ratio_start(n, b);
    let mut total = 0.0;
    for k in b..=n {
        total += sorted[k - 1] * w;
        // C(k, b-1)/C(k-1, b-1) = k/(k-b+1)
        w *= k as f64 / (k + 1 - b) as f64;
    }
    Ok(total)
}

/// `C(n, b) / C(b-1, b-1) = C(n, b)` computed as a float product.
fn choose_ratio_start(n: usize, b: usize) -> f64 {
    (0..b).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

/// `100 (n+1) / ((b+1) n)`: expected normalized rank of the best of `b`
/// uniform draws without replacement.
pub fn expected_random_rank(n: usize, b: usize) -> Result<f64> {
    check_budget(n, b)?;
    Ok(100.0 * (n as f64 + 1.0) / ((b as f64 + 1.0) * n as f64))
}

/// `Σ_d (found_d - E[best of b in pool_d])` in AP percentage points.
pub fn delta_ap(found: &[f64], pools: &[Vec<f64>], b: usize) -> Result<f64> {
    if found.len() != pools.len() {
        return Err(Error::Dimension {
            expected: pools.len(),
            actual: found.len(),
        });
    }
    let mut total = 0.0;
    for (f, p) in found.iter().zip(pools) {
        total += f - expected_random_best(p, b)?;
    }
    Ok(100.0 * total)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CorrelationKind {
    Pearson,
    Spearman,
}

/// 1-based ranks with ties sharing their average rank.
pub fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut ranks = vec![0.0; xs.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && xs[order[j + 1]] == xs[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &o in &order[i..=j] {
            ranks[o] = r;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(xs: &[f64], ys: &[f64]) -> Result<f64> {
    let n = xs.len() as f64;
    let (mx, my) = (xs.iter().sum::<f64>() / n, ys.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::ZeroVariance("correlation"));
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

pub fn rank_correlation(xs: &[f64], ys: &[f64], kind: CorrelationKind) -> Result<f64> {
    if xs.len() != ys.len() {
        return Err(Error::Dimension {
            expected: xs.len(),
            actual: ys.len(),
        });
    }
    if xs.len() < 2 {
        return Err(Error::EmptyBatch("rank_correlation"));
    }
    match kind {
        CorrelationKind::Pearson => pearson(xs, ys),
        CorrelationKind::Spearman => pearson(&average_ranks(xs), &average_ranks(ys)),
    }
}

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Sample standard deviation (`n - 1` denominator); 0 for fewer than two values.
pub fn std_dev(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    (xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() - 1) as f64).sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairedTest {
    pub mean_diff: f64,
    pub t: f64,
    pub df: usize,
    /// One-sided p-value for `mean(a - b) < 0`.
    pub p_less: f64,
}

/// Paired Student t-test on `a - b`.
pub fn paired_t_test(a: &[f64], b: &[f64]) -> Result<PairedTest> {
    if a.len() != b.len() {
        return Err(Error::Dimension {
            expected: a.len(),
            actual: b.len(),
        });
    }
    if a.len() < 2 {
        return Err(Error::EmptyBatch("paired_t_test"));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let m = mean(&d);
    let s = std_dev(&d);
    let df = d.len() - 1;
    if s == 0.0 {
        let p = if m < 0.0 { 0.0 } else { 1.0 };
        return Ok(PairedTest {
            mean_diff: m,
            t: if m == 0.0 { 0.0 } else { m.signum() * f64::INFINITY },
            df,
            p_less: if m == 0.0 { 0.5 } else { p },
        });
    }
    let t = m / (s / (d.len() as f64).sqrt());
    let dist = StudentsT::new(0.0, 1.0, df as f64).map_err(|e| Error::Invalid(e.to_string()))?;
    Ok(PairedTest {
        mean_diff: m,
        t,
        df,
        p_less: dist.cdf(t),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::seeded_rng;

    #[test]
    fn normalized_rank_examples() {
        let pool: Vec<f64> = (0..200).map(|i| i as f64).collect();
        assert_eq!(normalized_rank(199.0, &pool).unwrap(), 0.5);
        assert_eq!(normalized_rank(0.0, &pool).unwrap(), 100.0);
        let flat = vec![0.3; 7];
        assert!((normalized_rank(0.3, &flat).unwrap() - 100.0 * 8.0 / 14.0).abs() < 1e-12);
        assert!(normalized_rank(0.0, &[]).is_err());
        assert!(normalized_rank(0.5, &[0.1]).is_err());
    }

    #[test]
    fn expected_best_examples() {
        let v = [1.0, 2.0, 3.0];
        assert!((expected_random_best(&v, 2).unwrap() - 8.0 / 3.0).abs() < 1e-12);
        assert!((expected_random_best(&v, 1).unwrap() - 2.0).abs() < 1e-12);
        assert_eq!(expected_random_best(&v, 3).unwrap(), 3.0);
        assert!(expected_random_best(&v, 4).is_err());
    }

    #[test]
    fn expected_best_large_pool_is_finite() {
        let pool: Vec<f64> = (0..2000).map(|i| i as f64 / 2000.0).collect();
        let e = expected_random_best(&pool, 50).unwrap();
        assert!(e.is_finite() && e < 1.0 && e > 0.9);
    }

    #[test]
    fn expected_rank_examples() {
        assert!((expected_random_rank(200, 4).unwrap() - 20.1).abs() < 1e-12);
        assert!((expected_random_rank(5, 1).unwrap() - 60.0).abs() < 1e-12);
        assert!((expected_random_rank(7, 7).unwrap() - 100.0 / 7.0).abs() < 1e-12);
        assert!(expected_random_rank(3, 4).is_err());
    }

    #[test]
    fn expected_rank_matches_enumeration() {
        // all 2-subsets of 6 distinct values
        let n = 6;
        let pool: Vec<f64> = (0..n).map(|i| i as f64).collect();
        let mut total = 0.0;
        let mut count = 0.0;
        for i in 0..n {
            for j in i + 1..n {
                total += normalized_rank(pool[i].max(pool[j]), &pool).unwrap();
                count += 1.0;
            }
        }
        assert!((total / count - expected_random_rank(n, 2).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn delta_ap_examples() {
        let d = delta_ap(&[0.7], &[vec![0.5, 0.6, 0.7]], 2).unwrap();
        assert!((d - 100.0 * (0.7 - (2.0 / 3.0 * 0.7 + 0.6 / 3.0))).abs() < 1e-9);
        assert!((d - 3.333333).abs() < 1e-5);
        let pool = vec![0.2, 0.4, 0.9];
        let e = expected_random_best(&pool, 2).unwrap();
        assert!(delta_ap(&[e, e], &[pool.clone(), pool], 2).unwrap().abs() < 1e-12);
    }

    #[test]
    fn correlation_examples() {
        let x = [1.0, 2.0, 3.0];
        assert!((rank_correlation(&x, &x, CorrelationKind::Pearson).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(rank_correlation(&x, &[3.0, 2.0, 1.0], CorrelationKind::Spearman).unwrap(), -1.0);
        assert!((rank_correlation(&x, &[1.0, 3.0, 2.0], CorrelationKind::Spearman).unwrap() - 0.5).abs() < 1e-12);
        assert!(matches!(
            rank_correlation(&x, &[1.0, 1.0, 1.0], CorrelationKind::Pearson),
            Err(Error::ZeroVariance(_))
        ));
        assert_eq!(average_ranks(&[5.0, 1.0, 5.0]), vec![2.5, 1.0, 2.5]);
    }

    #[test]
    fn paired_test_detects_shift() {
        let mut rng = seeded_rng(3);
        let b: Vec<f64> = (0..30).map(|_| rng.normal()).collect();
        let a: Vec<f64> = b.iter().map(|v| v - 1.0 + 0.1 * rng.normal()).collect();
        let t = paired_t_test(&a, &b).unwrap();
        assert!(t.p_less < 1e-6 && t.mean_diff < 0.0);
        let t = paired_t_test(&b, &a).unwrap();
        assert!(t.p_less > 0.99);
    }
}
