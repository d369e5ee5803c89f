//! Linear maps that carry meta-features from an old extractor version into
//! the current extractor's space.

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::metafeat::MetaFeature;

pub const ORACLE_RIDGE: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransformMatrix {
    pub z: Tensor,
    pub source_version: usize,
    /// `L_trans` before each gradient step taken so far.
    pub trace: Vec<f64>,
}

impl TransformMatrix {
    pub fn identity(dim: usize, source_version: usize) -> Self {
        Self {
            z: Tensor::identity(dim),
            source_version,
            trace: Vec::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.z.rows()
    }

    /// `Z φ` for a feature of the matching version.
    pub fn apply(&self, phi: &MetaFeature) -> Result<Vec<f64>> {
        if phi.version != self.source_version {
            return Err(Error::VersionMismatch {
                expected: self.source_version,
                actual: phi.version,
            });
        }
        self.apply_raw(&phi.values)
    }

    pub fn apply_raw(&self, v: &[f64]) -> Result<Vec<f64>> {
        let d = self.dim();
        if v.len() != d {
            return Err(Error::Dimension {
                expected: d,
                actual: v.len(),
            });
        }
        Ok((0..d)
            .map(|r| self.z.row_slice(r).iter().zip(v).map(|(a, b)| a * b).sum())
            .collect())
    }

    /// `Σ_d |Z old_d - cur_d|^2`.
    pub fn loss(&self, old: &[Vec<f64>], cur: &[Vec<f64>]) -> Result<f64> {
        let mut total = 0.0;
        for (o, c) in old.iter().zip(cur) {
            let p = self.apply_raw(o)?;
            total += p.iter().zip(c).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
        }
        Ok(total)
    }

    /// `∂L_trans/∂Z = 2 (Z G - C)` as a row-major `D x D` vector.
    pub fn gradient(&self, old: &[Vec<f64>], cur: &[Vec<f64>]) -> Result<Vec<f64>> {
        let d = self.dim();
        let (g, c, _) = moments(old, cur, d);
        let zg = self.z.matmul(&Tensor::matrix(d, d, g)?)?.into_values();
        Ok(zg.iter().zip(&c).map(|(a, b)| 2.0 * (a - b)).collect())
    }

    /// `steps` plain gradient-descent updates on `L_trans` with learning
    /// rate `lr`, for fixed old/current feature pairs.
    pub fn train(&mut self, old: &[Vec<f64>], cur: &[Vec<f64>], steps: usize, lr: f64) -> Result<()> {
        let d = self.dim();
        if old.is_empty() {
            return Err(Error::EmptyBatch("transform_train"));
        }
        if old.len() != cur.len() {
            return Err(Error::Dimension {
                expected: old.len(),
                actual: cur.len(),
            });
        }
        for v in old.iter().chain(cur) {
            if v.len() != d {
                return Err(Error::Dimension {
                    expected: d,
                    actual: v.len(),
                });
            }
        }
        // L = tr(Z G Z^T) - 2 tr(Z C^T) + |Y|^2 with G = X X^T, C = Y X^T
        let (g, c, yy) = moments(old, cur, d);
        let g = Tensor::matrix(d, d, g)?;
        for _ in 0..steps {
            let zg = self.z.matmul(&g)?.into_values();
            let z = self.z.values_mut();
            let mut loss = yy;
            for i in 0..d * d {
                loss += z[i] * zg[i] - 2.0 * z[i] * c[i];
            }
            self.trace.push(loss.max(0.0));
            for i in 0..d * d {
                z[i] -= lr * 2.0 * (zg[i] - c[i]);
            }
        }
        if !self.z.is_finite() {
            return Err(Error::NonFinite("transform_train".into()));
        }
        Ok(())
    }
}

fn moments(old: &[Vec<f64>], cur: &[Vec<f64>], d: usize) -> (Vec<f64>, Vec<f64>, f64) {
    let mut g = vec![0.0; d * d];
    let mut c = vec![0.0; d * d];
    let mut yy = 0.0;
    for (x, y) in old.iter().zip(cur) {
        for i in 0..d {
            for j in 0..d {
                g[i * d + j] += x[i] * x[j];
                c[i * d + j] += y[i] * x[j];
            }
        }
        yy += y.iter().map(|v| v * v).sum::<f64>();
    }
    (g, c, yy)
}

/// Closed-form minimizer `Z = Y X^T (X X^T + ridge I)^{-1}`.
pub fn least_squares_oracle(old: &[Vec<f64>], cur: &[Vec<f64>], source_version: usize) -> Result<TransformMatrix> {
    let d = old.first().map(Vec::len).ok_or(Error::EmptyBatch("least_squares_oracle"))?;
    if old.len() < d {
        return Err(Error::RankDeficient(format!(
            "{} feature vectors for width {d}",
            old.len()
        )));
    }
    let (g, c, _) = moments(old, cur, d);
    let mut gm = DMatrix::from_row_slice(d, d, &g);
    let eig = SymmetricEigen::new(gm.clone());
    let (lo, hi) = eig
        .eigenvalues
        .iter()
        .fold((f64::INFINITY, 0.0f64), |(l, h), &e| (l.min(e), h.max(e)));
    if !(lo > hi * 1e-12) {
        return Err(Error::RankDeficient(format!(
            "eigenvalue ratio {:.3e}",
            lo / hi.max(f64::MIN_POSITIVE)
        )));
    }
    for i in 0..d {
        gm[(i, i)] += ORACLE_RIDGE;
    }
    let chol = gm
        .cholesky()
        .ok_or_else(|| Error::RankDeficient("cholesky failed".into()))?;
    // (G + rI) Z^T = C^T
    let ct = DMatrix::from_row_slice(d, d, &c).transpose();
    let zt = chol.solve(&ct);
    let z = zt.transpose();
    let values: Vec<f64> = (0..d).flat_map(|r| (0..d).map(move |k| (r, k))).map(|(r, k)| z[(r, k)]).collect();
    Ok(TransformMatrix {
        z: Tensor::matrix(d, d, values)?,
        source_version,
        trace: Vec::new(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::seeded_rng;

    #[test]
    fn apply_examples() {
        let phi = MetaFeature {
            values: vec![3.0, 5.0],
            version: 2,
        };
        let id = TransformMatrix::identity(2, 2);
        assert_eq!(id.apply(&phi).unwrap(), vec![3.0, 5.0]);
        let mut double = TransformMatrix::identity(2, 2);
        double.z.scale_assign(2.0);
        assert_eq!(double.apply(&phi).unwrap(), vec![6.0, 10.0]);
        let swap = TransformMatrix {
            z: Tensor::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap(),
            source_version: 2,
            trace: vec![],
        };
        assert_eq!(swap.apply(&phi).unwrap(), vec![5.0, 3.0]);
        let wrong = TransformMatrix::identity(2, 1);
        assert!(matches!(wrong.apply(&phi), Err(Error::VersionMismatch { .. })));
    }

    #[test]
    fn aligned_features_keep_identity() {
        let mut rng = seeded_rng(0);
        let feats: Vec<Vec<f64>> = (0..5).map(|_| (0..3).map(|_| rng.normal()).collect()).collect();
        let mut z = TransformMatrix::identity(3, 0);
        z.train(&feats, &feats, 20, 1e-2).unwrap();
        assert_eq!(z.z, Tensor::identity(3));
        assert!(z.trace.iter().all(|l| l.abs() < 1e-12));
    }

    #[test]
    fn loss_never_increases_at_small_lr() {
        let mut rng = seeded_rng(1);
        let old: Vec<Vec<f64>> = (0..8).map(|_| (0..4).map(|_| rng.normal()).collect()).collect();
        let cur: Vec<Vec<f64>> = (0..8).map(|_| (0..4).map(|_| rng.normal()).collect()).collect();
        let mut z = TransformMatrix::identity(4, 0);
        z.train(&old, &cur, 200, 1e-3).unwrap();
        assert!(z.trace.windows(2).all(|w| w[1] <= w[0] + 1e-12));
    }

    #[test]
    fn oracle_recovers_identity_and_rejects_rank_deficiency() {
        let mut rng = seeded_rng(2);
        let old: Vec<Vec<f64>> = (0..10).map(|_| (0..4).map(|_| rng.normal()).collect()).collect();
        let z = least_squares_oracle(&old, &old, 0).unwrap();
        for (a, b) in z.z.values().iter().zip(Tensor::identity(4).values()) {
            assert!((a - b).abs() < 1e-8);
        }
        assert!(least_squares_oracle(&old[..3], &old[..3], 0).is_err());
        let flat: Vec<Vec<f64>> = (0..10).map(|i| vec![i as f64, 0.0, 0.0, 0.0]).collect();
        assert!(matches!(
            least_squares_oracle(&flat, &flat, 0),
            Err(Error::RankDeficient(_))
        ));
    }
}
