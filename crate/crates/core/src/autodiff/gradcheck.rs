use super::params::ParamStore;
use super::rng::RngStream;
use super::tape::{Tape, Var};
use crate::error::{Error, Result};

/// Outcome of a central-difference gradient check.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    /// Coordinates dropped because `θ ± eps` crossed a kink.
    pub skipped: usize,
    /// Parameter name and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error <= tol
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Compares tape gradients against `(f(θ+eps) - f(θ-eps)) / (2 eps)`.
///
/// `build` records the scalar loss for a given parameter set. Up to
/// `coords_per_tensor` coordinates are drawn from every parameter tensor
/// (all of them when the tensor is smaller). A coordinate whose perturbation
/// changes the tape's branch fingerprint is replaced by another draw.
pub fn finite_diff_check<F>(
    mut build: F,
    params: &ParamStore,
    eps: f64,
    coords_per_tensor: usize,
    rng: &mut RngStream,
) -> Result<GradCheckReport>
where
    F: FnMut(&ParamStore) -> Result<(Tape, Var)>,
{
    let (tape, root) = build(params)?;
    let f0 = tape.scalar(root);
    if !f0.is_finite() {
        return Err(Error::NonFinite("finite_diff_check".into()));
    }
    let base_fp = tape.fingerprint();
    let grads = tape.backward(root)?;
    let analytic: std::collections::HashMap<String, Vec<f64>> = tape
        .param_grads(&grads)
        .into_iter()
        .map(|(k, t)| (k, t.into_values()))
        .collect();

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        checked: 0,
        skipped: 0,
        worst: None,
    };
    let mut probe = params.clone();
    let names: Vec<String> = params.names().map(str::to_string).collect();
    for name in names {
        let len = params.get(&name)?.len();
        let mut order: Vec<usize> = (0..len).collect();
        rng.shuffle(&mut order);
        let mut taken = 0;
        for idx in order {
            if taken >= coords_per_tensor {
                break;
            }
            let orig = params.get(&name)?.values()[idx];
            let mut eval = |delta: f64, probe: &mut ParamStore| -> Result<(f64, u64)> {
                probe.get_mut(&name)?.values_mut()[idx] = orig + delta;
                let (t, r) = build(probe)?;
                let v = t.scalar(r);
                if !v.is_finite() {
                    return Err(Error::NonFinite("finite_diff_check".into()));
                }
                Ok((v, t.fingerprint()))
            };
            let (fp, fpp) = eval(eps, &mut probe)?;
            let (fm, fpm) = eval(-eps, &mut probe)?;
            probe.get_mut(&name)?.values_mut()[idx] = orig;
            if fpp != base_fp || fpm != base_fp {
                report.skipped += 1;
                continue;
            }
            let numeric = (fp - fm) / (2.0 * eps);
            let a = analytic.get(&name).map_or(0.0, |g| g[idx]);
            let err = relative_error(a, numeric);
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = err;
                report.worst = Some((name.clone(), idx));
            }
            report.checked += 1;
            taken += 1;
        }
    }
    Ok(report)
}
