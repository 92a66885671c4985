//! Central finite-difference verification of analytic gradients.

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::rng::Rng;

/// Gradient magnitude below which errors are measured absolutely.
pub const ABS_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct ParamReport {
    pub name: String,
    pub checked: usize,
    pub max_abs_error: f64,
    /// `max |analytic - numeric|` divided by the larger of the parameter's
    /// largest gradient magnitude and [`ABS_FLOOR`].
    pub max_rel_error: f64,
}

#[derive(Debug, Clone, Default)]
pub struct GradCheckReport {
    pub params: Vec<ParamReport>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_error).fold(0.0, f64::max)
    }

    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error() < tol
    }

    pub fn worst(&self) -> Option<&ParamReport> {
        self.params
            .iter()
            .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
    }
}

/// Which entries of each parameter to perturb.
#[derive(Debug, Clone, Copy)]
pub enum Coverage {
    All,
    /// At most this many entries per parameter, drawn without replacement
    /// from a generator seeded with `seed`.
    Sample { per_param: usize, seed: u64 },
}

/// Compares the gradients stored in `params` (populated by the caller's
/// backward pass) against `(f(θ+h) - f(θ-h)) / 2h` for each checked entry.
/// `f` must be a deterministic function of the parameter values; it is
/// evaluated twice up front and any difference is reported as an error.
pub fn finite_diff_check<F>(
    mut f: F,
    params: &mut ParamStore,
    h: f64,
    coverage: Coverage,
) -> Result<GradCheckReport>
where
    F: FnMut(&ParamStore) -> Result<f64>,
{
    if h <= 0.0 {
        return Err(Error::param(format!("step h must be positive, got {h}")));
    }
    let first = f(params)?;
    let second = f(params)?;
    if first.to_bits() != second.to_bits() {
        return Err(Error::Determinism { first, second });
    }

    let mut sampler = match coverage {
        Coverage::Sample { seed, .. } => Some(Rng::new(seed)),
        Coverage::All => None,
    };
    let ids: Vec<_> = params.ids().collect();
    let mut report = GradCheckReport::default();
    for id in ids {
        let n = params.get(id).value.len();
        let mut entries: Vec<usize> = (0..n).collect();
        if let (Coverage::Sample { per_param, .. }, Some(rng)) = (coverage, sampler.as_mut()) {
            rng.shuffle(&mut entries);
            entries.truncate(per_param);
            entries.sort_unstable();
        }
        let mut max_abs: f64 = 0.0;
        let mut scale: f64 = 0.0;
        for &e in &entries {
            let orig = params.get(id).value.data()[e];
            params.get_mut(id).value.data_mut()[e] = orig + h;
            let plus = f(params);
            params.get_mut(id).value.data_mut()[e] = orig - h;
            let minus = f(params);
            params.get_mut(id).value.data_mut()[e] = orig;
            let numeric = (plus? - minus?) / (2.0 * h);
            let analytic = params.get(id).grad.data()[e];
            max_abs = max_abs.max((analytic - numeric).abs());
            scale = scale.max(analytic.abs()).max(numeric.abs());
        }
        report.params.push(ParamReport {
            name: params.get(id).name.clone(),
            checked: entries.len(),
            max_abs_error: max_abs,
            max_rel_error: max_abs / scale.max(ABS_FLOOR),
        });
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn quadratic_is_exact() {
        let mut s = ParamStore::new();
        let id = s.add("theta", Tensor::new(vec![2], vec![1.0, 2.0]).unwrap()).unwrap();
        s.get_mut(id).grad = Tensor::new(vec![2], vec![2.0, 4.0]).unwrap();
        let f = |p: &ParamStore| Ok(p.get(id).value.data().iter().map(|x| x * x).sum());
        let r = finite_diff_check(f, &mut s, 1e-4, Coverage::All).unwrap();
        assert!(r.max_rel_error() < 1e-8, "{r:?}");
    }

    #[test]
    fn constant_function_has_zero_difference() {
        let mut s = ParamStore::new();
        s.add("theta", Tensor::filled(&[3], 0.5)).unwrap();
        let r = finite_diff_check(|_| Ok(7.0), &mut s, 1e-5, Coverage::All).unwrap();
        assert_eq!(r.params[0].max_abs_error, 0.0);
        assert_eq!(r.max_rel_error(), 0.0);
    }

    #[test]
    fn wrong_gradient_is_detected() {
        let mut s = ParamStore::new();
        let id = s.add("theta", Tensor::new(vec![1], vec![3.0]).unwrap()).unwrap();
        s.get_mut(id).grad = Tensor::new(vec![1], vec![1.0]).unwrap();
        let f = |p: &ParamStore| Ok(p.get(id).value.data()[0].powi(2));
        let r = finite_diff_check(f, &mut s, 1e-5, Coverage::All).unwrap();
        assert!(!r.passes(1e-3));
    }

    #[test]
    fn nondeterminism_is_reported() {
        let mut s = ParamStore::new();
        s.add("theta", Tensor::filled(&[1], 1.0)).unwrap();
        let mut calls = 0.0;
        let f = |_: &ParamStore| {
            calls += 1.0;
            Ok(calls)
        };
        assert!(matches!(
            finite_diff_check(f, &mut s, 1e-5, Coverage::All),
            Err(Error::Determinism { .. })
        ));
    }

    #[test]
    fn sampling_limits_entries() {
        let mut s = ParamStore::new();
        s.add("theta", Tensor::filled(&[50], 1.0)).unwrap();
        let r = finite_diff_check(
            |_| Ok(0.0),
            &mut s,
            1e-5,
            Coverage::Sample {
                per_param: 7,
                seed: 1,
            },
        )
        .unwrap();
        assert_eq!(r.params[0].checked, 7);
    }
}
