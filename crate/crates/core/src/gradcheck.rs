//! Central finite-difference verification of reverse-mode gradients.

use crate::error::{Error, Result};
use crate::graph::{Tape, Var};
use crate::params::{ParamId, ParamStore};

/// Coordinates where both gradients are smaller than this are compared on an
/// absolute rather than relative scale.
pub const RELATIVE_FLOOR: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub worst_param: Option<String>,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub coordinates: usize,
}

/// `|a - n| / max(|a|, |n|, RELATIVE_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(RELATIVE_FLOOR);
    (analytic - numeric).abs() / denom
}

/// Compares the tape gradient of `f` against `(f(θ+h) - f(θ-h)) / 2h` for every
/// scalar of the parameters in `check` (all parameters when `None`).
pub fn grad_check<F>(
    store: &mut ParamStore,
    check: Option<&[ParamId]>,
    h: f64,
    f: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape) -> Result<Var>,
{
    if !(1e-6..=1e-4).contains(&h) {
        return Err(Error::Config(format!("finite-difference step {h} out of range")));
    }
    let eval = |store: &ParamStore| -> Result<f64> {
        let mut tape = Tape::new(store);
        let out = f(&mut tape)?;
        let v = tape.value(out).item();
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("objective evaluated to {v}")));
        }
        Ok(v)
    };

    let analytic = {
        let mut tape = Tape::new(store);
        let out = f(&mut tape)?;
        let v = tape.value(out).item();
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("objective evaluated to {v}")));
        }
        tape.backward(out)
    };

    let ids: Vec<ParamId> = match check {
        Some(ids) => ids.to_vec(),
        None => store.ids().collect(),
    };
    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        worst_param: None,
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        coordinates: 0,
    };
    for id in ids {
        for i in 0..store.get(id).len() {
            let orig = store.get(id).data()[i];
            store.get_mut(id).data_mut()[i] = orig + h;
            let plus = eval(store);
            store.get_mut(id).data_mut()[i] = orig - h;
            let minus = eval(store);
            store.get_mut(id).data_mut()[i] = orig;
            let numeric = (plus? - minus?) / (2.0 * h);
            let a = analytic.get(id)[i];
            let err = relative_error(a, numeric);
            report.coordinates += 1;
            if err > report.max_relative_error || report.worst_param.is_none() {
                report.max_relative_error = err;
                report.worst_param = Some(store.name(id).to_string());
                report.worst_index = i;
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use crate::tensor::Tensor;

    #[test]
    fn square_at_three() {
        let mut s = ParamStore::new();
        let x = s.add("x", Tensor::vector(vec![3.0])).unwrap();
        let r = grad_check(&mut s, None, 1e-5, |t| {
            let v = t.param(x);
            let sq = t.powi(v, 2);
            Ok(t.sum(sq))
        })
        .unwrap();
        assert!((r.analytic - 6.0).abs() < 1e-12);
        assert!(r.max_relative_error < 1e-8, "{r:?}");
    }

    #[test]
    fn sum_of_sigmoids() {
        let mut rng = Rng::new(11);
        let mut s = ParamStore::new();
        let x = s.add_uniform("x", &[7], 3.0, &mut rng).unwrap();
        let r = grad_check(&mut s, None, 1e-5, |t| {
            let v = t.param(x);
            let sg = t.sigmoid(v);
            Ok(t.sum(sg))
        })
        .unwrap();
        assert!(r.max_relative_error < 1e-6, "{r:?}");
    }

    #[test]
    fn non_finite_objective_is_reported() {
        let mut s = ParamStore::new();
        let x = s.add("x", Tensor::vector(vec![0.0])).unwrap();
        let err = grad_check(&mut s, None, 1e-5, |t| {
            let v = t.param(x);
            let l = t.log(v);
            Ok(t.sum(l))
        })
        .unwrap_err();
        assert!(matches!(err, Error::NonFinite(_)));
    }

    #[test]
    fn step_out_of_range() {
        let mut s = ParamStore::new();
        s.add("x", Tensor::vector(vec![1.0])).unwrap();
        assert!(grad_check(&mut s, None, 0.5, |t| Ok(t.constant_vector(vec![0.0]))).is_err());
    }
}
