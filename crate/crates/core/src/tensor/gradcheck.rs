use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// One evaluation of a function under test: its value, the analytic
/// gradient from the tape, and the regime digest of the pass.
#[derive(Debug, Clone)]
pub struct Evaluation<S> {
    pub value: S,
    pub gradient: Vec<S>,
    pub regime: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FdReport {
    pub max_relative_error: f64,
    /// Coordinate with the largest error among those checked.
    pub worst_index: Option<usize>,
    pub checked: usize,
    /// Coordinates whose ±eps probes crossed a non-smooth boundary
    /// (quantization index or ReLU switch) and were therefore skipped.
    pub excluded: Vec<usize>,
}

/// Compare the analytic gradient with central differences.
///
/// Per coordinate the error is `|a − b| / max(1e-8, |a| + |b|)`; the report
/// carries the maximum. Probes whose regime digest differs from the base
/// point straddle a discontinuity and are excluded, not scored.
pub fn finite_difference_check<S, F>(mut f: F, params: &[S], eps: f64) -> Result<FdReport>
where
    S: Scalar,
    F: FnMut(&[S]) -> Result<Evaluation<S>>,
{
    if !(eps > 0.0) {
        return Err(Error::contract(format!("eps must be positive, got {eps}")));
    }
    let base = f(params)?;
    let again = f(params)?;
    let same_grad = base.gradient.len() == again.gradient.len()
        && base
            .gradient
            .iter()
            .zip(&again.gradient)
            .all(|(a, b)| a.f64().to_bits() == b.f64().to_bits());
    if base.value.f64().to_bits() != again.value.f64().to_bits() || !same_grad {
        return Err(Error::contract(
            "function is not deterministic: two evaluations at the same point disagree",
        ));
    }
    if base.gradient.len() != params.len() {
        return Err(Error::contract(format!(
            "gradient has {} entries for {} parameters",
            base.gradient.len(),
            params.len()
        )));
    }

    let mut report = FdReport {
        max_relative_error: 0.0,
        worst_index: None,
        checked: 0,
        excluded: Vec::new(),
    };
    let mut probe = params.to_vec();
    for i in 0..params.len() {
        let x = params[i];
        let xp = x + S::from_f64_lossy(eps);
        let xm = x - S::from_f64_lossy(eps);
        probe[i] = xp;
        let plus = f(&probe)?;
        probe[i] = xm;
        let minus = f(&probe)?;
        probe[i] = x;
        if plus.regime != base.regime || minus.regime != base.regime {
            report.excluded.push(i);
            continue;
        }
        let h = xp.f64() - xm.f64();
        let numeric = (plus.value.f64() - minus.value.f64()) / h;
        let analytic = base.gradient[i].f64();
        let err = (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8);
        report.checked += 1;
        if err > report.max_relative_error || report.worst_index.is_none() {
            report.max_relative_error = err.max(report.max_relative_error);
            report.worst_index = Some(i);
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Tape, Tensor};

    fn eval_with(
        params: &[f64],
        build: impl Fn(&mut Tape<f64>, crate::tensor::Var) -> Result<crate::tensor::Var>,
    ) -> Result<Evaluation<f64>> {
        let mut tape = Tape::new();
        let w = tape.param(Tensor::from_f64(&[params.len()], params)?);
        let y = build(&mut tape, w)?;
        let g = tape.backward(y)?;
        Ok(Evaluation {
            value: tape.value(y).item(),
            gradient: g.wrt(w).into_data(),
            regime: tape.regime(),
        })
    }

    #[test]
    fn linear_function_is_exact() {
        let p = [0.3, -0.2, 0.9];
        let r = finite_difference_check(
            |x| eval_with(x, |t, w| {
                let s = t.affine(w, 2.5, 0.1)?;
                t.sum(s)
            }),
            &p,
            1e-5,
        )
        .unwrap();
        assert!(r.max_relative_error < 1e-8, "{r:?}");
        assert_eq!(r.checked, 3);
    }

    #[test]
    fn quadratic_within_truncation_bound() {
        let p = [0.7, -0.4, 0.15, 0.99];
        let r = finite_difference_check(
            |x| eval_with(x, |t, w| {
                let s = t.square(w)?;
                t.sum(s)
            }),
            &p,
            1e-5,
        )
        .unwrap();
        assert!(r.max_relative_error < 1e-6, "{r:?}");
    }

    #[test]
    fn kink_inside_eps_is_excluded() {
        // relu kink at 0 sits within eps of the second coordinate
        let p = [0.5, 3e-6];
        let r = finite_difference_check(
            |x| eval_with(x, |t, w| {
                let s = t.relu(w)?;
                t.sum(s)
            }),
            &p,
            1e-5,
        )
        .unwrap();
        assert_eq!(r.excluded, vec![1]);
        assert_eq!(r.checked, 1);
    }

    #[test]
    fn nondeterminism_is_a_contract_violation() {
        let mut calls = 0.0;
        let r = finite_difference_check(
            |_x: &[f64]| {
                calls += 1.0;
                Ok(Evaluation {
                    value: calls,
                    gradient: vec![0.0],
                    regime: 0,
                })
            },
            &[1.0],
            1e-5,
        );
        assert!(matches!(r, Err(Error::Contract(_))));
    }
}
