//! Finite-difference gradient checking, the independent oracle for backward().

use super::tape::Tape;
use super::tensor::Tensor;
use super::{AdError, Result};

/// Outcome of a gradient check: analytic and central-difference gradients
/// plus the max relative discrepancy.
#[derive(Debug, Clone)]
pub struct FdReport {
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
    pub max_rel_err: f64,
}

/// Compare the tape gradient of a scalar-valued function against central
/// finite differences at `point`.
///
/// `f` must build its graph from scratch on the tape it is given; it is
/// evaluated once for the analytic gradient and `2 * len` more times for the
/// differences. The relative error per coordinate is
/// `|analytic - cd| / max(1, |cd|)`.
pub fn finite_diff_check<F>(f: F, point: &Tensor, h: f64) -> Result<FdReport>
where
    F: Fn(&mut Tape, &Tensor) -> Result<Tensor>,
{
    assert!(h > 0.0, "step size must be positive");

    let eval = |values: &[f64]| -> Result<f64> {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::new(point.shape().to_vec(), values.to_vec())?);
        let loss = f(&mut tape, &x)?;
        if loss.shape() != [1] {
            return Err(AdError::NonScalarLoss(loss.shape().to_vec()));
        }
        let v = loss.item();
        if !v.is_finite() {
            return Err(AdError::NonFinite {
                context: format!("finite_diff_check evaluation at {values:?}"),
            });
        }
        Ok(v)
    };

    // analytic gradient at the point
    let analytic = {
        let mut tape = Tape::new();
        let x = tape.leaf(point);
        let loss = f(&mut tape, &x)?;
        if loss.shape() != [1] {
            return Err(AdError::NonScalarLoss(loss.shape().to_vec()));
        }
        if !loss.item().is_finite() {
            return Err(AdError::NonFinite {
                context: "finite_diff_check analytic evaluation".to_string(),
            });
        }
        let grads = tape.backward(&loss)?;
        grads.get_or_zeros(x.node().expect("leaf has a node"), point.len())
    };
    if analytic.iter().any(|v| !v.is_finite()) {
        return Err(AdError::NonFinite {
            context: "finite_diff_check analytic gradient".to_string(),
        });
    }

    let mut numeric = vec![0.0; point.len()];
    let mut work = point.values().to_vec();
    for i in 0..point.len() {
        let orig = work[i];
        work[i] = orig + h;
        let plus = eval(&work)?;
        work[i] = orig - h;
        let minus = eval(&work)?;
        work[i] = orig;
        numeric[i] = (plus - minus) / (2.0 * h);
    }

    let max_rel_err = analytic
        .iter()
        .zip(&numeric)
        .map(|(a, n)| (a - n).abs() / f64::max(1.0, n.abs()))
        .fold(0.0, f64::max);

    Ok(FdReport {
        analytic,
        numeric,
        max_rel_err,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tanh_at_zero() {
        // d/dx sum(tanh(x)) at 0 is exactly 1
        let point = Tensor::vector(vec![0.0]);
        let report = finite_diff_check(
            |tape, x| {
                let y = tape.tanh(x)?;
                tape.mean(&y)
            },
            &point,
            1e-6,
        )
        .unwrap();
        assert!((report.analytic[0] - 1.0).abs() < 1e-12);
        assert!(report.max_rel_err < 1e-8, "rel err {}", report.max_rel_err);
    }

    #[test]
    fn l1_away_from_kink() {
        let point = Tensor::vector(vec![0.3, -0.4, 0.7]);
        let target = Tensor::vector(vec![0.1, 0.1, 0.1]);
        let report = finite_diff_check(
            |tape, x| {
                let t = tape.leaf(&target);
                tape.l1_loss(x, &t)
            },
            &point,
            1e-6,
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-6, "rel err {}", report.max_rel_err);
    }

    #[test]
    fn stop_gradient_discrepancy_is_reported() {
        // analytic grad is 0 through a stop_gradient while the numeric one is
        // not; the check surfaces the gap instead of hiding it.
        let point = Tensor::vector(vec![2.0]);
        let report = finite_diff_check(
            |tape, x| {
                let sg = tape.stop_gradient(x)?;
                let y = tape.mul_elementwise(&sg, &sg)?;
                tape.mean(&y)
            },
            &point,
            1e-6,
        )
        .unwrap();
        assert_eq!(report.analytic[0], 0.0);
        assert!((report.numeric[0] - 4.0).abs() < 1e-6);
        assert!(report.max_rel_err >= 0.99);
    }

    #[test]
    fn non_finite_evaluation_is_an_error() {
        let point = Tensor::vector(vec![1e308]);
        let err = finite_diff_check(
            |tape, x| {
                let y = tape.mul_elementwise(x, x)?;
                tape.mean(&y)
            },
            &point,
            1.0,
        )
        .unwrap_err();
        assert!(matches!(err, AdError::NonFinite { .. }));
    }
}
