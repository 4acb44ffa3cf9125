use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// `|a − n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Worst relative error between the tape gradient of `f` at `x` and central
/// differences with step `h`.
pub fn finite_diff_check<F>(x: &Tensor, h: f64, mut f: F) -> Result<f64>
where
    F: FnMut(&mut Tape, Var) -> Result<Var>,
{
    finite_diff_check_many(std::slice::from_ref(x), h, |t, vs| f(t, vs[0]))
}

/// Multi-input form of [`finite_diff_check`]; every coordinate of every
/// input is perturbed.
pub fn finite_diff_check_many<F>(inputs: &[Tensor], h: f64, f: F) -> Result<f64>
where
    F: FnMut(&mut Tape, &[Var]) -> Result<Var>,
{
    Ok(finite_diff_report(inputs, h, f)?.max_rel_error)
}

/// Outcome of a finite-difference comparison.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct GradReport {
    pub max_rel_error: f64,
    /// Coordinates compared.
    pub checked: usize,
    /// Coordinates whose step straddles a kink (the one-sided slopes
    /// disagree). There the analytic value only has to match one side.
    pub kinks: usize,
}

/// One-sided slopes further apart than this, relative to their size or the
/// tensor's mean slope, mark a kink.
const KINK_GAP: f64 = 1e-4;

pub fn finite_diff_report<F>(inputs: &[Tensor], h: f64, mut f: F) -> Result<GradReport>
where
    F: FnMut(&mut Tape, &[Var]) -> Result<Var>,
{
    if !(h > 0.0) {
        return Err(Error::Param(format!("finite-difference step {h} must be positive")));
    }
    let eval = |f: &mut F, values: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> =
            values.iter().map(|t| tape.leaf_from(t.shape().to_vec(), t.data().to_vec(), false)).collect();
        let out = f(&mut tape, &vars)?;
        let v = tape.scalar(out);
        if !v.is_finite() {
            return Err(Error::Numeric("function value is not finite".into()));
        }
        Ok(v)
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf_from(t.shape().to_vec(), t.data().to_vec(), true)).collect();
    let out = f(&mut tape, &vars)?;
    let center = tape.scalar(out);
    if !center.is_finite() {
        return Err(Error::Numeric("function value is not finite".into()));
    }
    tape.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars.iter().map(|v| tape.grad_or_zero(*v)).collect();

    let mut work: Vec<Tensor> = inputs.to_vec();
    let mut report = GradReport::default();
    for (i, grads) in analytic.iter().enumerate() {
        let typical = grads.iter().map(|g| g.abs()).sum::<f64>() / grads.len().max(1) as f64;
        for j in 0..grads.len() {
            let orig = work[i].data()[j];
            work[i].data_mut()[j] = orig + h;
            let up = eval(&mut f, &work)?;
            work[i].data_mut()[j] = orig - h;
            let down = eval(&mut f, &work)?;
            work[i].data_mut()[j] = orig;
            let (fwd, bwd) = ((up - center) / h, (center - down) / h);
            let mut err = relative_error(grads[j], (up - down) / (2.0 * h));
            if (fwd - bwd).abs() > KINK_GAP * fwd.abs().max(bwd.abs()).max(typical).max(1e-8) {
                report.kinks += 1;
                err = err.min(relative_error(grads[j], fwd)).min(relative_error(grads[j], bwd));
            }
            report.checked += 1;
            report.max_rel_error = report.max_rel_error.max(err);
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_at_three() {
        let x = Tensor::scalar(3.0);
        let err = finite_diff_check(&x, 1e-5, |t, v| Ok(t.square(v))).unwrap();
        assert!(err < 1e-9, "{err}");
    }

    #[test]
    fn constant_function_has_zero_error() {
        let x = Tensor::full(&[3], 2.0);
        let err = finite_diff_check(&x, 1e-5, |t, _| t.constant(&[], vec![4.0])).unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn nan_is_an_error() {
        let x = Tensor::scalar(1.0);
        let res = finite_diff_check(&x, 1e-5, |t, _| t.constant(&[], vec![f64::NAN]));
        assert!(matches!(res, Err(Error::Numeric(_))));
    }

    #[test]
    fn rejects_bad_step() {
        let x = Tensor::scalar(1.0);
        assert!(finite_diff_check(&x, 0.0, |t, v| Ok(t.square(v))).is_err());
    }

    #[test]
    fn kink_matches_one_side() {
        let x = Tensor::new(vec![2], vec![0.0, 0.5]).unwrap();
        let r = finite_diff_report(&[x], 1e-5, |t, v| {
            let y = t.relu(v[0]);
            Ok(t.sum(y))
        })
        .unwrap();
        assert_eq!((r.checked, r.kinks), (2, 1));
        assert!(r.max_rel_error < 1e-9);
    }

    #[test]
    fn detached_path_is_caught() {
        // y = x·stop(x): true slope 2x, the tape only sees x
        let x = Tensor::new(vec![1], vec![0.7]).unwrap();
        let err = finite_diff_check(&x, 1e-5, |t, v| {
            let c = t.value(v).to_vec();
            let c = t.constant(&[1], c)?;
            let y = t.mul(v, c)?;
            Ok(t.sum(y))
        })
        .unwrap();
        assert!(err > 0.4, "{err}");
    }
}
