//! Central-difference gradient checking.

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Compares the tape gradient of `f` at `x` against central differences.
///
/// Returns the maximum over coordinates of
/// `|analytic − numeric| / (|numeric| + 1e-8)`.
pub fn finite_difference_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, Var<'t>) -> Result<Var<'t>>,
{
    #[allow(clippy::neg_cmp_op_on_partial_ord)] // also rejects NaN
    if !(eps > 0.0) {
        return Err(Error::InvalidArgument {
            op: "finite_difference_check",
            msg: format!("eps must be positive, got {eps}"),
        });
    }
    let analytic = {
        let tape = Tape::new();
        let xv = tape.leaf(x.clone(), true);
        let y = f(&tape, xv)?;
        let g = tape.grad(y, &[xv], false)?;
        match g[0] {
            Some(g) => (*g.value()).clone(),
            None => Tensor::zeros(x.shape()),
        }
    };
    let eval = |probe: Tensor| -> Result<f64> {
        let tape = Tape::new();
        let xv = tape.leaf(probe, true);
        Ok(f(&tape, xv)?.item())
    };
    let mut worst: f64 = 0.0;
    for i in 0..x.len() {
        let mut plus = x.clone();
        plus.data_mut()[i] += eps;
        let mut minus = x.clone();
        minus.data_mut()[i] -= eps;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * eps);
        let err = (analytic.data()[i] - numeric).abs() / (numeric.abs() + 1e-8);
        worst = worst.max(err);
    }
    Ok(worst)
}
