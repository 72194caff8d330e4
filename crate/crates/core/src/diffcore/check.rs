//! Finite-difference gradient verification.

use super::array::DiffArray;
use super::tape::{Tape, ValueId};
use crate::error::Result;

/// Step used by the finite-difference oracle unless a caller overrides it.
pub const FD_EPS: f64 = 1e-5;

const ABS_FLOOR: f64 = 1e-8;

/// Relative error with an absolute floor: differences below `1e-8` count as
/// zero, everything else is scaled by the larger magnitude.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    let diff = (analytic - numeric).abs();
    if diff <= ABS_FLOOR {
        0.0
    } else {
        diff / analytic.abs().max(numeric.abs())
    }
}

/// Compare tape gradients of a scalar-valued function against central
/// differences with step [`FD_EPS`]; returns the worst relative error.
pub fn grad_check<F>(params: &[DiffArray], build: F) -> Result<f64>
where
    F: Fn(&mut Tape, &[ValueId]) -> Result<ValueId>,
{
    grad_check_eps(params, FD_EPS, build)
}

/// Compare tape gradients of a scalar-valued function against central
/// differences and return the worst relative error over all coordinates.
///
/// `build` receives a fresh tape plus the leaf ids for `params` (in order)
/// and must return the scalar root. It is invoked twice per perturbed
/// coordinate, so keep the function small.
pub fn grad_check_eps<F>(params: &[DiffArray], eps: f64, build: F) -> Result<f64>
where
    F: Fn(&mut Tape, &[ValueId]) -> Result<ValueId>,
{
    let eval = |points: &[DiffArray]| -> Result<f64> {
        let mut tape = Tape::new();
        let ids: Vec<ValueId> = points.iter().map(|p| tape.constant(p.clone())).collect();
        let root = build(&mut tape, &ids)?;
        Ok(tape.value(root).data()[0])
    };

    // Analytic gradients from one reverse pass.
    let mut tape = Tape::new();
    let ids: Vec<ValueId> = params.iter().map(|p| tape.leaf(p.clone())).collect();
    let root = build(&mut tape, &ids)?;
    tape.backward(root)?;
    let analytic: Vec<Vec<f64>> = ids
        .iter()
        .map(|&id| tape.grad(id).map(<[f64]>::to_vec).unwrap_or_default())
        .collect();

    let mut worst = 0.0_f64;
    let mut points: Vec<DiffArray> = params.to_vec();
    for (pi, param) in params.iter().enumerate() {
        for ci in 0..param.numel() {
            let orig = param.data()[ci];
            points[pi].data_mut()[ci] = orig + eps;
            let up = eval(&points)?;
            points[pi].data_mut()[ci] = orig - eps;
            let down = eval(&points)?;
            points[pi].data_mut()[ci] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let a = analytic[pi].get(ci).copied().unwrap_or(0.0);
            worst = worst.max(rel_err(a, numeric));
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rel_err_floor() {
        assert_eq!(rel_err(1.0, 1.0 + 5e-9), 0.0);
        assert!((rel_err(2.0, 1.0) - 0.5).abs() < 1e-12);
        assert_eq!(rel_err(0.0, 0.0), 0.0);
    }

    #[test]
    fn quadratic_gradient_matches() {
        // f(x) = sum(x ⊙ x), df/dx = 2x.
        let x = DiffArray::vector(vec![0.5, -1.3, 2.2]);
        let worst = grad_check(&[x], |tape, ids| {
            let sq = tape.hadamard(ids[0], ids[0])?;
            tape.sum_all(sq)
        })
        .unwrap();
        assert!(worst < 1e-6, "worst rel err {worst}");
    }
}
