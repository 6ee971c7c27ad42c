//! Finite-difference verification of tape gradients.

use crate::error::Result;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Outcome of comparing analytic and central-difference gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    /// Coordinate with the largest relative error.
    pub worst_index: usize,
    pub checked: usize,
    pub passed: bool,
}

/// Relative error with a small absolute floor so exact zeros compare cleanly.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let diff = (analytic - numeric).abs();
    let scale = analytic.abs().max(numeric.abs());
    if scale < 1e-12 {
        diff
    } else {
        diff / scale
    }
}

/// Compares `analytic[i]` with `(f(x + h·e_i) − f(x − h·e_i)) / 2h` for each
/// coordinate in `coords`. `eval(i, delta)` returns the function value with
/// coordinate `i` shifted by `delta`.
pub fn check_coordinates(
    analytic: &[f64],
    coords: &[usize],
    step: f64,
    tol: f64,
    mut eval: impl FnMut(usize, f64) -> Result<f64>,
) -> Result<GradCheckReport> {
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        worst_index: coords.first().copied().unwrap_or(0),
        checked: 0,
        passed: true,
    };
    for &i in coords {
        let numeric = (eval(i, step)? - eval(i, -step)?) / (2.0 * step);
        let rel = relative_error(analytic[i], numeric);
        report.max_abs_error = report.max_abs_error.max((analytic[i] - numeric).abs());
        if rel > report.max_rel_error {
            report.max_rel_error = rel;
            report.worst_index = i;
        }
        report.checked += 1;
    }
    report.passed = report.max_rel_error <= tol;
    Ok(report)
}

/// Checks the gradient of a scalar function `f` (built on a 64-bit tape) at
/// `point` over every coordinate.
pub fn grad_check<F>(f: F, point: &Tensor<f64>, step: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let x = tape.variable(point.clone());
    let y = f(&mut tape, x)?;
    let grads = tape.backward(y)?;
    let analytic = grads.get(x).expect("gradient for the checked point").to_f64_vec();

    let coords: Vec<usize> = (0..point.len()).collect();
    check_coordinates(&analytic, &coords, step, tol, |i, delta| {
        let mut shifted = point.clone();
        shifted.data_mut()[i] += delta;
        let mut tape = Tape::new();
        let x = tape.constant(shifted);
        let y = f(&mut tape, x)?;
        Ok(tape.value(y).item())
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cube_sum(tape: &mut Tape<f64>, x: Var) -> Result<Var> {
        let sq = tape.mul(x, x)?;
        let cube = tape.mul(sq, x)?;
        Ok(tape.sum(cube))
    }

    #[test]
    fn cubic_sum() {
        let p = Tensor::from_f64(&[2], &[1.0, 2.0]).unwrap();
        let mut tape = Tape::new();
        let x = tape.variable(p.clone());
        let y = cube_sum(&mut tape, x).unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[3.0, 12.0]);
        let report = grad_check(cube_sum, &p, 1e-4, 1e-6).unwrap();
        assert!(report.passed, "{report:?}");
    }

    #[test]
    fn linear_function_is_exact() {
        let p = Tensor::from_f64(&[3], &[0.3, -1.2, 4.0]).unwrap();
        let report = grad_check(
            |tape, x| {
                let y = tape.scale(x, 2.5);
                Ok(tape.sum(y))
            },
            &p,
            1e-4,
            1e-9,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-9, "{report:?}");
    }

    /// Every tape primitive in one smooth composite, away from ReLU kinks.
    #[test]
    fn primitive_composite() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut rand_t = |shape: &[usize]| {
            let n: usize = shape.iter().product();
            Tensor::<f64>::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
        };
        let w = rand_t(&[3, 2, 3]);
        let cb = rand_t(&[3]);
        let fc = rand_t(&[4, 6]);
        let reps = rand_t(&[2, 5, 4]);
        let m = rand_t(&[6, 4]);
        let target = rand_t(&[2, 4]);
        let point = rand_t(&[2, 2, 7]);
        let f = |tape: &mut Tape<f64>, x: Var| -> Result<Var> {
            let w = tape.constant(w.clone());
            let cb = tape.constant(cb.clone());
            let fc = tape.constant(fc.clone());
            let m = tape.constant(m.clone());
            let t = tape.constant(target.clone());
            let y = tape.conv1d(x, w)?;
            let y = tape.add_channel_bias(y, cb)?;
            let y = tape.max_pool1d(y, 2, 2)?;
            let y = tape.reshape(y, &[2, 6])?;
            let h = tape.matmul(y, m)?;
            let h2 = tape.matmul_nt(y, fc)?;
            let h = tape.add(h, h2)?;
            let phi = tape.row_dots(h, reps.clone())?;
            let a = tape.softmax_rows(phi, 0.7)?;
            let a = tape.normalize_rows(a)?;
            let att = tape.weighted_rows(a, reps.clone())?;
            let d = tape.mse(att, t)?;
            let ce_in = tape.sub(h, att)?;
            let ce = tape.softmax_cross_entropy(ce_in, &[1, 3])?;
            let prod = tape.mul(d, ce)?;
            let s = tape.scale(prod, 3.0);
            Ok(tape.add(s, d)?)
        };
        let report = grad_check(f, &point, 1e-4, 1e-6).unwrap();
        assert!(report.passed, "{report:?}");
    }
}
