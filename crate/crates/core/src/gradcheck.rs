//! Central finite-difference gradient checking.
//!
//! The checker is the independent oracle for every differentiable op: it never
//! looks at how backward is implemented, it only re-evaluates the forward
//! function at perturbed inputs. Checks run in f64 with a symmetric step; the
//! relative error uses a small floor so that matching near-zero gradients do
//! not divide by zero.

use crate::rng::Rng;
use crate::tensor::{Tape, TensorRef};

/// Symmetric difference step.
pub const FD_STEP: f64 = 1e-5;
/// Required agreement between analytic and numeric gradients.
pub const FD_TOLERANCE: f64 = 1e-4;

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// One tracked input of the function under test.
pub struct CheckInput {
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

impl CheckInput {
    pub fn new(shape: &[usize], values: Vec<f64>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), values.len());
        CheckInput {
            shape: shape.to_vec(),
            values,
        }
    }

    /// Filled with draws from `rng.range(lo, hi)`.
    pub fn random(shape: &[usize], rng: &mut Rng, lo: f64, hi: f64) -> Self {
        let n = shape.iter().product();
        CheckInput {
            shape: shape.to_vec(),
            values: (0..n).map(|_| rng.range(lo, hi)).collect(),
        }
    }
}

/// Worst probe of one check.
#[derive(Debug, Clone, Copy)]
pub struct CheckReport {
    pub max_rel_err: f64,
    pub input: usize,
    pub element: usize,
    pub analytic: f64,
    pub numeric: f64,
}

/// Compare backward gradients of `build` against central finite differences
/// at `probes` random coordinates of the tracked inputs.
///
/// `build` must be a pure function of the leaf values: it is re-run many
/// times on fresh tapes and must return a scalar output.
pub fn check<F>(build: F, inputs: &[CheckInput], probes: usize, rng: &mut Rng) -> CheckReport
where
    F: Fn(&mut Tape<f64>, &[TensorRef]) -> TensorRef,
{
    let eval = |values: &[Vec<f64>]| -> f64 {
        let mut tape = Tape::new();
        let leaves: Vec<TensorRef> = inputs
            .iter()
            .zip(values)
            .map(|(inp, v)| tape.leaf(&inp.shape, v.clone()).expect("leaf"))
            .collect();
        let out = build(&mut tape, &leaves);
        tape.value(out)
    };

    // Analytic pass.
    let mut tape = Tape::new();
    let leaves: Vec<TensorRef> = inputs
        .iter()
        .map(|inp| tape.leaf(&inp.shape, inp.values.clone()).expect("leaf"))
        .collect();
    let out = build(&mut tape, &leaves);
    tape.backward(out).expect("backward");
    let analytic: Vec<Vec<f64>> = leaves
        .iter()
        .zip(inputs)
        .map(|(l, inp)| {
            tape.grad(*l)
                .map(|g| g.to_vec())
                .unwrap_or_else(|| vec![0.0; inp.values.len()])
        })
        .collect();

    let total: usize = inputs.iter().map(|i| i.values.len()).sum();
    assert!(total > 0, "no coordinates to probe");
    let mut base: Vec<Vec<f64>> = inputs.iter().map(|i| i.values.clone()).collect();
    let mut report = CheckReport {
        max_rel_err: 0.0,
        input: 0,
        element: 0,
        analytic: analytic[0].first().copied().unwrap_or(0.0),
        numeric: 0.0,
    };
    for _ in 0..probes {
        let mut flat = rng.below(total);
        let mut which = 0;
        while flat >= inputs[which].values.len() {
            flat -= inputs[which].values.len();
            which += 1;
        }
        let original = base[which][flat];
        base[which][flat] = original + FD_STEP;
        let up = eval(&base);
        base[which][flat] = original - FD_STEP;
        let down = eval(&base);
        base[which][flat] = original;
        let numeric = (up - down) / (2.0 * FD_STEP);
        let err = rel_err(analytic[which][flat], numeric);
        if err > report.max_rel_err {
            report = CheckReport {
                max_rel_err: err,
                input: which,
                element: flat,
                analytic: analytic[which][flat],
                numeric,
            };
        }
    }
    report
}

/// Assert helper used across the gradient tests.
#[track_caller]
pub fn assert_check<F>(build: F, inputs: &[CheckInput], probes: usize, rng: &mut Rng)
where
    F: Fn(&mut Tape<f64>, &[TensorRef]) -> TensorRef,
{
    let report = check(build, inputs, probes, rng);
    assert!(
        report.max_rel_err < FD_TOLERANCE,
        "gradient mismatch: rel err {:.3e} at input {} element {} (analytic {:.6e}, numeric {:.6e})",
        report.max_rel_err,
        report.input,
        report.element,
        report.analytic,
        report.numeric
    );
}

#[cfg(test)]
mod tests {
    use super::{check, rel_err, CheckInput, FD_TOLERANCE};
    use crate::rng::Rng;

    #[test]
    fn rel_err_floors_near_zero() {
        assert_eq!(rel_err(0.0, 0.0), 0.0);
        assert!(rel_err(1e-9, 0.0) < 1e-2);
        assert!((rel_err(2.0, 1.0) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn checker_flags_a_detached_path() {
        // y = sum(x * detach(x)): backward sees only the tracked factor, so
        // the analytic gradient is x while the true derivative is 2x. The
        // checker must notice the factor-of-two mismatch.
        let mut rng = Rng::seed_from(7);
        let x = CheckInput::random(&[6], &mut rng, 0.5, 2.0);
        let report = check(
            |tape, xs| {
                let vals = tape.values(xs[0]).to_vec();
                let frozen = tape.constant(&[6], vals).unwrap();
                let prod = tape.mul(xs[0], frozen).unwrap();
                tape.sum_all(prod).unwrap()
            },
            &[x],
            30,
            &mut rng,
        );
        assert!(
            report.max_rel_err > 0.4,
            "detached path went unnoticed: {report:?}"
        );
    }

    #[test]
    fn checker_accepts_an_exact_gradient() {
        let mut rng = Rng::seed_from(8);
        let x = CheckInput::random(&[6], &mut rng, -2.0, 2.0);
        let report = check(
            |tape, xs| {
                let sq = tape.mul(xs[0], xs[0]).unwrap();
                tape.sum_all(sq).unwrap()
            },
            &[x],
            30,
            &mut rng,
        );
        assert!(report.max_rel_err < FD_TOLERANCE, "{report:?}");
    }
}
