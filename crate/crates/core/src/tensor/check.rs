use super::{Tape, Tensor, Var};
use crate::error::Result;

/// Compares the tape gradient of a scalar function against central
/// differences and returns the worst relative error,
/// `max |analytic - numeric| / max(1e-8, |numeric|)`.
///
/// `f` is evaluated on fresh tapes, once for the analytic gradient and twice
/// per coordinate. Panics if `f` fails, since that is a bug in the caller.
pub fn gradient_check<Func>(f: Func, x: &Tensor<f64>, eps: f64) -> f64
where
    Func: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    let eval = |input: Tensor<f64>| -> f64 {
        let mut tape = Tape::new();
        let v = tape.leaf(input, false);
        let out = f(&mut tape, v).expect("gradient_check: function failed");
        tape.value(out).data()[0]
    };

    let mut tape = Tape::new();
    let v = tape.leaf(x.clone(), true);
    let out = f(&mut tape, v).expect("gradient_check: function failed");
    tape.backward(out).expect("gradient_check: backward failed");
    let analytic = tape.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(x.shape()));

    let mut worst: f64 = 0.0;
    for i in 0..x.len() {
        let mut plus = x.clone();
        plus.data_mut()[i] += eps;
        let mut minus = x.clone();
        minus.data_mut()[i] -= eps;
        let numeric = (eval(plus) - eval(minus)) / (2.0 * eps);
        let err = (analytic.data()[i] - numeric).abs() / numeric.abs().max(1e-8);
        worst = worst.max(err);
    }
    worst
}
