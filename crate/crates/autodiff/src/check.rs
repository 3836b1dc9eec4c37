use crate::array::Array;
use crate::error::TapeError;
use crate::tape::{Tape, Var};

/// Compares the tape gradient of a scalar loss against central differences.
///
/// `build` receives a fresh tape and the trainable leaf holding `at`, and
/// returns the loss node. Returns the maximum over components of
/// `|fd_i - g_i| / (|g_i| + 1e-8)`.
pub fn finite_diff_check<F>(build: F, at: &Array, epsilon: f64) -> Result<f64, TapeError>
where
    F: Fn(&mut Tape, Var) -> Result<Var, TapeError>,
{
    assert!(epsilon > 0.0, "epsilon must be positive");
    let eval = |point: Array| -> Result<f64, TapeError> {
        let mut tape = Tape::new();
        let p = tape.param(point);
        let loss = build(&mut tape, p)?;
        tape.forward(loss)
    };

    let mut tape = Tape::new();
    let p = tape.param(at.clone());
    let loss = build(&mut tape, p)?;
    tape.forward(loss)?;
    let grad = tape.backward()?.wrt(p).clone();

    let mut worst: f64 = 0.0;
    for i in 0..at.len() {
        let mut plus = at.clone();
        plus.data_mut()[i] += epsilon;
        let mut minus = at.clone();
        minus.data_mut()[i] -= epsilon;
        let fd = (eval(plus)? - eval(minus)?) / (2.0 * epsilon);
        let g = grad.data()[i];
        worst = worst.max((fd - g).abs() / (g.abs() + 1e-8));
    }
    Ok(worst)
}
