//! Central finite-difference gradient checking.

use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Max over coordinates of `|analytic − numeric| / max(1, |analytic|)` for a
/// scalar function of one tensor, using central differences of step `h`.
pub fn grad_check<T, F>(f: F, x: &Tensor<T>, h: T) -> Result<T>
where
    T: Scalar,
    F: Fn(&mut Tape<T>, Var) -> Result<Var>,
{
    grad_check_many(|tape, vars| f(tape, vars[0]), std::slice::from_ref(x), h)
}

/// Like [`grad_check`] but perturbs every coordinate of every input.
pub fn grad_check_many<T, F>(f: F, inputs: &[Tensor<T>], h: T) -> Result<T>
where
    T: Scalar,
    F: Fn(&mut Tape<T>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let loss = f(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;

    let eval = |xs: &[Tensor<T>]| -> Result<T> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).item())
    };

    let two_h = h + h;
    let mut worst = T::zero();
    let mut probe: Vec<Tensor<T>> = inputs.to_vec();
    for (which, var) in vars.iter().enumerate() {
        let analytic = grads.get(*var).expect("leaf gradient").data().to_vec();
        for (i, &a) in analytic.iter().enumerate() {
            let orig = probe[which].data()[i];
            probe[which].data_mut()[i] = orig + h;
            let up = eval(&probe)?;
            probe[which].data_mut()[i] = orig - h;
            let down = eval(&probe)?;
            probe[which].data_mut()[i] = orig;
            let numeric = (up - down) / two_h;
            let err = (a - numeric).abs() / T::one().max(a.abs());
            if err.is_nan() {
                return Ok(T::infinity());
            }
            worst = worst.max(err);
        }
    }
    Ok(worst)
}
