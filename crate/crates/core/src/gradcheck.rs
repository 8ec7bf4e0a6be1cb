//! Central-difference gradient checking.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Maximum over all coordinates of all inputs of
/// `|analytic - numeric| / max(1, |analytic|, |numeric|)`.
///
/// `f` must record a scalar-valued computation of its inputs on the tape.
pub fn gradcheck_many<F>(f: F, inputs: &[Tensor], eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if eps <= 0.0 {
        return Err(Error::contract("gradcheck eps must be positive"));
    }
    let eval = |xs: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.leaf(x.clone())).collect();
        let out = f(&mut tape, &vars)?;
        tape.value(out).item()
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.leaf(x.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;

    let mut worst: f64 = 0.0;
    let mut probe = inputs.to_vec();
    for (which, var) in vars.iter().enumerate() {
        let analytic = grads.wrt(*var);
        for k in 0..inputs[which].numel() {
            let orig = inputs[which].data()[k];
            probe[which] = with_entry(&inputs[which], k, orig + eps);
            let plus = eval(&probe)?;
            probe[which] = with_entry(&inputs[which], k, orig - eps);
            let minus = eval(&probe)?;
            probe[which] = inputs[which].clone();

            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic.data()[k];
            let err = (a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs());
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

/// Single-input convenience wrapper around [`gradcheck_many`].
pub fn gradcheck<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    gradcheck_many(|tape, vars| f(tape, vars[0]), std::slice::from_ref(x), eps)
}

fn with_entry(t: &Tensor, k: usize, value: f64) -> Tensor {
    let mut data = t.data().to_vec();
    data[k] = value;
    Tensor::from_parts(t.shape().to_vec(), data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares_matches_closed_form() {
        let x = Tensor::row(vec![1.0, 2.0]);
        let mut tape = Tape::new();
        let v = tape.leaf(x.clone());
        let sq = tape.square(v).unwrap();
        let loss = tape.sum(sq);
        assert_eq!(tape.backward(loss).unwrap().wrt(v).data(), &[2.0, 4.0]);

        let err = gradcheck(
            |t, v| {
                let sq = t.square(v)?;
                Ok(t.sum(sq))
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn constant_function_has_zero_error() {
        let x = Tensor::row(vec![0.3, -4.0, 2.0]);
        let err = gradcheck(|t, _| Ok(t.leaf(Tensor::scalar(3.0))), &x, 1e-5).unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn rejects_non_positive_eps() {
        let x = Tensor::scalar(1.0);
        assert!(gradcheck(|t, v| Ok(t.sum(v)), &x, 0.0).is_err());
    }
}
