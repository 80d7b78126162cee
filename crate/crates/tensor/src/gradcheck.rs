//! Central finite differences, used as an independent check on [`Tape::backward`](crate::Tape::backward).

use crate::{Real, Result, Tape, Tensor, Var};

/// Central-difference estimate of `∂f/∂x` for every element of `x`:
/// `(f(x + eps·e_i) - f(x - eps·e_i)) / (2·eps)`.
pub fn finite_difference_grad<T: Real>(mut f: impl FnMut(&Tensor<T>) -> T, x: &Tensor<T>, eps: T) -> Tensor<T> {
    let all: Vec<usize> = (0..x.len()).collect();
    let g = finite_difference_at(&mut f, x, &all, eps);
    Tensor::new(x.shape().to_vec(), g).expect("same shape as x")
}

/// Central differences at the selected flat indices only.
pub fn finite_difference_at<T: Real>(
    mut f: impl FnMut(&Tensor<T>) -> T,
    x: &Tensor<T>,
    indices: &[usize],
    eps: T,
) -> Vec<T> {
    assert!(eps > T::zero(), "finite-difference step must be positive");
    let mut probe = x.clone();
    let two_eps = eps + eps;
    indices
        .iter()
        .map(|&i| {
            let orig = probe.data()[i];
            probe.data_mut()[i] = orig + eps;
            let up = f(&probe);
            probe.data_mut()[i] = orig - eps;
            let down = f(&probe);
            probe.data_mut()[i] = orig;
            (up - down) / two_eps
        })
        .collect()
}

/// Norm-wise relative error `‖a - b‖₂ / max(‖a‖₂, ‖b‖₂)`; zero when both are zero.
pub fn relative_error<T: Real>(a: &[T], b: &[T]) -> f64 {
    assert_eq!(a.len(), b.len(), "relative_error length mismatch");
    let norm = |v: &mut dyn Iterator<Item = f64>| v.map(|x| x * x).sum::<f64>().sqrt();
    let diff = norm(&mut a.iter().zip(b).map(|(x, y)| x.as_f64() - y.as_f64()));
    let scale = norm(&mut a.iter().map(|x| x.as_f64())).max(norm(&mut b.iter().map(|x| x.as_f64())));
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

/// Compare tape gradients with central differences for each input.
///
/// `build` records a scalar function of the inputs (all registered as
/// parameters). Returns one relative error per input, computed over at most
/// `max_coords` evenly spaced coordinates of that input.
pub fn check_gradients<T: Real>(
    inputs: &[Tensor<T>],
    eps: T,
    max_coords: usize,
    build: impl for<'t> Fn(&'t Tape<T>, &[Var<'t, T>]) -> Result<Var<'t, T>>,
) -> Result<Vec<f64>> {
    let tape = Tape::new();
    let vars: Vec<_> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let loss = build(&tape, &vars)?;
    let grads = tape.backward(loss)?;
    let eval = |which: usize, probe: &Tensor<T>| -> Result<T> {
        let tape = Tape::new();
        let vars: Vec<_> = inputs
            .iter()
            .enumerate()
            .map(|(i, t)| tape.param(if i == which { probe.clone() } else { t.clone() }))
            .collect();
        Ok(build(&tape, &vars)?.item())
    };
    let mut errors = Vec::with_capacity(inputs.len());
    for (i, (input, var)) in inputs.iter().zip(&vars).enumerate() {
        let idx = spread_indices(input.len(), max_coords);
        let analytic = grads.get_or_zeros(*var);
        let picked: Vec<T> = idx.iter().map(|&j| analytic.data()[j]).collect();
        let mut failure = None;
        let numeric = finite_difference_at(
            |probe| match eval(i, probe) {
                Ok(v) => v,
                Err(e) => {
                    failure.get_or_insert(e);
                    T::nan()
                }
            },
            input,
            &idx,
            eps,
        );
        if let Some(e) = failure {
            return Err(e);
        }
        errors.push(relative_error(&picked, &numeric));
    }
    Ok(errors)
}

fn spread_indices(len: usize, max: usize) -> Vec<usize> {
    if len <= max {
        return (0..len).collect();
    }
    let mut idx: Vec<usize> = (0..max).map(|k| k * len / max + (k * 7919) % (len / max).max(1)).collect();
    idx.dedup();
    idx
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_function_is_exact() {
        let x = Tensor::<f64>::from_f64(vec![4], &[0.3, -1.2, 7.0, 2.5]).unwrap();
        let g = finite_difference_grad(|t| t.data().iter().sum(), &x, 1e-5);
        for v in g.data() {
            assert!((v - 1.0).abs() < 1e-8);
        }
    }

    #[test]
    fn square_matches_closed_form() {
        let x = Tensor::<f64>::from_f64(vec![1], &[3.0]).unwrap();
        let g = finite_difference_grad(|t| t.data().iter().map(|v| v * v).sum(), &x, 1e-5);
        assert!((g.data()[0] - 6.0).abs() < 1e-6);
    }

    #[test]
    fn constant_function_has_zero_gradient() {
        let x = Tensor::<f64>::from_f64(vec![3], &[1.0, 2.0, 3.0]).unwrap();
        let g = finite_difference_grad(|_| 42.0, &x, 1e-5);
        assert!(g.data().iter().all(|v| v.abs() < 1e-9));
    }

    #[test]
    fn relative_error_is_scale_free() {
        assert_eq!(relative_error(&[0.0f64, 0.0], &[0.0, 0.0]), 0.0);
        let e1 = relative_error(&[1.0f64, 2.0], &[1.0, 2.001]);
        let e2 = relative_error(&[1000.0f64, 2000.0], &[1000.0, 2001.0]);
        assert!((e1 - e2).abs() < 1e-12);
    }
}
