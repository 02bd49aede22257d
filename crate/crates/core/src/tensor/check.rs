use super::{Graph, Primitive, Tensor, TensorError};
use crate::scalar::Scalar;

/// Central-difference gradient `(f(x+εe_i) − f(x−εe_i)) / 2ε` for every
/// coordinate of `x`.
pub fn finite_diff_grad<S: Scalar, F>(f: F, x: &Tensor<S>, eps: f64) -> Tensor<S>
where
    F: FnMut(&Tensor<S>) -> f64,
{
    let coords: Vec<usize> = (0..x.numel()).collect();
    let g = finite_diff_coords(f, x, eps, &coords);
    Tensor::from_f64(x.shape(), &g).expect("same shape as x")
}

/// Central differences restricted to the listed flat coordinates.
pub fn finite_diff_coords<S: Scalar, F>(mut f: F, x: &Tensor<S>, eps: f64, coords: &[usize]) -> Vec<f64>
where
    F: FnMut(&Tensor<S>) -> f64,
{
    assert!(eps > 0.0, "finite_diff: eps must be positive");
    let mut probe = x.clone();
    coords
        .iter()
        .map(|&i| {
            let orig = probe.data()[i];
            let (hi, lo) = (S::narrow(orig.widen() + eps), S::narrow(orig.widen() - eps));
            probe.data_mut()[i] = hi;
            let fp = f(&probe);
            probe.data_mut()[i] = lo;
            let fm = f(&probe);
            probe.data_mut()[i] = orig;
            // divide by the step actually taken after rounding to S
            (fp - fm) / (hi.widen() - lo.widen())
        })
        .collect()
}

/// Largest elementwise `|a − n| / max(|a|, |n|, floor)`.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    assert_eq!(analytic.len(), numeric.len(), "max_relative_error: length mismatch");
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}

/// Checks one primitive application: the `f32` analytic gradient of
/// `Σ probe ⊙ prim(inputs)` against central differences of the same
/// expression evaluated in `f64`. Inputs flagged in `differentiate` are
/// checked; returns the largest relative error over them.
pub fn primitive_grad_error(
    prim: &Primitive,
    inputs: &[Tensor<f64>],
    differentiate: &[bool],
    probe: &Tensor<f64>,
    eps: f64,
    floor: f64,
) -> Result<f64, TensorError> {
    assert_eq!(inputs.len(), differentiate.len());
    // evaluate both precisions at exactly the same f32-representable point
    let inputs: Vec<Tensor<f64>> = inputs.iter().map(|t| t.cast::<f32>().cast()).collect();
    let inputs = &inputs[..];
    let mut g = Graph::<f32>::new();
    let vars: Vec<_> = inputs
        .iter()
        .zip(differentiate)
        .enumerate()
        .map(|(i, (t, &d))| g.named_leaf(&format!("in{i}"), t.cast(), d))
        .collect();
    let y = g.apply(prim.clone(), &vars)?;
    let p = g.constant(probe.cast());
    let yp = g.mul(y, p)?;
    let loss = g.sum(yp)?;
    let grads = g.backward(loss)?;

    let eval = |ins: &[Tensor<f64>]| -> f64 {
        let mut g = Graph::<f64>::new();
        let vars: Vec<_> = ins.iter().map(|t| g.constant(t.clone())).collect();
        let y = g.apply(prim.clone(), &vars).expect("forward succeeded in f32");
        y_dot(g.value(y), probe)
    };
    let mut worst = 0.0f64;
    for (i, &d) in differentiate.iter().enumerate() {
        if !d {
            continue;
        }
        let analytic = grads
            .get(&format!("in{i}"))
            .map(|t| t.to_f64_vec())
            .unwrap_or_else(|| vec![0.0; inputs[i].numel()]);
        let mut work = inputs.to_vec();
        let numeric = finite_diff_grad(
            |t: &Tensor<f64>| {
                work[i] = t.clone();
                eval(&work)
            },
            &inputs[i],
            eps,
        );
        worst = worst.max(max_relative_error(&analytic, &numeric.to_f64_vec(), floor));
    }
    Ok(worst)
}

fn y_dot(y: &Tensor<f64>, probe: &Tensor<f64>) -> f64 {
    y.data().iter().zip(probe.data()).map(|(a, b)| a * b).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_at_three() {
        let x = Tensor::<f64>::from_f64(&[1], &[3.0]).unwrap();
        let g = finite_diff_grad(|t| t.data()[0] * t.data()[0], &x, 1e-3);
        assert!((g.data()[0] - 6.0).abs() <= 1e-5);
    }

    #[test]
    fn constant_function_has_zero_gradient() {
        let x = Tensor::<f32>::from_f64(&[3], &[1.0, -2.0, 0.5]).unwrap();
        let g = finite_diff_grad(|_| 7.0, &x, 1e-3);
        assert!(g.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn relative_error_uses_floor() {
        assert_eq!(max_relative_error(&[0.0], &[1e-9], 1e-6), 1e-3);
        assert_eq!(max_relative_error(&[2.0], &[1.0], 1e-6), 0.5);
    }
}
