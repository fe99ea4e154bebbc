//! Central finite differences as an oracle for the analytic backward pass.

use super::{Scalar, Tape, Tensor, Var};
use crate::error::Result;

/// Denominator floor used by [`max_relative_error`].
pub const RELATIVE_ERROR_FLOOR: f64 = 1e-4;

/// Central-difference estimate of the gradient of the scalar function `f` at `x`.
pub fn finite_diff_grad<T: Scalar>(
    mut f: impl FnMut(&Tensor<T>) -> f64,
    x: &Tensor<T>,
    h: f64,
) -> Tensor<T> {
    let mut probe = x.clone();
    let mut grad = Vec::with_capacity(x.numel());
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = T::from_f64(orig.as_f64() + h);
        let up = f(&probe);
        probe.data_mut()[i] = T::from_f64(orig.as_f64() - h);
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        grad.push(T::from_f64((up - down) / (2.0 * h)));
    }
    Tensor::new(x.shape().to_vec(), grad).expect("same shape as x")
}

/// `max_i |a_i - b_i| / max(|a_i|, |b_i|, RELATIVE_ERROR_FLOOR)`.
pub fn max_relative_error<A: Scalar, B: Scalar>(a: &Tensor<A>, b: &Tensor<B>) -> f64 {
    assert_eq!(a.shape(), b.shape(), "relative error needs equal shapes");
    a.data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| {
            let (x, y) = (x.as_f64(), y.as_f64());
            (x - y).abs() / x.abs().max(y.abs()).max(RELATIVE_ERROR_FLOOR)
        })
        .fold(0.0, f64::max)
}

/// A scalar-valued computation that can be recorded at any precision.
pub trait ScalarGraph {
    fn build<T: Scalar>(&self, tape: &mut Tape<T>, inputs: &[Var]) -> Result<Var>;
}

/// Outcome of [`check_gradients`]: the worst relative error for each input.
#[derive(Clone, Debug)]
pub struct GradCheck {
    pub per_input: Vec<f64>,
}

impl GradCheck {
    pub fn max(&self) -> f64 {
        self.per_input.iter().copied().fold(0.0, f64::max)
    }
}

/// Compares the `f32` backward pass of `graph` against central differences
/// (step `h`) of the same forward computation evaluated in `f64`.
pub fn check_gradients<G: ScalarGraph>(graph: &G, inputs: &[Tensor<f32>], h: f64) -> Result<GradCheck> {
    let mut tape = Tape::<f32>::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t)).collect();
    let loss = graph.build(&mut tape, &vars)?;
    tape.backward(loss)?;
    let analytic: Vec<Tensor<f32>> = vars.iter().map(|&v| tape.grad(v).cloned().expect("leaf grad")).collect();

    let wide: Vec<Tensor<f64>> = inputs.iter().map(|t| t.cast()).collect();
    let mut per_input = Vec::with_capacity(inputs.len());
    for (k, grad) in analytic.iter().enumerate() {
        let numeric = finite_diff_grad(
            |x| {
                let mut tape = Tape::<f64>::new();
                let vars: Vec<Var> = wide
                    .iter()
                    .enumerate()
                    .map(|(j, t)| tape.leaf(if j == k { x.clone() } else { t.clone() }, false))
                    .collect();
                let out = graph.build(&mut tape, &vars).expect("graph built once already");
                tape.value(out).item().expect("scalar output")
            },
            &wide[k],
            h,
        );
        per_input.push(max_relative_error(grad, &numeric));
    }
    Ok(GradCheck { per_input })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fd_of_sum_is_ones() {
        let x = Tensor::<f64>::from_fn([3, 4], |i| (i as f64 * 0.3).sin());
        let g = finite_diff_grad(|t| t.data().iter().sum(), &x, 1e-3);
        assert!(g.data().iter().all(|v| (v - 1.0).abs() < 1e-6));
    }

    #[test]
    fn fd_of_sum_of_squares() {
        let x = Tensor::<f64>::new([2], vec![1.0, 2.0]).unwrap();
        let g = finite_diff_grad(|t| t.data().iter().map(|v| v * v).sum(), &x, 1e-3);
        assert!((g.data()[0] - 2.0).abs() < 1e-4);
        assert!((g.data()[1] - 4.0).abs() < 1e-4);
    }

    #[test]
    fn relative_error_uses_floor() {
        let a = Tensor::<f64>::new([2], vec![0.0, 1.0]).unwrap();
        let b = Tensor::<f64>::new([2], vec![1e-6, 1.0005]).unwrap();
        let e = max_relative_error(&a, &b);
        assert!((e - 0.01).abs() < 1e-9, "{e}");
    }
}
