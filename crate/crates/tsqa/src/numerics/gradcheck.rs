use super::{GradTape, NumericsError, Tensor, TensorId};

/// Compares the tape gradient of a scalar-valued function against central
/// finite differences and returns the worst relative error
/// `|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)` over all input
/// elements. `step` must lie in `(0, 1e-2]`.
pub fn check_gradient<F>(f: F, input: &Tensor, step: f64) -> Result<f64, NumericsError>
where
    F: Fn(&mut GradTape, TensorId) -> Result<TensorId, NumericsError>,
{
    if !(step > 0.0 && step <= 1e-2) {
        return Err(NumericsError::InvalidArgument {
            op: "check_gradient",
            detail: format!("step {step} outside (0, 1e-2]"),
        });
    }
    let mut tape = GradTape::new();
    let id = tape.leaf(input.clone().with_grad());
    let out = f(&mut tape, id)?;
    if !tape.value(out).is_scalar() {
        return Err(NumericsError::NonScalarOutput {
            op: "check_gradient",
            shape: tape.value(out).shape().to_vec(),
        });
    }
    tape.backward(out)?;
    let analytic = tape.grad(id).expect("requires_grad leaf has gradient").to_vec();

    let eval = |perturbed: Tensor| -> Result<f64, NumericsError> {
        let mut t = GradTape::new();
        let pid = t.leaf(perturbed);
        let o = f(&mut t, pid)?;
        Ok(t.value(o).data()[0])
    };

    let mut worst = 0.0_f64;
    for i in 0..input.numel() {
        let mut plus = input.clone();
        plus.data_mut()[i] += step;
        let mut minus = input.clone();
        minus.data_mut()[i] -= step;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * step);
        let denom = analytic[i].abs().max(numeric.abs()).max(1e-8);
        worst = worst.max((analytic[i] - numeric).abs() / denom);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_sum_is_exact() {
        let x = Tensor::from_rows(&[vec![1.0, -2.0, 3.0]]).unwrap();
        let err = check_gradient(|t, id| t.sum_all(id), &x, 1e-5).unwrap();
        assert!(err < 1e-9, "err={err}");
    }

    #[test]
    fn quadratic_matches_finite_difference() {
        let x = Tensor::from_rows(&[vec![1.0, 2.0]]).unwrap();
        let err = check_gradient(
            |t, id| {
                let sq = t.mul(id, id)?;
                t.sum_all(sq)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-7, "err={err}");
    }

    #[test]
    fn rejects_bad_step() {
        let x = Tensor::scalar(1.0).unwrap();
        assert!(check_gradient(|t, id| t.sum_all(id), &x, 0.0).is_err());
        assert!(check_gradient(|t, id| t.sum_all(id), &x, 0.5).is_err());
    }

    #[test]
    fn rejects_non_scalar_objective() {
        let x = Tensor::from_rows(&[vec![1.0, 2.0]]).unwrap();
        assert!(matches!(
            check_gradient(|t, id| t.scale(id, 2.0), &x, 1e-5),
            Err(NumericsError::NonScalarOutput { .. })
        ));
    }

    #[test]
    fn softmax_cross_entropy_chain() {
        let x = Tensor::from_rows(&[vec![0.2, -0.4, 0.9, 0.1]]).unwrap();
        let err = check_gradient(|t, id| t.cross_entropy(id, &[(0, 2)]), &x, 1e-5).unwrap();
        assert!(err <= 1e-5, "err={err}");
    }
}
