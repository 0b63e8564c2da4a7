use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Max relative error between the tape's gradient of a scalar function and
/// central finite differences at `point`.
///
/// The error per coordinate is `|analytic - numeric| / max(1, |analytic|)`.
pub fn gradcheck<F>(f: F, point: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    gradcheck_many(
        |tape, vars| f(tape, vars[0]),
        std::slice::from_ref(point),
        eps,
    )
}

/// [`gradcheck`] over several inputs at once; the result is the max error
/// across every coordinate of every input.
pub fn gradcheck_many<F>(f: F, points: &[Tensor], eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(Error::InvalidArgument(format!(
            "gradcheck eps {eps} outside [1e-7, 1e-3]"
        )));
    }
    let mut tape = Tape::new();
    let vars: Vec<Var> = points.iter().map(|p| tape.leaf(p.clone(), true)).collect();
    let root = f(&mut tape, &vars)?;
    tape.backward(root)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(points)
        .map(|(v, p)| {
            tape.grad(*v)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(p.shape().to_vec()))
        })
        .collect();

    let eval = |inputs: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|p| tape.constant(p.clone())).collect();
        let root = f(&mut tape, &vars)?;
        Ok(tape.value(root).item())
    };

    let mut worst = 0.0f64;
    let mut probe = points.to_vec();
    for (which, grad) in analytic.iter().enumerate() {
        for i in 0..grad.numel() {
            let orig = probe[which].data()[i];
            probe[which].data_mut()[i] = orig + eps;
            let up = eval(&probe)?;
            probe[which].data_mut()[i] = orig - eps;
            let down = eval(&probe)?;
            probe[which].data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let a = grad.data()[i];
            worst = worst.max((a - numeric).abs() / a.abs().max(1.0));
        }
    }
    Ok(worst)
}
