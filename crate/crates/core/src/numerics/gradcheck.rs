use super::{NumericsError, Tape, Tensor, Var};

/// Largest `|analytic - numeric| / max(1, |numeric|)` over every coordinate
/// of every input, using central differences with step `eps`.
pub fn grad_check_many<F>(f: F, inputs: &[Tensor<f64>], eps: f64) -> Result<f64, NumericsError>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var, NumericsError>,
{
    let eval = |xs: &[Tensor<f64>]| -> Result<f64, NumericsError> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.constant(x.clone())).collect();
        let out = f(&mut tape, &vars)?;
        tape.value(out).item().ok_or_else(|| NumericsError::NonScalarLoss(tape.value(out).shape().to_vec()))
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.param(x.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;

    let mut worst = 0.0f64;
    let mut probe = inputs.to_vec();
    for (k, var) in vars.iter().enumerate() {
        let analytic = grads.get_or_zero(*var);
        for j in 0..inputs[k].len() {
            let orig = inputs[k].data()[j];
            probe[k].data_mut()[j] = orig + eps;
            let up = eval(&probe)?;
            probe[k].data_mut()[j] = orig - eps;
            let down = eval(&probe)?;
            probe[k].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let err = (analytic.data()[j] - numeric).abs() / numeric.abs().max(1.0);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

/// Single-input form of [`grad_check_many`].
pub fn grad_check<F>(f: F, x: &Tensor<f64>, eps: f64) -> Result<f64, NumericsError>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var, NumericsError>,
{
    grad_check_many(|tape, vars| f(tape, vars[0]), std::slice::from_ref(x), eps)
}
