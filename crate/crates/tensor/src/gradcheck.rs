use crate::error::TensorError;
use crate::{ParamId, ParamStore, Tape, Tensor, Var};

/// Maximum relative error between reverse-mode gradients and central
/// differences of a scalar-valued closure.
///
/// The error per coordinate is
/// `|analytic - numeric| / max(1e-8, |analytic| + |numeric|)`.
///
/// The closure may use any error type that tensor errors convert into.
pub fn grad_check<F, E>(f: F, inputs: &[Tensor<f64>], step: f64) -> Result<f64, E>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var, E>,
    E: From<TensorError>,
{
    let mut store = ParamStore::new();
    let ids: Vec<ParamId> = inputs
        .iter()
        .enumerate()
        .map(|(i, t)| store.add(format!("input{i}"), t.clone()))
        .collect();

    let mut tape = Tape::new();
    let vars: Vec<Var> = ids.iter().map(|&id| tape.param(&store, id)).collect();
    let loss = f(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;

    let eval = |values: &[Tensor<f64>]| -> Result<f64, E> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|v| tape.constant(v.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).item()?)
    };

    let mut values: Vec<Tensor<f64>> = inputs.to_vec();
    let mut worst = 0.0f64;
    for (k, &id) in ids.iter().enumerate() {
        let zeros = Tensor::zeros(inputs[k].shape());
        let analytic = grads.get(id).unwrap_or(&zeros).clone();
        for j in 0..inputs[k].len() {
            let orig = values[k].data()[j];
            values[k].data_mut()[j] = orig + step;
            let plus = eval(&values)?;
            values[k].data_mut()[j] = orig - step;
            let minus = eval(&values)?;
            values[k].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            let a = analytic.data()[j];
            let err = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-8);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}
