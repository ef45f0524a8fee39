use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Largest relative discrepancy between the tape gradient of `f` at `x`
/// and a central finite difference with the given step.
///
/// The error for one coordinate is `|analytic − numeric| / max(1, |analytic|)`.
pub fn grad_check<F>(f: F, x: &Tensor, step: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    grad_check_many(|g, vars| f(g, vars[0]), std::slice::from_ref(x), step)
}

/// [`grad_check`] over several inputs at once; the maximum is taken over
/// every coordinate of every input.
pub fn grad_check_many<F>(f: F, xs: &[Tensor], step: f64) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    if !(step > 0.0 && step.is_finite()) {
        return Err(Error::contract(format!(
            "finite-difference step must be positive, got {step}"
        )));
    }

    let mut graph = Graph::new();
    let vars: Vec<Var> = xs.iter().map(|x| graph.param(x.clone())).collect();
    let loss = f(&mut graph, &vars)?;
    let value = graph.value(loss).item();
    if !value.is_finite() {
        return Err(Error::Numerical(format!(
            "objective is {value} at the base point"
        )));
    }
    graph.backward(loss)?;

    let eval = |inputs: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|x| g.constant(x.clone())).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.value(out).item())
    };

    let mut worst = 0.0_f64;
    let mut probe = xs.to_vec();
    for (t, var) in vars.iter().enumerate() {
        let analytic = graph
            .grad(*var)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; xs[t].numel()]);
        for (i, &a) in analytic.iter().enumerate() {
            let orig = xs[t].data()[i];
            probe[t].data_mut()[i] = orig + step;
            let plus = eval(&probe)?;
            probe[t].data_mut()[i] = orig - step;
            let minus = eval(&probe)?;
            probe[t].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            if !numeric.is_finite() || !a.is_finite() {
                return Err(Error::Numerical(format!(
                    "input {t}, coordinate {i}: analytic {} numeric {numeric}",
                    a
                )));
            }
            let err = (a - numeric).abs() / a.abs().max(1.0);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}
