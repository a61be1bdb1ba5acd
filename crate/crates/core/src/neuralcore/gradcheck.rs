//! Central finite-difference comparison against the tape's analytic gradients.

use super::params::{Gradients, ParamStore};
use super::tape::{Tape, Var};
use super::tensor::Tensor;
use super::NnError;

/// `|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Largest relative error between the tape gradient of `f` at `x` and the
/// central difference `(f(x + h) - f(x - h)) / 2h`, over every element of `x`.
pub fn finite_difference_check<G>(f: G, x: &Tensor<f64>, step: f64) -> Result<f64, NnError>
where
    G: Fn(&mut Tape<'_, f64>, Var) -> Result<Var, NnError>,
{
    let mut tape = Tape::new();
    let xv = tape.input(x.clone(), true);
    let loss = f(&mut tape, xv)?;
    tape.backward(loss)?;
    let analytic = tape
        .grad(xv)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(x.shape()));

    let eval = |probe: Tensor<f64>| -> Result<f64, NnError> {
        let mut tape = Tape::new();
        let v = tape.input(probe, false);
        let out = f(&mut tape, v)?;
        Ok(tape.value(out).item())
    };
    let mut worst = 0.0f64;
    for i in 0..x.len() {
        let mut plus = x.clone();
        plus.data_mut()[i] += step;
        let mut minus = x.clone();
        minus.data_mut()[i] -= step;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * step);
        worst = worst.max(relative_error(analytic.data()[i], numeric));
    }
    Ok(worst)
}

/// Outcome of [`param_gradient_check`].
#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub max_relative_error: f64,
    /// Parameter name and flat index of the worst element.
    pub worst: Option<(String, usize)>,
    pub checked: usize,
}

/// Same comparison as [`finite_difference_check`], but over every element of
/// every trainable parameter in `store`. `f` builds the scalar loss on a tape
/// bound to the (possibly perturbed) store.
pub fn param_gradient_check<G>(
    store: &ParamStore<f64>,
    f: G,
    step: f64,
) -> Result<ParamCheck, NnError>
where
    G: Fn(&mut Tape<'_, f64>) -> Result<Var, NnError>,
{
    param_gradient_check_where(store, f, step, |_| true)
}

/// [`param_gradient_check`] restricted to the parameters whose name passes
/// `include`.
pub fn param_gradient_check_where<G, P>(
    store: &ParamStore<f64>,
    f: G,
    step: f64,
    include: P,
) -> Result<ParamCheck, NnError>
where
    G: Fn(&mut Tape<'_, f64>) -> Result<Var, NnError>,
    P: Fn(&str) -> bool,
{
    let mut grads = Gradients::for_store(store);
    {
        let mut tape = Tape::with_params(store);
        let loss = f(&mut tape)?;
        tape.backward(loss)?;
        tape.collect_param_grads(&mut grads);
    }
    let eval = |s: &ParamStore<f64>| -> Result<f64, NnError> {
        let mut tape = Tape::with_params(s);
        let loss = f(&mut tape)?;
        Ok(tape.value(loss).item())
    };
    let mut work = store.clone();
    let mut report = ParamCheck {
        max_relative_error: 0.0,
        worst: None,
        checked: 0,
    };
    let ids: Vec<_> = store
        .trainable_ids()
        .filter(|&id| include(&store.get(id).name))
        .collect();
    for id in ids {
        let n = store.value(id).len();
        for i in 0..n {
            let orig = store.value(id).data()[i];
            work.value_mut(id).data_mut()[i] = orig + step;
            let up = eval(&work)?;
            work.value_mut(id).data_mut()[i] = orig - step;
            let down = eval(&work)?;
            work.value_mut(id).data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * step);
            let analytic = grads.get(id).map_or(0.0, |g| g.data()[i]);
            let err = relative_error(analytic, numeric);
            report.checked += 1;
            if err > report.max_relative_error || report.worst.is_none() {
                report.max_relative_error = report.max_relative_error.max(err);
                if err >= report.max_relative_error {
                    report.worst = Some((store.get(id).name.clone(), i));
                }
            }
        }
    }
    Ok(report)
}
