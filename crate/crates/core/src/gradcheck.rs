//! Central-difference validation of tape gradients (64-bit only).

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Floor on the denominator of the relative error.
pub const REL_FLOOR: f64 = 1e-8;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

fn eval_scalar<F>(f: &F, point: &Tensor<f64>, coordinate: usize) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let x = tape.constant(point);
    let out = f(&mut tape, x)?;
    let v = tape.value(out)[0];
    if !v.is_finite() {
        return Err(Error::NumericalInstability { coordinate, detail: format!("function value {v}") });
    }
    Ok(v)
}

/// Maximum relative error between the tape gradient of `function` at `point`
/// and central differences with step `epsilon`, over every coordinate.
pub fn grad_check<F>(function: F, point: &Tensor<f64>, epsilon: f64) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let x = tape.leaf(point, true);
    let out = function(&mut tape, x)?;
    if !tape.value(out)[0].is_finite() {
        return Err(Error::NumericalInstability { coordinate: 0, detail: "non-finite value at the base point".into() });
    }
    let mut grads = tape.backward(out)?;
    let analytic = grads.take_or_zeros(x, point.numel());
    let mut worst: f64 = 0.0;
    for (i, &a) in analytic.iter().enumerate() {
        let mut p = point.clone();
        p.data_mut()[i] += epsilon;
        let fp = eval_scalar(&function, &p, i)?;
        p.data_mut()[i] -= 2.0 * epsilon;
        let fm = eval_scalar(&function, &p, i)?;
        worst = worst.max(relative_error(a, (fp - fm) / (2.0 * epsilon)));
    }
    Ok(worst)
}

/// Same check against model parameters: `loss` builds a scalar from the tape
/// leaves of `store`, and only the flat parameter indices in `coordinates`
/// are perturbed.
pub fn grad_check_params<F>(store: &ParamStore<f64>, coordinates: &[usize], epsilon: f64, loss: F) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars = store.load(&mut tape, true);
    let out = loss(&mut tape, &vars)?;
    let mut grads = tape.backward(out)?;
    let analytic: Vec<f64> = vars
        .iter()
        .zip(store.tensors())
        .flat_map(|(&v, t)| grads.take_or_zeros(v, t.numel()))
        .collect();
    let eval = |s: &ParamStore<f64>, coordinate: usize| -> Result<f64> {
        let mut tape = Tape::new();
        let vars = s.load(&mut tape, false);
        let out = loss(&mut tape, &vars)?;
        let v = tape.value(out)[0];
        if !v.is_finite() {
            return Err(Error::NumericalInstability { coordinate, detail: format!("loss value {v}") });
        }
        Ok(v)
    };
    let mut worst: f64 = 0.0;
    for &i in coordinates {
        let mut s = store.clone();
        s.perturb(i, epsilon);
        let fp = eval(&s, i)?;
        s.perturb(i, -2.0 * epsilon);
        let fm = eval(&s, i)?;
        worst = worst.max(relative_error(analytic[i], (fp - fm) / (2.0 * epsilon)));
    }
    Ok(worst)
}
