use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Compares tape gradients of a scalar function against central differences.
///
/// Returns the largest `|analytic − numeric| / max(1e-12, |analytic| + |numeric|)`
/// over all coordinates of `x`.
pub fn gradient_check<F>(f: F, x: &Tensor, step: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    gradient_check_many(|tape, vars| f(tape, vars[0]), std::slice::from_ref(x), step)
}

/// [`gradient_check`] over several input tensors at once.
pub fn gradient_check_many<F>(f: F, inputs: &[Tensor], step: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let check = gradient_check_multi(
        |tape, vars| Ok(vec![f(tape, vars)?]),
        inputs,
        step,
        ErrorMeasure::Elementwise,
    )?;
    Ok(check.errors[0])
}

/// How analytic and numeric gradients are compared.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorMeasure {
    /// `|a − n| / max(1e-12, |a| + |n|)` per coordinate.
    Elementwise,
    /// `‖a − n‖ / max(1e-300, ‖a‖ + ‖n‖)` per input tensor. Coordinates
    /// whose gradient is many orders below the rest of their tensor no
    /// longer dominate through central-difference roundoff.
    Tensorwise,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MultiCheck {
    /// Worst relative error per output.
    pub errors: Vec<f64>,
    /// Perturbed evaluations whose relu sign pattern differs from the
    /// unperturbed one. Central differences across a kink do not estimate
    /// the derivative, so a trustworthy check has none.
    pub kink_crossings: usize,
}

/// Checks several scalar outputs of one function at once, sharing the
/// perturbed evaluations.
pub fn gradient_check_multi<F>(
    f: F,
    inputs: &[Tensor],
    step: f64,
    measure: ErrorMeasure,
) -> Result<MultiCheck>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Vec<Var>>,
{
    if !(step > 0.0) {
        return Err(Error::Argument(format!(
            "step must be positive, got {step}"
        )));
    }

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let outs = f(&mut tape, &vars)?;
    let mut analytic: Vec<Vec<Tensor>> = Vec::with_capacity(outs.len());
    for &out in &outs {
        check_finite(tape.value(out).item()?)?;
        tape.zero_grad();
        tape.backward(out)?;
        let grads: Vec<Tensor> = vars
            .iter()
            .zip(inputs)
            .map(|(v, t)| {
                tape.grad(*v)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(t.shape()))
            })
            .collect();
        for g in &grads {
            check_finite_slice(g.data())?;
        }
        analytic.push(grads);
    }

    let base_pattern = tape.relu_pattern();
    let eval = |perturbed: &[Tensor]| -> Result<(Vec<f64>, bool)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = perturbed.iter().map(|t| tape.param(t.clone())).collect();
        let values = f(&mut tape, &vars)?
            .into_iter()
            .map(|o| check_finite(tape.value(o).item()?))
            .collect::<Result<Vec<_>>>()?;
        Ok((values, tape.relu_pattern() != base_pattern))
    };

    let mut kink_crossings = 0;
    let mut worst = vec![0.0f64; outs.len()];
    let mut work: Vec<Tensor> = inputs.to_vec();
    for t in 0..inputs.len() {
        // per output: sums of squares of a − n, a and n
        let mut sums = vec![[0.0f64; 3]; outs.len()];
        for i in 0..inputs[t].numel() {
            let orig = inputs[t].data()[i];
            work[t].data_mut()[i] = orig + step;
            let (plus, crossed_up) = eval(&work)?;
            work[t].data_mut()[i] = orig - step;
            let (minus, crossed_down) = eval(&work)?;
            work[t].data_mut()[i] = orig;
            kink_crossings += crossed_up as usize + crossed_down as usize;

            for (o, w) in worst.iter_mut().enumerate() {
                let numeric = (plus[o] - minus[o]) / (2.0 * step);
                let a = analytic[o][t].data()[i];
                match measure {
                    ErrorMeasure::Elementwise => {
                        let err = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-12);
                        *w = w.max(err);
                    }
                    ErrorMeasure::Tensorwise => {
                        let s = &mut sums[o];
                        s[0] += (a - numeric) * (a - numeric);
                        s[1] += a * a;
                        s[2] += numeric * numeric;
                    }
                }
            }
        }
        if measure == ErrorMeasure::Tensorwise {
            for (w, s) in worst.iter_mut().zip(&sums) {
                let err = s[0].sqrt() / (s[1].sqrt() + s[2].sqrt()).max(1e-300);
                *w = w.max(err);
            }
        }
    }
    Ok(MultiCheck {
        errors: worst,
        kink_crossings,
    })
}

fn check_finite(v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::Numeric(format!("non-finite function value {v}")))
    }
}

fn check_finite_slice(v: &[f64]) -> Result<()> {
    match v.iter().find(|x| !x.is_finite()) {
        Some(bad) => Err(Error::Numeric(format!("non-finite gradient {bad}"))),
        None => Ok(()),
    }
}
