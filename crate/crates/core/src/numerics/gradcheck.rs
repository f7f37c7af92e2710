//! Central finite-difference gradient checking.

use super::{NumericsError, Tape, Tensor, Var};

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Largest elementwise relative error over all inputs.
    pub max_rel_err: f64,
    /// `(input index, flat element index)` of the worst entry.
    pub worst: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
}

/// Relative error with a floor on the denominator so entries whose true
/// gradient is ~0 are judged on absolute error.
pub fn rel_err(a: f64, n: f64, floor: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(floor)
}

/// Compares the tape gradient of a scalar function against central
/// differences with step `h`, perturbing every element of every input.
pub fn check_gradients<F>(inputs: &[Tensor], h: f64, floor: f64, f: F) -> Result<GradCheckReport, NumericsError>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, NumericsError>,
{
    let eval = |xs: &[Tensor]| -> Result<f64, NumericsError> {
        let mut tape = Tape::new();
        let vars = xs.iter().map(|x| tape.leaf(x.clone())).collect::<Result<Vec<_>, _>>()?;
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).item())
    };

    let mut tape = Tape::new();
    let vars = inputs.iter().map(|x| tape.leaf(x.clone())).collect::<Result<Vec<_>, _>>()?;
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;

    let mut report = GradCheckReport { max_rel_err: 0.0, worst: (0, 0), analytic: 0.0, numeric: 0.0 };
    let mut probe: Vec<Tensor> = inputs.to_vec();
    for (i, v) in vars.iter().enumerate() {
        let analytic = grads.wrt(*v);
        for k in 0..inputs[i].len() {
            let orig = inputs[i].data()[k];
            probe[i].data_mut()[k] = orig + h;
            let plus = eval(&probe)?;
            probe[i].data_mut()[k] = orig - h;
            let minus = eval(&probe)?;
            probe[i].data_mut()[k] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic.data()[k];
            let e = rel_err(a, numeric, floor);
            if e > report.max_rel_err {
                report = GradCheckReport { max_rel_err: e, worst: (i, k), analytic: a, numeric };
            }
        }
    }
    Ok(report)
}
