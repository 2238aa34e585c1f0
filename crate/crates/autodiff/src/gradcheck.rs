use crate::error::AdError;
use crate::tape::{Tape, Var};
use crate::Result;

/// Outcome of a finite-difference comparison.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// max over coordinates of `|analytic − numeric| / max(1, |numeric|)`
    pub max_rel_error: f64,
    /// `(input, coordinate)` where the maximum was attained
    pub worst: Option<(usize, usize)>,
    pub coordinates: usize,
}

/// Compares reverse-mode gradients of a scalar graph against central differences.
///
/// `build` is invoked once on trainable copies of `inputs` for the analytic
/// gradient and twice per coordinate for the numeric one. It must be a pure
/// function of the input values.
pub fn grad_check<F>(build: F, inputs: &[(Vec<f64>, Vec<usize>)], step: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Vec<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars = values
            .iter()
            .zip(inputs)
            .map(|(v, (_, shape))| tape.constant(v.clone(), shape))
            .collect::<Result<Vec<_>>>()?;
        let out = build(&mut tape, &vars)?;
        Ok(tape.item(out))
    };

    let mut tape = Tape::new();
    let vars = inputs
        .iter()
        .map(|(v, shape)| tape.param(v.clone(), shape))
        .collect::<Result<Vec<_>>>()?;
    let out = build(&mut tape, &vars)?;
    tape.check_finite(out, "grad_check output")?;
    tape.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(v, (vals, _))| {
            tape.grad(*v)
                .map(<[f64]>::to_vec)
                .unwrap_or_else(|| vec![0.0; vals.len()])
        })
        .collect();

    let mut values: Vec<Vec<f64>> = inputs.iter().map(|(v, _)| v.clone()).collect();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        coordinates: 0,
    };
    let mut flat = 0;
    for input in 0..values.len() {
        for coord in 0..values[input].len() {
            let orig = values[input][coord];
            values[input][coord] = orig + step;
            let plus = eval(&values)?;
            values[input][coord] = orig - step;
            let minus = eval(&values)?;
            values[input][coord] = orig;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(AdError::NonFinite {
                    context: format!("grad_check input {input}"),
                    index: flat,
                });
            }
            let numeric = (plus - minus) / (2.0 * step);
            let err = (analytic[input][coord] - numeric).abs() / numeric.abs().max(1.0);
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = err;
                report.worst = Some((input, coord));
            }
            report.coordinates += 1;
            flat += 1;
        }
    }
    Ok(report)
}
