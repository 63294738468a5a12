//! Central-difference gradient oracle.

use alloc::string::{String, ToString};
use alloc::vec::Vec;

use super::{Tape, Tensor, Var};

/// Denominator floor for relative errors, so that entries whose true
/// gradient is ~0 are judged on absolute error instead.
pub const REL_ERR_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct ParamReport {
    pub name: String,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub worst_index: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub params: Vec<ParamReport>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_err).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.max_rel_err() < self.tolerance
    }
}

#[derive(Debug, thiserror::Error)]
pub enum GradCheckError<E> {
    #[error("objective failed: {0}")]
    Objective(E),
    #[error("objective is non-finite ({value}) at {param}[{index}]")]
    NonFinite { param: String, index: usize, value: f64 },
    #[error("backward failed: {0}")]
    Backward(super::NumericsError),
}

/// Compares reverse-mode gradients of a scalar objective against
/// `(f(p+ε) − f(p−ε)) / 2ε` for every element of every parameter.
///
/// `f` receives a fresh tape and one trainable leaf per parameter, in order.
/// It must be deterministic: anything random (dropout masks) has to be
/// sampled once outside and replayed.
pub fn grad_check<'a, F, E>(
    f: F,
    params: &[(&str, Tensor)],
    step: f64,
    tolerance: f64,
) -> Result<GradCheckReport, GradCheckError<E>>
where
    F: Fn(&mut Tape<'a>, &[Var]) -> Result<Var, E>,
{
    let eval = |values: &[Tensor]| -> Result<(Tape<'a>, Vec<Var>, Var), E> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.param(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok((tape, vars, out))
    };
    let mut values: Vec<Tensor> = params.iter().map(|(_, t)| t.clone()).collect();
    let (tape, vars, out) = eval(&values).map_err(GradCheckError::Objective)?;
    let f0 = tape.value(out).data()[0];
    if !f0.is_finite() {
        return Err(GradCheckError::NonFinite { param: "<base>".to_string(), index: 0, value: f0 });
    }
    let grads = tape.backward(out).map_err(GradCheckError::Backward)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(&values)
        .map(|(v, t)| grads.wrt(*v).map_or_else(|| alloc::vec![0.0; t.len()], <[f64]>::to_vec))
        .collect();
    drop(tape);

    let mut reports = Vec::with_capacity(params.len());
    for (pi, (name, _)) in params.iter().enumerate() {
        let mut report = ParamReport { name: (*name).to_string(), max_rel_err: 0.0, max_abs_err: 0.0, worst_index: 0 };
        for idx in 0..values[pi].len() {
            let orig = values[pi].data()[idx];
            let mut probe = |x: f64| -> Result<f64, GradCheckError<E>> {
                values[pi].data_mut()[idx] = x;
                let (tape, _, out) = eval(&values).map_err(GradCheckError::Objective)?;
                let y = tape.value(out).data()[0];
                if !y.is_finite() {
                    return Err(GradCheckError::NonFinite { param: (*name).to_string(), index: idx, value: y });
                }
                Ok(y)
            };
            let plus = probe(orig + step)?;
            let minus = probe(orig - step)?;
            values[pi].data_mut()[idx] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            let a = analytic[pi][idx];
            let abs = libm::fabs(a - numeric);
            let rel = abs / f64::max(f64::max(libm::fabs(a), libm::fabs(numeric)), REL_ERR_FLOOR);
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst_index = idx;
            }
            report.max_abs_err = f64::max(report.max_abs_err, abs);
        }
        reports.push(report);
    }
    Ok(GradCheckReport { params: reports, tolerance })
}
