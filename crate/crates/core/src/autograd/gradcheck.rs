//! Central finite-difference gradient checking.

use serde::Serialize;

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub h: f64,
    pub tol: f64,
    /// Denominator floor for the relative error, so entries whose true
    /// gradient is ~0 are judged on an absolute scale.
    pub abs_floor: f64,
    /// Check at most this many evenly spaced entries per group.
    pub max_entries_per_group: Option<usize>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions { h: 1e-5, tol: 1e-4, abs_floor: 1e-6, max_entries_per_group: None }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct GroupReport {
    pub name: String,
    pub checked: usize,
    pub max_rel_error: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub tol: f64,
    pub groups: Vec<GroupReport>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.groups.iter().map(|g| g.max_rel_error).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.max_rel_error() <= self.tol
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(floor);
    (analytic - numeric).abs() / denom
}

fn evaluate<'p, F>(f: &F, params: &[Tensor], requires_grad: bool) -> Result<(Tape<'p>, Vec<Var>, Var)>
where
    F: Fn(&mut Tape<'p>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.leaf(p.clone(), requires_grad)).collect();
    let loss = f(&mut tape, &vars)?;
    if !tape.value(loss).is_scalar() {
        return Err(Error::Contract(format!(
            "grad_check function must return a scalar, got {:?}",
            tape.shape(loss)
        )));
    }
    Ok((tape, vars, loss))
}

fn checked_indices(len: usize, max: Option<usize>) -> Vec<usize> {
    match max {
        Some(m) if m < len && m > 0 => {
            let stride = len as f64 / m as f64;
            (0..m).map(|i| (i as f64 * stride) as usize).collect()
        }
        _ => (0..len).collect(),
    }
}

/// Compares the tape's gradient of `f` against central differences, one
/// report entry per named parameter group.
///
/// `f` is evaluated twice up front; differing outputs are a
/// [`Error::Determinism`] error, since finite differences are meaningless for
/// a non-deterministic function.
pub fn grad_check<'p, F>(
    f: F,
    params: &[(String, Tensor)],
    opts: &GradCheckOptions,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<'p>, &[Var]) -> Result<Var>,
{
    let mut values: Vec<Tensor> = params.iter().map(|(_, t)| t.clone()).collect();

    let first = {
        let (tape, _, loss) = evaluate(&f, &values, false)?;
        tape.value(loss).item()
    };
    let second = {
        let (tape, _, loss) = evaluate(&f, &values, false)?;
        tape.value(loss).item()
    };
    if first.to_bits() != second.to_bits() {
        return Err(Error::Determinism(format!(
            "two forward passes gave {first:e} and {second:e}"
        )));
    }

    let analytic: Vec<Vec<f64>> = {
        let (mut tape, vars, loss) = evaluate(&f, &values, true)?;
        tape.backward(loss)?;
        vars.iter()
            .zip(&values)
            .map(|(v, t)| tape.grad(*v).map_or_else(|| vec![0.0; t.numel()], <[f64]>::to_vec))
            .collect()
    };

    let mut groups = Vec::with_capacity(params.len());
    for (gi, (name, _)) in params.iter().enumerate() {
        let idx = checked_indices(values[gi].numel(), opts.max_entries_per_group);
        let mut worst: f64 = 0.0;
        for &i in &idx {
            let orig = values[gi].data()[i];
            values[gi].data_mut()[i] = orig + opts.h;
            let plus = {
                let (t, _, l) = evaluate(&f, &values, false)?;
                t.value(l).item()
            };
            values[gi].data_mut()[i] = orig - opts.h;
            let minus = {
                let (t, _, l) = evaluate(&f, &values, false)?;
                t.value(l).item()
            };
            values[gi].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * opts.h);
            worst = worst.max(relative_error(analytic[gi][i], numeric, opts.abs_floor));
        }
        groups.push(GroupReport { name: name.clone(), checked: idx.len(), max_rel_error: worst });
    }
    Ok(GradCheckReport { tol: opts.tol, groups })
}
