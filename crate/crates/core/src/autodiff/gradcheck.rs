use super::param::{with_flat_entry, Module};
use super::tape::{Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const DEFAULT_FD_STEP: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// max over entries of |analytic - numeric| / max(1, |analytic|, |numeric|)
    pub max_rel_err: f64,
    /// Flat index of the worst entry, if any entry was checked.
    pub worst_index: Option<usize>,
    pub checked: usize,
}

fn eval<T, M, F>(module: &M, objective: &mut F, index: Option<usize>) -> Result<T>
where
    T: Scalar,
    M: Module<T> + ?Sized,
    F: FnMut(&M, &mut Tape<T>) -> Result<Var>,
{
    let mut tape = Tape::new();
    let out = objective(module, &mut tape)?;
    let v = tape.value(out);
    if v.numel() != 1 {
        return Err(Error::NonScalarLoss(v.shape().to_vec()));
    }
    let v = v.values()[0];
    if !v.is_finite() {
        return Err(match index {
            Some(index) => Error::NonFiniteObjective { index },
            None => Error::NonFinite("objective at unperturbed parameters".into()),
        });
    }
    Ok(v)
}

/// Compare tape gradients of a scalar objective with central differences.
///
/// Every trainable entry of `module` is perturbed by `±step`; the module is
/// restored exactly afterwards. Gradient slots of `module` are left zeroed.
pub fn finite_difference_check<T, M, F>(
    module: &mut M,
    mut objective: F,
    step: f64,
) -> Result<GradCheckReport>
where
    T: Scalar,
    M: Module<T> + ?Sized,
    F: FnMut(&M, &mut Tape<T>) -> Result<Var>,
{
    module.zero_grad();
    let mut tape = Tape::new();
    let out = objective(module, &mut tape)?;
    tape.backward(out)?;
    module.pull_grads(&tape);
    let mut analytic = Vec::new();
    let mut trainable = Vec::new();
    module.visit(&mut |p| {
        let t = p.tensor();
        let n = t.numel();
        match t.grad() {
            Some(g) if t.requires_grad() => analytic.extend_from_slice(g),
            _ => analytic.extend(std::iter::repeat_n(T::zero(), n)),
        }
        trainable.extend(std::iter::repeat_n(t.requires_grad(), n));
    });
    module.zero_grad();
    eval(module, &mut objective, None)?;

    let h = T::of(step);
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst_index: None,
        checked: 0,
    };
    for (i, &a) in analytic.iter().enumerate() {
        if !trainable[i] {
            continue;
        }
        let mut orig = T::zero();
        with_flat_entry(module, i, |v| {
            orig = *v;
            *v = orig + h;
        });
        let plus = eval(module, &mut objective, Some(i));
        with_flat_entry(module, i, |v| *v = orig - h);
        let minus = eval(module, &mut objective, Some(i));
        with_flat_entry(module, i, |v| *v = orig);
        let numeric = ((plus? - minus?) / (h + h)).as_f64();
        let a = a.as_f64();
        let rel = (a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs());
        report.checked += 1;
        if report.worst_index.is_none() || rel > report.max_rel_err {
            report.max_rel_err = rel;
            report.worst_index = Some(i);
        }
    }
    Ok(report)
}
