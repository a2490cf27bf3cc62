//! Central-difference verification of reverse-mode gradients.

use super::{Ctx, Mode, ParamStore, RngStream, Tensor, Var};
use crate::error::Result;

/// Floor on the denominator of the relative error.
pub const REL_FLOOR: f64 = 1e-8;
pub const DEFAULT_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// `max |a - n| / max(|a|, |n|, 1e-8)` over every checked element.
    pub max_rel_error: f64,
    /// Element where the maximum was attained.
    pub worst: String,
    pub checked: usize,
}

pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Compares reverse-mode gradients of the scalar built by `f` against
/// central differences, for every element of `inputs` and of every
/// trainable parameter in `store`.
///
/// `f` receives a fresh context and the input leaves; it must be
/// deterministic (no dropout, fixed noise). Dropout is forced off.
pub fn finite_diff_grad_check<F>(
    store: &mut ParamStore<f64>,
    inputs: &[Tensor<f64>],
    mode: Mode,
    eps: f64,
    mut f: F,
) -> Result<GradCheckReport>
where
    F: FnMut(&mut Ctx<'_, f64>, &[Var]) -> Result<Var>,
{
    store.zero_grads();
    let input_grads = {
        let mut cx = Ctx::new(store, mode, 0.0, RngStream::new(0, 0));
        let leaves = inputs
            .iter()
            .map(|t| cx.tape.leaf(t.clone(), true))
            .collect::<Result<Vec<_>>>()?;
        let loss = f(&mut cx, &leaves)?;
        let grads = cx.tape.backward(loss)?;
        cx.tape.accumulate_param_grads(&grads, cx.store);
        leaves
            .iter()
            .zip(inputs)
            .map(|(&l, t)| grads.get(l).map_or_else(|| vec![0.0; t.len()], <[f64]>::to_vec))
            .collect::<Vec<_>>()
    };

    let mut eval = |store: &mut ParamStore<f64>, inputs: &[Tensor<f64>]| -> Result<f64> {
        let mut cx = Ctx::new(store, mode, 0.0, RngStream::new(0, 0));
        let leaves = inputs
            .iter()
            .map(|t| cx.tape.leaf(t.clone(), true))
            .collect::<Result<Vec<_>>>()?;
        let loss = f(&mut cx, &leaves)?;
        Ok(cx.tape.scalar(loss))
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: String::new(),
        checked: 0,
    };
    let note = |report: &mut GradCheckReport, what: String, a: f64, n: f64| {
        let e = rel_error(a, n);
        report.checked += 1;
        if e > report.max_rel_error || report.worst.is_empty() {
            report.max_rel_error = e.max(report.max_rel_error);
            report.worst = format!("{what} (analytic {a:e}, numeric {n:e})");
        }
    };

    let mut work = inputs.to_vec();
    for (k, grads) in input_grads.iter().enumerate() {
        for i in 0..work[k].len() {
            let orig = work[k].data()[i];
            work[k].data_mut()[i] = orig + eps;
            let up = eval(store, &work)?;
            work[k].data_mut()[i] = orig - eps;
            let down = eval(store, &work)?;
            work[k].data_mut()[i] = orig;
            note(
                &mut report,
                format!("input {k}[{i}]"),
                grads[i],
                (up - down) / (2.0 * eps),
            );
        }
    }

    let ids: Vec<_> = store.ids().filter(|&id| store.get(id).trainable).collect();
    for id in ids {
        let analytic = store.get(id).grad.clone();
        for (i, &a) in analytic.iter().enumerate() {
            let orig = store.get(id).tensor.data()[i];
            store.get_mut(id).tensor.data_mut()[i] = orig + eps;
            let up = eval(store, inputs)?;
            store.get_mut(id).tensor.data_mut()[i] = orig - eps;
            let down = eval(store, inputs)?;
            store.get_mut(id).tensor.data_mut()[i] = orig;
            let name = format!("{}[{i}]", store.get(id).name);
            note(&mut report, name, a, (up - down) / (2.0 * eps));
        }
    }
    store.zero_grads();
    Ok(report)
}
