//! Central finite-difference verification of tape gradients.
//!
//! Relative error per element is `|analytic − numeric| / max(|analytic|,
//! |numeric|, floor)` with `floor = 1e-6`, so entries whose true gradient is
//! essentially zero are judged on absolute error instead of blowing up.
//! An element is treated as sitting on a kink when the forward and backward
//! one-sided differences disagree by far more than curvature could explain;
//! such elements are counted but never fail the check.

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

const REL_FLOOR: f64 = 1e-6;
const KINK_FACTOR: f64 = 1e3;

#[derive(Clone, Debug)]
pub struct TensorCheck {
    pub name: String,
    pub max_rel_error: f64,
    pub checked: usize,
    pub kinks: usize,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub entries: Vec<TensorCheck>,
    pub tol: f64,
    /// False when two evaluations at the base point disagreed; the numeric
    /// gradients are meaningless in that case.
    pub deterministic: bool,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.entries
            .iter()
            .map(|e| e.max_rel_error)
            .fold(0.0, f64::max)
    }

    pub fn kinks(&self) -> usize {
        self.entries.iter().map(|e| e.kinks).sum()
    }

    pub fn passed(&self) -> bool {
        self.deterministic && self.entries.iter().all(|e| e.max_rel_error < self.tol)
    }
}

fn compare(
    names: Vec<String>,
    analytic: Vec<Tensor>,
    h: f64,
    tol: f64,
    mut eval_at: impl FnMut(usize, usize, Option<f64>) -> Result<f64>,
) -> Result<GradCheckReport> {
    if !(h > 0.0) {
        return Err(Error::Domain {
            op: "finite_difference_check",
            detail: format!("step h must be positive, got {h}"),
        });
    }
    let f0 = eval_at(0, 0, None)?;
    let f0b = eval_at(0, 0, None)?;
    let deterministic = f0.to_bits() == f0b.to_bits();
    let mut entries = Vec::with_capacity(names.len());
    for (ti, (name, g)) in names.into_iter().zip(analytic).enumerate() {
        let mut check = TensorCheck {
            name,
            max_rel_error: 0.0,
            checked: 0,
            kinks: 0,
        };
        for (ei, &a) in g.data().iter().enumerate() {
            let fp = eval_at(ti, ei, Some(h))?;
            let fm = eval_at(ti, ei, Some(-h))?;
            let central = (fp - fm) / (2.0 * h);
            let fwd = (fp - f0) / h;
            let bwd = (f0 - fm) / h;
            if (fwd - bwd).abs() > KINK_FACTOR * h * (1.0 + central.abs()) {
                check.kinks += 1;
                continue;
            }
            let rel = (a - central).abs() / a.abs().max(central.abs()).max(REL_FLOOR);
            check.max_rel_error = check.max_rel_error.max(rel);
            check.checked += 1;
        }
        entries.push(check);
    }
    Ok(GradCheckReport {
        entries,
        tol,
        deterministic,
    })
}

/// Checks the gradient of `f` with respect to every trainable parameter.
///
/// `f` builds the scalar loss on the supplied tape from the supplied store;
/// it is called once on a recording tape and then twice per element on
/// frozen tapes with one entry perturbed by `±h`.
pub fn finite_difference_check(
    store: &ParamStore,
    h: f64,
    tol: f64,
    f: impl Fn(&mut Tape, &ParamStore) -> Result<Var>,
) -> Result<GradCheckReport> {
    let mut fresh = store.clone();
    fresh.zero_grads();
    let mut tape = Tape::new();
    let loss = f(&mut tape, &fresh)?;
    tape.backward(loss, &mut fresh)?;
    let ids: Vec<_> = fresh
        .iter()
        .enumerate()
        .filter(|(_, p)| p.trainable)
        .map(|(i, _)| crate::params::ParamId(i))
        .collect();
    let names = ids.iter().map(|&i| fresh.get(i).name.clone()).collect();
    let analytic = ids.iter().map(|&i| fresh.get(i).grad.clone()).collect();
    let mut work = store.clone();
    compare(names, analytic, h, tol, |ti, ei, delta| {
        let id = ids.get(ti).copied();
        let saved = match (id, delta) {
            (Some(id), Some(d)) => {
                let slot = &mut work.get_mut(id).value.data_mut()[ei];
                let s = *slot;
                *slot = s + d;
                Some((id, s))
            }
            _ => None,
        };
        let mut tape = Tape::frozen();
        let out = f(&mut tape, &work).and_then(|v| tape.value(v).item());
        if let Some((id, s)) = saved {
            work.get_mut(id).value.data_mut()[ei] = s;
        }
        out
    })
}

/// Checks the gradient of `f` with respect to a list of input tensors,
/// which are placed on the tape as constants in the given order.
pub fn check_inputs(
    inputs: &[Tensor],
    h: f64,
    tol: f64,
    f: impl Fn(&mut Tape, &[Var]) -> Result<Var>,
) -> Result<GradCheckReport> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    let grads = tape.gradients(loss)?;
    let analytic = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();
    let names = (0..inputs.len()).map(|i| format!("input{i}")).collect();
    let mut work = inputs.to_vec();
    compare(names, analytic, h, tol, |ti, ei, delta| {
        let saved = delta.map(|d| {
            let slot = &mut work[ti].data_mut()[ei];
            let s = *slot;
            *slot = s + d;
            s
        });
        let mut tape = Tape::frozen();
        let vars: Vec<Var> = work.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars).and_then(|v| tape.value(v).item());
        if let Some(s) = saved {
            work[ti].data_mut()[ei] = s;
        }
        out
    })
}
