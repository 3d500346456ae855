//! Single-step recurrences on plain tensors.
//!
//! [`linear_rnn_step`] and [`decay_step`] are the two simpler recurrences the
//! delta-rule update generalizes; they serve as reference points in tests.
//! [`wkv7_step`] is the checked, tensor-level entry to the same kernel the
//! tape and the streaming session run.

use crate::error::{Error, Result};
use crate::kernels;
use crate::tensor::Tensor;

/// `h' = W·h + U·x`.
pub fn linear_rnn_step(h: &Tensor, x: &Tensor, w: &Tensor, u: &Tensor) -> Result<Tensor> {
    let wh = w.matmul(&h.reshape(&[h.numel(), 1])?)?;
    let ux = u.matmul(&x.reshape(&[x.numel(), 1])?)?;
    let out = wh.add(&ux)?;
    out.reshape(&[out.numel()])
}

/// `S' = exp(−w) ∘ S + k·vᵀ`, with the decay applied per key row.
/// `w` must be non-negative.
pub fn decay_step(s: &Tensor, k: &Tensor, v: &Tensor, w: &Tensor) -> Result<Tensor> {
    let (dk, dv) = s.dims2()?;
    if k.shape() != [dk] || w.shape() != [dk] || v.shape() != [dv] {
        return Err(Error::shape("decay_step", s.shape(), k.shape()));
    }
    if let Some(bad) = w.data().iter().find(|x| !(**x >= 0.0)) {
        return Err(Error::Domain {
            op: "decay_step",
            detail: format!("decay exponent {bad} is negative"),
        });
    }
    let mut out = s.clone();
    for i in 0..dk {
        let d = (-w.data()[i]).exp();
        for j in 0..dv {
            let o = &mut out.data_mut()[i * dv + j];
            *o = d * *o + k.data()[i] * v.data()[j];
        }
    }
    Ok(out)
}

const NORM_TOL: f64 = 1e-6;

/// One delta-rule step on a `dk×dv` state: returns `(S', Sᵀ'·r)` where
/// `S' = (I − a·k·kᵀ)·diag(exp(−exp(w)))·S + a·k·vᵀ`.
///
/// Requires `‖k‖ = 1` and `a ∈ [0, 1]`; violations are contract errors.
pub fn wkv7_step(
    s: &Tensor,
    r: &Tensor,
    k: &Tensor,
    v: &Tensor,
    a: f64,
    w: &Tensor,
) -> Result<(Tensor, Tensor)> {
    let (dk, dv) = s.dims2()?;
    if r.shape() != [dk] || k.shape() != [dk] || w.shape() != [dk] {
        return Err(Error::shape("wkv7_step", &[dk], k.shape()));
    }
    if v.shape() != [dv] {
        return Err(Error::shape("wkv7_step", &[dv], v.shape()));
    }
    let norm = k.frobenius_norm();
    if (norm - 1.0).abs() > NORM_TOL {
        return Err(Error::Contract(format!("key norm {norm} is not 1")));
    }
    if !(0.0..=1.0).contains(&a) {
        return Err(Error::Contract(format!("in-context rate {a} outside [0, 1]")));
    }
    let decay: Vec<f64> = w.data().iter().map(|&x| kernels::neg_exp_exp(x)).collect();
    let mut state = s.data().to_vec();
    let mut scratch = vec![0.0; dv];
    let mut out = vec![0.0; dv];
    kernels::wkv7_step(
        &mut state,
        r.data(),
        k.data(),
        v.data(),
        a,
        &decay,
        &mut scratch,
        &mut out,
    );
    Ok((Tensor::matrix(dk, dv, state)?, Tensor::vector(out)))
}
