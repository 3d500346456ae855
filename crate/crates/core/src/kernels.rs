//! Precision-generic dense kernels shared by the tape, the streaming
//! inference engine and the benchmarks.
//!
//! All matrices are row-major slices. Accumulation order is fixed (inner
//! index ascending) so that results are reproducible bit-for-bit and match
//! a naive triple loop exactly.

use num_traits::Float;

/// `out[m×n] = a[m×k] · b[k×n]`.
pub fn matmul<T: Float>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    out.iter_mut().for_each(|o| *o = T::zero());
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o = *o + aip * bv;
            }
        }
    }
}

/// `out[m×n] = a[m×k] · b[n×k]ᵀ`.
pub fn matmul_nt<T: Float>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = T::zero();
            for (&x, &y) in arow.iter().zip(brow) {
                acc = acc + x * y;
            }
            out[i * n + j] = acc;
        }
    }
}

/// `out[m×n] = a[k×m]ᵀ · b[k×n]`.
pub fn matmul_tn<T: Float>(a: &[T], b: &[T], out: &mut [T], k: usize, m: usize, n: usize) {
    out.iter_mut().for_each(|o| *o = T::zero());
    for p in 0..k {
        let brow = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let api = a[p * m + i];
            if api == T::zero() {
                continue;
            }
            let row = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o = *o + api * bv;
            }
        }
    }
}

pub fn sigmoid<T: Float>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// `exp(-exp(w))`, clamped into the open interval (0, 1) so that the
/// representable result never reaches 0 or 1 exactly.
pub fn neg_exp_exp<T: Float>(w: T) -> T {
    let y = (-(w.exp())).exp();
    let hi = T::one() - T::epsilon() / (T::one() + T::one());
    y.max(T::min_positive_value()).min(hi)
}

/// Derivative of `exp(-exp(w))` written to avoid `inf · 0`.
pub fn neg_exp_exp_grad<T: Float>(w: T) -> T {
    -((w - w.exp()).exp())
}

/// Layer normalization of one row. Returns the reciprocal standard deviation.
pub fn layer_norm_row<T: Float>(x: &[T], scale: &[T], offset: &[T], eps: T, out: &mut [T]) -> T {
    let n = T::from(x.len()).unwrap();
    let mut mean = T::zero();
    for &v in x {
        mean = mean + v;
    }
    mean = mean / n;
    let mut var = T::zero();
    for &v in x {
        let d = v - mean;
        var = var + d * d;
    }
    var = var / n;
    let rstd = T::one() / (var + eps).sqrt();
    for i in 0..x.len() {
        out[i] = (x[i] - mean) * rstd * scale[i] + offset[i];
    }
    rstd
}

/// Scales `x` to unit Euclidean norm, dividing by `max(‖x‖, eps)` so that a
/// zero vector stays zero. Returns the pre-normalization norm.
pub fn normalize<T: Float>(x: &[T], eps: T, out: &mut [T]) -> T {
    let mut sq = T::zero();
    for &v in x {
        sq = sq + v * v;
    }
    let norm = sq.sqrt();
    let denom = norm.max(eps);
    for (o, &v) in out.iter_mut().zip(x) {
        *o = v / denom;
    }
    norm
}

/// One generalized delta-rule update of a `dk×dv` state, in place:
///
/// `S ← (I − a·k·kᵀ)·diag(decay)·S + a·k·vᵀ`, then `out = Sᵀ·r`.
///
/// The transition matrix is never formed: rows are decayed first, the
/// projection `u = kᵀ·S` is taken from the decayed state, and the rank-one
/// correction `a·k·(v − u)ᵀ` is added. `scratch` must hold `dv` values.
#[allow(clippy::too_many_arguments)]
pub fn wkv7_step<T: Float>(
    state: &mut [T],
    r: &[T],
    k: &[T],
    v: &[T],
    a: T,
    decay: &[T],
    scratch: &mut [T],
    out: &mut [T],
) {
    let dk = k.len();
    let dv = v.len();
    debug_assert_eq!(state.len(), dk * dv);
    let u = &mut scratch[..dv];
    u.iter_mut().for_each(|x| *x = T::zero());
    for i in 0..dk {
        let row = &mut state[i * dv..(i + 1) * dv];
        let d = decay[i];
        let ki = k[i];
        for (s, uj) in row.iter_mut().zip(u.iter_mut()) {
            *s = *s * d;
            *uj = *uj + ki * *s;
        }
    }
    for i in 0..dk {
        let row = &mut state[i * dv..(i + 1) * dv];
        let aki = a * k[i];
        // removing before adding keeps the a = 1, k = e_i replacement exact
        for j in 0..dv {
            row[j] = (row[j] - aki * u[j]) + aki * v[j];
        }
    }
    out.iter_mut().for_each(|o| *o = T::zero());
    for i in 0..dk {
        let row = &state[i * dv..(i + 1) * dv];
        let ri = r[i];
        for (o, &s) in out.iter_mut().zip(row) {
            *o = *o + ri * s;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_matches_triple_loop_exactly() {
        let (m, k, n) = (3, 4, 5);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.91).cos()).collect();
        let mut out = vec![0.0; m * n];
        matmul(&a, &b, &mut out, m, k, n);
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for p in 0..k {
                    s += a[i * k + p] * b[p * n + j];
                }
                assert_eq!(out[i * n + j], s);
            }
        }
    }

    #[test]
    fn transposed_variants_agree() {
        let (m, k, n) = (2, 3, 4);
        let a: Vec<f64> = (0..m * k).map(|i| i as f64 - 2.5).collect();
        let b: Vec<f64> = (0..k * n).map(|i| 0.5 * i as f64).collect();
        let mut want = vec![0.0; m * n];
        matmul(&a, &b, &mut want, m, k, n);
        // bt is b transposed (n×k), at is a transposed (k×m)
        let mut bt = vec![0.0; n * k];
        for p in 0..k {
            for j in 0..n {
                bt[j * k + p] = b[p * n + j];
            }
        }
        let mut at = vec![0.0; k * m];
        for i in 0..m {
            for p in 0..k {
                at[p * m + i] = a[i * k + p];
            }
        }
        let mut got = vec![0.0; m * n];
        matmul_nt(&a, &bt, &mut got, m, k, n);
        assert_eq!(got, want);
        matmul_tn(&at, &b, &mut got, k, m, n);
        assert_eq!(got, want);
    }

    #[test]
    fn neg_exp_exp_stays_in_open_unit_interval() {
        for w in [-1e300, -800.0, -40.0, 0.0, 6.0, 7.0, 800.0, 1e300] {
            let y = neg_exp_exp(w);
            assert!(y > 0.0 && y < 1.0, "w={w} y={y}");
            assert!(neg_exp_exp_grad(w).is_finite());
        }
        assert!((neg_exp_exp(0.0f64) - (-1.0f64).exp()).abs() < 1e-15);
    }
}
