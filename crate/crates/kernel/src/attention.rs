//! Multi-head attention with an additive per-head logit bias.
//!
//! Inputs are `[batch, seq, d]` buffers; head `h` owns columns
//! `h * d / heads .. (h + 1) * d / heads`. Bias entries equal to `-inf` are
//! skipped entirely, so a causal bias never touches future keys.

use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttentionDims {
    pub batch: usize,
    pub seq: usize,
    pub model: usize,
    pub heads: usize,
}

impl AttentionDims {
    pub fn head_dim(&self) -> usize {
        self.model / self.heads
    }
}

/// Returns `(output, probs)`; `probs` is laid out `[batch, heads, seq, seq]`.
pub fn attention_forward<T: Scalar>(q: &[T], k: &[T], v: &[T], bias: &[T], dims: AttentionDims) -> (Vec<T>, Vec<T>) {
    let AttentionDims {
        batch,
        seq,
        model,
        heads,
    } = dims;
    let dh = dims.head_dim();
    let scale = T::one() / T::from_usize(dh).expect("head dim").sqrt();
    let mut out = vec![T::zero(); batch * seq * model];
    let mut probs = vec![T::zero(); batch * heads * seq * seq];
    let mut head_out = vec![T::zero(); seq * dh];

    for b in 0..batch {
        let base = b * seq * model;
        for h in 0..heads {
            let off = base + h * dh;
            let p_base = (b * heads + h) * seq * seq;
            let p = &mut probs[p_base..p_base + seq * seq];
            // Raw scores q_i . k_j, then bias, max-shift and normalize per row.
            T::gemm(seq, dh, seq, &q[off..], (model, 1), &k[off..], (1, model), T::zero(), p);
            for i in 0..seq {
                let bias_row = &bias[(h * seq + i) * seq..(h * seq + i + 1) * seq];
                let row = &mut p[i * seq..(i + 1) * seq];
                let mut max = T::neg_infinity();
                for (x, &bj) in row.iter_mut().zip(bias_row) {
                    *x = if bj == T::neg_infinity() {
                        T::neg_infinity()
                    } else {
                        *x * scale + bj
                    };
                    if *x > max {
                        max = *x;
                    }
                }
                let mut total = T::zero();
                for x in row.iter_mut() {
                    *x = if *x == T::neg_infinity() {
                        T::zero()
                    } else {
                        (*x - max).exp()
                    };
                    total = total + *x;
                }
                for x in row.iter_mut() {
                    *x = *x / total;
                }
            }
            T::gemm(
                seq,
                seq,
                dh,
                p,
                (seq, 1),
                &v[off..],
                (model, 1),
                T::zero(),
                &mut head_out,
            );
            for i in 0..seq {
                out[off + i * model..off + i * model + dh].copy_from_slice(&head_out[i * dh..(i + 1) * dh]);
            }
        }
    }
    (out, probs)
}

/// Gradients `(dq, dk, dv)` given the upstream gradient of the output.
pub fn attention_backward<T: Scalar>(
    q: &[T],
    k: &[T],
    v: &[T],
    probs: &[T],
    grad_out: &[T],
    dims: AttentionDims,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let AttentionDims {
        batch,
        seq,
        model,
        heads,
    } = dims;
    let dh = dims.head_dim();
    let scale = T::one() / T::from_usize(dh).expect("head dim").sqrt();
    let n = batch * seq * model;
    let (mut dq, mut dk, mut dv) = (vec![T::zero(); n], vec![T::zero(); n], vec![T::zero(); n]);
    let mut ds = vec![T::zero(); seq * seq];
    let mut tmp = vec![T::zero(); seq * dh];

    let scatter_add = |dst: &mut [T], src: &[T], off: usize| {
        for i in 0..seq {
            for (d, &s) in dst[off + i * model..off + i * model + dh]
                .iter_mut()
                .zip(&src[i * dh..(i + 1) * dh])
            {
                *d = *d + s;
            }
        }
    };

    for b in 0..batch {
        let base = b * seq * model;
        for h in 0..heads {
            let off = base + h * dh;
            let p_base = (b * heads + h) * seq * seq;
            let p = &probs[p_base..p_base + seq * seq];
            let go = &grad_out[off..];

            // dV = P^T dO
            T::gemm(seq, seq, dh, p, (1, seq), go, (model, 1), T::zero(), &mut tmp);
            scatter_add(&mut dv, &tmp, off);

            // dP = dO V^T, then the softmax Jacobian row by row.
            T::gemm(seq, dh, seq, go, (model, 1), &v[off..], (1, model), T::zero(), &mut ds);
            for i in 0..seq {
                let pr = &p[i * seq..(i + 1) * seq];
                let row = &mut ds[i * seq..(i + 1) * seq];
                let weighted: T = pr.iter().zip(row.iter()).map(|(&a, &c)| a * c).sum();
                for (x, &pj) in row.iter_mut().zip(pr) {
                    *x = if pj == T::zero() {
                        T::zero()
                    } else {
                        pj * (*x - weighted) * scale
                    };
                }
            }

            // dQ = dS K, dK = dS^T Q
            T::gemm(seq, seq, dh, &ds, (seq, 1), &k[off..], (model, 1), T::zero(), &mut tmp);
            scatter_add(&mut dq, &tmp, off);
            T::gemm(seq, seq, dh, &ds, (1, seq), &q[off..], (model, 1), T::zero(), &mut tmp);
            scatter_add(&mut dk, &tmp, off);
        }
    }
    (dq, dk, dv)
}
