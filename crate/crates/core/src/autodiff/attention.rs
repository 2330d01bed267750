//! Fused causal multi-head attention.
//!
//! Equivalent to per-head `softmax(mask(Q K^T / sqrt(d_k))) V` followed by
//! concatenation over heads. Queries are processed in tiles so each tile
//! only touches the keys it can see; only the probability matrix is kept
//! for the backward pass.

use super::{grad_slot, Mode, Node, Op, Tape, Var};
use crate::array::Array;
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::scalar::{dot, gemm_strided, Scalar, Strided};

#[derive(Debug, Clone, Copy)]
pub struct AttentionSpec {
    pub heads: usize,
    /// Dropout applied to the attention probabilities in training mode.
    pub dropout: f64,
}

pub(crate) struct AttentionSaved<T> {
    q: Var,
    k: Var,
    v: Var,
    batch: usize,
    heads: usize,
    tq: usize,
    tk: usize,
    width: usize,
    /// `[batch, head, tq, tk]`, post-softmax and pre-dropout.
    pub probs: Vec<T>,
    keep: Option<Vec<bool>>,
    keep_scale: T,
}

impl<T> AttentionSaved<T> {
    pub fn probs_shape(&self) -> [usize; 4] {
        [self.batch, self.heads, self.tq, self.tk]
    }
}

/// Query rows processed per gemm call.
const TILE: usize = 64;

impl<T: Scalar> Tape<T> {
    /// Causal multi-head attention. `q` is `[batch, tq, width]`, `k`/`v` are
    /// `[batch, tk, width]` with `tq <= tk`; query `i` sits at absolute
    /// position `tk - tq + i` and sees keys up to and including it. Head `h`
    /// uses feature columns `h * d_k .. (h + 1) * d_k`.
    pub fn causal_attention(&mut self, q: Var, k: Var, v: Var, spec: AttentionSpec, rng: &mut Rng, mode: Mode) -> Result<Var> {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let [batch, tq, width] = *qv.shape() else {
            return Err(Error::shape("causal_attention", qv.shape(), kv.shape()));
        };
        let [kb, tk, kw] = *kv.shape() else {
            return Err(Error::shape("causal_attention", qv.shape(), kv.shape()));
        };
        if kb != batch || kw != width || vv.shape() != kv.shape() || tq > tk || tq == 0 {
            return Err(Error::shape("causal_attention", qv.shape(), kv.shape()));
        }
        if spec.heads == 0 || width % spec.heads != 0 {
            return Err(Error::Config(format!("width {width} not divisible by {} heads", spec.heads)));
        }
        if !(0.0..1.0).contains(&spec.dropout) {
            return Err(Error::Contract(format!("dropout rate {} outside [0, 1)", spec.dropout)));
        }
        let heads = spec.heads;
        let dk = width / heads;
        let offset = tk - tq;
        let scale = T::one() / T::of(dk as f64).sqrt();
        let use_dropout = mode == Mode::Train && spec.dropout > 0.0;
        let keep_scale = T::of(1.0 / (1.0 - spec.dropout));

        let mut probs = vec![T::zero(); batch * heads * tq * tk];
        let mut keep = use_dropout.then(|| vec![false; probs.len()]);
        let mut out = vec![T::zero(); batch * tq * width];
        let mut dropped = vec![T::zero(); if use_dropout { TILE * tk } else { 0 }];
        let (qd, kd, vd) = (qv.data(), kv.data(), vv.data());

        for b in 0..batch {
            for h in 0..heads {
                let col = h * dk;
                let plane = (b * heads + h) * tq * tk;
                for i0 in (0..tq).step_by(TILE) {
                    let i1 = (i0 + TILE).min(tq);
                    let rows = i1 - i0;
                    let span = offset + i1;
                    let tile = plane + i0 * tk;
                    gemm_strided(
                        rows,
                        dk,
                        span,
                        scale,
                        qd,
                        Strided::row_major((b * tq + i0) * width + col, width),
                        kd,
                        Strided::col_major(b * tk * width + col, width),
                        T::zero(),
                        &mut probs,
                        Strided::row_major(tile, tk),
                    );
                    for r in 0..rows {
                        let n = offset + i0 + r + 1;
                        let row = &mut probs[tile + r * tk..tile + r * tk + span];
                        row[n..].iter_mut().for_each(|x| *x = T::zero());
                        if super::ops::softmax_in_place(&mut row[..n]).is_none() {
                            return Err(Error::NonFinite("attention scores".into()));
                        }
                    }
                    let (weights, ws) = match keep.as_mut() {
                        Some(keep) => {
                            for r in 0..rows {
                                let at = tile + r * tk;
                                let mask = &mut keep[at..at + span];
                                rng.fill_keep(mask, spec.dropout);
                                let dst = &mut dropped[r * tk..r * tk + span];
                                for ((w, &k), &p) in dst.iter_mut().zip(mask.iter()).zip(&probs[at..at + span]) {
                                    *w = if k { p * keep_scale } else { T::zero() };
                                }
                            }
                            (&dropped[..], Strided::row_major(0, tk))
                        }
                        None => (&probs[..], Strided::row_major(tile, tk)),
                    };
                    gemm_strided(
                        rows,
                        span,
                        dk,
                        T::one(),
                        weights,
                        ws,
                        vd,
                        Strided::row_major(b * tk * width + col, width),
                        T::zero(),
                        &mut out,
                        Strided::row_major((b * tq + i0) * width + col, width),
                    );
                }
            }
        }
        let value = Array::from_vec(&[batch, tq, width], out)?;
        let saved = AttentionSaved { q, k, v, batch, heads, tq, tk, width, probs, keep, keep_scale };
        Ok(self.push(value, Op::Attention(Box::new(saved)), &[q, k, v]))
    }
}

impl<T: Scalar> AttentionSaved<T> {
    pub(crate) fn backprop(&self, nodes: &[Node<T>], g: &Array<T>, grads: &mut [Option<Array<T>>]) {
        let (batch, heads, tq, tk, width) = (self.batch, self.heads, self.tq, self.tk, self.width);
        let dk = width / heads;
        let offset = tk - tq;
        let scale = T::one() / T::of(dk as f64).sqrt();
        let qv = nodes[self.q.0].value.data();
        let kv = nodes[self.k.0].value.data();
        let vv = nodes[self.v.0].value.data();
        let need_q = nodes[self.q.0].requires_grad;
        let need_k = nodes[self.k.0].requires_grad;
        let need_v = nodes[self.v.0].requires_grad;

        let mut dq = vec![T::zero(); if need_q { batch * tq * width } else { 0 }];
        let mut dk_all = vec![T::zero(); if need_k { batch * tk * width } else { 0 }];
        let mut dv_all = vec![T::zero(); if need_v { batch * tk * width } else { 0 }];
        let mut weights = vec![T::zero(); TILE * tk];
        let mut ds = vec![T::zero(); TILE * tk];
        let gd = g.data();

        for b in 0..batch {
            for h in 0..heads {
                let col = h * dk;
                let plane = (b * heads + h) * tq * tk;
                let kv_at = b * tk * width + col;
                for i0 in (0..tq).step_by(TILE) {
                    let i1 = (i0 + TILE).min(tq);
                    let rows = i1 - i0;
                    let span = offset + i1;
                    let tile = plane + i0 * tk;
                    let q_at = (b * tq + i0) * width + col;
                    for r in 0..rows {
                        let at = tile + r * tk;
                        let p = &self.probs[at..at + span];
                        let w = &mut weights[r * tk..r * tk + span];
                        match &self.keep {
                            Some(keep) => {
                                for ((w, &k), &p) in w.iter_mut().zip(&keep[at..at + span]).zip(p) {
                                    *w = if k { p * self.keep_scale } else { T::zero() };
                                }
                            }
                            None => w.copy_from_slice(p),
                        }
                    }
                    if need_v {
                        gemm_strided(
                            span,
                            rows,
                            dk,
                            T::one(),
                            &weights,
                            Strided::col_major(0, tk),
                            gd,
                            Strided::row_major(q_at, width),
                            T::one(),
                            &mut dv_all,
                            Strided::row_major(kv_at, width),
                        );
                    }
                    if !(need_q || need_k) {
                        continue;
                    }
                    // d(weights) = dout V^T
                    gemm_strided(
                        rows,
                        dk,
                        span,
                        T::one(),
                        gd,
                        Strided::row_major(q_at, width),
                        vv,
                        Strided::col_major(kv_at, width),
                        T::zero(),
                        &mut ds,
                        Strided::row_major(0, tk),
                    );
                    for r in 0..rows {
                        let n = offset + i0 + r + 1;
                        let at = tile + r * tk;
                        let p = &self.probs[at..at + n];
                        let dp = &mut ds[r * tk..r * tk + span];
                        if let Some(keep) = &self.keep {
                            for (d, &k) in dp.iter_mut().zip(&keep[at..at + n]) {
                                *d = if k { *d * self.keep_scale } else { T::zero() };
                            }
                        }
                        let c = dot(p, &dp[..n]);
                        for (d, &p) in dp.iter_mut().zip(p) {
                            *d = p * (*d - c) * scale;
                        }
                        dp[n..].iter_mut().for_each(|x| *x = T::zero());
                    }
                    if need_q {
                        gemm_strided(
                            rows,
                            span,
                            dk,
                            T::one(),
                            &ds,
                            Strided::row_major(0, tk),
                            kv,
                            Strided::row_major(kv_at, width),
                            T::one(),
                            &mut dq,
                            Strided::row_major(q_at, width),
                        );
                    }
                    if need_k {
                        gemm_strided(
                            span,
                            rows,
                            dk,
                            T::one(),
                            &ds,
                            Strided::col_major(0, tk),
                            qv,
                            Strided::row_major(q_at, width),
                            T::one(),
                            &mut dk_all,
                            Strided::row_major(kv_at, width),
                        );
                    }
                }
            }
        }
        for (var, buf) in [(self.q, dq), (self.k, dk_all), (self.v, dv_all)] {
            if buf.is_empty() {
                continue;
            }
            if let Some(slot) = grad_slot(grads, nodes, var) {
                for (d, x) in slot.data_mut().iter_mut().zip(&buf) {
                    *d += *x;
                }
            }
        }
    }
}
