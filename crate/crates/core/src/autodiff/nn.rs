//! Fused transformer primitives with hand-derived backward passes.

use super::{Tape, Var};
use crate::error::{Result, UpqError};
use crate::linalg::{gemm, MatMut, MatRef};
use crate::tensor::Tensor;

const RMS_EPS: f32 = 1e-5;

impl Tape {
    /// Row lookup: `table [V, D]`, `ids` of length `batch * seq` → `[batch, seq, D]`.
    pub fn embedding(&mut self, table: Var, ids: &[u32], batch: usize, seq: usize) -> Result<Var> {
        let t = self.value(table);
        if t.shape().len() != 2 {
            return Err(UpqError::contract("embedding table must be 2-D"));
        }
        if ids.len() != batch * seq {
            return Err(UpqError::contract(format!(
                "embedding: {} ids for batch {batch} x seq {seq}",
                ids.len()
            )));
        }
        let (vocab, dim) = (t.shape()[0], t.shape()[1]);
        if let Some(bad) = ids.iter().find(|&&i| i as usize >= vocab) {
            return Err(UpqError::contract(format!(
                "token id {bad} outside vocabulary of {vocab}"
            )));
        }
        let mut out = Vec::with_capacity(ids.len() * dim);
        for &id in ids {
            out.extend_from_slice(t.row(id as usize));
        }
        let out = Tensor::new(vec![batch, seq, dim], out)?;
        let ids = ids.to_vec();
        self.push("embedding", out, vec![table], move |ctx| {
            let t = ctx.inputs[0];
            let mut g = vec![0.0f32; t.numel()];
            for (p, &id) in ids.iter().enumerate() {
                let src = ctx.upstream.row(p);
                let dst = &mut g[id as usize * dim..(id as usize + 1) * dim];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += s;
                }
            }
            Ok(vec![Some(Tensor::new(t.shape().to_vec(), g)?)])
        })
    }

    /// Root-mean-square normalization over the last axis with a learned gain.
    pub fn rms_norm(&mut self, x: Var, gain: Var) -> Result<Var> {
        let (tx, tg) = (self.value(x), self.value(gain));
        let d = tx.cols();
        if tg.shape() != [d] {
            return Err(UpqError::contract(format!(
                "rms_norm gain shape {:?} does not match width {d}",
                tg.shape()
            )));
        }
        let mut out = vec![0.0f32; tx.numel()];
        for r in 0..tx.rows() {
            let row = tx.row(r);
            let inv = inv_rms(row);
            for j in 0..d {
                out[r * d + j] = row[j] * inv * tg.data()[j];
            }
        }
        let out = Tensor::new(tx.shape().to_vec(), out)?;
        self.push("rms_norm", out, vec![x, gain], move |ctx| {
            let (tx, tg, up) = (ctx.inputs[0], ctx.inputs[1], ctx.upstream);
            let w = tg.data();
            let mut gx = vec![0.0f32; tx.numel()];
            let mut gw = vec![0.0f32; d];
            for r in 0..tx.rows() {
                let (row, ur) = (tx.row(r), up.row(r));
                let inv = inv_rms(row);
                let mut dot = 0.0f32;
                for j in 0..d {
                    let xhat = row[j] * inv;
                    gw[j] += ur[j] * xhat;
                    dot += ur[j] * w[j] * xhat;
                }
                let mean_dot = dot / d as f32;
                for j in 0..d {
                    let xhat = row[j] * inv;
                    gx[r * d + j] = inv * (ur[j] * w[j] - xhat * mean_dot);
                }
            }
            Ok(vec![
                ctx.needs[0].then(|| Tensor::new(tx.shape().to_vec(), gx).expect("shape")),
                ctx.needs[1].then(|| Tensor::new(vec![d], gw).expect("shape")),
            ])
        })
    }

    /// Multi-head causal self-attention over `[batch, seq, dim]` projections.
    /// Position `i` attends to positions `0..=i` only.
    pub fn causal_attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        if tq.shape().len() != 3 || tq.shape() != tk.shape() || tq.shape() != tv.shape() {
            return Err(UpqError::contract(format!(
                "attention needs equal [batch, seq, dim] inputs, got {:?} {:?} {:?}",
                tq.shape(),
                tk.shape(),
                tv.shape()
            )));
        }
        let (b, t, d) = (tq.shape()[0], tq.shape()[1], tq.shape()[2]);
        if heads == 0 || d % heads != 0 {
            return Err(UpqError::contract(format!(
                "width {d} not divisible by {heads} heads"
            )));
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f32).sqrt();

        let mut probs = vec![0.0f32; b * heads * t * t];
        let mut out = vec![0.0f32; b * t * d];
        for bi in 0..b {
            for h in 0..heads {
                let p = &mut probs[(bi * heads + h) * t * t..(bi * heads + h + 1) * t * t];
                gemm(
                    scale,
                    head(tq.data(), bi * t * d + h * dh, t, dh, d),
                    head(tk.data(), bi * t * d + h * dh, t, dh, d).t(),
                    0.0,
                    MatMut::dense(p, t, t),
                );
                for i in 0..t {
                    let row = &mut p[i * t..(i + 1) * t];
                    let visible = &mut row[..=i];
                    super::ops::softmax_in_place(visible);
                    row[i + 1..].fill(0.0);
                }
                gemm(
                    1.0,
                    MatRef::dense(p, t, t),
                    head(tv.data(), bi * t * d + h * dh, t, dh, d),
                    0.0,
                    MatMut {
                        data: &mut out,
                        offset: bi * t * d + h * dh,
                        rows: t,
                        cols: dh,
                        row_stride: d as isize,
                    },
                );
            }
        }
        let out = Tensor::new(vec![b, t, d], out)?;
        self.push("causal_attention", out, vec![q, k, v], move |ctx| {
            let (tq, tk, tv, up) = (ctx.inputs[0], ctx.inputs[1], ctx.inputs[2], ctx.upstream);
            let mut gq = vec![0.0f32; b * t * d];
            let mut gk = vec![0.0f32; b * t * d];
            let mut gv = vec![0.0f32; b * t * d];
            let mut dp = vec![0.0f32; t * t];
            for bi in 0..b {
                for h in 0..heads {
                    let p = &probs[(bi * heads + h) * t * t..(bi * heads + h + 1) * t * t];
                    let pv = MatRef::dense(p, t, t);
                    let uv = head(up.data(), bi * t * d + h * dh, t, dh, d);
                    // dV = Pᵀ · dO
                    let (off, rs) = (bi * t * d + h * dh, d);
                    gemm(
                        1.0,
                        pv.t(),
                        uv,
                        0.0,
                        MatMut { data: &mut gv, offset: off, rows: t, cols: dh, row_stride: rs as isize },
                    );
                    // dP = dO · Vᵀ, then the softmax Jacobian row by row.
                    gemm(1.0, uv, head(tv.data(), bi * t * d + h * dh, t, dh, d).t(), 0.0, MatMut::dense(&mut dp, t, t));
                    for i in 0..t {
                        let pr = &p[i * t..(i + 1) * t];
                        let dr = &mut dp[i * t..(i + 1) * t];
                        let dot: f32 = pr[..=i].iter().zip(&dr[..=i]).map(|(a, b)| a * b).sum();
                        for j in 0..=i {
                            dr[j] = pr[j] * (dr[j] - dot);
                        }
                        dr[i + 1..].fill(0.0);
                    }
                    let ds = MatRef::dense(&dp, t, t);
                    gemm(
                        scale,
                        ds,
                        head(tk.data(), bi * t * d + h * dh, t, dh, d),
                        0.0,
                        MatMut { data: &mut gq, offset: off, rows: t, cols: dh, row_stride: rs as isize },
                    );
                    gemm(
                        scale,
                        ds.t(),
                        head(tq.data(), bi * t * d + h * dh, t, dh, d),
                        0.0,
                        MatMut { data: &mut gk, offset: off, rows: t, cols: dh, row_stride: rs as isize },
                    );
                }
            }
            let shape = vec![b, t, d];
            Ok(vec![
                ctx.needs[0].then(|| Tensor::new(shape.clone(), gq).expect("shape")),
                ctx.needs[1].then(|| Tensor::new(shape.clone(), gk).expect("shape")),
                ctx.needs[2].then(|| Tensor::new(shape.clone(), gv).expect("shape")),
            ])
        })
    }
}

/// One head's `[seq, head_dim]` slice of a `[batch, seq, dim]` buffer.
fn head(data: &[f32], offset: usize, rows: usize, cols: usize, stride: usize) -> MatRef<'_> {
    MatRef {
        data,
        offset,
        rows,
        cols,
        row_stride: stride as isize,
        col_stride: 1,
    }
}

fn inv_rms(row: &[f32]) -> f32 {
    let ms = row.iter().map(|v| v * v).sum::<f32>() / row.len() as f32;
    1.0 / (ms + RMS_EPS).sqrt()
}
