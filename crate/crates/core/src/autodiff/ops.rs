use super::{CustomOpHandle, Tape, Var};
use crate::error::{Result, UpqError};
use crate::linalg::{gemm, MatMut, MatRef};
use crate::tensor::Tensor;

/// Generic operations reachable through [`Tape::forward_op`].
#[derive(Debug, Clone)]
pub enum Op {
    Add,
    Sub,
    Mul,
    Scale(f32),
    Exp,
    Log,
    Square,
    Silu,
    Clip { lo: f32, hi: f32 },
    /// `a · b`; `a` may carry leading batch axes.
    MatMul,
    /// `a · bᵀ` with `b` stored `[out, in]`.
    MatMulNt,
    Softmax,
    LogSoftmax,
    Sum,
    Mean,
    Custom(CustomOpHandle),
}

/// How the second operand of a binary elementwise op lines up with the first.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Broadcast {
    Same,
    /// `b` matches the trailing axes of `a` and repeats over a leading batch axis.
    Leading,
    /// `a` is `[m, n]`, `b` is `[m, 1]`.
    Column,
}

fn broadcast_kind(a: &Tensor, b: &Tensor, op: &str) -> Result<Broadcast> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa == sb {
        return Ok(Broadcast::Same);
    }
    if sb.len() < sa.len() && sa[sa.len() - sb.len()..] == *sb {
        return Ok(Broadcast::Leading);
    }
    if sa.len() == 2 && sb.len() == 2 && sb[0] == sa[0] && sb[1] == 1 {
        return Ok(Broadcast::Column);
    }
    Err(UpqError::contract(format!(
        "{op}: shapes {sa:?} and {sb:?} do not broadcast"
    )))
}

/// Index of the `b` element paired with flat index `i` of `a`.
#[inline]
fn b_index(kind: Broadcast, i: usize, b_len: usize, a_cols: usize) -> usize {
    match kind {
        Broadcast::Same => i,
        Broadcast::Leading => i % b_len,
        Broadcast::Column => i / a_cols,
    }
}

/// Folds a gradient shaped like `a` back onto `b`'s shape.
fn reduce_to(kind: Broadcast, g: Vec<f32>, b: &Tensor, a_cols: usize) -> Tensor {
    match kind {
        Broadcast::Same => Tensor::new(b.shape().to_vec(), g).expect("same shape"),
        _ => {
            let n = b.numel();
            let mut out = vec![0.0f32; n];
            for (i, v) in g.into_iter().enumerate() {
                out[b_index(kind, i, n, a_cols)] += v;
            }
            Tensor::new(b.shape().to_vec(), out).expect("reduced shape")
        }
    }
}

fn same_shape(data: Vec<f32>, like: &Tensor) -> Tensor {
    Tensor::new(like.shape().to_vec(), data).expect("shape preserved")
}

fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

impl Tape {
    /// Dispatches one of the generic operations.
    pub fn forward_op(&mut self, op: Op, inputs: &[Var]) -> Result<Var> {
        let arity = match op {
            Op::Add | Op::Sub | Op::Mul | Op::MatMul | Op::MatMulNt => 2,
            Op::Custom(ref h) => h.op().input_count(),
            _ => 1,
        };
        if inputs.len() != arity {
            return Err(UpqError::contract(format!(
                "{op:?} expects {arity} inputs, got {}",
                inputs.len()
            )));
        }
        for &v in inputs {
            self.value(v).ensure_finite("op input")?;
        }
        match op {
            Op::Add => self.binary(inputs[0], inputs[1], BinaryKind::Add),
            Op::Sub => self.binary(inputs[0], inputs[1], BinaryKind::Sub),
            Op::Mul => self.binary(inputs[0], inputs[1], BinaryKind::Mul),
            Op::Scale(c) => self.scale(inputs[0], c),
            Op::Exp => self.unary(inputs[0], UnaryKind::Exp),
            Op::Log => self.unary(inputs[0], UnaryKind::Log),
            Op::Square => self.unary(inputs[0], UnaryKind::Square),
            Op::Silu => self.unary(inputs[0], UnaryKind::Silu),
            Op::Clip { lo, hi } => self.clip(inputs[0], lo, hi),
            Op::MatMul => self.matmul(inputs[0], inputs[1]),
            Op::MatMulNt => self.matmul_nt(inputs[0], inputs[1]),
            Op::Softmax => self.softmax(inputs[0]),
            Op::LogSoftmax => self.log_softmax(inputs[0]),
            Op::Sum => self.sum(inputs[0]),
            Op::Mean => self.mean(inputs[0]),
            Op::Custom(h) => self.custom(&h, inputs),
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinaryKind::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinaryKind::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinaryKind::Mul)
    }

    pub fn silu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, UnaryKind::Silu)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(a, UnaryKind::Exp)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary(a, UnaryKind::Log)
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.unary(a, UnaryKind::Square)
    }

    fn binary(&mut self, a: Var, b: Var, kind: BinaryKind) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let bc = broadcast_kind(ta, tb, kind.name())?;
        let (bl, cols) = (tb.numel(), ta.cols());
        let (da, db) = (ta.data(), tb.data());
        let out: Vec<f32> = (0..da.len())
            .map(|i| {
                let y = db[b_index(bc, i, bl, cols)];
                match kind {
                    BinaryKind::Add => da[i] + y,
                    BinaryKind::Sub => da[i] - y,
                    BinaryKind::Mul => da[i] * y,
                }
            })
            .collect();
        let out = same_shape(out, ta);
        self.push(kind.name(), out, vec![a, b], move |ctx| {
            let (ta, tb, up) = (ctx.inputs[0], ctx.inputs[1], ctx.upstream.data());
            let (bl, cols) = (tb.numel(), ta.cols());
            let ga = ctx.needs[0].then(|| match kind {
                BinaryKind::Add | BinaryKind::Sub => same_shape(up.to_vec(), ta),
                BinaryKind::Mul => same_shape(
                    up.iter()
                        .enumerate()
                        .map(|(i, g)| g * tb.data()[b_index(bc, i, bl, cols)])
                        .collect(),
                    ta,
                ),
            });
            let gb = ctx.needs[1].then(|| {
                let g: Vec<f32> = match kind {
                    BinaryKind::Add => up.to_vec(),
                    BinaryKind::Sub => up.iter().map(|g| -g).collect(),
                    BinaryKind::Mul => up.iter().zip(ta.data()).map(|(g, x)| g * x).collect(),
                };
                reduce_to(bc, g, tb, cols)
            });
            Ok(vec![ga, gb])
        })
    }

    pub fn scale(&mut self, a: Var, c: f32) -> Result<Var> {
        let out = self.value(a).map(|x| x * c);
        self.push("scale", out, vec![a], move |ctx| {
            Ok(vec![Some(ctx.upstream.map(|g| g * c))])
        })
    }

    fn unary(&mut self, a: Var, kind: UnaryKind) -> Result<Var> {
        let x = self.value(a);
        if kind == UnaryKind::Log {
            if let Some(v) = x.data().iter().find(|v| **v <= 0.0) {
                return Err(UpqError::Numeric(format!("log of non-positive value {v}")));
            }
        }
        let out = x.map(|v| match kind {
            UnaryKind::Exp => v.exp(),
            UnaryKind::Log => v.ln(),
            UnaryKind::Square => v * v,
            UnaryKind::Silu => v * sigmoid(v),
        });
        self.push(kind.name(), out, vec![a], move |ctx| {
            let (x, y, up) = (ctx.inputs[0].data(), ctx.output.data(), ctx.upstream.data());
            let g: Vec<f32> = (0..x.len())
                .map(|i| {
                    up[i]
                        * match kind {
                            UnaryKind::Exp => y[i],
                            UnaryKind::Log => 1.0 / x[i],
                            UnaryKind::Square => 2.0 * x[i],
                            UnaryKind::Silu => {
                                let s = sigmoid(x[i]);
                                s * (1.0 + x[i] * (1.0 - s))
                            }
                        }
                })
                .collect();
            Ok(vec![Some(same_shape(g, ctx.inputs[0]))])
        })
    }

    /// Clamps into `[lo, hi]`; gradient passes only where the input lies inside.
    pub fn clip(&mut self, a: Var, lo: f32, hi: f32) -> Result<Var> {
        if lo > hi {
            return Err(UpqError::contract(format!("clip bounds {lo} > {hi}")));
        }
        let out = self.value(a).map(|v| v.clamp(lo, hi));
        self.push("clip", out, vec![a], move |ctx| {
            let x = ctx.inputs[0].data();
            let g = ctx
                .upstream
                .data()
                .iter()
                .zip(x)
                .map(|(g, &v)| if (lo..=hi).contains(&v) { *g } else { 0.0 })
                .collect();
            Ok(vec![Some(same_shape(g, ctx.inputs[0]))])
        })
    }

    /// `a [.., m, k] · b [k, n] → [.., m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a [.., m, k] · bᵀ` where `b` is `[n, k]`; the layout of linear weights.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, transpose_b: bool) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape().len() < 2 || tb.shape().len() != 2 {
            return Err(UpqError::contract(format!(
                "matmul needs a matrix right operand and at least 2-D left operand, got {:?} and {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let (m, k) = (ta.rows(), ta.cols());
        let (kb, n) = if transpose_b {
            (tb.shape()[1], tb.shape()[0])
        } else {
            (tb.shape()[0], tb.shape()[1])
        };
        if k != kb {
            return Err(UpqError::contract(format!(
                "matmul inner dimensions differ: {:?} x {:?}{}",
                ta.shape(),
                tb.shape(),
                if transpose_b { "ᵀ" } else { "" }
            )));
        }
        let mut out = vec![0.0f32; m * n];
        gemm(
            1.0,
            MatRef::dense(ta.data(), m, k),
            weight_view(tb, transpose_b),
            0.0,
            MatMut::dense(&mut out, m, n),
        );
        let mut shape = ta.shape().to_vec();
        *shape.last_mut().expect("2-D") = n;
        let out = Tensor::new(shape, out)?;
        let name = if transpose_b { "matmul_nt" } else { "matmul" };
        self.push(name, out, vec![a, b], move |ctx| {
            let (ta, tb, up) = (ctx.inputs[0], ctx.inputs[1], ctx.upstream);
            let upv = MatRef::dense(up.data(), m, n);
            let ga = ctx.needs[0].then(|| {
                // dA = dC · Bᵀ (or dC · B when B was transposed)
                let mut g = vec![0.0f32; m * k];
                gemm(1.0, upv, weight_view(tb, transpose_b).t(), 0.0, MatMut::dense(&mut g, m, k));
                same_shape(g, ta)
            });
            let gb = ctx.needs[1].then(|| {
                let av = MatRef::dense(ta.data(), m, k);
                let mut g = vec![0.0f32; k * n];
                if transpose_b {
                    // dB [n, k] = dCᵀ · A
                    gemm(1.0, upv.t(), av, 0.0, MatMut::dense(&mut g, n, k));
                } else {
                    // dB [k, n] = Aᵀ · dC
                    gemm(1.0, av.t(), upv, 0.0, MatMut::dense(&mut g, k, n));
                }
                same_shape(g, tb)
            });
            Ok(vec![ga, gb])
        })
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let mut out = x.data().to_vec();
        for row in out.chunks_mut(x.cols()) {
            softmax_in_place(row);
        }
        let out = same_shape(out, x);
        self.push("softmax", out, vec![a], |ctx| {
            let (y, up) = (ctx.output, ctx.upstream);
            let n = y.cols();
            let mut g = vec![0.0f32; y.numel()];
            for r in 0..y.rows() {
                let (yr, ur) = (y.row(r), up.row(r));
                let dot: f32 = yr.iter().zip(ur).map(|(a, b)| a * b).sum();
                for j in 0..n {
                    g[r * n + j] = yr[j] * (ur[j] - dot);
                }
            }
            Ok(vec![Some(same_shape(g, y))])
        })
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let mut out = x.data().to_vec();
        for row in out.chunks_mut(x.cols()) {
            log_softmax_in_place(row);
        }
        let out = same_shape(out, x);
        self.push("log_softmax", out, vec![a], |ctx| {
            let (y, up) = (ctx.output, ctx.upstream);
            let n = y.cols();
            let mut g = vec![0.0f32; y.numel()];
            for r in 0..y.rows() {
                let (yr, ur) = (y.row(r), up.row(r));
                let total: f32 = ur.iter().sum();
                for j in 0..n {
                    g[r * n + j] = ur[j] - yr[j].exp() * total;
                }
            }
            Ok(vec![Some(same_shape(g, y))])
        })
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s: f32 = self.value(a).data().iter().sum();
        self.push("sum", Tensor::scalar(s), vec![a], |ctx| {
            let g = ctx.upstream.item();
            Ok(vec![Some(Tensor::full(ctx.inputs[0].shape(), g))])
        })
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let s: f32 = x.data().iter().sum::<f32>() / x.numel() as f32;
        self.push("mean", Tensor::scalar(s), vec![a], |ctx| {
            let x = ctx.inputs[0];
            let g = ctx.upstream.item() / x.numel() as f32;
            Ok(vec![Some(Tensor::full(x.shape(), g))])
        })
    }
}

fn weight_view(t: &Tensor, transpose: bool) -> MatRef<'_> {
    let v = MatRef::dense(t.data(), t.shape()[0], t.shape()[1]);
    if transpose {
        v.t()
    } else {
        v
    }
}

pub(crate) fn softmax_in_place(row: &mut [f32]) {
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut total = 0.0f32;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

pub(crate) fn log_softmax_in_place(row: &mut [f32]) {
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f32>().ln();
    for v in row.iter_mut() {
        *v -= lse;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum BinaryKind {
    Add,
    Sub,
    Mul,
}

impl BinaryKind {
    fn name(self) -> &'static str {
        match self {
            BinaryKind::Add => "add",
            BinaryKind::Sub => "sub",
            BinaryKind::Mul => "mul",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum UnaryKind {
    Exp,
    Log,
    Square,
    Silu,
}

impl UnaryKind {
    fn name(self) -> &'static str {
        match self {
            UnaryKind::Exp => "exp",
            UnaryKind::Log => "log",
            UnaryKind::Square => "square",
            UnaryKind::Silu => "silu",
        }
    }
}
