//! Balanced, zero-excluding weight quantizers.
//!
//! * INT2 stretched elastic quantization (SEQ): levels `Δ/4 · {−3, −1, 1, 3}`.
//! * INT4 FlexRound and OmniQuant variants on `Δ/2 · {−15, −13, …, 13, 15}`.
//!
//! Rounding is half away from zero everywhere (`f32::round`). All scales are
//! per output channel, i.e. one value per weight row.

mod diagnostics;
mod ste;

pub use diagnostics::{
    bin_utilization, int4_round_to_nearest, pm3_share, quant_error_norm, search_int4_scale,
    BinUtilization,
};
pub use ste::{seq_grad_entry, ste_wrap, Kernel};

use serde::{Deserialize, Serialize};

use crate::error::{Result, UpqError};
use crate::tensor::Tensor;

/// Largest odd INT4 level.
pub const INT4_MAX_LEVEL: f32 = 15.0;

/// Strictly positive per-row scales.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelScale(Vec<f32>);

impl ChannelScale {
    pub fn new(values: Vec<f32>) -> Result<Self> {
        check_positive(&values, "channel scale")?;
        Ok(ChannelScale(values))
    }

    pub fn values(&self) -> &[f32] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// As an `[m, 1]` column tensor.
    pub fn to_column(&self) -> Tensor {
        Tensor::new(vec![self.0.len(), 1], self.0.clone()).expect("non-empty scale")
    }

    pub fn from_column(t: &Tensor) -> Result<Self> {
        if t.shape().len() != 2 || t.shape()[1] != 1 {
            return Err(UpqError::contract(format!(
                "scale column must be [m, 1], got {:?}",
                t.shape()
            )));
        }
        ChannelScale::new(t.data().to_vec())
    }
}

fn check_positive(values: &[f32], what: &str) -> Result<()> {
    match values.iter().position(|v| !(*v > 0.0) || !v.is_finite()) {
        None => Ok(()),
        Some(row) => Err(UpqError::contract(format!(
            "{what} must be finite and > 0, row {row} is {}",
            values[row]
        ))),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SeqConfig {
    pub epsilon: f32,
}

impl Default for SeqConfig {
    fn default() -> Self {
        SeqConfig { epsilon: 0.01 }
    }
}

impl SeqConfig {
    pub fn new(epsilon: f32) -> Result<Self> {
        if !(epsilon > 0.0 && epsilon < 0.5) {
            return Err(UpqError::contract(format!(
                "SEQ epsilon must lie in (0, 0.5), got {epsilon}"
            )));
        }
        Ok(SeqConfig { epsilon })
    }
}

/// Supported bit widths of the balanced grids.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QuantGrid {
    Int2,
    Int4,
}

impl QuantGrid {
    /// Levels in units of the row scale Δ.
    pub fn levels(self) -> Vec<f32> {
        match self {
            QuantGrid::Int2 => vec![-0.75, -0.25, 0.25, 0.75],
            QuantGrid::Int4 => (-7..=8).map(|k| k as f32 - 0.5).collect(),
        }
    }

    /// Integer level labels: `{−3, −1, 1, 3}` or `{−15, …, 15}` (odd only).
    pub fn integer_levels(self) -> Vec<i32> {
        match self {
            QuantGrid::Int2 => vec![-3, -1, 1, 3],
            QuantGrid::Int4 => (-7..=8).map(|k| 2 * k - 1).collect(),
        }
    }

    /// Size of one integer level step in units of Δ.
    pub fn unit(self) -> f32 {
        match self {
            QuantGrid::Int2 => 0.25,
            QuantGrid::Int4 => 0.5,
        }
    }

    /// Whether `value` equals `Δ · unit · k` exactly for an admissible level `k`.
    pub fn contains(self, value: f32, delta: f32) -> bool {
        let step = delta * self.unit();
        let k = (value / step).round();
        let max = match self {
            QuantGrid::Int2 => 3.0,
            QuantGrid::Int4 => INT4_MAX_LEVEL,
        };
        k.abs() <= max && (k as i32).rem_euclid(2) == 1 && step * k == value
    }
}

fn check_rows(w: &Tensor, rows: usize, what: &str) -> Result<()> {
    if w.shape().len() != 2 {
        return Err(UpqError::contract(format!(
            "weights must be a matrix, got {:?}",
            w.shape()
        )));
    }
    if w.rows() != rows {
        return Err(UpqError::contract(format!(
            "{what} has {rows} rows but weights have {}",
            w.rows()
        )));
    }
    Ok(())
}

/// Whether `|w / Δ|` exceeds `1 − ε`, i.e. the clip in SEQ is active.
#[inline]
pub fn seq_saturated(w: f32, delta: f32, epsilon: f32) -> bool {
    (w / delta).abs() > 1.0 - epsilon
}

/// One SEQ entry: `Δ/2 · (⌊2·clip(w/Δ, −1+ε, 1−ε) − 0.5⌉ + 0.5)`.
#[inline]
pub fn seq_entry(w: f32, delta: f32, epsilon: f32) -> f32 {
    let z = (w / delta).clamp(-1.0 + epsilon, 1.0 - epsilon);
    let x = 2.0 * z - 0.5;
    delta / 2.0 * (x.round() + 0.5)
}

/// INT2 SEQ of an `m × n` matrix with one scale per row. The same map serves
/// full-precision sources and INT4 sources.
pub fn seq_int2_forward(w: &Tensor, delta: &ChannelScale, cfg: SeqConfig) -> Result<Tensor> {
    check_rows(w, delta.len(), "scale")?;
    let n = w.cols();
    let mut out = Vec::with_capacity(w.numel());
    for (i, &d) in delta.values().iter().enumerate() {
        out.extend(w.data()[i * n..(i + 1) * n].iter().map(|&x| seq_entry(x, d, cfg.epsilon)));
    }
    Tensor::new(w.shape().to_vec(), out)
}

/// Straight-through gradients of SEQ: `(∂L/∂W [m, n], ∂L/∂Δ [m, 1])`.
pub fn seq_int2_backward(
    w: &Tensor,
    delta: &ChannelScale,
    cfg: SeqConfig,
    upstream: &Tensor,
) -> Result<(Tensor, Tensor)> {
    check_rows(w, delta.len(), "scale")?;
    if upstream.shape() != w.shape() {
        return Err(UpqError::contract(format!(
            "upstream shape {:?} differs from weights {:?}",
            upstream.shape(),
            w.shape()
        )));
    }
    let n = w.cols();
    let mut gw = vec![0.0f32; w.numel()];
    let mut gd = vec![0.0f32; delta.len()];
    for (i, &d) in delta.values().iter().enumerate() {
        let mut acc = 0.0f32;
        for j in i * n..(i + 1) * n {
            let x = w.data()[j];
            let wq = seq_entry(x, d, cfg.epsilon);
            let (dw, dd) = seq_grad_entry(x, d, wq, cfg.epsilon);
            gw[j] = upstream.data()[j] * dw;
            acc += upstream.data()[j] * dd;
        }
        gd[i] = acc;
    }
    Ok((
        Tensor::new(w.shape().to_vec(), gw)?,
        Tensor::new(vec![delta.len(), 1], gd)?,
    ))
}

/// Per-row scale initialization `max_j |W_ij|`.
pub fn init_seq_scale(w: &Tensor) -> Result<ChannelScale> {
    if w.shape().len() != 2 {
        return Err(UpqError::contract("weights must be a matrix"));
    }
    let mut out = Vec::with_capacity(w.rows());
    for i in 0..w.rows() {
        let m = w.row(i).iter().fold(0.0f32, |a, x| a.max(x.abs()));
        if !(m > 0.0) {
            return Err(UpqError::DegenerateRow {
                row: i,
                reason: "all-zero row has no scale".into(),
            });
        }
        out.push(m);
    }
    ChannelScale::new(out)
}

/// Learnable FlexRound state, stored as logarithms so every factor stays positive.
#[derive(Debug, Clone, PartialEq)]
pub struct FlexRoundParams {
    /// `log Δ`, `[m, 1]`.
    pub log_delta: Tensor,
    /// `log S`, `[m, n]`, one divisor per weight.
    pub log_elem: Tensor,
    /// `log s`, `[m, 1]`, one divisor per row.
    pub log_row: Tensor,
}

impl FlexRoundParams {
    /// `Δ = max|W_row| / 7.5` so the grid spans each row, `S = s = 1`.
    /// With this initialization the quantizer is plain round-to-nearest.
    pub fn init(w: &Tensor) -> Result<Self> {
        let scale = init_seq_scale(w)?;
        let log_delta = scale
            .values()
            .iter()
            .map(|m| (m / (INT4_MAX_LEVEL / 2.0)).ln())
            .collect();
        Ok(FlexRoundParams {
            log_delta: Tensor::new(vec![w.rows(), 1], log_delta)?,
            log_elem: Tensor::zeros(w.shape()),
            log_row: Tensor::zeros(&[w.rows(), 1]),
        })
    }

    pub fn from_values(delta: Vec<f32>, elem: Tensor, row: Vec<f32>) -> Result<Self> {
        check_positive(&delta, "FlexRound Δ")?;
        check_positive(elem.data(), "FlexRound S")?;
        check_positive(&row, "FlexRound s")?;
        let m = delta.len();
        Ok(FlexRoundParams {
            log_delta: Tensor::new(vec![m, 1], delta.iter().map(|v| v.ln()).collect())?,
            log_elem: elem.map(f32::ln),
            log_row: Tensor::new(vec![row.len(), 1], row.iter().map(|v| v.ln()).collect())?,
        })
    }

    pub fn deltas(&self) -> Vec<f32> {
        self.log_delta.data().iter().map(|v| v.exp()).collect()
    }

    fn check(&self, w: &Tensor) -> Result<()> {
        check_rows(w, self.log_delta.numel(), "FlexRound Δ")?;
        if self.log_elem.shape() != w.shape() || self.log_row.numel() != w.rows() {
            return Err(UpqError::contract(format!(
                "FlexRound parameter shapes {:?}/{:?} do not match weights {:?}",
                self.log_elem.shape(),
                self.log_row.shape(),
                w.shape()
            )));
        }
        Ok(())
    }
}

/// Unclipped odd INT4 level for a normalized weight: `2⌊u + 0.5⌉ − 1`.
#[inline]
pub(crate) fn int4_raw_level(u: f32) -> f32 {
    2.0 * (u + 0.5).round() - 1.0
}

/// FlexRound on the balanced INT4 grid:
/// `Δ/2 · clip(2⌊W / (Δ⊙S⊙s) + 0.5⌉ − 1, −15, 15)`.
pub fn flexround_int4_forward(w: &Tensor, p: &FlexRoundParams) -> Result<Tensor> {
    p.check(w)?;
    let n = w.cols();
    let mut out = Vec::with_capacity(w.numel());
    for i in 0..w.rows() {
        let delta = p.log_delta.data()[i].exp();
        let row_s = p.log_row.data()[i].exp();
        for j in i * n..(i + 1) * n {
            let divisor = delta * p.log_elem.data()[j].exp() * row_s;
            if !(divisor > 0.0) || !divisor.is_finite() {
                return Err(UpqError::contract(format!(
                    "FlexRound divisor at flat index {j} is {divisor}"
                )));
            }
            let q = int4_raw_level(w.data()[j] / divisor).clamp(-INT4_MAX_LEVEL, INT4_MAX_LEVEL);
            out.push(delta / 2.0 * q);
        }
    }
    Tensor::new(w.shape().to_vec(), out)
}

/// Learnable OmniQuant clipping fractions, stored as logits of `γ, β ∈ [0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct OmniQuantParams {
    pub gamma_logit: Tensor,
    pub beta_logit: Tensor,
}

/// Logit used to start γ and β at (nearly) full range; `σ(4) ≈ 0.982`.
pub const OMNIQUANT_INIT_LOGIT: f32 = 4.0;

pub(crate) fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

impl OmniQuantParams {
    pub fn init(rows: usize) -> Self {
        OmniQuantParams {
            gamma_logit: Tensor::full(&[rows, 1], OMNIQUANT_INIT_LOGIT),
            beta_logit: Tensor::full(&[rows, 1], OMNIQUANT_INIT_LOGIT),
        }
    }

    pub fn gammas(&self) -> Vec<f32> {
        self.gamma_logit.data().iter().map(|&v| sigmoid(v)).collect()
    }

    pub fn betas(&self) -> Vec<f32> {
        self.beta_logit.data().iter().map(|&v| sigmoid(v)).collect()
    }
}

fn row_max_min(row: &[f32]) -> (f32, f32) {
    row.iter()
        .fold((f32::NEG_INFINITY, f32::INFINITY), |(mx, mn), &v| (mx.max(v), mn.min(v)))
}

/// Per-row `Δ = (γ·max(W_row) − β·min(W_row)) / 30`.
pub fn omniquant_row_deltas(w: &Tensor, p: &OmniQuantParams) -> Result<Vec<f32>> {
    check_rows(w, p.gamma_logit.numel(), "OmniQuant γ")?;
    check_rows(w, p.beta_logit.numel(), "OmniQuant β")?;
    let (g, b) = (p.gammas(), p.betas());
    (0..w.rows())
        .map(|i| {
            let (mx, mn) = row_max_min(w.row(i));
            let d = (g[i] * mx - b[i] * mn) / (2.0 * INT4_MAX_LEVEL);
            if d > 0.0 && d.is_finite() {
                Ok(d)
            } else {
                Err(UpqError::DegenerateRow {
                    row: i,
                    reason: format!(
                        "computed step {d} from max {mx}, min {mn}, γ {}, β {}",
                        g[i], b[i]
                    ),
                })
            }
        })
        .collect()
}

/// OmniQuant on the balanced INT4 grid.
pub fn omniquant_int4_forward(w: &Tensor, p: &OmniQuantParams) -> Result<Tensor> {
    let deltas = omniquant_row_deltas(w, p)?;
    let n = w.cols();
    let mut out = Vec::with_capacity(w.numel());
    for (i, &d) in deltas.iter().enumerate() {
        out.extend(w.data()[i * n..(i + 1) * n].iter().map(|&x| {
            d / 2.0 * int4_raw_level(x / d).clamp(-INT4_MAX_LEVEL, INT4_MAX_LEVEL)
        }));
    }
    Tensor::new(w.shape().to_vec(), out)
}
