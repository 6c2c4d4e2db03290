//! Straight-through custom ops for the quantizers.
//!
//! SEQ uses the closed-form piecewise gradients w.r.t. weight and scale.
//! FlexRound and OmniQuant pass rounding through as identity and block the
//! gradient wherever the INT4 clip is active; their parameters receive
//! gradients through the log / sigmoid reparameterizations.

use std::sync::Arc;

use super::{
    int4_raw_level, seq_saturated, sigmoid, ChannelScale, SeqConfig, INT4_MAX_LEVEL,
};
use crate::autodiff::{register_custom, CustomGradOp, CustomOpHandle};
use crate::error::{Result, UpqError};
use crate::tensor::Tensor;

/// Which quantizer to expose as a custom op.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Kernel {
    /// Inputs `[W (m×n), Δ (m×1)]`.
    Seq(SeqConfig),
    /// Inputs `[W, log Δ (m×1), log S (m×n), log s (m×1)]`.
    FlexRound,
    /// Inputs `[W, logit γ (m×1), logit β (m×1)]`.
    OmniQuant,
}

/// Registers the straight-through op for a quantizer.
pub fn ste_wrap(kernel: Kernel) -> CustomOpHandle {
    let op: Arc<dyn CustomGradOp> = match kernel {
        Kernel::Seq(cfg) => Arc::new(SeqSte { cfg }),
        Kernel::FlexRound => Arc::new(FlexRoundSte),
        Kernel::OmniQuant => Arc::new(OmniQuantSte),
    };
    register_custom(op).expect("built-in quantizer ops have consistent arity")
}

/// Closed-form SEQ gradient factors for one entry: `(∂Wq/∂W, ∂Wq/∂Δ)`.
///
/// Unsaturated (`|w/Δ| ≤ 1−ε`): `(1, (Wq − W)/Δ)`. Saturated: `(0, Wq/Δ)`.
#[inline]
pub fn seq_grad_entry(w: f32, delta: f32, wq: f32, epsilon: f32) -> (f32, f32) {
    if seq_saturated(w, delta, epsilon) {
        (0.0, wq / delta)
    } else {
        (1.0, (wq - w) / delta)
    }
}

fn column(t: &Tensor, rows: usize, what: &str) -> Result<()> {
    if t.shape() != [rows, 1] {
        return Err(UpqError::contract(format!(
            "{what} must be [{rows}, 1], got {:?}",
            t.shape()
        )));
    }
    Ok(())
}

fn matrix(w: &Tensor) -> Result<(usize, usize)> {
    if w.shape().len() != 2 {
        return Err(UpqError::contract(format!(
            "quantizer weights must be a matrix, got {:?}",
            w.shape()
        )));
    }
    Ok((w.rows(), w.cols()))
}

struct SeqSte {
    cfg: SeqConfig,
}

impl CustomGradOp for SeqSte {
    fn name(&self) -> &str {
        "seq_int2_ste"
    }

    fn input_count(&self) -> usize {
        2
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        let delta = ChannelScale::from_column(inputs[1])?;
        super::seq_int2_forward(inputs[0], &delta, self.cfg)
    }

    fn backward(&self, inputs: &[&Tensor], _: &Tensor, upstream: &Tensor) -> Result<Vec<Tensor>> {
        let delta = ChannelScale::from_column(inputs[1])?;
        let (gw, gd) = super::seq_int2_backward(inputs[0], &delta, self.cfg, upstream)?;
        Ok(vec![gw, gd])
    }
}

struct FlexRoundSte;

impl CustomGradOp for FlexRoundSte {
    fn name(&self) -> &str {
        "flexround_int4_ste"
    }

    fn input_count(&self) -> usize {
        4
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        let (m, _) = matrix(inputs[0])?;
        column(inputs[1], m, "log Δ")?;
        column(inputs[3], m, "log s")?;
        let p = super::FlexRoundParams {
            log_delta: inputs[1].clone(),
            log_elem: inputs[2].clone(),
            log_row: inputs[3].clone(),
        };
        super::flexround_int4_forward(inputs[0], &p)
    }

    fn backward(&self, inputs: &[&Tensor], _: &Tensor, upstream: &Tensor) -> Result<Vec<Tensor>> {
        let (w, log_delta, log_elem, log_row) = (inputs[0], inputs[1], inputs[2], inputs[3]);
        let (m, n) = matrix(w)?;
        let mut gw = vec![0.0f32; m * n];
        let mut g_log_delta = vec![0.0f32; m];
        let mut g_log_elem = vec![0.0f32; m * n];
        let mut g_log_row = vec![0.0f32; m];
        for i in 0..m {
            let delta = log_delta.data()[i].exp();
            let row_s = log_row.data()[i].exp();
            for j in i * n..(i + 1) * n {
                let elem = log_elem.data()[j].exp();
                let u = w.data()[j] / (delta * elem * row_s);
                let raw = int4_raw_level(u);
                let inside = raw.abs() <= INT4_MAX_LEVEL;
                let q = raw.clamp(-INT4_MAX_LEVEL, INT4_MAX_LEVEL);
                let up = upstream.data()[j];
                // Wq = Δ/2 · q(u), with ∂q/∂u ≈ 2 inside the clip range.
                let u_term = if inside { u } else { 0.0 };
                g_log_delta[i] += up * delta * (q / 2.0 - u_term);
                if inside {
                    gw[j] = up / (elem * row_s);
                    g_log_elem[j] = -up * delta * u;
                    g_log_row[i] -= up * delta * u;
                }
            }
        }
        Ok(vec![
            Tensor::new(w.shape().to_vec(), gw)?,
            Tensor::new(vec![m, 1], g_log_delta)?,
            Tensor::new(w.shape().to_vec(), g_log_elem)?,
            Tensor::new(vec![m, 1], g_log_row)?,
        ])
    }
}

struct OmniQuantSte;

impl CustomGradOp for OmniQuantSte {
    fn name(&self) -> &str {
        "omniquant_int4_ste"
    }

    fn input_count(&self) -> usize {
        3
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        let p = super::OmniQuantParams {
            gamma_logit: inputs[1].clone(),
            beta_logit: inputs[2].clone(),
        };
        super::omniquant_int4_forward(inputs[0], &p)
    }

    fn backward(&self, inputs: &[&Tensor], _: &Tensor, upstream: &Tensor) -> Result<Vec<Tensor>> {
        let (w, gamma_logit, beta_logit) = (inputs[0], inputs[1], inputs[2]);
        let (m, n) = matrix(w)?;
        let p = super::OmniQuantParams {
            gamma_logit: gamma_logit.clone(),
            beta_logit: beta_logit.clone(),
        };
        let deltas = super::omniquant_row_deltas(w, &p)?;
        let mut gw = vec![0.0f32; m * n];
        let mut g_gamma = vec![0.0f32; m];
        let mut g_beta = vec![0.0f32; m];
        for (i, &delta) in deltas.iter().enumerate() {
            let row = w.row(i);
            let (mx, mn) = row
                .iter()
                .fold((f32::NEG_INFINITY, f32::INFINITY), |(a, b), &v| (a.max(v), b.min(v)));
            let mut g_delta = 0.0f32;
            for (k, &x) in row.iter().enumerate() {
                let u = x / delta;
                let raw = int4_raw_level(u);
                let inside = raw.abs() <= INT4_MAX_LEVEL;
                let q = raw.clamp(-INT4_MAX_LEVEL, INT4_MAX_LEVEL);
                let up = upstream.data()[i * n + k];
                g_delta += up * (q / 2.0 - if inside { u } else { 0.0 });
                if inside {
                    // Row max/min act as constants for the weight gradient.
                    gw[i * n + k] = up;
                }
            }
            let (g, b) = (sigmoid(gamma_logit.data()[i]), sigmoid(beta_logit.data()[i]));
            let denom = 2.0 * INT4_MAX_LEVEL;
            g_gamma[i] = g_delta * mx / denom * g * (1.0 - g);
            g_beta[i] = -g_delta * mn / denom * b * (1.0 - b);
        }
        Ok(vec![
            Tensor::new(w.shape().to_vec(), gw)?,
            Tensor::new(vec![m, 1], g_gamma)?,
            Tensor::new(vec![m, 1], g_beta)?,
        ])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;

    fn run_mean_loss(w: &Tensor, delta: &Tensor) -> (Tensor, Tensor) {
        let op = ste_wrap(Kernel::Seq(SeqConfig::default()));
        let mut tape = Tape::new();
        let wv = tape.leaf(w.clone(), true).unwrap();
        let dv = tape.leaf(delta.clone(), true).unwrap();
        let q = tape.custom(&op, &[wv, dv]).unwrap();
        let l = tape.mean(q).unwrap();
        tape.backward(l).unwrap();
        (tape.grad(wv).unwrap().clone(), tape.grad(dv).unwrap().clone())
    }

    #[test]
    fn mean_loss_unsaturated_gives_uniform_weight_gradient() {
        let w = Tensor::new(vec![2, 3], vec![0.1, -0.2, 0.3, 0.05, 0.4, -0.45]).unwrap();
        let d = Tensor::new(vec![2, 1], vec![1.0, 1.0]).unwrap();
        let (gw, _) = run_mean_loss(&w, &d);
        assert!(gw.data().iter().all(|&g| g == 1.0 / 6.0));
    }

    #[test]
    fn mean_loss_saturated_gives_zero_weight_gradient() {
        let w = Tensor::new(vec![2, 2], vec![5.0, -3.0, 1.0, -1.0]).unwrap();
        let d = Tensor::new(vec![2, 1], vec![1.0, 0.5]).unwrap();
        let (gw, gd) = run_mean_loss(&w, &d);
        assert!(gw.data().iter().all(|&g| g == 0.0));
        // Saturated scale gradient: Wq/Δ = ±0.75 per entry, averaged.
        assert_eq!(gd.data(), &[0.0, 0.0]);
    }

    #[test]
    fn tape_op_matches_plain_backward_bit_for_bit() {
        let w = Tensor::new(vec![2, 3], vec![0.6, -2.0, 0.1, 0.0, 0.33, -0.71]).unwrap();
        let d = Tensor::new(vec![2, 1], vec![1.0, 0.8]).unwrap();
        let (gw, gd) = run_mean_loss(&w, &d);
        let up = Tensor::full(&[2, 3], 1.0 / 6.0);
        let (pw, pd) = super::super::seq_int2_backward(
            &w,
            &ChannelScale::from_column(&d).unwrap(),
            SeqConfig::default(),
            &up,
        )
        .unwrap();
        assert_eq!(gw, pw);
        assert_eq!(gd, pd);
    }

    #[test]
    fn saturated_scale_factor_matches_quantized_over_scale() {
        assert_eq!(seq_grad_entry(3.0, 2.0, 3.0, 0.01), (0.0, 1.5));
        assert_eq!(seq_grad_entry(-5.0, 1.0, -0.75, 0.01), (0.0, -0.75));
        let (dw, dd) = seq_grad_entry(0.6, 1.0, 0.75, 0.01);
        assert_eq!(dw, 1.0);
        assert!((dd - 0.15).abs() < 1e-6);
    }
}
