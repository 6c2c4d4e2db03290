//! Distillation and next-token objectives.
//!
//! Per-position work happens in `f64` from `f32` logits; results and
//! gradients are returned as `f32`.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::autodiff::{register_custom, CustomGradOp, Tape, Var};
use crate::error::{Result, UpqError};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JsdConfig {
    /// Interpolation weight of the teacher in the mixture.
    pub beta: f32,
    /// Lower bound applied to mixture probabilities before taking logs.
    #[serde(default = "default_floor")]
    pub floor: f64,
}

fn default_floor() -> f64 {
    1e-12
}

impl Default for JsdConfig {
    fn default() -> Self {
        JsdConfig {
            beta: 0.5,
            floor: default_floor(),
        }
    }
}

impl JsdConfig {
    pub fn new(beta: f32) -> Result<Self> {
        let cfg = JsdConfig {
            beta,
            ..JsdConfig::default()
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.beta) {
            return Err(UpqError::contract(format!(
                "JSD beta must lie in [0, 1], got {}",
                self.beta
            )));
        }
        if !(self.floor > 0.0) {
            return Err(UpqError::contract("JSD floor must be positive"));
        }
        Ok(())
    }
}

/// Teacher and student logits over the same positions.
#[derive(Debug, Clone, Copy)]
pub struct LogitsBatch<'a> {
    pub teacher: &'a Tensor,
    pub student: &'a Tensor,
    /// One flag per position (`batch × seq`); `None` means every position counts.
    pub mask: Option<&'a [bool]>,
}

fn log_softmax64(row: &[f32]) -> Vec<f64> {
    let max = row.iter().fold(f64::NEG_INFINITY, |a, &v| a.max(v as f64));
    let lse = max + row.iter().map(|&v| (v as f64 - max).exp()).sum::<f64>().ln();
    row.iter().map(|&v| v as f64 - lse).collect()
}

fn positions(logits: &Tensor) -> Result<usize> {
    if logits.shape().len() < 2 {
        return Err(UpqError::contract(format!(
            "logits need a vocabulary axis, got {:?}",
            logits.shape()
        )));
    }
    Ok(logits.rows())
}

fn valid_count(mask: Option<&[bool]>, n: usize) -> Result<usize> {
    let count = match mask {
        None => n,
        Some(m) => {
            if m.len() != n {
                return Err(UpqError::contract(format!(
                    "mask covers {} positions, logits have {n}",
                    m.len()
                )));
            }
            m.iter().filter(|&&b| b).count()
        }
    };
    if count == 0 {
        return Err(UpqError::contract("no valid positions to average over"));
    }
    Ok(count)
}

/// `Σ P (log P − log Q)` from log-space inputs.
pub fn kl_divergence(log_p: &[f64], log_q: &[f64]) -> Result<f64> {
    if log_p.len() != log_q.len() {
        return Err(UpqError::contract("KL of distributions with different support"));
    }
    for (name, d) in [("P", log_p), ("Q", log_q)] {
        let total: f64 = d.iter().map(|v| v.exp()).sum();
        if (total - 1.0).abs() > 1e-6 {
            return Err(UpqError::contract(format!(
                "{name} is not normalized (sums to {total})"
            )));
        }
    }
    Ok(log_p
        .iter()
        .zip(log_q)
        .map(|(&lp, &lq)| {
            let p = lp.exp();
            if p == 0.0 {
                0.0
            } else {
                p * (lp - lq)
            }
        })
        .sum())
}

/// Generalized JSD of one position and its gradient w.r.t. the student logits.
fn jsd_position(teacher: &[f32], student: &[f32], beta: f64, floor: f64) -> (f64, Vec<f64>) {
    let (log_p, log_q) = (log_softmax64(teacher), log_softmax64(student));
    let mut value = 0.0;
    let mut g_prob = vec![0.0f64; student.len()];
    let q: Vec<f64> = log_q.iter().map(|v| v.exp()).collect();
    for j in 0..student.len() {
        let p = log_p[j].exp();
        let m = (beta * p + (1.0 - beta) * q[j]).max(floor);
        let log_m = m.ln();
        if p > 0.0 {
            value += beta * p * (log_p[j] - log_m);
        }
        if q[j] > 0.0 {
            value += (1.0 - beta) * q[j] * (log_q[j] - log_m);
        }
        // ∂/∂Q_j of the divergence collapses to (1 − β)·log(Q_j / M_j).
        g_prob[j] = (1.0 - beta) * (log_q[j] - log_m);
    }
    let dot: f64 = q.iter().zip(&g_prob).map(|(a, b)| a * b).sum();
    let grad = q.iter().zip(&g_prob).map(|(qk, gk)| qk * (gk - dot)).collect();
    (value, grad)
}

/// Mean over valid positions of
/// `β·KL(P‖M) + (1−β)·KL(Q‖M)`, `M = βP + (1−β)Q`, P = teacher, Q = student.
pub fn generalized_jsd(batch: LogitsBatch<'_>, cfg: JsdConfig) -> Result<f64> {
    Ok(jsd_with_grad(batch, cfg, false)?.0)
}

fn jsd_with_grad(
    batch: LogitsBatch<'_>,
    cfg: JsdConfig,
    want_grad: bool,
) -> Result<(f64, Option<Vec<f32>>)> {
    cfg.validate()?;
    if batch.teacher.shape() != batch.student.shape() {
        return Err(UpqError::contract(format!(
            "teacher logits {:?} and student logits {:?} differ",
            batch.teacher.shape(),
            batch.student.shape()
        )));
    }
    let n = positions(batch.student)?;
    let count = valid_count(batch.mask, n)?;
    let v = batch.student.cols();
    let mut total = 0.0f64;
    let mut grad = want_grad.then(|| vec![0.0f32; batch.student.numel()]);
    for r in 0..n {
        if batch.mask.is_some_and(|m| !m[r]) {
            continue;
        }
        let (val, g) = jsd_position(
            batch.teacher.row(r),
            batch.student.row(r),
            cfg.beta as f64,
            cfg.floor,
        );
        total += val;
        if let Some(out) = grad.as_mut() {
            for (o, gj) in out[r * v..(r + 1) * v].iter_mut().zip(g) {
                *o = (gj / count as f64) as f32;
            }
        }
    }
    Ok((total / count as f64, grad))
}

/// Cross-entropy `−Σ P log Q` of one position given log-space inputs.
pub fn cross_entropy(log_p: &[f64], log_q: &[f64]) -> f64 {
    log_p
        .iter()
        .zip(log_q)
        .map(|(&lp, &lq)| {
            let p = lp.exp();
            if p == 0.0 {
                0.0
            } else {
                -p * lq
            }
        })
        .sum()
}

fn check_targets(logits: &Tensor, targets: &[u32]) -> Result<usize> {
    let n = positions(logits)?;
    if targets.len() != n {
        return Err(UpqError::contract(format!(
            "{} targets for {n} positions",
            targets.len()
        )));
    }
    let v = logits.cols();
    if let Some(bad) = targets.iter().find(|&&t| t as usize >= v) {
        return Err(UpqError::contract(format!(
            "target id {bad} outside vocabulary of {v}"
        )));
    }
    Ok(n)
}

/// Mean negative log-likelihood of the targets over valid positions.
pub fn ntp_loss(logits: &Tensor, targets: &[u32], mask: Option<&[bool]>) -> Result<f64> {
    Ok(ntp_with_grad(logits, targets, mask, false)?.0)
}

fn ntp_with_grad(
    logits: &Tensor,
    targets: &[u32],
    mask: Option<&[bool]>,
    want_grad: bool,
) -> Result<(f64, Option<Vec<f32>>)> {
    let n = check_targets(logits, targets)?;
    let count = valid_count(mask, n)?;
    let v = logits.cols();
    let mut total = 0.0f64;
    let mut grad = want_grad.then(|| vec![0.0f32; logits.numel()]);
    for r in 0..n {
        if mask.is_some_and(|m| !m[r]) {
            continue;
        }
        let lp = log_softmax64(logits.row(r));
        let t = targets[r] as usize;
        total -= lp[t];
        if let Some(out) = grad.as_mut() {
            for (j, o) in out[r * v..(r + 1) * v].iter_mut().enumerate() {
                let onehot = if j == t { 1.0 } else { 0.0 };
                *o = ((lp[j].exp() - onehot) / count as f64) as f32;
            }
        }
    }
    Ok((total / count as f64, grad))
}

struct JsdOp {
    cfg: JsdConfig,
    mask: Option<Vec<bool>>,
}

impl CustomGradOp for JsdOp {
    fn name(&self) -> &str {
        "generalized_jsd"
    }

    fn input_count(&self) -> usize {
        2
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        let batch = LogitsBatch {
            teacher: inputs[0],
            student: inputs[1],
            mask: self.mask.as_deref(),
        };
        Ok(Tensor::scalar(generalized_jsd(batch, self.cfg)? as f32))
    }

    fn backward(&self, inputs: &[&Tensor], _: &Tensor, upstream: &Tensor) -> Result<Vec<Tensor>> {
        let batch = LogitsBatch {
            teacher: inputs[0],
            student: inputs[1],
            mask: self.mask.as_deref(),
        };
        let g = jsd_with_grad(batch, self.cfg, true)?.1.expect("gradient requested");
        let up = upstream.item();
        Ok(vec![
            // The teacher is frozen.
            Tensor::zeros(inputs[0].shape()),
            Tensor::new(inputs[1].shape().to_vec(), g.into_iter().map(|x| x * up).collect())?,
        ])
    }
}

struct NtpOp {
    targets: Vec<u32>,
    mask: Option<Vec<bool>>,
}

impl CustomGradOp for NtpOp {
    fn name(&self) -> &str {
        "ntp_loss"
    }

    fn input_count(&self) -> usize {
        1
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        Ok(Tensor::scalar(
            ntp_loss(inputs[0], &self.targets, self.mask.as_deref())? as f32,
        ))
    }

    fn backward(&self, inputs: &[&Tensor], _: &Tensor, upstream: &Tensor) -> Result<Vec<Tensor>> {
        let g = ntp_with_grad(inputs[0], &self.targets, self.mask.as_deref(), true)?
            .1
            .expect("gradient requested");
        let up = upstream.item();
        Ok(vec![Tensor::new(
            inputs[0].shape().to_vec(),
            g.into_iter().map(|x| x * up).collect(),
        )?])
    }
}

/// Records the generalized JSD between frozen teacher logits and student logits.
pub fn jsd_on_tape(
    tape: &mut Tape,
    teacher: Var,
    student: Var,
    mask: Option<&[bool]>,
    cfg: JsdConfig,
) -> Result<Var> {
    cfg.validate()?;
    let op = register_custom(Arc::new(JsdOp {
        cfg,
        mask: mask.map(<[bool]>::to_vec),
    }))?;
    tape.custom(&op, &[teacher, student])
}

/// Records the next-token loss of `logits` against `targets`.
pub fn ntp_on_tape(
    tape: &mut Tape,
    logits: Var,
    targets: &[u32],
    mask: Option<&[bool]>,
) -> Result<Var> {
    check_targets(tape.value(logits), targets)?;
    let op = register_custom(Arc::new(NtpOp {
        targets: targets.to_vec(),
        mask: mask.map(<[bool]>::to_vec),
    }))?;
    tape.custom(&op, &[logits])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn logits(shape: &[usize], data: &[f32]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn identical_logits_give_zero() {
        let t = logits(&[1, 2, 3], &[0.1, -2.0, 1.0, 3.0, 0.0, 0.5]);
        let b = LogitsBatch { teacher: &t, student: &t, mask: None };
        assert!(generalized_jsd(b, JsdConfig::default()).unwrap().abs() < 1e-12);
    }

    #[test]
    fn disjoint_support_is_ln2() {
        let p = logits(&[1, 2], &[200.0, -200.0]);
        let q = logits(&[1, 2], &[-200.0, 200.0]);
        let v = generalized_jsd(LogitsBatch { teacher: &p, student: &q, mask: None }, JsdConfig::default())
            .unwrap();
        assert!((v - std::f64::consts::LN_2).abs() < 1e-6, "{v}");
    }

    #[test]
    fn extreme_beta_collapses_to_zero() {
        let p = logits(&[1, 3], &[1.0, 2.0, -1.0]);
        let q = logits(&[1, 3], &[-3.0, 0.0, 4.0]);
        for beta in [0.0, 1.0] {
            let v = generalized_jsd(
                LogitsBatch { teacher: &p, student: &q, mask: None },
                JsdConfig::new(beta).unwrap(),
            )
            .unwrap();
            assert!(v.abs() < 1e-12, "beta {beta}: {v}");
        }
    }

    #[test]
    fn beta_out_of_range_rejected() {
        assert!(JsdConfig::new(1.5).is_err());
        assert!(JsdConfig::new(-0.1).is_err());
    }

    #[test]
    fn shape_mismatch_rejected() {
        let p = logits(&[1, 3], &[1.0, 2.0, -1.0]);
        let q = logits(&[1, 2], &[1.0, 2.0]);
        let b = LogitsBatch { teacher: &p, student: &q, mask: None };
        assert!(matches!(generalized_jsd(b, JsdConfig::default()), Err(UpqError::Contract(_))));
    }

    #[test]
    fn kl_examples() {
        let p = [0.0f64, f64::NEG_INFINITY];
        let q = [0.5f64.ln(), 0.5f64.ln()];
        assert!((kl_divergence(&p, &q).unwrap() - std::f64::consts::LN_2).abs() < 1e-12);
        assert_eq!(kl_divergence(&q, &q).unwrap(), 0.0);
        assert!(kl_divergence(&[0.0, 0.0], &q).is_err());
    }

    #[test]
    fn uniform_logits_ntp_is_log_vocab() {
        let l = Tensor::zeros(&[2, 3, 7]);
        let v = ntp_loss(&l, &[0, 1, 2, 3, 4, 6], None).unwrap();
        assert!((v - 7f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn ntp_vanishes_with_margin() {
        let mut prev = f64::INFINITY;
        for margin in [1.0f32, 5.0, 20.0, 60.0] {
            let l = logits(&[1, 3], &[0.0, margin, 0.0]);
            let v = ntp_loss(&l, &[1], None).unwrap();
            assert!(v < prev);
            prev = v;
        }
        assert!(prev < 1e-20);
    }

    #[test]
    fn ntp_rejects_out_of_vocab_target() {
        let l = Tensor::zeros(&[1, 4]);
        assert!(matches!(ntp_loss(&l, &[4], None), Err(UpqError::Contract(_))));
    }

    #[test]
    fn mask_excludes_positions() {
        let l = logits(&[2, 2], &[0.0, 0.0, 10.0, -10.0]);
        let v = ntp_loss(&l, &[0, 1], Some(&[true, false])).unwrap();
        assert!((v - 2f64.ln()).abs() < 1e-9);
        assert!(ntp_loss(&l, &[0, 1], Some(&[false, false])).is_err());
    }

    #[test]
    fn teacher_gets_zero_gradient_on_tape() {
        let mut tape = Tape::new();
        let t = tape.leaf(logits(&[2, 3], &[0.5, 1.0, -1.0, 2.0, 0.0, 0.1]), true).unwrap();
        let s = tape.leaf(logits(&[2, 3], &[-0.5, 0.3, 1.0, 0.0, 0.0, 1.1]), true).unwrap();
        let l = jsd_on_tape(&mut tape, t, s, None, JsdConfig::default()).unwrap();
        tape.backward(l).unwrap();
        assert!(tape.grad(t).unwrap().data().iter().all(|&g| g == 0.0));
        assert!(tape.grad(s).unwrap().data().iter().any(|&g| g != 0.0));
    }
}
