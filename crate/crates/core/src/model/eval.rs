//! Held-out evaluation: perplexity and teacher-student divergence.

use super::ToyLm;
use crate::error::{Result, UpqError};
use crate::losses::{generalized_jsd, JsdConfig, LogitsBatch};

const EVAL_BATCH: usize = 8;

fn check_sequences(seqs: &[Vec<u32>]) -> Result<usize> {
    let Some(first) = seqs.first() else {
        return Err(UpqError::Config("no sequences to evaluate".into()));
    };
    let len = first.len();
    if len < 2 || seqs.iter().any(|s| s.len() != len) {
        return Err(UpqError::contract(
            "evaluation sequences must share one length of at least 2",
        ));
    }
    Ok(len)
}

/// Summed next-token NLL and the number of predicted tokens. Each sequence
/// feeds `s[..T-1]` and is scored against `s[1..]`.
pub fn sequence_nll(model: &ToyLm, seqs: &[Vec<u32>]) -> Result<(f64, usize)> {
    let len = check_sequences(seqs)?;
    let t = len - 1;
    let (mut total, mut count) = (0.0f64, 0usize);
    for chunk in seqs.chunks(EVAL_BATCH) {
        let ids: Vec<u32> = chunk.iter().flat_map(|s| s[..t].iter().copied()).collect();
        let targets: Vec<u32> = chunk.iter().flat_map(|s| s[1..].iter().copied()).collect();
        let logits = model.forward(&ids, chunk.len(), t)?;
        let mean = crate::losses::ntp_loss(&logits, &targets, None)?;
        total += mean * targets.len() as f64;
        count += targets.len();
    }
    Ok((total, count))
}

/// `exp(mean NLL)` over non-overlapping `context`-token windows of `stream`.
pub fn perplexity(model: &ToyLm, stream: &[u32], context: usize) -> Result<f64> {
    if context < 2 || context > model.config.context + 1 {
        return Err(UpqError::Config(format!(
            "evaluation context {context} outside 2..={}",
            model.config.context + 1
        )));
    }
    if stream.len() < context {
        return Err(UpqError::Config(format!(
            "stream of {} tokens is shorter than the context {context}",
            stream.len()
        )));
    }
    let windows: Vec<Vec<u32>> = stream.chunks_exact(context).map(<[u32]>::to_vec).collect();
    let (total, count) = sequence_nll(model, &windows)?;
    Ok((total / count as f64).exp())
}

/// Token-mean generalized JSD between teacher and student on `seqs`.
pub fn eval_jsd(teacher: &ToyLm, student: &ToyLm, seqs: &[Vec<u32>], cfg: JsdConfig) -> Result<f64> {
    let len = check_sequences(seqs)?;
    let t = len - 1;
    let (mut total, mut count) = (0.0f64, 0usize);
    for chunk in seqs.chunks(EVAL_BATCH) {
        let ids: Vec<u32> = chunk.iter().flat_map(|s| s[..t].iter().copied()).collect();
        let tl = teacher.forward(&ids, chunk.len(), t)?;
        let sl = student.forward(&ids, chunk.len(), t)?;
        let mean = generalized_jsd(
            LogitsBatch {
                teacher: &tl,
                student: &sl,
                mask: None,
            },
            cfg,
        )?;
        total += mean * ids.len() as f64;
        count += ids.len();
    }
    Ok(total / count as f64)
}
