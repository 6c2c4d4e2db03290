//! Block-wise INT4 post-training quantization.
//!
//! Blocks are calibrated first to last. Block `k` sees inputs produced by the
//! already-quantized blocks `0..k` and is fit to the output its fp
//! counterpart produces on those same inputs.

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::corpus::PackedDataset;
use crate::error::{Result, UpqError};
use crate::model::{Binder, LinearScheme, Proj, QuantTarget, QuantizedLinear, ToyLm};
use crate::optim::{Adam, AdamConfig};
use crate::tensor::Tensor;

const CHUNK: usize = 16;
const QUANT_PARAMS: [&str; 5] = ["log_delta", "log_elem", "log_row", "gamma_logit", "beta_logit"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PtqMethod {
    Flexround,
    Omniquant,
}

impl PtqMethod {
    pub fn name(self) -> &'static str {
        match self {
            PtqMethod::Flexround => "flexround",
            PtqMethod::Omniquant => "omniquant",
        }
    }

    pub fn target(self) -> QuantTarget {
        match self {
            PtqMethod::Flexround => QuantTarget::Int4Flexround,
            PtqMethod::Omniquant => QuantTarget::Int4Omniquant,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PtqConfig {
    pub method: PtqMethod,
    pub calib_tokens: usize,
    pub steps_per_block: usize,
    pub lr: f32,
    /// Calibration sequences per optimizer step.
    pub batch_size: usize,
    /// Full-calibration-set loss is measured every this many steps; the best
    /// parameters seen at those checkpoints are kept.
    pub eval_every: usize,
    pub seed: u64,
}

impl Default for PtqConfig {
    fn default() -> Self {
        PtqConfig {
            method: PtqMethod::Flexround,
            calib_tokens: 1 << 17,
            steps_per_block: 200,
            lr: 1e-3,
            batch_size: 8,
            eval_every: 25,
            seed: 0,
        }
    }
}

impl PtqConfig {
    pub fn validate(&self, context: usize) -> Result<()> {
        if self.steps_per_block == 0 || self.batch_size == 0 || self.eval_every == 0 {
            return Err(UpqError::Config("PTQ steps, batch size and eval interval must be positive".into()));
        }
        if self.calib_tokens < self.batch_size * context {
            return Err(UpqError::Config(format!(
                "calibration budget of {} tokens is below one batch ({} x {context})",
                self.calib_tokens, self.batch_size
            )));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(UpqError::Config(format!("PTQ learning rate {}", self.lr)));
        }
        Ok(())
    }
}

/// One report row per block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlockReport {
    pub block: usize,
    pub method: String,
    pub loss_init: f64,
    pub loss_final: f64,
    pub steps: usize,
}

/// Calibration activations as `[sequences, steps, dim]`.
pub fn calibration_sequences(calib: &PackedDataset, cfg: &PtqConfig) -> Result<Vec<Vec<u32>>> {
    cfg.validate(calib.context)?;
    let want = cfg.calib_tokens.div_ceil(calib.context);
    let seqs: Vec<Vec<u32>> = calib.sequences.iter().take(want).cloned().collect();
    if seqs.is_empty() {
        return Err(UpqError::Config("calibration split is empty".into()));
    }
    if seqs.len() < cfg.batch_size {
        return Err(UpqError::Config(format!(
            "{} calibration sequences for batch size {}",
            seqs.len(),
            cfg.batch_size
        )));
    }
    Ok(seqs)
}

fn rows(x: &Tensor, idx: &[usize]) -> Result<Tensor> {
    let (t, d) = (x.shape()[1], x.shape()[2]);
    let per = t * d;
    let mut data = Vec::with_capacity(idx.len() * per);
    for &i in idx {
        data.extend_from_slice(&x.data()[i * per..(i + 1) * per]);
    }
    Tensor::new(vec![idx.len(), t, d], data)
}

fn concat(parts: Vec<Tensor>) -> Result<Tensor> {
    let (t, d) = (parts[0].shape()[1], parts[0].shape()[2]);
    let n = parts.iter().map(|p| p.shape()[0]).sum();
    let mut data = Vec::with_capacity(n * t * d);
    for p in parts {
        data.extend(p.into_data());
    }
    Tensor::new(vec![n, t, d], data)
}

/// Embedding output for each sequence's inputs `s[..T-1]`.
pub fn embed_sequences(model: &ToyLm, seqs: &[Vec<u32>]) -> Result<Tensor> {
    let steps = seqs[0].len() - 1;
    let mut parts = Vec::new();
    for chunk in seqs.chunks(CHUNK) {
        let ids: Vec<u32> = chunk.iter().flat_map(|s| s[..steps].iter().copied()).collect();
        let mut tape = Tape::new();
        let x = model.embed_on_tape(&mut tape, &ids, chunk.len(), steps, &mut Binder::frozen())?;
        parts.push(tape.value(x).clone());
    }
    concat(parts)
}

/// Applies block `block` of `model` to `[N, T, D]` inputs without gradients.
pub fn block_outputs(model: &ToyLm, block: usize, x: &Tensor) -> Result<Tensor> {
    let n = x.shape()[0];
    let mut parts = Vec::new();
    for start in (0..n).step_by(CHUNK) {
        let idx: Vec<usize> = (start..(start + CHUNK).min(n)).collect();
        let mut tape = Tape::new();
        let xv = tape.constant(rows(x, &idx)?)?;
        let y = model.block_on_tape(&mut tape, block, xv, &mut Binder::frozen())?;
        parts.push(tape.value(y).clone());
    }
    concat(parts)
}

/// Inputs every block receives under the model's current schemes:
/// entry `k` is the input of block `k`.
pub fn capture_activations(model: &ToyLm, seqs: &[Vec<u32>]) -> Result<Vec<Tensor>> {
    if seqs.is_empty() {
        return Err(UpqError::Config("no calibration sequences".into()));
    }
    let mut xs = vec![embed_sequences(model, seqs)?];
    for k in 0..model.blocks.len().saturating_sub(1) {
        let next = block_outputs(model, k, &xs[k])?;
        xs.push(next);
    }
    Ok(xs)
}

fn squared_distance(a: &Tensor, b: &Tensor) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| ((x - y) as f64).powi(2)).sum()
}

/// `‖fp_block(X) − quant_block(X)‖²_F` through the whole block.
pub fn reconstruction_loss(fp: &ToyLm, quant: &ToyLm, block: usize, x: &Tensor) -> Result<f64> {
    let target = block_outputs(fp, block, x)?;
    Ok(squared_distance(&target, &block_outputs(quant, block, x)?))
}

/// `‖X Wᵀ − X Wqᵀ‖²_F` for a single layer; `x` is `[N, in]`.
pub fn linear_reconstruction_loss(w: &Tensor, wq: &Tensor, x: &Tensor) -> Result<f64> {
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone())?;
    let (a, b) = (tape.constant(w.clone())?, tape.constant(wq.clone())?);
    let ya = tape.matmul_nt(xv, a)?;
    let yb = tape.matmul_nt(xv, b)?;
    Ok(squared_distance(tape.value(ya), tape.value(yb)))
}

fn is_quant_param(name: &str) -> bool {
    name.rsplit('.').next().is_some_and(|leaf| QUANT_PARAMS.contains(&leaf))
}

fn divergence(step: usize, e: UpqError) -> UpqError {
    match e {
        UpqError::Numeric(trace) => UpqError::Divergence { step, trace },
        other => other,
    }
}

/// Optimizes block `block`'s quantizer parameters in `model` to match `fp`
/// on `x`. Every projection of that block must already carry an INT4 scheme.
pub fn calibrate_block(fp: &ToyLm, model: &mut ToyLm, block: usize, x: &Tensor, cfg: &PtqConfig) -> Result<BlockReport> {
    if x.shape().len() != 3 || x.shape()[2] != model.config.dim {
        return Err(UpqError::contract(format!(
            "captured inputs {:?} do not match width {}",
            x.shape(),
            model.config.dim
        )));
    }
    if let Some(p) = Proj::ALL.into_iter().find(|&p| !model.blocks[block].linear(p).scheme.is_int4()) {
        return Err(UpqError::contract(format!("block {block} {} is not INT4", p.name())));
    }
    let target = block_outputs(fp, block, x)?;
    let n = x.shape()[0];
    let prefix = format!("blocks.{block}.");
    let filter = move |name: &str| name.starts_with(&prefix) && is_quant_param(name);
    let mut adam = Adam::new(AdamConfig::default());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(block as u64);
    let batch = cfg.batch_size.min(n);

    let loss_init = squared_distance(&target, &block_outputs(model, block, x)?);
    let (mut best_loss, mut best) = (loss_init, model.blocks[block].clone());
    for step in 1..=cfg.steps_per_block {
        let idx = rand::seq::index::sample(&mut rng, n, batch).into_vec();
        let mut tape = Tape::new();
        let mut binder = Binder::new(&filter);
        let grads = (|| -> Result<HashMap<String, Tensor>> {
            let xv = tape.constant(rows(x, &idx)?)?;
            let yv = tape.constant(rows(&target, &idx)?)?;
            let out = model.block_on_tape(&mut tape, block, xv, &mut binder)?;
            let diff = tape.sub(out, yv)?;
            let sq = tape.square(diff)?;
            let loss = tape.sum(sq)?;
            if !tape.value(loss).all_finite() {
                return Err(UpqError::Numeric(format!(
                    "block {block} minibatch loss {}",
                    tape.value(loss).item()
                )));
            }
            tape.backward(loss)?;
            Ok(binder
                .bound()
                .iter()
                .filter_map(|(name, v)| tape.grad(*v).map(|g| (name.clone(), g.clone())))
                .collect())
        })()
        .map_err(|e| divergence(step, e))?;
        adam.begin_step();
        for (name, t) in model.tensors_mut() {
            if let Some(g) = grads.get(&name) {
                adam.update(&name, t, g, cfg.lr)?;
            }
        }
        if step % cfg.eval_every == 0 || step == cfg.steps_per_block {
            let loss = squared_distance(&target, &block_outputs(model, block, x).map_err(|e| divergence(step, e))?);
            if !loss.is_finite() {
                return Err(UpqError::Divergence {
                    step,
                    trace: format!("block {block} calibration loss {loss}"),
                });
            }
            if loss < best_loss {
                best_loss = loss;
                best = model.blocks[block].clone();
            }
        }
    }
    model.blocks[block] = best;
    Ok(BlockReport {
        block,
        method: cfg.method.name().into(),
        loss_init,
        loss_final: best_loss,
        steps: cfg.steps_per_block,
    })
}

/// Quantizes every block of `fp` to INT4 with `cfg.method`, first to last.
pub fn run_ptq(fp: &ToyLm, calib: &PackedDataset, cfg: &PtqConfig) -> Result<(ToyLm, Vec<BlockReport>)> {
    if fp.blocks.is_empty() {
        return Err(UpqError::contract("model has no blocks"));
    }
    if let Some((name, _, l)) = fp.linears().into_iter().find(|(_, _, l)| l.scheme != LinearScheme::Fp) {
        return Err(UpqError::contract(format!("{name} is {}, PTQ needs fp weights", l.scheme.tag())));
    }
    let seqs = calibration_sequences(calib, cfg)?;
    let mut model = fp.clone();
    let mut x = embed_sequences(fp, &seqs)?;
    let mut reports = Vec::with_capacity(fp.blocks.len());
    for k in 0..fp.blocks.len() {
        let wrap = |source| UpqError::Block { block: k, source: Box::new(source) };
        for p in Proj::ALL {
            let lin = model.blocks[k].linear_mut(p);
            *lin = lin.quantize(cfg.method.target(), fp.seq).map_err(wrap)?;
        }
        reports.push(calibrate_block(fp, &mut model, k, &x, cfg).map_err(wrap)?);
        if k + 1 < fp.blocks.len() {
            x = block_outputs(&model, k, &x).map_err(wrap)?;
        }
    }
    Ok((model, reports))
}

/// Provenance written next to the JSONL report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PtqReportHeader {
    pub method: String,
    pub propagation: String,
    pub calib_sequences: usize,
    pub calib_tokens: usize,
    pub config: PtqConfig,
}

impl PtqReportHeader {
    pub fn new(cfg: &PtqConfig, calib_sequences: usize, context: usize) -> Self {
        PtqReportHeader {
            method: cfg.method.name().into(),
            propagation: "sequential: block k is calibrated on outputs of quantized blocks 0..k".into(),
            calib_sequences,
            calib_tokens: calib_sequences * context,
            config: *cfg,
        }
    }
}

/// Writes `<stem>.jsonl` (one row per block) and `<stem>.header.json`.
pub fn write_report(dir: &Path, stem: &str, header: &PtqReportHeader, reports: &[BlockReport]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(dir.join(format!("{stem}.jsonl")))?);
    for r in reports {
        serde_json::to_writer(&mut f, r)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    std::fs::write(
        dir.join(format!("{stem}.header.json")),
        serde_json::to_string_pretty(header)? + "\n",
    )?;
    Ok(())
}

/// Fits one layer's INT4 parameters to `x Wᵀ` by full-batch Adam, keeping
/// the best parameters seen. Returns the layer and its initial and final loss.
pub fn calibrate_linear(lin: &QuantizedLinear, x: &Tensor, steps: usize, lr: f32) -> Result<(QuantizedLinear, f64, f64)> {
    if !lin.scheme.is_int4() {
        return Err(UpqError::contract("calibrate_linear needs an INT4 layer"));
    }
    let seq = Default::default();
    let loss_of = |l: &QuantizedLinear| -> Result<f64> {
        linear_reconstruction_loss(&l.weight, &l.effective_weight(seq)?, x)
    };
    let mut cur = lin.clone();
    let loss_init = loss_of(&cur)?;
    let (mut best_loss, mut best) = (loss_init, cur.clone());
    let mut adam = Adam::new(AdamConfig::default());
    let target = {
        let mut tape = Tape::new();
        let (xv, w) = (tape.constant(x.clone())?, tape.constant(lin.weight.clone())?);
        let y = tape.matmul_nt(xv, w)?;
        tape.value(y).clone()
    };
    let filter = |name: &str| is_quant_param(name);
    for step in 1..=steps {
        let mut tape = Tape::new();
        let mut binder = Binder::new(&filter);
        let xv = tape.constant(x.clone())?;
        let yv = tape.constant(target.clone())?;
        let out = cur.apply_on_tape(&mut tape, xv, "layer", &mut binder, seq)?;
        let diff = tape.sub(out, yv)?;
        let sq = tape.square(diff)?;
        let loss = tape.sum(sq)?;
        tape.backward(loss).map_err(|e| divergence(step, e))?;
        adam.begin_step();
        let grads: HashMap<String, Tensor> = binder
            .bound()
            .iter()
            .filter_map(|(n, v)| tape.grad(*v).map(|g| (n.clone(), g.clone())))
            .collect();
        for (name, t) in cur.named_tensors_mut("layer") {
            if let Some(g) = grads.get(&name) {
                adam.update(&name, t, g, lr)?;
            }
        }
        let l = loss_of(&cur)?;
        if l < best_loss {
            best_loss = l;
            best = cur.clone();
        }
    }
    Ok((best, loss_init, best_loss))
}
