//! Teacher pretraining and INT2 quantization-aware training.

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::corpus::{BatchStream, PackedSplits};
use crate::error::{Result, UpqError};
use crate::losses::{jsd_on_tape, ntp_on_tape, JsdConfig};
use crate::model::{eval_jsd, save_checkpoint, sequence_nll, Binder, LayerGroup, ToyLm};
use crate::optim::{Adam, AdamConfig, CosineSchedule};
use crate::quant::{bin_utilization, BinUtilization};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f32,
    pub warmup_steps: usize,
    /// Final learning rate as a fraction of `lr`.
    pub min_lr_frac: f32,
    /// Sequences per step.
    pub batch_size: usize,
    pub total_tokens: usize,
    /// A metrics row is written every this many steps, plus the first and last.
    pub log_every: usize,
    /// Held-out perplexity is measured every this many steps.
    pub eval_every: usize,
    /// Eval sequences used for the periodic measurements; 0 means all.
    pub eval_sequences: usize,
    pub adam: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 2e-4,
            warmup_steps: 50,
            min_lr_frac: 0.1,
            batch_size: 16,
            total_tokens: 2_000_000,
            log_every: 20,
            eval_every: 200,
            eval_sequences: 64,
            adam: AdamConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn steps(&self, context: usize) -> usize {
        self.total_tokens / (self.batch_size * context).max(1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.log_every == 0 || self.eval_every == 0 {
            return Err(UpqError::Config("batch size and logging intervals must be positive".into()));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) || !(0.0..=1.0).contains(&self.min_lr_frac) {
            return Err(UpqError::Config(format!("bad learning-rate settings {self:?}")));
        }
        if self.adam.weight_decay != 0.0 {
            return Err(UpqError::Config("weight decay is fixed at zero".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum Objective {
    Ntp,
    Jsd(JsdConfig),
    /// `JSD + λ·NTP`.
    JsdPlusNtp { jsd: JsdConfig, lambda: f32 },
}

impl Objective {
    fn needs_teacher(&self) -> bool {
        !matches!(self, Objective::Ntp)
    }
}

/// The four INT2 training regimes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Regime {
    NtpQat,
    DistillQat,
    PtqNtp,
    Upq,
}

impl Regime {
    pub const ALL: [Regime; 4] = [Regime::NtpQat, Regime::DistillQat, Regime::PtqNtp, Regime::Upq];

    pub fn name(self) -> &'static str {
        match self {
            Regime::NtpQat => "ntp-qat",
            Regime::DistillQat => "distill-qat",
            Regime::PtqNtp => "ptq-ntp",
            Regime::Upq => "upq",
        }
    }

    /// Whether the student starts from the INT4 PTQ model.
    pub fn from_int4(self) -> bool {
        matches!(self, Regime::PtqNtp | Regime::Upq)
    }

    pub fn objective(self, jsd: JsdConfig) -> Objective {
        match self {
            Regime::NtpQat | Regime::PtqNtp => Objective::Ntp,
            Regime::DistillQat | Regime::Upq => Objective::Jsd(jsd),
        }
    }
}

impl std::str::FromStr for Regime {
    type Err = UpqError;

    fn from_str(s: &str) -> Result<Self> {
        Regime::ALL
            .into_iter()
            .find(|r| r.name() == s)
            .ok_or_else(|| UpqError::Config(format!("unknown regime {s:?}")))
    }
}

/// One metrics row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsRecord {
    pub step: usize,
    pub tokens: usize,
    pub train_loss: f64,
    pub eval_ppl: Option<f64>,
    pub lr: f64,
    /// Per layer group: fractions of INT2 weights at levels −3, −1, 1, 3 (in units of Δ/4).
    pub bins: BTreeMap<LayerGroup, [f64; 4]>,
    /// Per layer group: mean |Δ_t − Δ_0| / mean |W_original|.
    pub l1_scale: BTreeMap<LayerGroup, f64>,
    /// Per layer group: mean |W_t − W_0| / mean |W_original|.
    pub l1_weight: BTreeMap<LayerGroup, f64>,
}

impl MetricsRecord {
    fn check(&self) -> Result<()> {
        let mut values = vec![self.train_loss, self.lr];
        values.extend(self.eval_ppl);
        values.extend(self.bins.values().flatten().copied());
        values.extend(self.l1_scale.values().copied());
        values.extend(self.l1_weight.values().copied());
        if values.iter().any(|v| !v.is_finite()) {
            return Err(UpqError::Config(format!("non-finite value in metrics row {}", self.step)));
        }
        for (g, b) in &self.bins {
            if b.iter().any(|f| !(0.0..=1.0).contains(f)) || (b.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
                return Err(UpqError::Config(format!("bin fractions for {} do not sum to 1", g.name())));
            }
        }
        Ok(())
    }
}

/// Parses a metrics file, checking every row against the record schema and
/// that steps strictly and tokens weakly increase.
pub fn validate_metrics_file(path: &Path) -> Result<Vec<MetricsRecord>> {
    let mut out: Vec<MetricsRecord> = Vec::new();
    for (i, line) in BufReader::new(File::open(path)?).lines().enumerate() {
        let rec: MetricsRecord = serde_json::from_str(&line?)
            .map_err(|e| UpqError::Config(format!("{}:{}: {e}", path.display(), i + 1)))?;
        rec.check()?;
        if let Some(prev) = out.last() {
            if rec.step <= prev.step || rec.tokens < prev.tokens {
                return Err(UpqError::Config(format!(
                    "{}:{}: step/tokens not increasing",
                    path.display(),
                    i + 1
                )));
            }
        }
        out.push(rec);
    }
    if out.is_empty() {
        return Err(UpqError::Config(format!("{} has no metrics", path.display())));
    }
    Ok(out)
}

/// Bin utilization of every INT2 layer, pooled per layer group.
pub fn group_bins(model: &ToyLm) -> Result<BTreeMap<LayerGroup, BinUtilization>> {
    let mut out: BTreeMap<LayerGroup, BinUtilization> = BTreeMap::new();
    for (_, proj, lin) in model.linears() {
        if let Some(scale) = lin.seq_scale() {
            let b = bin_utilization(&lin.effective_weight(model.seq)?, &scale)?;
            out.entry(proj.group()).or_default().merge(&b);
        }
    }
    Ok(out)
}

/// Normalized L1 distances per layer group, relative to the mean magnitude
/// of `original`'s weights: INT2 scales from their values in `start`, latent
/// weights from `original` itself. An INT4-initialized run therefore starts
/// with a nonzero weight distance.
pub fn group_l1(
    current: &ToyLm,
    start: &ToyLm,
    original: &ToyLm,
) -> Result<(BTreeMap<LayerGroup, f64>, BTreeMap<LayerGroup, f64>)> {
    #[derive(Default)]
    struct Acc {
        scale: (f64, usize),
        weight: (f64, usize),
        orig: (f64, usize),
    }
    let mut acc: BTreeMap<LayerGroup, Acc> = BTreeMap::new();
    let (cur, st, orig) = (current.linears(), start.linears(), original.linears());
    if cur.len() != st.len() || cur.len() != orig.len() {
        return Err(UpqError::contract("models have different layer counts"));
    }
    for (((_, proj, c), (_, _, s)), (_, _, o)) in cur.iter().zip(&st).zip(&orig) {
        let a = acc.entry(proj.group()).or_default();
        let sum_abs_diff = |x: &[f32], y: &[f32]| -> f64 {
            x.iter().zip(y).map(|(p, q)| (p - q).abs() as f64).sum()
        };
        if let (Some(cs), Some(ss)) = (c.seq_scale(), s.seq_scale()) {
            a.scale.0 += sum_abs_diff(cs.values(), ss.values());
            a.scale.1 += cs.len();
        }
        a.weight.0 += sum_abs_diff(c.weight.data(), o.weight.data());
        a.weight.1 += c.weight.numel();
        a.orig.0 += o.weight.data().iter().map(|v| v.abs() as f64).sum::<f64>();
        a.orig.1 += o.weight.numel();
    }
    let (mut scale, mut weight) = (BTreeMap::new(), BTreeMap::new());
    for (g, a) in acc {
        let norm = a.orig.0 / a.orig.1 as f64;
        if a.scale.1 > 0 {
            scale.insert(g, a.scale.0 / a.scale.1 as f64 / norm);
        }
        weight.insert(g, a.weight.0 / a.weight.1 as f64 / norm);
    }
    Ok((scale, weight))
}

/// Everything a training run needs besides the student.
pub struct TrainSpec<'a> {
    pub objective: Objective,
    pub teacher: Option<&'a ToyLm>,
    /// fp weights that normalize the L1 dynamics; `None` skips them.
    pub original: Option<&'a ToyLm>,
    pub data: &'a PackedSplits,
    pub cfg: TrainConfig,
    pub seed: u64,
    /// Receives `metrics.jsonl`, `loss.csv`, `best.upqc` and, on failure, `last_good.upqc`.
    pub out_dir: Option<&'a Path>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: ToyLm,
    pub best: ToyLm,
    pub best_eval_ppl: f64,
    pub final_eval_ppl: f64,
    pub records: Vec<MetricsRecord>,
    /// Training loss of every step, before that step's update.
    pub losses: Vec<f64>,
    pub steps: usize,
}

fn eval_ppl(model: &ToyLm, data: &PackedSplits, limit: usize) -> Result<f64> {
    let seqs = &data.eval.sequences;
    let n = if limit == 0 { seqs.len() } else { limit.min(seqs.len()) };
    let (total, count) = sequence_nll(model, &seqs[..n])?;
    Ok((total / count as f64).exp())
}

/// Held-out perplexity on the full eval split.
pub fn eval_perplexity(model: &ToyLm, data: &PackedSplits) -> Result<f64> {
    eval_ppl(model, data, 0)
}

/// Held-out teacher-student JSD on the full eval split.
pub fn eval_teacher_jsd(teacher: &ToyLm, student: &ToyLm, data: &PackedSplits, cfg: JsdConfig) -> Result<f64> {
    eval_jsd(teacher, student, &data.eval.sequences, cfg)
}

struct Sinks {
    metrics: BufWriter<File>,
    losses: BufWriter<File>,
}

/// Trains every tensor of `model` under `spec.objective`.
pub fn train(model: ToyLm, spec: &TrainSpec<'_>) -> Result<TrainOutcome> {
    let cfg = spec.cfg;
    cfg.validate()?;
    if spec.objective.needs_teacher() && spec.teacher.is_none() {
        return Err(UpqError::Config("distillation objective without a teacher".into()));
    }
    let context = spec.data.train.context;
    let steps = cfg.steps(context);
    let schedule = CosineSchedule {
        peak: cfg.lr,
        warmup: cfg.warmup_steps,
        total: steps,
        floor_frac: cfg.min_lr_frac,
    };
    let mut sinks = match spec.out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            let mut losses = BufWriter::new(File::create(dir.join("loss.csv"))?);
            writeln!(losses, "step,tokens,loss")?;
            Some(Sinks {
                metrics: BufWriter::new(File::create(dir.join("metrics.jsonl"))?),
                losses,
            })
        }
        None => None,
    };

    let start = model.clone();
    let mut model = model;
    let mut stream = BatchStream::new(&spec.data.train, cfg.batch_size, spec.seed)?;
    let mut adam = Adam::new(cfg.adam);
    let all = |_: &str| true;
    let initial_ppl = eval_ppl(&model, spec.data, cfg.eval_sequences)?;
    let (mut best, mut best_ppl) = (model.clone(), initial_ppl);
    let mut records = Vec::new();
    let mut losses = Vec::with_capacity(steps);
    let mut tokens = 0usize;

    for step in 0..steps {
        let batch = stream.next_batch();
        let (b, t) = (batch.size(), batch.steps());
        let ids = batch.inputs();
        let targets = batch.targets();
        let lr = schedule.lr(step);
        let result = (|| -> Result<(f64, HashMap<String, crate::tensor::Tensor>)> {
            let mut tape = Tape::new();
            let mut binder = Binder::new(&all);
            let logits = model.forward_on_tape(&mut tape, &ids, b, t, &mut binder)?;
            let loss = match spec.objective {
                Objective::Ntp => ntp_on_tape(&mut tape, logits, &targets, None)?,
                Objective::Jsd(jc) | Objective::JsdPlusNtp { jsd: jc, .. } => {
                    let teacher = spec.teacher.expect("checked above");
                    let tl = tape.constant(teacher.forward(&ids, b, t)?)?;
                    let j = jsd_on_tape(&mut tape, tl, logits, None, jc)?;
                    if let Objective::JsdPlusNtp { lambda, .. } = spec.objective {
                        let n = ntp_on_tape(&mut tape, logits, &targets, None)?;
                        let n = tape.scale(n, lambda)?;
                        tape.add(j, n)?
                    } else {
                        j
                    }
                }
            };
            let value = tape.value(loss).item() as f64;
            if !value.is_finite() {
                return Err(UpqError::Numeric(format!("training loss {value}")));
            }
            tape.backward(loss)?;
            let grads = binder
                .bound()
                .iter()
                .filter_map(|(n, v)| tape.grad(*v).map(|g| (n.clone(), g.clone())))
                .collect();
            Ok((value, grads))
        })();
        let (loss, grads) = match result {
            Ok(x) => x,
            Err(e) => {
                if let Some(dir) = spec.out_dir {
                    save_checkpoint(&best, &dir.join("last_good.upqc"))?;
                }
                let trace = match e {
                    UpqError::Numeric(t) => t,
                    other => return Err(other),
                };
                return Err(UpqError::Divergence { step, trace });
            }
        };
        losses.push(loss);
        tokens += batch.token_count();
        if let Some(s) = sinks.as_mut() {
            writeln!(s.losses, "{step},{tokens},{loss}")?;
        }

        let last = step + 1 == steps;
        let eval_now = step % cfg.eval_every == 0 || last;
        let log_now = step % cfg.log_every == 0 || last || eval_now;
        if log_now {
            // Measured on the parameters that produced `loss`, before the update.
            let eval = if eval_now {
                let p = eval_ppl(&model, spec.data, cfg.eval_sequences)?;
                if p < best_ppl {
                    best_ppl = p;
                    best = model.clone();
                }
                Some(p)
            } else {
                None
            };
            let bins = group_bins(&model)?
                .into_iter()
                .map(|(g, b)| (g, b.fractions()))
                .collect();
            let (l1_scale, l1_weight) = match spec.original {
                Some(o) => group_l1(&model, &start, o)?,
                None => Default::default(),
            };
            let rec = MetricsRecord {
                step,
                tokens,
                train_loss: loss,
                eval_ppl: eval,
                lr: lr as f64,
                bins,
                l1_scale,
                l1_weight,
            };
            rec.check()?;
            if let Some(s) = sinks.as_mut() {
                serde_json::to_writer(&mut s.metrics, &rec)?;
                s.metrics.write_all(b"\n")?;
            }
            records.push(rec);
        }

        adam.begin_step();
        for (name, t) in model.tensors_mut() {
            if let Some(g) = grads.get(&name) {
                adam.update(&name, t, g, lr)?;
            }
        }
        model.project_constraints();
    }

    let final_eval_ppl = eval_ppl(&model, spec.data, cfg.eval_sequences)?;
    if final_eval_ppl < best_ppl || steps == 0 {
        best_ppl = final_eval_ppl;
        best = model.clone();
    }
    if let Some(mut s) = sinks {
        s.metrics.flush()?;
        s.losses.flush()?;
        save_checkpoint(&best, &spec.out_dir.expect("sinks imply a directory").join("best.upqc"))?;
    }
    Ok(TrainOutcome {
        model,
        best,
        best_eval_ppl: best_ppl,
        final_eval_ppl,
        records,
        losses,
        steps,
    })
}
