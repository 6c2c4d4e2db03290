//! Run configuration and the batch commands: teacher pretraining, PTQ, QAT
//! for one regime, and the four-regime comparison.

pub mod analysis;

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{pack, read_corpus, synthetic_text, tokenize, PackedSplits, SplitFractions};
use crate::error::{Result, UpqError};
use crate::losses::JsdConfig;
use crate::model::{load_checkpoint, quantize_model, save_checkpoint, ModelConfig, QuantTarget, ToyLm};
use crate::ptq::{calibration_sequences, run_ptq, write_report, PtqConfig, PtqReportHeader};
use crate::quant::BinUtilization;
use crate::train::{eval_perplexity, eval_teacher_jsd, group_bins, train, Objective, Regime, TrainConfig, TrainSpec};

pub const THREADS_ENV: &str = "UPQ_THREADS";
pub const TEACHER_FILE: &str = "teacher.upqc";
pub const INT4_FILE: &str = "int4.upqc";
pub const PTQ_REPORT_STEM: &str = "ptq_report";
pub const COMPARISON_FILE: &str = "comparison.csv";
pub const CONFIG_ECHO_FILE: &str = "run_config.json";
const SUMMARY_FILE: &str = "summary.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusConfig {
    /// Text files or directories; empty means generated text.
    pub paths: Vec<PathBuf>,
    pub synthetic_bytes: usize,
    pub synthetic_seed: u64,
    pub split_seed: u64,
    pub fractions: SplitFractions,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            paths: Vec::new(),
            synthetic_bytes: 3_000_000,
            synthetic_seed: 7,
            split_seed: 7,
            fractions: SplitFractions::default(),
        }
    }
}

fn default_teacher() -> TrainConfig {
    TrainConfig {
        lr: 3e-3,
        total_tokens: 10_000_000,
        ..TrainConfig::default()
    }
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

fn default_out() -> PathBuf {
    PathBuf::from("runs")
}

/// Everything a command needs. Loaded from TOML; `ptq` has no implicit
/// default there, so regimes that start from INT4 must configure it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub regime: Option<Regime>,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub corpus: CorpusConfig,
    #[serde(default = "default_teacher")]
    pub teacher: TrainConfig,
    #[serde(default)]
    pub ptq: Option<PtqConfig>,
    #[serde(default)]
    pub jsd: JsdConfig,
    #[serde(default)]
    pub qat: TrainConfig,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_out")]
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            regime: None,
            model: ModelConfig::default(),
            corpus: CorpusConfig::default(),
            teacher: default_teacher(),
            ptq: Some(PtqConfig::default()),
            jsd: JsdConfig::default(),
            qat: TrainConfig::default(),
            seeds: default_seeds(),
            out_dir: default_out(),
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| UpqError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    /// Packed sequence length: the model context plus the shifted target.
    pub fn packed_len(&self) -> usize {
        self.model.context + 1
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.teacher.validate()?;
        self.qat.validate()?;
        self.jsd.validate().map_err(|e| UpqError::Config(e.to_string()))?;
        self.corpus.fractions.validate()?;
        if self.seeds.is_empty() {
            return Err(UpqError::Config("at least one seed is required".into()));
        }
        match (self.regime, self.ptq) {
            (Some(r), None) if r.from_int4() => {
                return Err(UpqError::Config(format!("regime {} needs a [ptq] section", r.name())))
            }
            (_, Some(p)) => p.validate(self.packed_len())?,
            _ => {}
        }
        Ok(())
    }

    fn ptq_or_err(&self) -> Result<PtqConfig> {
        self.ptq.ok_or_else(|| UpqError::Config("a [ptq] section is required".into()))
    }

    /// Writes the config as pretty JSON into `dir`.
    pub fn echo(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join(CONFIG_ECHO_FILE), serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }
}

/// Reads (or generates) the corpus and packs it for `cfg.model.context`.
pub fn load_data(cfg: &RunConfig) -> Result<PackedSplits> {
    let text = if cfg.corpus.paths.is_empty() {
        synthetic_text(cfg.corpus.synthetic_bytes, cfg.corpus.synthetic_seed).into_bytes()
    } else {
        read_corpus(&cfg.corpus.paths)?
    };
    pack(&tokenize(&text), cfg.packed_len(), cfg.corpus.fractions, cfg.corpus.split_seed)
}

/// Worker count: `UPQ_THREADS` if set, else the machine's parallelism.
pub fn worker_threads() -> Result<usize> {
    match std::env::var(THREADS_ENV) {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(n),
            _ => Err(UpqError::Config(format!("{THREADS_ENV}={v:?} is not a positive integer"))),
        },
        Err(_) => Ok(std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)),
    }
}

/// Maps `f` over `items` on at most `threads` scoped workers, keeping order.
pub fn parallel_map<T: Sync, R: Send>(items: &[T], threads: usize, f: impl Fn(&T) -> R + Sync) -> Vec<R> {
    let slots: Mutex<Vec<Option<R>>> = Mutex::new((0..items.len()).map(|_| None).collect());
    let next = AtomicUsize::new(0);
    std::thread::scope(|s| {
        for _ in 0..threads.clamp(1, items.len().max(1)) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= items.len() {
                    break;
                }
                let r = f(&items[i]);
                slots.lock().expect("worker panicked")[i] = Some(r);
            });
        }
    });
    slots
        .into_inner()
        .expect("worker panicked")
        .into_iter()
        .map(|r| r.expect("every slot filled"))
        .collect()
}

/// Loads `path` if `resume` is set and its key file matches `key`;
/// otherwise builds, saves and records the key. Returns the model and
/// whether it came from the cache.
fn cached_model(path: &Path, key: &str, resume: bool, build: impl FnOnce() -> Result<ToyLm>) -> Result<(ToyLm, bool)> {
    let key_path = path.with_extension("key.json");
    if resume && path.exists() {
        if let Ok(stored) = std::fs::read_to_string(&key_path) {
            if stored == key {
                return Ok((load_checkpoint(path)?, true));
            }
        }
    }
    let model = build()?;
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    save_checkpoint(&model, path)?;
    std::fs::write(key_path, key)?;
    Ok((model, false))
}

#[derive(Debug, Clone)]
pub struct TeacherOutcome {
    pub model: ToyLm,
    pub initial_eval_ppl: f64,
    pub eval_ppl: f64,
    pub cache_hit: bool,
    /// Wall time of this call.
    pub seconds: f64,
}

/// Trains the fp teacher into `dir/teacher.upqc`, with its metrics under
/// `dir/teacher/`. Init and batch order follow `cfg.model.seed`; trial
/// seeds do not enter, so every trial shares one teacher.
pub fn pretrain_teacher(cfg: &RunConfig, data: &PackedSplits, dir: &Path, resume: bool) -> Result<TeacherOutcome> {
    let clock = Instant::now();
    let init = ToyLm::new(cfg.model)?;
    let initial_eval_ppl = eval_perplexity(&init, data)?;
    let key = serde_json::to_string(&(&cfg.model, &cfg.teacher, &data.digest, data.seed))?;
    let (model, cache_hit) = cached_model(&dir.join(TEACHER_FILE), &key, resume, || {
        let spec = TrainSpec {
            objective: Objective::Ntp,
            teacher: None,
            original: None,
            data,
            cfg: cfg.teacher,
            seed: cfg.model.seed,
            out_dir: Some(&dir.join("teacher")),
        };
        Ok(train(init, &spec)?.model)
    })?;
    let eval_ppl = eval_perplexity(&model, data)?;
    Ok(TeacherOutcome {
        model,
        initial_eval_ppl,
        eval_ppl,
        cache_hit,
        seconds: clock.elapsed().as_secs_f64(),
    })
}

#[derive(Debug, Clone)]
pub struct PtqOutcome {
    pub model: ToyLm,
    pub cache_hit: bool,
    pub seconds: f64,
}

/// INT4 block-wise PTQ of `teacher` into `dir/int4.upqc`, plus the report.
pub fn ptq_stage(cfg: &RunConfig, teacher: &ToyLm, data: &PackedSplits, seed: u64, dir: &Path, resume: bool) -> Result<PtqOutcome> {
    let clock = Instant::now();
    let pcfg = PtqConfig {
        seed: cfg.ptq_or_err()?.seed.wrapping_add(seed),
        ..cfg.ptq_or_err()?
    };
    let teacher_digest = format!("{:x}", Sha256::digest(crate::model::encode_checkpoint(teacher)?));
    let key = serde_json::to_string(&(&pcfg, &teacher_digest, &data.digest, data.seed))?;
    let (model, cache_hit) = cached_model(&dir.join(INT4_FILE), &key, resume, || {
        let (model, reports) = run_ptq(teacher, &data.calib, &pcfg)?;
        let n = calibration_sequences(&data.calib, &pcfg)?.len();
        let header = PtqReportHeader::new(&pcfg, n, data.calib.context);
        std::fs::create_dir_all(dir)?;
        write_report(dir, PTQ_REPORT_STEM, &header, &reports)?;
        Ok(model)
    })?;
    Ok(PtqOutcome {
        model,
        cache_hit,
        seconds: clock.elapsed().as_secs_f64(),
    })
}

/// Per-regime results that feed the comparison table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegimeSummary {
    pub seed: u64,
    pub regime: Regime,
    pub steps: usize,
    /// Loss of the first step.
    pub train_loss_init: f64,
    /// Mean loss over the first 10% of steps.
    pub train_loss_early: f64,
    /// Mean loss over the last 10% of steps.
    pub train_loss_final: f64,
    /// Final model on the full eval split.
    pub eval_ppl: f64,
    pub eval_jsd: f64,
    /// Pooled over every INT2 layer, ordered `−3, −1, 1, 3`.
    pub bins: [f64; 4],
    /// Wall time of the training run and its evaluation.
    pub seconds: f64,
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len().max(1) as f64
}

/// INT2 QAT of one regime for one trial, written to `dir`. `int4` must be
/// given for the regimes that start from the PTQ model.
pub fn qat_stage(
    cfg: &RunConfig,
    regime: Regime,
    teacher: &ToyLm,
    int4: Option<&ToyLm>,
    data: &PackedSplits,
    seed: u64,
    dir: &Path,
) -> Result<RegimeSummary> {
    let clock = Instant::now();
    let source = if regime.from_int4() {
        int4.ok_or_else(|| UpqError::Config(format!("regime {} needs the INT4 checkpoint", regime.name())))?
    } else {
        teacher
    };
    let student = quantize_model(source, QuantTarget::Int2Seq)?;
    let spec = TrainSpec {
        objective: regime.objective(cfg.jsd),
        teacher: Some(teacher),
        original: Some(teacher),
        data,
        cfg: cfg.qat,
        seed,
        out_dir: Some(dir),
    };
    let out = train(student, &spec)?;
    save_checkpoint(&out.model, &dir.join("final.upqc"))?;
    let tenth = (out.losses.len() / 10).max(1);
    let mut pooled = BinUtilization::default();
    for b in group_bins(&out.model)?.values() {
        pooled.merge(b);
    }
    let summary = RegimeSummary {
        seed,
        regime,
        steps: out.steps,
        train_loss_init: out.losses.first().copied().unwrap_or(f64::NAN),
        train_loss_early: mean(&out.losses[..tenth.min(out.losses.len())]),
        train_loss_final: mean(&out.losses[out.losses.len().saturating_sub(tenth)..]),
        eval_ppl: eval_perplexity(&out.model, data)?,
        eval_jsd: eval_teacher_jsd(teacher, &out.model, data, cfg.jsd)?,
        bins: pooled.fractions(),
        seconds: 0.0,
    };
    let summary = RegimeSummary {
        seconds: clock.elapsed().as_secs_f64(),
        ..summary
    };
    std::fs::write(dir.join(SUMMARY_FILE), serde_json::to_string_pretty(&summary)? + "\n")?;
    Ok(summary)
}

/// One row of `comparison.csv`; the numeric columns are empty on failure.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub seed: u64,
    pub regime: Regime,
    pub status: String,
    pub steps: Option<usize>,
    pub train_loss_init: Option<f64>,
    pub train_loss_early: Option<f64>,
    pub train_loss_final: Option<f64>,
    pub eval_ppl: Option<f64>,
    pub eval_jsd: Option<f64>,
    pub bin_m3: Option<f64>,
    pub bin_m1: Option<f64>,
    pub bin_p1: Option<f64>,
    pub bin_p3: Option<f64>,
    pub outer_share: Option<f64>,
}

impl ComparisonRow {
    fn new(seed: u64, regime: Regime, result: &std::result::Result<RegimeSummary, String>) -> Self {
        match result {
            Ok(s) => ComparisonRow {
                seed,
                regime,
                status: "ok".into(),
                steps: Some(s.steps),
                train_loss_init: Some(s.train_loss_init),
                train_loss_early: Some(s.train_loss_early),
                train_loss_final: Some(s.train_loss_final),
                eval_ppl: Some(s.eval_ppl),
                eval_jsd: Some(s.eval_jsd),
                bin_m3: Some(s.bins[0]),
                bin_m1: Some(s.bins[1]),
                bin_p1: Some(s.bins[2]),
                bin_p3: Some(s.bins[3]),
                outer_share: Some(s.bins[0] + s.bins[3]),
            },
            Err(e) => ComparisonRow {
                seed,
                regime,
                status: format!("error: {e}"),
                steps: None,
                train_loss_init: None,
                train_loss_early: None,
                train_loss_final: None,
                eval_ppl: None,
                eval_jsd: None,
                bin_m3: None,
                bin_m1: None,
                bin_p1: None,
                bin_p3: None,
                outer_share: None,
            },
        }
    }
}

/// The PTQ stage of one trial.
#[derive(Debug, Clone)]
pub struct TrialPrep {
    pub seed: u64,
    pub int4: std::result::Result<PtqOutcome, String>,
}

#[derive(Debug, Clone)]
pub struct PipelineReport {
    pub teacher: std::result::Result<TeacherOutcome, String>,
    pub trials: Vec<TrialPrep>,
    pub summaries: Vec<(u64, Regime, std::result::Result<RegimeSummary, String>)>,
    pub rows: Vec<ComparisonRow>,
}

impl PipelineReport {
    pub fn summary(&self, seed: u64, regime: Regime) -> Option<&RegimeSummary> {
        self.summaries
            .iter()
            .find(|(s, r, _)| *s == seed && *r == regime)
            .and_then(|(_, _, x)| x.as_ref().ok())
    }
}

pub fn trial_dir(out: &Path, seed: u64) -> PathBuf {
    out.join(format!("seed-{seed}"))
}

fn load_summary(dir: &Path) -> Option<RegimeSummary> {
    let text = std::fs::read_to_string(dir.join(SUMMARY_FILE)).ok()?;
    serde_json::from_str(&text).ok()
}

/// One teacher, then PTQ and all four regimes for every seed in
/// `cfg.seeds`, with `comparison.csv` in `cfg.out_dir`. A failed stage is recorded in its
/// rows and the remaining work still runs. With `resume`, cached teacher
/// and INT4 checkpoints and finished regimes are reused.
pub fn run_pipeline(cfg: &RunConfig, resume: bool) -> Result<PipelineReport> {
    cfg.validate()?;
    cfg.ptq_or_err()?;
    let out = cfg.out_dir.as_path();
    cfg.echo(out)?;
    let data = load_data(cfg)?;
    let threads = worker_threads()?;

    let teacher = pretrain_teacher(cfg, &data, out, resume).map_err(|e| e.to_string());
    let trials = parallel_map(&cfg.seeds, threads, |&seed| {
        let int4 = match &teacher {
            Ok(t) => ptq_stage(cfg, &t.model, &data, seed, &trial_dir(out, seed), resume).map_err(|e| e.to_string()),
            Err(e) => Err(format!("teacher failed: {e}")),
        };
        TrialPrep { seed, int4 }
    });

    let jobs: Vec<(usize, Regime)> = (0..trials.len())
        .flat_map(|i| Regime::ALL.into_iter().map(move |r| (i, r)))
        .collect();
    let results = parallel_map(&jobs, threads, |&(i, regime)| {
        let trial = &trials[i];
        let dir = trial_dir(out, trial.seed).join(regime.name());
        let teacher = match &teacher {
            Ok(t) => t,
            Err(e) => return Err(format!("teacher failed: {e}")),
        };
        let int4 = match (&trial.int4, regime.from_int4()) {
            (Ok(p), _) => Some(&p.model),
            (Err(e), true) => return Err(format!("PTQ failed: {e}")),
            (Err(_), false) => None,
        };
        if resume && teacher.cache_hit && (!regime.from_int4() || trial.int4.as_ref().is_ok_and(|p| p.cache_hit)) {
            if let Some(s) = load_summary(&dir) {
                return Ok(s);
            }
        }
        qat_stage(cfg, regime, &teacher.model, int4, &data, trial.seed, &dir).map_err(|e| e.to_string())
    });

    let summaries: Vec<_> = jobs
        .iter()
        .zip(results)
        .map(|(&(i, r), res)| (trials[i].seed, r, res))
        .collect();
    let rows: Vec<ComparisonRow> = summaries.iter().map(|(s, r, res)| ComparisonRow::new(*s, *r, res)).collect();
    let mut w = csv::Writer::from_path(out.join(COMPARISON_FILE)).map_err(csv_err)?;
    for row in &rows {
        w.serialize(row).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(PipelineReport {
        teacher,
        trials,
        summaries,
        rows,
    })
}

pub(crate) fn csv_err(e: csv::Error) -> UpqError {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => UpqError::Io(io),
        other => UpqError::Config(format!("csv: {other:?}")),
    }
}

/// Reads back a comparison table.
pub fn read_comparison(path: &Path) -> Result<Vec<ComparisonRow>> {
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    r.deserialize().map(|row| row.map_err(csv_err)).collect()
}

/// Full-eval-split perplexity of a checkpoint on the configured corpus,
/// packed at the checkpoint's own context length.
pub fn eval_checkpoint_ppl(cfg: &RunConfig, path: &Path) -> Result<f64> {
    let model = load_checkpoint(path)?;
    let run = RunConfig {
        model: model.config,
        ..cfg.clone()
    };
    eval_perplexity(&model, &load_data(&run)?)
}
