use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use upq::model::load_checkpoint;
use upq::pipeline::analysis::{analyze, AnalyzeInputs};
use upq::pipeline::{
    eval_checkpoint_ppl, load_data, pretrain_teacher, ptq_stage, qat_stage, run_pipeline, RunConfig, INT4_FILE,
    TEACHER_FILE,
};
use upq::train::Regime;

#[derive(Parser)]
#[command(name = "upq", version, about = "FP -> INT4 -> INT2 quantization lab on a toy transformer")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML run config; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Single trial seed, replacing the config's seed list.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory, replacing the config's.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Reuse cached checkpoints whose inputs are unchanged.
    #[arg(long)]
    resume: bool,
}

impl Common {
    fn load(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
            None => RunConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.seeds = vec![s];
        }
        if let Some(o) = &self.out {
            cfg.out_dir = o.clone();
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train the fp teacher; `--seed` does not apply.
    PretrainTeacher(Common),
    /// INT4 block-wise PTQ of a teacher checkpoint.
    Ptq {
        #[command(flatten)]
        common: Common,
        /// Defaults to `<out>/teacher.upqc`.
        #[arg(long)]
        teacher: Option<PathBuf>,
    },
    /// INT2 QAT under one regime.
    Qat {
        #[command(flatten)]
        common: Common,
        /// Overrides the config's regime.
        #[arg(long)]
        regime: Option<Regime>,
        /// Defaults to `<out>/teacher.upqc`.
        #[arg(long)]
        teacher: Option<PathBuf>,
        /// Defaults to `<out>/int4.upqc`; used by ptq-ntp and upq.
        #[arg(long)]
        int4: Option<PathBuf>,
    },
    /// Diagnostics CSVs from a checkpoint and/or run directories.
    Analyze {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Start point for the scale L1 distances.
        #[arg(long)]
        reference: Option<PathBuf>,
        /// fp weights: the weight L1 distances are measured from them and
        /// every distance is normalized by them. Defaults to the reference.
        #[arg(long)]
        original: Option<PathBuf>,
        /// Run directory with a metrics.jsonl; repeatable.
        #[arg(long)]
        metrics: Vec<PathBuf>,
        #[arg(long, default_value_t = 100)]
        bins: usize,
    },
    /// Teacher, PTQ and all four regimes for every seed, plus comparison.csv.
    Pipeline(Common),
    /// Held-out perplexity of a checkpoint.
    EvalPpl {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
}

fn single_seed(cfg: &RunConfig) -> Result<u64> {
    match cfg.seeds.as_slice() {
        [s] => Ok(*s),
        _ => bail!("this command runs one trial; pass --seed or list a single seed"),
    }
}

fn or_default(path: &Option<PathBuf>, dir: &Path, file: &str) -> PathBuf {
    path.clone().unwrap_or_else(|| dir.join(file))
}

fn load(path: &Path) -> Result<upq::model::ToyLm> {
    load_checkpoint(path).with_context(|| format!("reading {}", path.display()))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::PretrainTeacher(common) => {
            let cfg = common.load()?;
            cfg.echo(&cfg.out_dir)?;
            let data = load_data(&cfg)?;
            let t = pretrain_teacher(&cfg, &data, &cfg.out_dir, common.resume)?;
            println!(
                "teacher: eval ppl {:.4} (untrained {:.4}){}",
                t.eval_ppl,
                t.initial_eval_ppl,
                if t.cache_hit { ", cached" } else { "" }
            );
        }
        Command::Ptq { common, teacher } => {
            let cfg = common.load()?;
            let seed = single_seed(&cfg)?;
            cfg.echo(&cfg.out_dir)?;
            let data = load_data(&cfg)?;
            let teacher = load(&or_default(&teacher, &cfg.out_dir, TEACHER_FILE))?;
            let p = ptq_stage(&cfg, &teacher, &data, seed, &cfg.out_dir, common.resume)?;
            println!(
                "int4: eval ppl {:.4} (teacher {:.4}){}",
                upq::train::eval_perplexity(&p.model, &data)?,
                upq::train::eval_perplexity(&teacher, &data)?,
                if p.cache_hit { ", cached" } else { "" }
            );
        }
        Command::Qat {
            common,
            regime,
            teacher,
            int4,
        } => {
            let mut cfg = common.load()?;
            if regime.is_some() {
                cfg.regime = regime;
            }
            cfg.validate()?;
            let regime = cfg.regime.context("no regime: pass --regime or set it in the config")?;
            let seed = single_seed(&cfg)?;
            cfg.echo(&cfg.out_dir)?;
            let data = load_data(&cfg)?;
            let teacher = load(&or_default(&teacher, &cfg.out_dir, TEACHER_FILE))?;
            let int4 = if regime.from_int4() {
                Some(load(&or_default(&int4, &cfg.out_dir, INT4_FILE))?)
            } else {
                None
            };
            let dir = cfg.out_dir.join(regime.name());
            let s = qat_stage(&cfg, regime, &teacher, int4.as_ref(), &data, seed, &dir)?;
            println!("{}", serde_json::to_string_pretty(&s)?);
        }
        Command::Analyze {
            out,
            checkpoint,
            reference,
            original,
            metrics,
            bins,
        } => {
            let inputs = AnalyzeInputs {
                checkpoint,
                reference,
                original,
                metrics,
                hist_bins: bins,
            };
            for f in analyze(&inputs, &out)? {
                println!("{}", f.display());
            }
        }
        Command::Pipeline(common) => {
            let cfg = common.load()?;
            let report = run_pipeline(&cfg, common.resume)?;
            println!("seed,regime,status,eval_ppl,eval_jsd,outer_share");
            for r in &report.rows {
                let f = |x: Option<f64>| x.map(|v| format!("{v:.5}")).unwrap_or_default();
                println!(
                    "{},{},{},{},{},{}",
                    r.seed,
                    r.regime.name(),
                    r.status,
                    f(r.eval_ppl),
                    f(r.eval_jsd),
                    f(r.outer_share)
                );
            }
        }
        Command::EvalPpl { common, checkpoint } => {
            let cfg = common.load()?;
            println!("{:.6}", eval_checkpoint_ppl(&cfg, &checkpoint)?);
        }
    }
    Ok(())
}

fn main() {
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
