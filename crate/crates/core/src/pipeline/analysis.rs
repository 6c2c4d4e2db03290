//! Plot-ready diagnostics: bin tables, per-layer error norms, normalized L1
//! dynamics and weight histograms against the INT2 levels.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::Serialize;

use super::csv_err;
use crate::error::{Result, UpqError};
use crate::model::{load_checkpoint, LayerGroup, QuantizedLinear, ToyLm};
use crate::quant::{bin_utilization, init_seq_scale, quant_error_norm, seq_int2_forward, BinUtilization, ChannelScale, SeqConfig};
use crate::train::{group_l1, validate_metrics_file, MetricsRecord};

/// INT2 level positions in units of the row scale Δ.
pub const LEVEL_LINES: [f64; 4] = [-0.75, -0.25, 0.25, 0.75];
/// Histograms cover `[-HIST_RANGE, HIST_RANGE]` in units of Δ; values beyond
/// land in the end bins.
pub const HIST_RANGE: f64 = 1.25;

/// The weights a layer feeds into INT2 and the row scales used for it: the
/// latent weights and learned Δ for INT2 layers, otherwise the effective
/// weights and their initial Δ = row max.
fn int2_view(lin: &QuantizedLinear, seq: SeqConfig) -> Result<(crate::Tensor, ChannelScale)> {
    match lin.seq_scale() {
        Some(s) => Ok((lin.weight.clone(), s)),
        None => {
            let w = lin.effective_weight(seq)?;
            let s = init_seq_scale(&w)?;
            Ok((w, s))
        }
    }
}

fn int2_bins(lin: &QuantizedLinear, seq: SeqConfig) -> Result<BinUtilization> {
    let (w, s) = int2_view(lin, seq)?;
    bin_utilization(&seq_int2_forward(&w, &s, seq)?, &s)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerDiagnostics {
    pub layer: String,
    pub group: LayerGroup,
    pub scheme: String,
    pub rows: usize,
    pub cols: usize,
    /// `‖W − Wq‖_F` between stored and effective weights.
    pub quant_error: f64,
    /// `‖W − SEQ(W)‖_F` for the INT2 view of the layer.
    pub int2_error: f64,
    /// Combined `{−3, 3}` share of the INT2 view.
    pub outer_share: f64,
}

pub fn layer_diagnostics(model: &ToyLm) -> Result<Vec<LayerDiagnostics>> {
    let mut out = Vec::new();
    for (name, proj, lin) in model.linears() {
        let (w, s) = int2_view(lin, model.seq)?;
        let wq = seq_int2_forward(&w, &s, model.seq)?;
        out.push(LayerDiagnostics {
            layer: name,
            group: proj.group(),
            scheme: lin.scheme.tag().into(),
            rows: lin.weight.rows(),
            cols: lin.weight.cols(),
            quant_error: quant_error_norm(&lin.weight, &lin.effective_weight(model.seq)?)?,
            int2_error: quant_error_norm(&w, &wq)?,
            outer_share: bin_utilization(&wq, &s)?.outer_share(),
        });
    }
    Ok(out)
}

/// INT2 level usage pooled per layer group.
pub fn group_bin_table(model: &ToyLm) -> Result<BTreeMap<LayerGroup, BinUtilization>> {
    let mut out: BTreeMap<LayerGroup, BinUtilization> = BTreeMap::new();
    for (_, proj, lin) in model.linears() {
        out.entry(proj.group()).or_default().merge(&int2_bins(lin, model.seq)?);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Histogram {
    pub layer: String,
    /// `bins + 1` edges in units of Δ.
    pub edges: Vec<f64>,
    pub counts: Vec<u64>,
}

/// Histogram of `W / Δ_row` for every layer's INT2 view.
pub fn weight_histograms(model: &ToyLm, bins: usize) -> Result<Vec<Histogram>> {
    if bins == 0 {
        return Err(UpqError::Config("histogram needs at least one bin".into()));
    }
    let width = 2.0 * HIST_RANGE / bins as f64;
    let edges: Vec<f64> = (0..=bins).map(|i| -HIST_RANGE + i as f64 * width).collect();
    let mut out = Vec::new();
    for (name, _, lin) in model.linears() {
        let (w, s) = int2_view(lin, model.seq)?;
        let mut counts = vec![0u64; bins];
        for (i, &d) in s.values().iter().enumerate() {
            for &v in w.row(i) {
                let k = ((v as f64 / d as f64 + HIST_RANGE) / width).floor();
                counts[(k.max(0.0) as usize).min(bins - 1)] += 1;
            }
        }
        out.push(Histogram {
            layer: name,
            edges: edges.clone(),
            counts,
        });
    }
    Ok(out)
}

/// What `analyze` should read.
#[derive(Debug, Clone, Default)]
pub struct AnalyzeInputs {
    pub checkpoint: Option<PathBuf>,
    /// Start point for the L1 table; requires `checkpoint`.
    pub reference: Option<PathBuf>,
    /// Normalizer for the L1 table; defaults to `reference`.
    pub original: Option<PathBuf>,
    /// Run directories holding `metrics.jsonl`.
    pub metrics: Vec<PathBuf>,
    pub hist_bins: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
struct BinRow {
    group: LayerGroup,
    level_m3: f64,
    level_m1: f64,
    level_p1: f64,
    level_p3: f64,
    outer_share: f64,
    weights: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
struct HistRow<'a> {
    layer: &'a str,
    bin_lo: f64,
    bin_hi: f64,
    count: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct L1Row {
    pub group: LayerGroup,
    pub l1_scale: Option<f64>,
    pub l1_weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CurveRow {
    pub run: String,
    pub step: usize,
    pub tokens: usize,
    pub group: LayerGroup,
    pub train_loss: f64,
    pub eval_ppl: Option<f64>,
    pub l1_scale: Option<f64>,
    pub l1_weight: Option<f64>,
    pub outer_share: Option<f64>,
}

/// Long-format curves from metrics records, one row per step and group.
pub fn curve_rows(run: &str, records: &[MetricsRecord]) -> Vec<CurveRow> {
    let mut out = Vec::new();
    for r in records {
        for g in LayerGroup::ALL {
            out.push(CurveRow {
                run: run.to_string(),
                step: r.step,
                tokens: r.tokens,
                group: g,
                train_loss: r.train_loss,
                eval_ppl: r.eval_ppl,
                l1_scale: r.l1_scale.get(&g).copied(),
                l1_weight: r.l1_weight.get(&g).copied(),
                outer_share: r.bins.get(&g).map(|b| b[0] + b[3]),
            });
        }
    }
    out
}

/// Normalized L1 of `current` per group: scales from `start`, weights from `original`.
pub fn checkpoint_l1(current: &ToyLm, start: &ToyLm, original: &ToyLm) -> Result<Vec<L1Row>> {
    let (scale, weight) = group_l1(current, start, original)?;
    Ok(weight
        .into_iter()
        .map(|(group, l1_weight)| L1Row {
            group,
            l1_scale: scale.get(&group).copied(),
            l1_weight,
        })
        .collect())
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    for r in rows {
        w.serialize(r).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

/// Writes the diagnostics CSVs into `out` and returns the files written.
///
/// From a checkpoint: `bins.csv`, `layers.csv`, `histograms.csv`,
/// `levels.csv`, and with a reference also `l1.csv`. From metrics
/// directories: `curves.csv`.
pub fn analyze(inputs: &AnalyzeInputs, out: &Path) -> Result<Vec<PathBuf>> {
    if inputs.checkpoint.is_none() && inputs.metrics.is_empty() {
        return Err(UpqError::Config("nothing to analyze: give a checkpoint or metrics directories".into()));
    }
    if inputs.reference.is_some() && inputs.checkpoint.is_none() {
        return Err(UpqError::Config("a reference checkpoint needs a checkpoint to compare".into()));
    }
    std::fs::create_dir_all(out)?;
    let mut written = Vec::new();
    let mut emit = |name: &str| {
        let p = out.join(name);
        written.push(p.clone());
        p
    };

    if let Some(path) = &inputs.checkpoint {
        let model = load_checkpoint(path)?;
        let bins: Vec<BinRow> = group_bin_table(&model)?
            .into_iter()
            .map(|(group, b)| {
                let f = b.fractions();
                BinRow {
                    group,
                    level_m3: f[0],
                    level_m1: f[1],
                    level_p1: f[2],
                    level_p3: f[3],
                    outer_share: b.outer_share(),
                    weights: b.total(),
                }
            })
            .collect();
        write_csv(&emit("bins.csv"), &bins)?;
        write_csv(&emit("layers.csv"), &layer_diagnostics(&model)?)?;

        let hists = weight_histograms(&model, inputs.hist_bins.max(1))?;
        let rows: Vec<HistRow> = hists
            .iter()
            .flat_map(|h| {
                h.counts.iter().enumerate().map(move |(i, &count)| HistRow {
                    layer: &h.layer,
                    bin_lo: h.edges[i],
                    bin_hi: h.edges[i + 1],
                    count,
                })
            })
            .collect();
        write_csv(&emit("histograms.csv"), &rows)?;
        #[derive(Serialize)]
        struct Level {
            level: i32,
            position: f64,
        }
        let levels: Vec<Level> = [-3, -1, 1, 3]
            .into_iter()
            .zip(LEVEL_LINES)
            .map(|(level, position)| Level { level, position })
            .collect();
        write_csv(&emit("levels.csv"), &levels)?;

        if let Some(reference) = &inputs.reference {
            let start = load_checkpoint(reference)?;
            let original = match &inputs.original {
                Some(p) => load_checkpoint(p)?,
                None => start.clone(),
            };
            write_csv(&emit("l1.csv"), &checkpoint_l1(&model, &start, &original)?)?;
        }
    }

    if !inputs.metrics.is_empty() {
        let mut rows = Vec::new();
        for dir in &inputs.metrics {
            let file = dir.join("metrics.jsonl");
            if !file.exists() {
                return Err(UpqError::Config(format!("no metrics.jsonl in {}", dir.display())));
            }
            let run = dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
            rows.extend(curve_rows(&run, &validate_metrics_file(&file)?));
        }
        write_csv(&emit("curves.csv"), &rows)?;
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{quantize_model, save_checkpoint, ModelConfig, QuantTarget};

    fn model() -> ToyLm {
        let cfg = ModelConfig {
            vocab: 32,
            dim: 8,
            layers: 2,
            heads: 2,
            mlp_expansion: 2,
            context: 8,
            seed: 4,
        };
        ToyLm::new(cfg).unwrap()
    }

    #[test]
    fn histogram_counts_sum_to_weight_count() {
        let m = quantize_model(&model(), QuantTarget::Int2Seq).unwrap();
        for (h, (_, _, lin)) in weight_histograms(&m, 17).unwrap().iter().zip(m.linears()) {
            assert_eq!(h.counts.iter().sum::<u64>() as usize, lin.weight.numel());
            assert_eq!(h.edges.len(), 18);
        }
    }

    #[test]
    fn identical_checkpoints_have_zero_l1() {
        let m = quantize_model(&model(), QuantTarget::Int2Seq).unwrap();
        let rows = checkpoint_l1(&m, &m, &model()).unwrap();
        assert_eq!(rows.len(), 2);
        for r in rows {
            assert_eq!(r.l1_weight, 0.0);
            assert_eq!(r.l1_scale, Some(0.0));
        }
    }

    #[test]
    fn fp_layers_have_zero_quant_error_and_bins_cover_all_weights() {
        let m = model();
        assert!(layer_diagnostics(&m).unwrap().iter().all(|d| d.quant_error == 0.0 && d.int2_error > 0.0));
        let total: u64 = group_bin_table(&m).unwrap().values().map(|b| b.total()).sum();
        assert_eq!(total as usize, m.linears().iter().map(|(_, _, l)| l.weight.numel()).sum::<usize>());
    }

    #[test]
    fn analyze_writes_files_and_rejects_missing_metrics() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.upqc");
        save_checkpoint(&quantize_model(&model(), QuantTarget::Int2Seq).unwrap(), &p).unwrap();
        let inputs = AnalyzeInputs {
            checkpoint: Some(p.clone()),
            reference: Some(p),
            hist_bins: 10,
            ..AnalyzeInputs::default()
        };
        let files = analyze(&inputs, &dir.path().join("out")).unwrap();
        assert_eq!(files.len(), 5);
        let l1 = std::fs::read_to_string(dir.path().join("out/l1.csv")).unwrap();
        assert_eq!(l1.lines().count(), 3);

        let missing = AnalyzeInputs {
            metrics: vec![dir.path().join("nowhere")],
            ..AnalyzeInputs::default()
        };
        assert!(matches!(analyze(&missing, dir.path()), Err(UpqError::Config(_))));
        assert!(analyze(&AnalyzeInputs::default(), dir.path()).is_err());
    }
}
