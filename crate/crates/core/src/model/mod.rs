//! Decoder-only transformer used as the quantization substrate.
//!
//! Token and learned position embeddings, pre-norm blocks with causal
//! multi-head attention and a SwiGLU MLP, RMS norms and an untied head.
//! Only the seven projections inside each block carry quantization schemes.

mod checkpoint;
mod eval;

use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Result, UpqError};
use crate::quant::{
    self, ste_wrap, ChannelScale, FlexRoundParams, Kernel, OmniQuantParams, SeqConfig,
};
use crate::tensor::Tensor;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, CHECKPOINT_EXTENSION, CHECKPOINT_VERSION};
pub use eval::{eval_jsd, perplexity, sequence_nll};

const INIT_STD: f32 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab: usize,
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    /// MLP hidden width as a multiple of `dim`.
    pub mlp_expansion: usize,
    pub context: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vocab: 256,
            dim: 128,
            layers: 4,
            heads: 4,
            mlp_expansion: 2,
            context: 128,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(UpqError::Config(m));
        if self.vocab == 0 || self.dim == 0 || self.layers == 0 || self.mlp_expansion == 0 {
            return bad(format!("model sizes must be positive: {self:?}"));
        }
        if self.heads == 0 || self.dim % self.heads != 0 {
            return bad(format!("dim {} not divisible by {} heads", self.dim, self.heads));
        }
        if self.context < 2 {
            return bad(format!("context length {} < 2", self.context));
        }
        Ok(())
    }

    pub fn hidden(&self) -> usize {
        self.dim * self.mlp_expansion
    }
}

/// The seven projections of a block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Proj {
    Query,
    Key,
    Value,
    Output,
    Gate,
    Up,
    Down,
}

impl Proj {
    pub const ALL: [Proj; 7] = [
        Proj::Query,
        Proj::Key,
        Proj::Value,
        Proj::Output,
        Proj::Gate,
        Proj::Up,
        Proj::Down,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Proj::Query => "query",
            Proj::Key => "key",
            Proj::Value => "value",
            Proj::Output => "output",
            Proj::Gate => "gate",
            Proj::Up => "up",
            Proj::Down => "down",
        }
    }

    pub fn group(self) -> LayerGroup {
        match self {
            Proj::Value | Proj::Output | Proj::Down => LayerGroup::ValueOutputDown,
            _ => LayerGroup::QueryKeyUpGate,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum LayerGroup {
    #[serde(rename = "value-output-down")]
    ValueOutputDown,
    #[serde(rename = "query-key-up-gate")]
    QueryKeyUpGate,
}

impl LayerGroup {
    pub const ALL: [LayerGroup; 2] = [LayerGroup::ValueOutputDown, LayerGroup::QueryKeyUpGate];

    pub fn name(self) -> &'static str {
        match self {
            LayerGroup::ValueOutputDown => "value-output-down",
            LayerGroup::QueryKeyUpGate => "query-key-up-gate",
        }
    }
}

/// Where an INT2 layer's latent weights came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SeqOrigin {
    Fp,
    Int4,
}

#[derive(Debug, Clone, PartialEq)]
pub enum LinearScheme {
    Fp,
    FlexRound(FlexRoundParams),
    OmniQuant(OmniQuantParams),
    /// `delta` is the per-row scale as an `[m, 1]` column.
    Seq { delta: Tensor, origin: SeqOrigin },
}

impl LinearScheme {
    pub fn tag(&self) -> &'static str {
        match self {
            LinearScheme::Fp => "fp",
            LinearScheme::FlexRound(_) => "int4-flexround",
            LinearScheme::OmniQuant(_) => "int4-omniquant",
            LinearScheme::Seq { origin: SeqOrigin::Fp, .. } => "int2-seq",
            LinearScheme::Seq { origin: SeqOrigin::Int4, .. } => "int4-int2-seq",
        }
    }

    pub fn is_int4(&self) -> bool {
        matches!(self, LinearScheme::FlexRound(_) | LinearScheme::OmniQuant(_))
    }

    pub fn is_int2(&self) -> bool {
        matches!(self, LinearScheme::Seq { .. })
    }
}

/// Target of [`quantize_model`] and [`QuantizedLinear::quantize`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum QuantTarget {
    Int4Flexround,
    Int4Omniquant,
    Int2Seq,
}

impl fmt::Display for QuantTarget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            QuantTarget::Int4Flexround => "int4-flexround",
            QuantTarget::Int4Omniquant => "int4-omniquant",
            QuantTarget::Int2Seq => "int2-seq",
        })
    }
}

/// A projection with latent weights `[out, in]` and a quantization scheme.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedLinear {
    pub weight: Tensor,
    pub scheme: LinearScheme,
    pub bias: Option<Tensor>,
}

impl QuantizedLinear {
    pub fn fp(weight: Tensor) -> Self {
        QuantizedLinear {
            weight,
            scheme: LinearScheme::Fp,
            bias: None,
        }
    }

    /// The weights the forward pass actually multiplies by.
    pub fn effective_weight(&self, seq: SeqConfig) -> Result<Tensor> {
        match &self.scheme {
            LinearScheme::Fp => Ok(self.weight.clone()),
            LinearScheme::FlexRound(p) => quant::flexround_int4_forward(&self.weight, p),
            LinearScheme::OmniQuant(p) => quant::omniquant_int4_forward(&self.weight, p),
            LinearScheme::Seq { delta, .. } => {
                quant::seq_int2_forward(&self.weight, &ChannelScale::from_column(delta)?, seq)
            }
        }
    }

    /// INT2 scale of a SEQ layer.
    pub fn seq_scale(&self) -> Option<ChannelScale> {
        match &self.scheme {
            LinearScheme::Seq { delta, .. } => ChannelScale::from_column(delta).ok(),
            _ => None,
        }
    }

    /// Applies `target`. INT4 targets need an fp source; INT2 accepts fp,
    /// INT4 (whose quantized weights become the latent weights) or INT2
    /// (scale re-derived from the latent weights).
    pub fn quantize(&self, target: QuantTarget, seq: SeqConfig) -> Result<Self> {
        let scheme = match (target, &self.scheme) {
            (QuantTarget::Int4Flexround, LinearScheme::Fp) => {
                LinearScheme::FlexRound(FlexRoundParams::init(&self.weight)?)
            }
            (QuantTarget::Int4Omniquant, LinearScheme::Fp) => {
                // Surface degenerate rows now rather than at the first forward.
                let p = OmniQuantParams::init(self.weight.rows());
                quant::omniquant_row_deltas(&self.weight, &p)?;
                LinearScheme::OmniQuant(p)
            }
            (QuantTarget::Int2Seq, LinearScheme::Fp) => LinearScheme::Seq {
                delta: quant::init_seq_scale(&self.weight)?.to_column(),
                origin: SeqOrigin::Fp,
            },
            (QuantTarget::Int2Seq, s) if s.is_int4() => {
                let w4 = self.effective_weight(seq)?;
                return Ok(QuantizedLinear {
                    scheme: LinearScheme::Seq {
                        delta: quant::init_seq_scale(&w4)?.to_column(),
                        origin: SeqOrigin::Int4,
                    },
                    weight: w4,
                    bias: self.bias.clone(),
                });
            }
            (QuantTarget::Int2Seq, LinearScheme::Seq { origin, .. }) => LinearScheme::Seq {
                delta: quant::init_seq_scale(&self.weight)?.to_column(),
                origin: *origin,
            },
            (t, s) => {
                return Err(UpqError::contract(format!(
                    "cannot apply {t} to a layer with scheme {}",
                    s.tag()
                )))
            }
        };
        Ok(QuantizedLinear {
            weight: self.weight.clone(),
            scheme,
            bias: self.bias.clone(),
        })
    }

    /// Named tensors of this layer, in a fixed order.
    pub fn tensors(&self) -> Vec<(&'static str, &Tensor)> {
        let mut out = vec![("weight", &self.weight)];
        match &self.scheme {
            LinearScheme::Fp => {}
            LinearScheme::FlexRound(p) => {
                out.push(("log_delta", &p.log_delta));
                out.push(("log_elem", &p.log_elem));
                out.push(("log_row", &p.log_row));
            }
            LinearScheme::OmniQuant(p) => {
                out.push(("gamma_logit", &p.gamma_logit));
                out.push(("beta_logit", &p.beta_logit));
            }
            LinearScheme::Seq { delta, .. } => out.push(("delta", delta)),
        }
        if let Some(b) = &self.bias {
            out.push(("bias", b));
        }
        out
    }

    /// Mutable tensors named `<prefix>.<name>`.
    pub fn named_tensors_mut(&mut self, prefix: &str) -> Vec<(String, &mut Tensor)> {
        self.tensors_mut()
            .into_iter()
            .map(|(n, t)| (format!("{prefix}.{n}"), t))
            .collect()
    }

    fn tensors_mut(&mut self) -> Vec<(&'static str, &mut Tensor)> {
        let mut out = vec![("weight", &mut self.weight)];
        match &mut self.scheme {
            LinearScheme::Fp => {}
            LinearScheme::FlexRound(p) => {
                out.push(("log_delta", &mut p.log_delta));
                out.push(("log_elem", &mut p.log_elem));
                out.push(("log_row", &mut p.log_row));
            }
            LinearScheme::OmniQuant(p) => {
                out.push(("gamma_logit", &mut p.gamma_logit));
                out.push(("beta_logit", &mut p.beta_logit));
            }
            LinearScheme::Seq { delta, .. } => out.push(("delta", delta)),
        }
        if let Some(b) = &mut self.bias {
            out.push(("bias", b));
        }
        out
    }

    fn on_tape(&self, tape: &mut Tape, prefix: &str, binder: &mut Binder<'_>, seq: SeqConfig) -> Result<(Var, Option<Var>)> {
        let mut vars = Vec::new();
        for (name, t) in self.tensors() {
            vars.push(binder.bind(tape, format!("{prefix}.{name}"), t)?);
        }
        let bias = self.bias.as_ref().map(|_| *vars.last().expect("bias bound"));
        let w = match &self.scheme {
            LinearScheme::Fp => vars[0],
            LinearScheme::FlexRound(_) => tape.custom(&ste_wrap(Kernel::FlexRound), &vars[..4])?,
            LinearScheme::OmniQuant(_) => tape.custom(&ste_wrap(Kernel::OmniQuant), &vars[..3])?,
            LinearScheme::Seq { .. } => tape.custom(&ste_wrap(Kernel::Seq(seq)), &vars[..2])?,
        };
        Ok((w, bias))
    }

    /// `x · Wᵀ (+ bias)` with this layer's tensors bound as `<prefix>.<name>`.
    pub fn apply_on_tape(&self, tape: &mut Tape, x: Var, prefix: &str, binder: &mut Binder<'_>, seq: SeqConfig) -> Result<Var> {
        let (w, bias) = self.on_tape(tape, prefix, binder, seq)?;
        let y = tape.matmul_nt(x, w)?;
        match bias {
            Some(b) => tape.add(y, b),
            None => Ok(y),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub attn_norm: Tensor,
    pub mlp_norm: Tensor,
    pub query: QuantizedLinear,
    pub key: QuantizedLinear,
    pub value: QuantizedLinear,
    pub output: QuantizedLinear,
    pub gate: QuantizedLinear,
    pub up: QuantizedLinear,
    pub down: QuantizedLinear,
}

impl Block {
    pub fn linear(&self, p: Proj) -> &QuantizedLinear {
        match p {
            Proj::Query => &self.query,
            Proj::Key => &self.key,
            Proj::Value => &self.value,
            Proj::Output => &self.output,
            Proj::Gate => &self.gate,
            Proj::Up => &self.up,
            Proj::Down => &self.down,
        }
    }

    pub fn linear_mut(&mut self, p: Proj) -> &mut QuantizedLinear {
        match p {
            Proj::Query => &mut self.query,
            Proj::Key => &mut self.key,
            Proj::Value => &mut self.value,
            Proj::Output => &mut self.output,
            Proj::Gate => &mut self.gate,
            Proj::Up => &mut self.up,
            Proj::Down => &mut self.down,
        }
    }
}

/// Chooses which named tensors become trainable leaves and records them.
pub struct Binder<'f> {
    filter: &'f dyn Fn(&str) -> bool,
    bound: Vec<(String, Var)>,
}

fn never(_: &str) -> bool {
    false
}

impl<'f> Binder<'f> {
    pub fn new(filter: &'f dyn Fn(&str) -> bool) -> Self {
        Binder {
            filter,
            bound: Vec::new(),
        }
    }

    /// Nothing trainable.
    pub fn frozen() -> Binder<'static> {
        Binder::new(&never)
    }

    pub fn bound(&self) -> &[(String, Var)] {
        &self.bound
    }

    fn bind(&mut self, tape: &mut Tape, name: String, t: &Tensor) -> Result<Var> {
        let train = (self.filter)(&name);
        let v = tape.leaf(t.clone(), train)?;
        if train {
            self.bound.push((name, v));
        }
        Ok(v)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyLm {
    pub config: ModelConfig,
    pub seq: SeqConfig,
    pub tok_emb: Tensor,
    pub pos_emb: Tensor,
    pub blocks: Vec<Block>,
    pub final_norm: Tensor,
    pub head: Tensor,
}

impl ToyLm {
    /// Full-precision model with seeded Gaussian initialization.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let (d, h) = (config.dim, config.hidden());
        let resid_std = INIT_STD / (2.0 * config.layers as f32).sqrt();
        let tok_emb = Tensor::randn(&[config.vocab, d], INIT_STD, &mut rng);
        let pos_emb = Tensor::randn(&[config.context, d], INIT_STD, &mut rng);
        let mut blocks = Vec::with_capacity(config.layers);
        for _ in 0..config.layers {
            let mut lin = |rows: usize, cols: usize, std: f32| {
                QuantizedLinear::fp(Tensor::randn(&[rows, cols], std, &mut rng))
            };
            blocks.push(Block {
                attn_norm: Tensor::full(&[d], 1.0),
                mlp_norm: Tensor::full(&[d], 1.0),
                query: lin(d, d, INIT_STD),
                key: lin(d, d, INIT_STD),
                value: lin(d, d, INIT_STD),
                output: lin(d, d, resid_std),
                gate: lin(h, d, INIT_STD),
                up: lin(h, d, INIT_STD),
                down: lin(d, h, resid_std),
            });
        }
        let head = Tensor::randn(&[config.vocab, d], INIT_STD, &mut rng);
        Ok(ToyLm {
            config,
            seq: SeqConfig::default(),
            tok_emb,
            pos_emb,
            blocks,
            final_norm: Tensor::full(&[d], 1.0),
            head,
        })
    }

    pub fn linear_name(block: usize, p: Proj) -> String {
        format!("blocks.{block}.{}", p.name())
    }

    /// Every projection with its name, block-major.
    pub fn linears(&self) -> Vec<(String, Proj, &QuantizedLinear)> {
        let mut out = Vec::new();
        for (i, b) in self.blocks.iter().enumerate() {
            for p in Proj::ALL {
                out.push((Self::linear_name(i, p), p, b.linear(p)));
            }
        }
        out
    }

    /// All tensors in canonical order.
    pub fn tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![
            ("tok_emb".to_string(), &self.tok_emb),
            ("pos_emb".to_string(), &self.pos_emb),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            out.push((format!("blocks.{i}.attn_norm"), &b.attn_norm));
            out.push((format!("blocks.{i}.mlp_norm"), &b.mlp_norm));
            for p in Proj::ALL {
                for (n, t) in b.linear(p).tensors() {
                    out.push((format!("{}.{n}", Self::linear_name(i, p)), t));
                }
            }
        }
        out.push(("final_norm".to_string(), &self.final_norm));
        out.push(("head".to_string(), &self.head));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = vec![
            ("tok_emb".to_string(), &mut self.tok_emb),
            ("pos_emb".to_string(), &mut self.pos_emb),
        ];
        for (i, b) in self.blocks.iter_mut().enumerate() {
            out.push((format!("blocks.{i}.attn_norm"), &mut b.attn_norm));
            out.push((format!("blocks.{i}.mlp_norm"), &mut b.mlp_norm));
            let Block { query, key, value, output, gate, up, down, .. } = b;
            for (p, lin) in Proj::ALL.into_iter().zip([query, key, value, output, gate, up, down]) {
                for (n, t) in lin.tensors_mut() {
                    out.push((format!("{}.{n}", Self::linear_name(i, p)), t));
                }
            }
        }
        out.push(("final_norm".to_string(), &mut self.final_norm));
        out.push(("head".to_string(), &mut self.head));
        out
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.numel()).sum()
    }

    /// Keeps INT2 scales strictly positive after an optimizer step.
    pub fn project_constraints(&mut self) {
        for b in &mut self.blocks {
            for p in Proj::ALL {
                if let LinearScheme::Seq { delta, .. } = &mut b.linear_mut(p).scheme {
                    for d in delta.data_mut() {
                        *d = d.max(MIN_SEQ_SCALE);
                    }
                }
            }
        }
    }

    /// Token + position embeddings for `[batch, seq]` ids.
    pub fn embed_on_tape(&self, tape: &mut Tape, ids: &[u32], batch: usize, seq: usize, binder: &mut Binder<'_>) -> Result<Var> {
        if seq == 0 || seq > self.config.context {
            return Err(UpqError::contract(format!(
                "sequence length {seq} outside 1..={}",
                self.config.context
            )));
        }
        let tok = binder.bind(tape, "tok_emb".into(), &self.tok_emb)?;
        let pos = binder.bind(tape, "pos_emb".into(), &self.pos_emb)?;
        let x = tape.embedding(tok, ids, batch, seq)?;
        let pos_ids: Vec<u32> = (0..batch).flat_map(|_| 0..seq as u32).collect();
        let p = tape.embedding(pos, &pos_ids, batch, seq)?;
        tape.add(x, p)
    }

    /// One transformer block on `[batch, seq, dim]` activations.
    pub fn block_on_tape(&self, tape: &mut Tape, index: usize, x: Var, binder: &mut Binder<'_>) -> Result<Var> {
        let b = self.blocks.get(index).ok_or_else(|| {
            UpqError::contract(format!("block {index} of {}", self.blocks.len()))
        })?;
        let pre = format!("blocks.{index}");
        let seq = self.seq;
        let g = binder.bind(tape, format!("{pre}.attn_norm"), &b.attn_norm)?;
        let h = tape.rms_norm(x, g)?;
        let q = b.query.apply_on_tape(tape, h, &format!("{pre}.query"), binder, seq)?;
        let k = b.key.apply_on_tape(tape, h, &format!("{pre}.key"), binder, seq)?;
        let v = b.value.apply_on_tape(tape, h, &format!("{pre}.value"), binder, seq)?;
        let a = tape.causal_attention(q, k, v, self.config.heads)?;
        let o = b.output.apply_on_tape(tape, a, &format!("{pre}.output"), binder, seq)?;
        let x = tape.add(x, o)?;
        let g = binder.bind(tape, format!("{pre}.mlp_norm"), &b.mlp_norm)?;
        let h = tape.rms_norm(x, g)?;
        let gate = b.gate.apply_on_tape(tape, h, &format!("{pre}.gate"), binder, seq)?;
        let up = b.up.apply_on_tape(tape, h, &format!("{pre}.up"), binder, seq)?;
        let gate = tape.silu(gate)?;
        let m = tape.mul(gate, up)?;
        let d = b.down.apply_on_tape(tape, m, &format!("{pre}.down"), binder, seq)?;
        tape.add(x, d)
    }

    /// Final norm and head: `[batch, seq, dim]` → logits `[batch, seq, vocab]`.
    pub fn head_on_tape(&self, tape: &mut Tape, x: Var, binder: &mut Binder<'_>) -> Result<Var> {
        let g = binder.bind(tape, "final_norm".into(), &self.final_norm)?;
        let h = tape.rms_norm(x, g)?;
        let w = binder.bind(tape, "head".into(), &self.head)?;
        tape.matmul_nt(h, w)
    }

    pub fn forward_on_tape(&self, tape: &mut Tape, ids: &[u32], batch: usize, seq: usize, binder: &mut Binder<'_>) -> Result<Var> {
        let mut x = self.embed_on_tape(tape, ids, batch, seq, binder)?;
        for i in 0..self.blocks.len() {
            x = self.block_on_tape(tape, i, x, binder)?;
        }
        self.head_on_tape(tape, x, binder)
    }

    /// Logits `[batch, seq, vocab]` without gradient bookkeeping.
    pub fn forward(&self, ids: &[u32], batch: usize, seq: usize) -> Result<Tensor> {
        let mut tape = Tape::new();
        let out = self.forward_on_tape(&mut tape, ids, batch, seq, &mut Binder::frozen())?;
        Ok(tape.value(out).clone())
    }

    /// Copy whose projections are plain fp layers holding the effective weights.
    pub fn dequantized(&self) -> Result<ToyLm> {
        let mut out = self.clone();
        for b in &mut out.blocks {
            for p in Proj::ALL {
                let lin = b.linear_mut(p);
                *lin = QuantizedLinear {
                    weight: lin.effective_weight(self.seq)?,
                    scheme: LinearScheme::Fp,
                    bias: lin.bias.clone(),
                };
            }
        }
        Ok(out)
    }

    /// Scheme tags keyed by layer name.
    pub fn schemes(&self) -> std::collections::BTreeMap<String, String> {
        self.linears()
            .into_iter()
            .map(|(n, _, l)| (n, l.scheme.tag().to_string()))
            .collect()
    }
}

/// Floor applied to INT2 scales after each update.
pub const MIN_SEQ_SCALE: f32 = 1e-8;

/// Applies `target` to every projection. The model must be homogeneous:
/// all projections share one scheme tag.
pub fn quantize_model(model: &ToyLm, target: QuantTarget) -> Result<ToyLm> {
    let tags: std::collections::BTreeSet<_> =
        model.linears().iter().map(|(_, _, l)| l.scheme.tag()).collect();
    if tags.len() > 1 {
        return Err(UpqError::contract(format!(
            "mixed source schemes {tags:?}; quantize block by block instead"
        )));
    }
    let mut out = model.clone();
    for b in &mut out.blocks {
        for p in Proj::ALL {
            let lin = b.linear_mut(p);
            *lin = lin.quantize(target, model.seq)?;
        }
    }
    Ok(out)
}
