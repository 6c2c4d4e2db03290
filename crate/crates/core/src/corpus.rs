//! Byte-level tokenization, fixed-length packing into disjoint splits, and
//! deterministic batch iteration.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::container;
use crate::error::{Result, UpqError};
use crate::tensor::Tensor;

pub const BYTE_VOCAB: usize = 256;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenStream {
    ids: Vec<u32>,
    digest: String,
}

impl TokenStream {
    pub fn from_ids(ids: Vec<u32>, vocab: usize) -> Result<Self> {
        if let Some(bad) = ids.iter().find(|&&i| i as usize >= vocab) {
            return Err(UpqError::contract(format!("token id {bad} outside vocabulary of {vocab}")));
        }
        let mut h = Sha256::new();
        for id in &ids {
            h.update(id.to_le_bytes());
        }
        Ok(TokenStream {
            ids,
            digest: format!("{:x}", h.finalize()),
        })
    }

    pub fn ids(&self) -> &[u32] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// SHA-256 of the ids, hex encoded.
    pub fn digest(&self) -> &str {
        &self.digest
    }
}

/// One id per byte.
pub fn tokenize(text: &[u8]) -> TokenStream {
    TokenStream::from_ids(text.iter().map(|&b| b as u32).collect(), BYTE_VOCAB)
        .expect("bytes are always in vocabulary")
}

pub fn detokenize(ids: &[u32]) -> Result<Vec<u8>> {
    ids.iter()
        .map(|&i| {
            u8::try_from(i).map_err(|_| UpqError::contract(format!("id {i} is not a byte")))
        })
        .collect()
}

/// Reads files in order; directories contribute their files recursively,
/// sorted by path.
pub fn read_corpus(paths: &[PathBuf]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    for p in paths {
        if p.is_dir() {
            let mut files: Vec<PathBuf> = walkdir::WalkDir::new(p)
                .sort_by_file_name()
                .into_iter()
                .filter_map(|e| e.ok())
                .filter(|e| e.file_type().is_file())
                .map(|e| e.into_path())
                .collect();
            files.sort();
            for f in files {
                out.extend(fs::read(f)?);
            }
        } else {
            out.extend(fs::read(p)?);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Calib,
    Train,
    Eval,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitFractions {
    pub calib: f64,
    pub train: f64,
    pub eval: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        SplitFractions {
            calib: 0.05,
            train: 0.90,
            eval: 0.05,
        }
    }
}

impl SplitFractions {
    pub fn validate(&self) -> Result<()> {
        let parts = [self.calib, self.train, self.eval];
        if parts.iter().any(|f| !(*f > 0.0)) || (parts.iter().sum::<f64>() - 1.0).abs() > 1e-6 {
            return Err(UpqError::Config(format!(
                "split fractions must be positive and sum to 1, got {self:?}"
            )));
        }
        Ok(())
    }
}

/// Fixed-length sequences belonging to one split.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PackedDataset {
    pub context: usize,
    pub split: Split,
    pub sequences: Vec<Vec<u32>>,
}

impl PackedDataset {
    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    pub fn tokens(&self) -> usize {
        self.sequences.len() * self.context
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PackedSplits {
    pub digest: String,
    pub seed: u64,
    pub calib: PackedDataset,
    pub train: PackedDataset,
    pub eval: PackedDataset,
}

impl PackedSplits {
    pub fn get(&self, split: Split) -> &PackedDataset {
        match split {
            Split::Calib => &self.calib,
            Split::Train => &self.train,
            Split::Eval => &self.eval,
        }
    }
}

/// Non-overlapping `context`-length chunks; a shorter tail is dropped.
pub fn pack_sequences(ids: &[u32], context: usize) -> Vec<Vec<u32>> {
    ids.chunks_exact(context).map(<[u32]>::to_vec).collect()
}

/// Packs the stream into chunks, shuffles chunk order with `seed` and deals
/// whole chunks to the splits by fraction.
pub fn pack(stream: &TokenStream, context: usize, fractions: SplitFractions, seed: u64) -> Result<PackedSplits> {
    fractions.validate()?;
    if context < 2 {
        return Err(UpqError::Config(format!("context {context} < 2")));
    }
    let mut seqs = pack_sequences(stream.ids(), context);
    let n = seqs.len();
    let n_calib = ((fractions.calib * n as f64).round() as usize).max(1);
    let n_eval = ((fractions.eval * n as f64).round() as usize).max(1);
    if n < n_calib + n_eval + 1 {
        return Err(UpqError::Config(format!(
            "{} tokens give {n} sequences of {context}; need at least {}",
            stream.len(),
            n_calib + n_eval + 1
        )));
    }
    seqs.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let eval = seqs.split_off(n - n_eval);
    let train = seqs.split_off(n_calib);
    let make = |split, sequences| PackedDataset { context, split, sequences };
    Ok(PackedSplits {
        digest: stream.digest().to_string(),
        seed,
        calib: make(Split::Calib, seqs),
        train: make(Split::Train, train),
        eval: make(Split::Eval, eval),
    })
}

/// A batch of equal-length sequences.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch<'a> {
    pub rows: Vec<&'a [u32]>,
}

impl Batch<'_> {
    pub fn size(&self) -> usize {
        self.rows.len()
    }

    /// Model input length (`context − 1`).
    pub fn steps(&self) -> usize {
        self.rows[0].len() - 1
    }

    pub fn inputs(&self) -> Vec<u32> {
        self.rows.iter().flat_map(|r| r[..r.len() - 1].iter().copied()).collect()
    }

    pub fn targets(&self) -> Vec<u32> {
        self.rows.iter().flat_map(|r| r[1..].iter().copied()).collect()
    }

    pub fn token_count(&self) -> usize {
        self.rows.iter().map(|r| r.len()).sum()
    }
}

fn epoch_order(n: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

/// One shuffled pass over `dataset`; the last batch may be short.
pub fn batches<'a>(dataset: &'a PackedDataset, batch_size: usize, seed: u64) -> Result<impl Iterator<Item = Batch<'a>>> {
    epoch_batches(dataset, batch_size, seed, 0)
}

pub fn epoch_batches<'a>(
    dataset: &'a PackedDataset,
    batch_size: usize,
    seed: u64,
    epoch: u64,
) -> Result<impl Iterator<Item = Batch<'a>>> {
    if batch_size == 0 {
        return Err(UpqError::Config("batch size must be at least 1".into()));
    }
    let order = epoch_order(dataset.len(), seed, epoch);
    let seqs = &dataset.sequences;
    Ok((0..order.len().div_ceil(batch_size)).map(move |b| Batch {
        rows: order[b * batch_size..((b + 1) * batch_size).min(order.len())]
            .iter()
            .map(|&i| seqs[i].as_slice())
            .collect(),
    }))
}

/// Endless full batches, reshuffled every epoch. Short epoch tails are
/// skipped so every step sees the same batch size.
pub struct BatchStream<'a> {
    dataset: &'a PackedDataset,
    batch_size: usize,
    seed: u64,
    epoch: u64,
    order: Vec<usize>,
    pos: usize,
}

impl<'a> BatchStream<'a> {
    pub fn new(dataset: &'a PackedDataset, batch_size: usize, seed: u64) -> Result<Self> {
        if batch_size == 0 || dataset.len() < batch_size {
            return Err(UpqError::Config(format!(
                "batch size {batch_size} needs at least that many sequences, have {}",
                dataset.len()
            )));
        }
        Ok(BatchStream {
            dataset,
            batch_size,
            seed,
            epoch: 0,
            order: epoch_order(dataset.len(), seed, 0),
            pos: 0,
        })
    }

    pub fn next_batch(&mut self) -> Batch<'a> {
        if self.pos + self.batch_size > self.order.len() {
            self.epoch += 1;
            self.order = epoch_order(self.dataset.len(), self.seed, self.epoch);
            self.pos = 0;
        }
        let rows = self.order[self.pos..self.pos + self.batch_size]
            .iter()
            .map(|&i| self.dataset.sequences[i].as_slice())
            .collect();
        self.pos += self.batch_size;
        Batch { rows }
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DatasetHeader {
    kind: String,
    context: usize,
    seed: u64,
    digest: String,
}

fn split_tensor(d: &PackedDataset) -> Result<Tensor> {
    let data = d.sequences.iter().flatten().map(|&i| i as f32).collect();
    Tensor::new(vec![d.len(), d.context], data)
}

/// Stores packed splits in the checkpoint container, one `[count, context]`
/// tensor per split.
pub fn save_dataset(splits: &PackedSplits, path: &Path) -> Result<()> {
    let header = DatasetHeader {
        kind: "dataset".into(),
        context: splits.train.context,
        seed: splits.seed,
        digest: splits.digest.clone(),
    };
    let tensors = [
        ("calib".to_string(), split_tensor(&splits.calib)?),
        ("train".to_string(), split_tensor(&splits.train)?),
        ("eval".to_string(), split_tensor(&splits.eval)?),
    ];
    let refs: Vec<(String, &Tensor)> = tensors.iter().map(|(n, t)| (n.clone(), t)).collect();
    fs::write(path, container::encode(&serde_json::to_string(&header)?, &refs)?)?;
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<PackedSplits> {
    let (header, entries) = container::decode(&fs::read(path)?)?;
    let fmt = |offset: u64, reason: String| UpqError::Format { offset, reason };
    let header: DatasetHeader =
        serde_json::from_str(&header).map_err(|e| fmt(12, format!("bad dataset header: {e}")))?;
    if header.kind != "dataset" {
        return Err(fmt(12, format!("container holds {:?}, not a dataset", header.kind)));
    }
    let mut found = std::collections::BTreeMap::new();
    for e in entries {
        let split = match e.name.as_str() {
            "calib" => Split::Calib,
            "train" => Split::Train,
            "eval" => Split::Eval,
            other => return Err(fmt(e.offset, format!("unexpected split {other}"))),
        };
        if e.tensor.shape().len() != 2 || e.tensor.cols() != header.context {
            return Err(fmt(e.offset, format!("split {} has shape {:?}", e.name, e.tensor.shape())));
        }
        let mut sequences = Vec::with_capacity(e.tensor.rows());
        for r in 0..e.tensor.rows() {
            let row: Option<Vec<u32>> = e
                .tensor
                .row(r)
                .iter()
                .map(|&v| (v >= 0.0 && v.fract() == 0.0 && v < 16_777_216.0).then_some(v as u32))
                .collect();
            sequences.push(row.ok_or_else(|| fmt(e.offset, format!("non-integer id in {}", e.name)))?);
        }
        found.insert(e.name.clone(), PackedDataset { context: header.context, split, sequences });
    }
    let mut take = |name: &str| {
        found
            .remove(name)
            .ok_or_else(|| fmt(0, format!("dataset lacks the {name} split")))
    };
    Ok(PackedSplits {
        digest: header.digest,
        seed: header.seed,
        calib: take("calib")?,
        train: take("train")?,
        eval: take("eval")?,
    })
}

const NAMES: [&str; 12] = [
    "ada", "bo", "cyd", "dee", "eli", "fay", "gus", "hal", "ivy", "jo", "kit", "lu",
];
const NOUNS: [&str; 10] = [
    "apple", "boat", "cart", "drum", "egg", "fern", "gate", "hat", "jar", "kite",
];
const VERBS: [&str; 8] = ["sees", "takes", "finds", "wants", "holds", "lifts", "paints", "hides"];
const ADJS: [&str; 8] = ["red", "big", "old", "wet", "blue", "tiny", "warm", "odd"];
const PLACES: [&str; 6] = ["the barn", "the hill", "the shed", "the lake", "the road", "the mill"];
const NUMBERS: [&str; 10] = [
    "zero", "one", "two", "three", "four", "five", "six", "seven", "eight", "nine",
];

/// Seeded text from a small stochastic grammar: simple clauses, counting
/// and sums spelled out in words. Deterministic in `seed`.
pub fn synthetic_text(min_bytes: usize, seed: u64) -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = String::with_capacity(min_bytes + 128);
    let pick = |rng: &mut ChaCha8Rng, xs: &[&'static str]| xs[rng.gen_range(0..xs.len())];
    while out.len() < min_bytes {
        let who = pick(&mut rng, &NAMES);
        let s = match rng.gen_range(0..5) {
            0 => format!(
                "{who} {} the {} {} at {}.",
                pick(&mut rng, &VERBS),
                pick(&mut rng, &ADJS),
                pick(&mut rng, &NOUNS),
                pick(&mut rng, &PLACES)
            ),
            1 => {
                let (a, b) = (rng.gen_range(0..5), rng.gen_range(0..5));
                format!("{} plus {} is {}.", NUMBERS[a], NUMBERS[b], NUMBERS[a + b])
            }
            2 => {
                let start = rng.gen_range(0..7);
                let words: Vec<_> = NUMBERS[start..start + 4].to_vec();
                format!("{who} counts {}.", words.join(" "))
            }
            3 => {
                let noun = pick(&mut rng, &NOUNS);
                format!("the {noun} is {}, so {who} keeps the {noun}.", pick(&mut rng, &ADJS))
            }
            _ => format!("{who} goes to {} with {}.", pick(&mut rng, &PLACES), pick(&mut rng, &NAMES)),
        };
        out.push_str(&s);
        out.push(if rng.gen_bool(0.2) { '\n' } else { ' ' });
    }
    out
}
