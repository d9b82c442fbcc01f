//! Pair construction for the sentence-order objectives.
//!
//! Given an anchor sentence `A`, the second sentence `B` is chosen by the
//! drawn label:
//!
//! | label         | `B`                                        |
//! |---------------|--------------------------------------------|
//! | `IsNext`      | the following sentence                     |
//! | `IsPrev`      | the preceding sentence                     |
//! | `IsNextInadj` | two sentences ahead (one sentence between) |
//! | `IsPrevInadj` | two sentences back                         |
//! | `DiffDoc`     | a random sentence of another document      |
//!
//! Labels are drawn uniformly over the active scheme's label set, then a
//! document uniformly, then the anchor uniformly over the positions where the
//! label's partner exists. Masked-LM corruption is applied to the assembled
//! `[CLS] A [SEP] B [SEP]` sequence.

use std::fmt;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use rand::Rng as _;
use rayon::prelude::*;

use crate::corpus::CorpusStore;
use crate::error::{Error, Result};
use crate::rng::{self, Domain, Rng};
use crate::tokenizer::{TokenSeq, Vocab, CLS, MASK, NUM_SPECIALS, SEP};

/// Attempts at finding a document that can host a drawn label.
pub const MAX_RESAMPLE_ATTEMPTS: usize = 16;
pub const MIN_MAX_LEN: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum OrderLabel {
    IsNext,
    IsPrev,
    IsNextInadj,
    IsPrevInadj,
    DiffDoc,
}

impl OrderLabel {
    /// Frozen class order; schemes use a prefix-preserving subset of it.
    pub const ALL: [OrderLabel; 5] = [
        OrderLabel::IsNext,
        OrderLabel::IsPrev,
        OrderLabel::IsNextInadj,
        OrderLabel::IsPrevInadj,
        OrderLabel::DiffDoc,
    ];

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Self::ALL.get(code as usize).copied()
    }

    /// Label of the same pair with `A` and `B` exchanged.
    pub fn swapped(self) -> Self {
        match self {
            OrderLabel::IsNext => OrderLabel::IsPrev,
            OrderLabel::IsPrev => OrderLabel::IsNext,
            OrderLabel::IsNextInadj => OrderLabel::IsPrevInadj,
            OrderLabel::IsPrevInadj => OrderLabel::IsNextInadj,
            OrderLabel::DiffDoc => OrderLabel::DiffDoc,
        }
    }

    /// Position of `B` relative to `A` inside one document.
    pub fn offset(self) -> Option<isize> {
        match self {
            OrderLabel::IsNext => Some(1),
            OrderLabel::IsPrev => Some(-1),
            OrderLabel::IsNextInadj => Some(2),
            OrderLabel::IsPrevInadj => Some(-2),
            OrderLabel::DiffDoc => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            OrderLabel::IsNext => "IsNext",
            OrderLabel::IsPrev => "IsPrev",
            OrderLabel::IsNextInadj => "IsNextInadj",
            OrderLabel::IsPrevInadj => "IsPrevInadj",
            OrderLabel::DiffDoc => "DiffDoc",
        }
    }
}

impl fmt::Display for OrderLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SchemeKind {
    /// Binary next-sentence prediction.
    Nsp2,
    /// Next / previous / different document.
    Pn3,
    /// All five labels as separate classes.
    Pn5,
    /// Five labels mapped onto three smoothed classes.
    PnSmth,
}

impl SchemeKind {
    pub fn code(self) -> u8 {
        match self {
            SchemeKind::Nsp2 => 0,
            SchemeKind::Pn3 => 1,
            SchemeKind::Pn5 => 2,
            SchemeKind::PnSmth => 3,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        [SchemeKind::Nsp2, SchemeKind::Pn3, SchemeKind::Pn5, SchemeKind::PnSmth]
            .get(code as usize)
            .copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            SchemeKind::Nsp2 => "nsp2",
            SchemeKind::Pn3 => "pn3",
            SchemeKind::Pn5 => "pn5",
            SchemeKind::PnSmth => "pnsmth",
        }
    }
}

impl FromStr for SchemeKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "nsp2" => Ok(SchemeKind::Nsp2),
            "pn3" => Ok(SchemeKind::Pn3),
            "pn5" => Ok(SchemeKind::Pn5),
            "pnsmth" => Ok(SchemeKind::PnSmth),
            other => Err(Error::invalid(format!("unknown scheme {other:?} (expected nsp2|pn3|pn5|pnsmth)"))),
        }
    }
}

impl fmt::Display for SchemeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Where the smoothed-away probability mass goes for in-adjacent labels.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ResidualMass {
    /// Split evenly over the non-target classes.
    Uniform,
    /// All of it on `DiffDoc`.
    DiffDoc,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OrderScheme {
    pub kind: SchemeKind,
    /// Probability kept on the mapped class for in-adjacent labels (`PnSmth`).
    pub smoothing_factor: f64,
    pub residual: ResidualMass,
}

const NSP2_LABELS: [OrderLabel; 2] = [OrderLabel::IsNext, OrderLabel::DiffDoc];
const PN3_LABELS: [OrderLabel; 3] = [OrderLabel::IsNext, OrderLabel::IsPrev, OrderLabel::DiffDoc];

impl OrderScheme {
    pub fn new(kind: SchemeKind) -> Self {
        Self {
            kind,
            smoothing_factor: 0.8,
            residual: ResidualMass::Uniform,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.classes().len()
    }

    /// Labels the sampler emits under this scheme.
    pub fn labels(&self) -> &'static [OrderLabel] {
        match self.kind {
            SchemeKind::Nsp2 => &NSP2_LABELS,
            SchemeKind::Pn3 => &PN3_LABELS,
            SchemeKind::Pn5 | SchemeKind::PnSmth => &OrderLabel::ALL,
        }
    }

    /// Output classes of the order head, in index order.
    pub fn classes(&self) -> &'static [OrderLabel] {
        match self.kind {
            SchemeKind::Nsp2 => &NSP2_LABELS,
            SchemeKind::Pn3 | SchemeKind::PnSmth => &PN3_LABELS,
            SchemeKind::Pn5 => &OrderLabel::ALL,
        }
    }

    pub fn emits(&self, label: OrderLabel) -> bool {
        self.labels().contains(&label)
    }

    /// Sentences a document needs so that every emitted label has an anchor.
    pub fn min_sentences(&self) -> usize {
        match self.kind {
            SchemeKind::Nsp2 | SchemeKind::Pn3 => 2,
            SchemeKind::Pn5 | SchemeKind::PnSmth => 3,
        }
    }

    /// Class index a label is scored against: its own class, or for smoothed
    /// in-adjacent labels the class holding the largest target mass.
    pub fn class_of(&self, label: OrderLabel) -> usize {
        let target = build_target(label, self);
        argmax(&target)
    }

    /// `kind=`, `smoothing_factor=` and `residual=` lines.
    pub fn to_kv(&self) -> String {
        let residual = match self.residual {
            ResidualMass::Uniform => "uniform",
            ResidualMass::DiffDoc => "diffdoc",
        };
        format!("kind={}\nsmoothing_factor={}\nresidual={residual}\n", self.kind, self.smoothing_factor)
    }

    pub fn from_kv(text: &str) -> Result<Self> {
        let mut scheme: Option<Self> = None;
        let mut smoothing = None;
        let mut residual = None;
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
            let (k, v) = line.split_once('=').ok_or_else(|| Error::format("scheme", format!("bad line {line:?}")))?;
            match k.trim() {
                "kind" => scheme = Some(Self::new(v.trim().parse()?)),
                "smoothing_factor" => {
                    smoothing = Some(v.trim().parse::<f64>().map_err(|_| Error::format("scheme", format!("bad smoothing {v:?}")))?)
                }
                "residual" => residual = Some(parse_residual(v)?),
                other => return Err(Error::format("scheme", format!("unknown key {other}"))),
            }
        }
        let mut scheme = scheme.ok_or_else(|| Error::format("scheme", "missing kind"))?;
        if let Some(f) = smoothing {
            scheme.smoothing_factor = f;
        }
        if let Some(r) = residual {
            scheme.residual = r;
        }
        scheme.validate()?;
        Ok(scheme)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.smoothing_factor > 0.0 && self.smoothing_factor <= 1.0) {
            return Err(Error::invalid(format!("smoothing factor {} not in (0, 1]", self.smoothing_factor)));
        }
        Ok(())
    }
}

pub fn parse_residual(text: &str) -> Result<ResidualMass> {
    match text.trim().to_ascii_lowercase().as_str() {
        "uniform" => Ok(ResidualMass::Uniform),
        "diffdoc" => Ok(ResidualMass::DiffDoc),
        other => Err(Error::invalid(format!("unknown residual {other:?} (expected uniform|diffdoc)"))),
    }
}

/// Index of the largest entry; the lowest index wins ties.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

// Targets live on a 1e-12 grid so decimal smoothing factors give decimal
// targets (0.8 -> 0.1 residuals, not 0.09999999999999998).
fn snap(x: f64) -> f64 {
    (x * 1e12).round() / 1e12
}

/// Target distribution over the scheme's classes.
///
/// # Panics
/// If the scheme never emits `label`.
pub fn build_target(label: OrderLabel, scheme: &OrderScheme) -> Vec<f64> {
    assert!(scheme.emits(label), "label {label} is not emitted by scheme {}", scheme.kind);
    let classes = scheme.classes();
    let mut target = vec![0.0; classes.len()];
    if let Some(i) = classes.iter().position(|&c| c == label) {
        target[i] = 1.0;
        return target;
    }
    // Only PnSmth reaches here: an in-adjacent label folded onto its
    // adjacent counterpart.
    let mapped = match label {
        OrderLabel::IsNextInadj => OrderLabel::IsNext,
        OrderLabel::IsPrevInadj => OrderLabel::IsPrev,
        _ => unreachable!("exact labels are always classes"),
    };
    let s = scheme.smoothing_factor;
    let main = classes.iter().position(|&c| c == mapped).unwrap();
    target[main] = s;
    match scheme.residual {
        ResidualMass::Uniform => {
            let share = snap((1.0 - s) / (classes.len() - 1) as f64);
            for (i, t) in target.iter_mut().enumerate() {
                if i != main {
                    *t = share;
                }
            }
        }
        ResidualMass::DiffDoc => {
            let dd = classes.iter().position(|&c| c == OrderLabel::DiffDoc).unwrap();
            target[dd] = snap(1.0 - s);
        }
    }
    target
}

/// Sentence coordinates of a pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct PairSource {
    pub doc_a: u32,
    pub sent_a: u32,
    pub doc_b: u32,
    pub sent_b: u32,
}

impl PairSource {
    pub fn swapped(self) -> Self {
        Self {
            doc_a: self.doc_b,
            sent_a: self.sent_b,
            doc_b: self.doc_a,
            sent_b: self.sent_a,
        }
    }
}

/// One pre-training instance laid out as `[CLS] A [SEP] B [SEP]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PairExample {
    pub tokens: Vec<u32>,
    pub segment_ids: Vec<u8>,
    pub label: OrderLabel,
    pub target: Vec<f64>,
    pub mlm_positions: Vec<u32>,
    pub mlm_labels: Vec<u32>,
    pub source: PairSource,
}

/// Trims the end of the longer sentence until `[CLS] A [SEP] B [SEP]` fits.
/// Equal lengths are trimmed together, so the rule commutes with swapping.
pub fn truncate_pair(a: &mut TokenSeq, b: &mut TokenSeq, max_len: usize) {
    let budget = max_len.saturating_sub(3);
    while a.len() + b.len() > budget {
        match a.len().cmp(&b.len()) {
            std::cmp::Ordering::Greater => {
                a.pop();
            }
            std::cmp::Ordering::Less => {
                b.pop();
            }
            std::cmp::Ordering::Equal => {
                a.pop();
                b.pop();
            }
        }
    }
}

impl PairExample {
    /// Assembles an unmasked example, truncating to `max_len`.
    pub fn assemble(
        mut a: TokenSeq,
        mut b: TokenSeq,
        label: OrderLabel,
        scheme: &OrderScheme,
        max_len: usize,
        source: PairSource,
    ) -> Self {
        truncate_pair(&mut a, &mut b, max_len);
        Self::from_parts(&a, &b, label, build_target(label, scheme), source)
    }

    /// Model input for a sentence pair outside the order task. The label
    /// and target carry no meaning.
    pub fn for_inference(mut a: TokenSeq, mut b: TokenSeq, max_len: usize, num_classes: usize) -> Self {
        truncate_pair(&mut a, &mut b, max_len);
        let src = PairSource { doc_a: 0, sent_a: 0, doc_b: 0, sent_b: 0 };
        Self::from_parts(&a, &b, OrderLabel::DiffDoc, vec![0.0; num_classes], src)
    }

    fn from_parts(a: &[u32], b: &[u32], label: OrderLabel, target: Vec<f64>, source: PairSource) -> Self {
        let mut tokens = Vec::with_capacity(a.len() + b.len() + 3);
        tokens.push(CLS);
        tokens.extend_from_slice(a);
        tokens.push(SEP);
        tokens.extend_from_slice(b);
        tokens.push(SEP);
        let mut segment_ids = vec![0u8; a.len() + 2];
        segment_ids.resize(tokens.len(), 1);
        Self {
            tokens,
            segment_ids,
            label,
            target,
            mlm_positions: Vec::new(),
            mlm_labels: Vec::new(),
            source,
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn len_a(&self) -> usize {
        self.segment_ids.iter().filter(|&&s| s == 0).count() - 2
    }

    pub fn a_tokens(&self) -> &[u32] {
        &self.tokens[1..1 + self.len_a()]
    }

    pub fn b_tokens(&self) -> &[u32] {
        &self.tokens[self.len_a() + 2..self.tokens.len() - 1]
    }

    /// Positions eligible for masking: everything but CLS and the two SEPs.
    pub fn maskable_positions(&self) -> Vec<usize> {
        let sep = self.len_a() + 1;
        (1..self.tokens.len() - 1).filter(|&p| p != sep).collect()
    }

    /// Token ids with masked positions restored.
    pub fn original_tokens(&self) -> Vec<u32> {
        let mut t = self.tokens.clone();
        for (&p, &l) in self.mlm_positions.iter().zip(&self.mlm_labels) {
            t[p as usize] = l;
        }
        t
    }

    /// Exchanges `A` and `B`, remapping the masked positions and the label.
    /// Fails when the swapped label has no class under `scheme` (an
    /// `IsNext` example of the binary scheme).
    pub fn swap(&self, scheme: &OrderScheme) -> Result<Self> {
        let la = self.len_a();
        let lb = self.tokens.len() - la - 3;
        let label = self.label.swapped();
        if !scheme.emits(label) {
            return Err(Error::invalid(format!("swapped label {label} is not part of scheme {}", scheme.kind)));
        }
        let mut out = Self::from_parts(self.b_tokens(), self.a_tokens(), label, build_target(label, scheme), self.source.swapped());
        let mut masked: Vec<(u32, u32)> = self
            .mlm_positions
            .iter()
            .zip(&self.mlm_labels)
            .map(|(&p, &l)| {
                let p = p as usize;
                let np = if p <= la { p + lb + 1 } else { p - la - 1 };
                (np as u32, l)
            })
            .collect();
        masked.sort_unstable();
        (out.mlm_positions, out.mlm_labels) = masked.into_iter().unzip();
        Ok(out)
    }
}

/// Masked-LM corruption rates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MaskingConfig {
    pub select_rate: f64,
    pub mask_share: f64,
    pub random_share: f64,
    pub keep_share: f64,
}

impl Default for MaskingConfig {
    fn default() -> Self {
        Self {
            select_rate: 0.15,
            mask_share: 0.80,
            random_share: 0.10,
            keep_share: 0.10,
        }
    }
}

impl MaskingConfig {
    pub fn validate(&self) -> Result<()> {
        let probs = [self.select_rate, self.mask_share, self.random_share, self.keep_share];
        if probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::invalid(format!("masking probabilities out of range: {self:?}")));
        }
        if (self.mask_share + self.random_share + self.keep_share - 1.0).abs() > 1e-9 {
            return Err(Error::invalid("mask/random/keep shares must sum to 1"));
        }
        Ok(())
    }
}

/// Corrupts `tokens` in place at a random subset of `maskable` positions and
/// returns `(positions, original ids)` for the selected ones.
pub fn apply_mlm_mask(
    tokens: &mut [u32],
    maskable: &[usize],
    cfg: &MaskingConfig,
    vocab_size: usize,
    rng: &mut Rng,
) -> (Vec<u32>, Vec<u32>) {
    let mut positions = Vec::new();
    let mut labels = Vec::new();
    for &p in maskable {
        if rng.random::<f64>() >= cfg.select_rate {
            continue;
        }
        positions.push(p as u32);
        labels.push(tokens[p]);
        let u = rng.random::<f64>();
        if u < cfg.mask_share {
            tokens[p] = MASK;
        } else if u < cfg.mask_share + cfg.random_share {
            tokens[p] = rng.random_range(NUM_SPECIALS as u32..vocab_size as u32);
        }
    }
    (positions, labels)
}

/// Draws pre-training examples from an encoded corpus.
#[derive(Debug, Clone)]
pub struct Sampler {
    docs: Vec<Vec<TokenSeq>>,
    scheme: OrderScheme,
    max_len: usize,
    masking: MaskingConfig,
    vocab_size: usize,
}

impl Sampler {
    pub fn new(store: &CorpusStore, vocab: &Vocab, scheme: OrderScheme, max_len: usize, masking: MaskingConfig) -> Result<Self> {
        let docs = store
            .documents()
            .iter()
            .map(|d| d.sentences.iter().map(|s| vocab.encode(s)).collect())
            .collect();
        Self::from_encoded(docs, vocab.len(), scheme, max_len, masking)
    }

    pub fn from_encoded(
        docs: Vec<Vec<TokenSeq>>,
        vocab_size: usize,
        scheme: OrderScheme,
        max_len: usize,
        masking: MaskingConfig,
    ) -> Result<Self> {
        scheme.validate()?;
        masking.validate()?;
        if max_len < MIN_MAX_LEN {
            return Err(Error::invalid(format!("max_len must be >= {MIN_MAX_LEN}, got {max_len}")));
        }
        if docs.len() < 2 {
            return Err(Error::invalid("DiffDoc pairs need at least two documents"));
        }
        if docs.iter().any(|d| d.is_empty()) {
            return Err(Error::invalid("documents must be non-empty"));
        }
        if vocab_size <= NUM_SPECIALS {
            return Err(Error::invalid("vocabulary has no ordinary tokens"));
        }
        Ok(Self {
            docs,
            scheme,
            max_len,
            masking,
            vocab_size,
        })
    }

    pub fn scheme(&self) -> &OrderScheme {
        &self.scheme
    }

    pub fn max_len(&self) -> usize {
        self.max_len
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn masking(&self) -> &MaskingConfig {
        &self.masking
    }

    /// Same corpus at a different maximum length.
    pub fn with_max_len(&self, max_len: usize) -> Result<Self> {
        Self::from_encoded(self.docs.clone(), self.vocab_size, self.scheme, max_len, self.masking)
    }

    pub fn documents(&self) -> &[Vec<TokenSeq>] {
        &self.docs
    }

    /// Every pairing the sampler can produce for `label`.
    pub fn candidates(&self, label: OrderLabel) -> Vec<PairSource> {
        let mut out = Vec::new();
        for (d, doc) in self.docs.iter().enumerate() {
            match label.offset() {
                Some(off) => {
                    let (lo, hi) = anchor_range(doc.len(), off);
                    for i in lo..hi {
                        out.push(PairSource {
                            doc_a: d as u32,
                            sent_a: i as u32,
                            doc_b: d as u32,
                            sent_b: (i as isize + off) as u32,
                        });
                    }
                }
                None => {
                    for i in 0..doc.len() {
                        for (e, other) in self.docs.iter().enumerate().filter(|&(e, _)| e != d) {
                            for j in 0..other.len() {
                                out.push(PairSource {
                                    doc_a: d as u32,
                                    sent_a: i as u32,
                                    doc_b: e as u32,
                                    sent_b: j as u32,
                                });
                            }
                        }
                    }
                }
            }
        }
        out
    }

    /// Picks sentence coordinates for `label`.
    pub fn draw_source(&self, label: OrderLabel, rng: &mut Rng) -> Result<PairSource> {
        let n_docs = self.docs.len();
        for _ in 0..MAX_RESAMPLE_ATTEMPTS {
            let d = rng.random_range(0..n_docs);
            let len = self.docs[d].len();
            match label.offset() {
                Some(off) => {
                    let (lo, hi) = anchor_range(len, off);
                    if lo >= hi {
                        continue;
                    }
                    let i = rng.random_range(lo..hi);
                    return Ok(PairSource {
                        doc_a: d as u32,
                        sent_a: i as u32,
                        doc_b: d as u32,
                        sent_b: (i as isize + off) as u32,
                    });
                }
                None => {
                    let i = rng.random_range(0..len);
                    let mut e = rng.random_range(0..n_docs - 1);
                    if e >= d {
                        e += 1;
                    }
                    let j = rng.random_range(0..self.docs[e].len());
                    return Ok(PairSource {
                        doc_a: d as u32,
                        sent_a: i as u32,
                        doc_b: e as u32,
                        sent_b: j as u32,
                    });
                }
            }
        }
        Err(Error::SamplerExhausted {
            label: label.to_string(),
            attempts: MAX_RESAMPLE_ATTEMPTS,
        })
    }

    /// Unmasked example for given coordinates.
    pub fn build(&self, source: PairSource, label: OrderLabel) -> PairExample {
        let a = self.docs[source.doc_a as usize][source.sent_a as usize].clone();
        let b = self.docs[source.doc_b as usize][source.sent_b as usize].clone();
        PairExample::assemble(a, b, label, &self.scheme, self.max_len, source)
    }

    pub fn sample_unmasked(&self, rng: &mut Rng) -> Result<PairExample> {
        let labels = self.scheme.labels();
        let label = labels[rng.random_range(0..labels.len())];
        let source = self.draw_source(label, rng)?;
        Ok(self.build(source, label))
    }

    /// One fully corrupted training example.
    pub fn sample_pair(&self, rng: &mut Rng) -> Result<PairExample> {
        let mut ex = self.sample_unmasked(rng)?;
        let maskable = ex.maskable_positions();
        let (pos, labels) = apply_mlm_mask(&mut ex.tokens, &maskable, &self.masking, self.vocab_size, rng);
        ex.mlm_positions = pos;
        ex.mlm_labels = labels;
        Ok(ex)
    }

    pub fn sample_batch(&self, n: usize, rng: &mut Rng) -> Result<Vec<PairExample>> {
        (0..n).map(|_| self.sample_pair(rng)).collect()
    }
}

fn anchor_range(len: usize, off: isize) -> (usize, usize) {
    let lo = (-off).max(0) as usize;
    let hi = (len as isize - off.max(0)).max(0) as usize;
    (lo, hi)
}

/// `count` examples from `workers` independent streams. Example `k` is the
/// `k / workers`-th draw of worker `k % workers`, so the output depends only
/// on `(seed, workers)`, not on thread scheduling.
pub fn sample_examples(sampler: &Sampler, seed: u64, count: usize, workers: usize) -> Result<Vec<PairExample>> {
    let workers = workers.max(1);
    let per_worker: Vec<Result<Vec<PairExample>>> = (0..workers)
        .into_par_iter()
        .map(|w| {
            let mut rng = rng::stream(seed, Domain::SamplerWorker, w as u64);
            let n = count / workers + usize::from(w < count % workers);
            sampler.sample_batch(n, &mut rng)
        })
        .collect();
    let mut streams = Vec::with_capacity(workers);
    for r in per_worker {
        streams.push(r?.into_iter());
    }
    let mut out = Vec::with_capacity(count);
    for k in 0..count {
        out.push(streams[k % workers].next().expect("worker quota"));
    }
    Ok(out)
}

// Examples file:
//   magic "SOEX", u32 version, u8 scheme code, u8 residual code,
//   f64 smoothing factor, u32 class count, u64 record count
// then per record (all little-endian):
//   u8 label code
//   u32 n, n x u32 token ids, n x u8 segment ids
//   u32 m, m x u32 masked positions, m x u32 original ids
//   class-count x f64 target
//   4 x u32 source (doc_a, sent_a, doc_b, sent_b)
const EXAMPLES_MAGIC: &[u8; 4] = b"SOEX";
pub const EXAMPLES_VERSION: u32 = 1;

fn put_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

pub fn write_examples(path: &Path, scheme: &OrderScheme, examples: &[PairExample]) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(EXAMPLES_MAGIC);
    put_u32(&mut buf, EXAMPLES_VERSION);
    buf.push(scheme.kind.code());
    buf.push(match scheme.residual {
        ResidualMass::Uniform => 0,
        ResidualMass::DiffDoc => 1,
    });
    buf.extend_from_slice(&scheme.smoothing_factor.to_le_bytes());
    put_u32(&mut buf, scheme.num_classes() as u32);
    buf.extend_from_slice(&(examples.len() as u64).to_le_bytes());
    for ex in examples {
        buf.push(ex.label.code());
        put_u32(&mut buf, ex.tokens.len() as u32);
        for &t in &ex.tokens {
            put_u32(&mut buf, t);
        }
        buf.extend_from_slice(&ex.segment_ids);
        put_u32(&mut buf, ex.mlm_positions.len() as u32);
        for &p in &ex.mlm_positions {
            put_u32(&mut buf, p);
        }
        for &l in &ex.mlm_labels {
            put_u32(&mut buf, l);
        }
        for &t in &ex.target {
            buf.extend_from_slice(&t.to_le_bytes());
        }
        for v in [ex.source.doc_a, ex.source.sent_a, ex.source.doc_b, ex.source.sent_b] {
            put_u32(&mut buf, v);
        }
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

struct Cursor<'a> {
    data: &'a [u8],
    at: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.at + n > self.data.len() {
            return Err(Error::format("examples file", format!("truncated at byte {}", self.at)));
        }
        let s = &self.data[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn u32s(&mut self, n: usize) -> Result<Vec<u32>> {
        (0..n).map(|_| self.u32()).collect()
    }
}

pub fn read_examples(path: &Path) -> Result<(OrderScheme, Vec<PairExample>)> {
    let mut data = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut data))
        .map_err(|e| Error::io(path, e))?;
    let mut c = Cursor { data: &data, at: 0 };
    if c.take(4)? != EXAMPLES_MAGIC {
        return Err(Error::format("examples file", "bad magic"));
    }
    let version = c.u32()?;
    if version != EXAMPLES_VERSION {
        return Err(Error::format("examples file", format!("unsupported version {version}")));
    }
    let kind = SchemeKind::from_code(c.u8()?).ok_or_else(|| Error::format("examples file", "bad scheme code"))?;
    let residual = match c.u8()? {
        0 => ResidualMass::Uniform,
        1 => ResidualMass::DiffDoc,
        r => return Err(Error::format("examples file", format!("bad residual code {r}"))),
    };
    let scheme = OrderScheme {
        kind,
        smoothing_factor: c.f64()?,
        residual,
    };
    let classes = c.u32()? as usize;
    if classes != scheme.num_classes() {
        return Err(Error::format("examples file", "class count disagrees with scheme"));
    }
    let count = c.u64()? as usize;
    let mut out = Vec::with_capacity(count.min(1 << 20));
    for _ in 0..count {
        let label = OrderLabel::from_code(c.u8()?).ok_or_else(|| Error::format("examples file", "bad label code"))?;
        let n = c.u32()? as usize;
        let tokens = c.u32s(n)?;
        let segment_ids = c.take(n)?.to_vec();
        let m = c.u32()? as usize;
        let mlm_positions = c.u32s(m)?;
        let mlm_labels = c.u32s(m)?;
        let target = (0..classes).map(|_| c.f64()).collect::<Result<Vec<_>>>()?;
        let s = c.u32s(4)?;
        out.push(PairExample {
            tokens,
            segment_ids,
            label,
            target,
            mlm_positions,
            mlm_labels,
            source: PairSource {
                doc_a: s[0],
                sent_a: s[1],
                doc_b: s[2],
                sent_b: s[3],
            },
        });
    }
    if c.at != data.len() {
        return Err(Error::format("examples file", "trailing bytes"));
    }
    Ok((scheme, out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::collections::HashMap;

    fn scheme(kind: SchemeKind) -> OrderScheme {
        OrderScheme::new(kind)
    }

    /// Documents whose token ids encode (doc, sentence) so pairs are
    /// identifiable from the tokens alone.
    fn fixture(sizes: &[usize]) -> Vec<Vec<TokenSeq>> {
        sizes
            .iter()
            .enumerate()
            .map(|(d, &n)| (0..n).map(|i| vec![5 + d as u32, 100 + i as u32, 7]).collect())
            .collect()
    }

    fn sampler(sizes: &[usize], kind: SchemeKind) -> Sampler {
        Sampler::from_encoded(fixture(sizes), 200, scheme(kind), 64, MaskingConfig::default()).unwrap()
    }

    #[test]
    fn targets() {
        assert_eq!(build_target(OrderLabel::IsNext, &scheme(SchemeKind::Pn3)), vec![1.0, 0.0, 0.0]);
        assert_eq!(build_target(OrderLabel::IsNextInadj, &scheme(SchemeKind::PnSmth)), vec![0.8, 0.1, 0.1]);
        assert_eq!(build_target(OrderLabel::IsPrevInadj, &scheme(SchemeKind::PnSmth)), vec![0.1, 0.8, 0.1]);
        assert_eq!(build_target(OrderLabel::DiffDoc, &scheme(SchemeKind::Pn5)), vec![0.0, 0.0, 0.0, 0.0, 1.0]);
        assert_eq!(build_target(OrderLabel::DiffDoc, &scheme(SchemeKind::Nsp2)), vec![0.0, 1.0]);
        let dd = OrderScheme {
            residual: ResidualMass::DiffDoc,
            ..scheme(SchemeKind::PnSmth)
        };
        assert_eq!(build_target(OrderLabel::IsNextInadj, &dd), vec![0.8, 0.0, 0.2]);
    }

    #[test]
    #[should_panic(expected = "not emitted")]
    fn target_for_foreign_label_panics() {
        build_target(OrderLabel::IsPrev, &scheme(SchemeKind::Nsp2));
    }

    #[test]
    fn class_of_smoothed() {
        let s = scheme(SchemeKind::PnSmth);
        assert_eq!(s.class_of(OrderLabel::IsNextInadj), 0);
        assert_eq!(s.class_of(OrderLabel::IsPrevInadj), 1);
        assert_eq!(s.class_of(OrderLabel::DiffDoc), 2);
    }

    #[test]
    fn two_sentence_doc_forces_is_next() {
        let s = sampler(&[2, 2], SchemeKind::Pn3);
        let mut rng = rng::stream(1, Domain::SamplerWorker, 0);
        for _ in 0..50 {
            let src = s.draw_source(OrderLabel::IsNext, &mut rng).unwrap();
            assert_eq!((src.sent_a, src.sent_b), (0, 1));
            assert_eq!(src.doc_a, src.doc_b);
        }
    }

    #[test]
    fn prev_inadj_in_three_sentence_doc() {
        let s = sampler(&[3, 3], SchemeKind::Pn5);
        let mut rng = rng::stream(2, Domain::SamplerWorker, 0);
        for _ in 0..50 {
            let src = s.draw_source(OrderLabel::IsPrevInadj, &mut rng).unwrap();
            assert_eq!((src.sent_a, src.sent_b), (2, 0));
        }
    }

    #[test]
    fn short_documents_exhaust_retries() {
        let s = sampler(&[1, 1, 2], SchemeKind::Pn5);
        let mut rng = rng::stream(3, Domain::SamplerWorker, 0);
        let err = s.draw_source(OrderLabel::IsNextInadj, &mut rng).unwrap_err();
        assert!(matches!(err, Error::SamplerExhausted { attempts: 16, .. }));
    }

    #[test]
    fn diffdoc_partner_is_elsewhere() {
        let s = sampler(&[3, 4, 5], SchemeKind::Nsp2);
        let mut rng = rng::stream(4, Domain::SamplerWorker, 0);
        for _ in 0..200 {
            let src = s.draw_source(OrderLabel::DiffDoc, &mut rng).unwrap();
            assert_ne!(src.doc_a, src.doc_b);
        }
    }

    #[test]
    fn example_layout() {
        let s = sampler(&[3, 3], SchemeKind::Pn3);
        let ex = s.build(
            PairSource { doc_a: 0, sent_a: 0, doc_b: 0, sent_b: 1 },
            OrderLabel::IsNext,
        );
        assert_eq!(ex.tokens, vec![CLS, 5, 100, 7, SEP, 5, 101, 7, SEP]);
        assert_eq!(ex.segment_ids, vec![0, 0, 0, 0, 0, 1, 1, 1, 1]);
        assert_eq!(ex.maskable_positions(), vec![1, 2, 3, 5, 6, 7]);
        assert_eq!(ex.a_tokens(), &[5, 100, 7]);
        assert_eq!(ex.b_tokens(), &[5, 101, 7]);
    }

    #[test]
    fn truncation_trims_longer_side() {
        let mut a: Vec<u32> = (10..20).collect();
        let mut b: Vec<u32> = (30..33).collect();
        truncate_pair(&mut a, &mut b, 10);
        assert_eq!((a.len(), b.len()), (4, 3));
        assert_eq!(a, vec![10, 11, 12, 13]);

        let mut a: Vec<u32> = (0..6).collect();
        let mut b: Vec<u32> = (0..6).collect();
        truncate_pair(&mut a, &mut b, 12);
        assert_eq!((a.len(), b.len()), (4, 4));
    }

    #[test]
    fn masking_degenerate_rates() {
        let mut rng = rng::stream(5, Domain::SamplerWorker, 0);
        let mut toks: Vec<u32> = (5..45).collect();
        let orig = toks.clone();
        let all: Vec<usize> = (0..toks.len()).collect();
        let none = MaskingConfig { select_rate: 0.0, ..Default::default() };
        let (p, l) = apply_mlm_mask(&mut toks, &all, &none, 50, &mut rng);
        assert!(p.is_empty() && l.is_empty());
        assert_eq!(toks, orig);

        let every = MaskingConfig { select_rate: 1.0, mask_share: 1.0, random_share: 0.0, keep_share: 0.0 };
        let (p, l) = apply_mlm_mask(&mut toks, &all, &every, 50, &mut rng);
        assert!(toks.iter().all(|&t| t == MASK));
        assert_eq!(p.len(), orig.len());
        assert_eq!(l, orig);
    }

    #[test]
    fn sampled_examples_are_well_formed() {
        let s = sampler(&[4, 5, 6, 3], SchemeKind::PnSmth);
        let mut rng = rng::stream(6, Domain::SamplerWorker, 0);
        for _ in 0..500 {
            let ex = s.sample_pair(&mut rng).unwrap();
            assert_eq!(ex.tokens[0], CLS);
            assert_eq!(ex.tokens.iter().filter(|&&t| t == SEP).count(), 2);
            assert!((ex.target.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            let sep = ex.len_a() + 1;
            for &p in &ex.mlm_positions {
                assert!(p != 0 && p as usize != sep && (p as usize) < ex.len() - 1);
            }
            assert_eq!(ex.original_tokens(), s.build(ex.source, ex.label).tokens);
        }
    }

    #[test]
    fn label_frequencies_small_run() {
        let s = sampler(&[5; 10], SchemeKind::Pn5);
        let mut rng = rng::stream(7, Domain::SamplerWorker, 0);
        let mut counts: HashMap<OrderLabel, usize> = HashMap::new();
        for _ in 0..5000 {
            *counts.entry(s.sample_unmasked(&mut rng).unwrap().label).or_default() += 1;
        }
        for l in OrderLabel::ALL {
            let f = counts[&l] as f64 / 5000.0;
            assert!((f - 0.2).abs() < 0.03, "{l}: {f}");
        }
    }

    #[test]
    fn worker_streams_are_reproducible() {
        let s = sampler(&[4, 5, 6], SchemeKind::Pn3);
        let a = sample_examples(&s, 9, 101, 4).unwrap();
        let b = sample_examples(&s, 9, 101, 4).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 101);
        let one = sample_examples(&s, 9, 10, 1).unwrap();
        let mut rng = rng::stream(9, Domain::SamplerWorker, 0);
        assert_eq!(one, s.sample_batch(10, &mut rng).unwrap());
    }

    #[test]
    fn swap_examples() {
        let sc = scheme(SchemeKind::Pn3);
        let s = sampler(&[4, 4], SchemeKind::Pn3);
        let next = s.build(PairSource { doc_a: 0, sent_a: 1, doc_b: 0, sent_b: 2 }, OrderLabel::IsNext);
        let swapped = next.swap(&sc).unwrap();
        assert_eq!(swapped.label, OrderLabel::IsPrev);
        assert_eq!(swapped, s.build(PairSource { doc_a: 0, sent_a: 2, doc_b: 0, sent_b: 1 }, OrderLabel::IsPrev));

        let dd = s.build(PairSource { doc_a: 0, sent_a: 1, doc_b: 1, sent_b: 3 }, OrderLabel::DiffDoc);
        assert_eq!(dd.swap(&sc).unwrap().target, dd.target);

        let nsp = scheme(SchemeKind::Nsp2);
        let next2 = PairExample::assemble(vec![9], vec![10], OrderLabel::IsNext, &nsp, 16, next.source);
        assert!(next2.swap(&nsp).is_err());
    }

    #[test]
    fn examples_file_round_trip() {
        let s = sampler(&[4, 5, 6], SchemeKind::PnSmth);
        let exs = sample_examples(&s, 3, 40, 2).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("ex.bin");
        write_examples(&p, s.scheme(), &exs).unwrap();
        let (sc, back) = read_examples(&p).unwrap();
        assert_eq!(sc, *s.scheme());
        assert_eq!(back, exs);
    }

    #[test]
    fn rejects_bad_config() {
        assert!(Sampler::from_encoded(fixture(&[3, 3]), 200, scheme(SchemeKind::Pn3), 7, MaskingConfig::default()).is_err());
        assert!(Sampler::from_encoded(fixture(&[3]), 200, scheme(SchemeKind::Pn3), 16, MaskingConfig::default()).is_err());
        let bad = MaskingConfig { keep_share: 0.2, ..Default::default() };
        assert!(Sampler::from_encoded(fixture(&[3, 3]), 200, scheme(SchemeKind::Pn3), 16, bad).is_err());
    }

    #[test]
    fn scheme_kv_round_trip() {
        let s = OrderScheme { smoothing_factor: 0.7, residual: ResidualMass::DiffDoc, ..OrderScheme::new(SchemeKind::PnSmth) };
        assert_eq!(OrderScheme::from_kv(&s.to_kv()).unwrap(), s);
        assert_eq!(OrderScheme::from_kv("kind=PN3").unwrap(), OrderScheme::new(SchemeKind::Pn3));
        assert!(OrderScheme::from_kv("kind=pn4").is_err());
    }

    proptest! {
        #[test]
        fn swap_is_an_involution(seed in 0u64..1000, kind in 1u8..4) {
            let kind = SchemeKind::from_code(kind).unwrap();
            let s = Sampler::from_encoded(
                vec![
                    (0..6).map(|i| (0..(i % 4 + 1)).map(|k| 5 + k as u32 + i as u32).collect()).collect(),
                    (0..5).map(|i| (0..(i % 3 + 2)).map(|k| 20 + k as u32).collect()).collect(),
                ],
                40,
                scheme(kind),
                10,
                MaskingConfig { select_rate: 0.5, ..Default::default() },
            ).unwrap();
            let mut rng = rng::stream(seed, Domain::SamplerWorker, 0);
            let ex = s.sample_pair(&mut rng).unwrap();
            prop_assert!(ex.len() <= 10);
            let sw = ex.swap(s.scheme()).unwrap();
            prop_assert_eq!(sw.swap(s.scheme()).unwrap(), ex.clone());
            prop_assert_eq!(sw.tokens.len(), ex.tokens.len());
            for (&p, &l) in sw.mlm_positions.iter().zip(&sw.mlm_labels) {
                prop_assert_eq!(sw.original_tokens()[p as usize], l);
            }
        }
    }
}
